#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "faith/machine.hpp"

namespace faith::autotune {

// Finite, explicitly enumerated candidate set for one computing pattern.
struct CandidateSpace {
  machine::Pattern pattern = machine::Pattern::GEMM;
  std::vector<machine::Schedule> candidates;
};

// Default parameter grids: power-of-two tiles, T in {32,64,128,256},
// t in {1,2,4}, reduction modes valid for the workload length.
CandidateSpace default_space(machine::Pattern pattern, std::size_t reduction_length = 0);

// Retains exactly the candidates whose resource estimates fit the device
// caps. Throws if nothing survives.
CandidateSpace filter_hard_rules(const CandidateSpace& space, const machine::HardwareMeta& meta);

// Fixed-order numeric feature vector: schedule parameters (zero-filled where
// the pattern does not use them), resource estimates, an occupancy proxy, and
// the device's soft-rule properties.
std::vector<double> extract_features(const machine::Schedule& sched,
                                     const machine::HardwareMeta& meta);
std::vector<std::string> feature_names();

// Deterministic gradient-boosted regression trees (squared loss, exact greedy
// splits). Stands in for the usual boosted-tree cost model library.
class CostModel {
 public:
  struct Params {
    int trees = 80;
    int max_depth = 3;
    double learning_rate = 0.15;
    std::size_t min_leaf = 2;
  };

  CostModel() = default;
  explicit CostModel(Params params) : params_(params) {}

  void fit(const std::vector<std::vector<double>>& x, const std::vector<double>& y);
  double predict(const std::vector<double>& x) const;
  bool trained() const { return trained_; }

 private:
  struct TreeNode {
    int feature = -1;  // -1: leaf
    double threshold = 0.0;
    double value = 0.0;
    int left = -1;
    int right = -1;
  };
  struct Tree {
    std::vector<TreeNode> nodes;
    double eval(const std::vector<double>& x) const;
  };

  Tree build_tree(const std::vector<std::vector<double>>& x, const std::vector<double>& residual,
                  const std::vector<std::size_t>& index);

  Params params_{};
  double base_ = 0.0;
  std::vector<Tree> trees_;
  bool trained_ = false;
};

using Profiler = std::function<double(const machine::Schedule&)>;

struct TraceRecord {
  std::size_t candidate_index = 0;
  std::vector<double> features;
  double cost = 0.0;
  std::size_t iteration = 0;  // 0 = seeding round
};

struct TuneResult {
  machine::Schedule best;
  double best_cost = 0.0;
  std::vector<TraceRecord> trace;
};

struct TuneOptions {
  std::size_t seed_candidates = 32;
  std::size_t top_k = 10;
  std::size_t iterations = 5;
};

// Profiler failures abort the search; the partial trace rides on the error.
class TuneError : public std::runtime_error {
 public:
  TuneError(const std::string& message, std::vector<TraceRecord> partial)
      : std::runtime_error(message), partial_trace(std::move(partial)) {}
  std::vector<TraceRecord> partial_trace;
};

// Expert-guided search: profile a seed set, then iterate
// fit -> predict all -> profile the predicted top-k. Deterministic given the
// seed; the returned schedule always satisfies the hard rules.
TuneResult tune(const CandidateSpace& space, const machine::HardwareMeta& meta,
                const Profiler& profiler, std::uint64_t seed, const TuneOptions& options = {});

// Modeled-cost profilers backed by the cost simulator.
struct GemmWorkload {
  std::size_t rows, inner, outer, pert_dim;
};
Profiler modeled_gemm_profiler(const machine::HardwareMeta& meta, GemmWorkload w);

// Wall-clock backend: times the host GEMM executor on a seeded random
// instance of the workload. Labels carry timer noise, so tuning against it
// is not bit-reproducible the way the modeled profiler is.
Profiler wall_clock_gemm_profiler(const machine::HardwareMeta& meta, GemmWorkload w,
                                  std::uint64_t seed = 0);
Profiler modeled_reduction_profiler(const machine::HardwareMeta& meta, std::size_t vectors,
                                    std::size_t length);
Profiler modeled_elementwise_profiler(const machine::HardwareMeta& meta, std::size_t neurons,
                                      std::size_t pert_dim);
Profiler modeled_scalar_vector_profiler(const machine::HardwareMeta& meta, std::size_t m,
                                        std::size_t n);

std::string trace_to_jsonl(const std::vector<TraceRecord>& trace);
std::string schedule_to_json(const machine::Schedule& sched, int indent = 2);
machine::Schedule schedule_from_json(const std::string& text);

}  // namespace faith::autotune
