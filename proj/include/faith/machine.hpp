#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "faith/bounds.hpp"
#include "faith/graph.hpp"
#include "faith/relax.hpp"
#include "faith/tensor.hpp"

namespace faith::machine {

// ---------------------------------------------------------------------------
// Hardware metafile
// ---------------------------------------------------------------------------

struct CostWeights {
  double global = 100.0;  // per global load/store
  double shared = 8.0;    // per shared access
  double reg = 1.0;       // per cross-thread register op
  double sync = 20.0;     // per reduction iteration

  bool operator==(const CostWeights&) const = default;
};

// Expert knowledge metafile of a target device: hard resource caps plus the
// soft trade-off parameters exposed to the cost model as features.
struct HardwareMeta {
  std::string name;
  std::size_t warp_size = 32;  // fixed
  std::size_t max_threads_per_block = 1024;
  std::size_t shared_mem_per_block = 98304;  // bytes
  std::size_t registers_per_thread = 255;
  std::size_t num_sms = 80;
  std::size_t max_threads_per_sm = 2048;
  CostWeights cost_weights;

  void validate() const;
  bool operator==(const HardwareMeta&) const = default;
};

HardwareMeta meta_from_json(const std::string& text);
std::string meta_to_json(const HardwareMeta& meta, int indent = 2);
HardwareMeta load_meta(const std::string& path);

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

enum class Pattern { GEMM, VECTOR_REDUCTION, ELEMENTWISE_MUL, SCALAR_VECTOR };
enum class ReductionMode { SEQUENTIAL, PARALLEL32, HYBRID };

std::string pattern_name(Pattern p);
Pattern pattern_from_name(const std::string& name);
std::string reduction_mode_name(ReductionMode m);
ReductionMode reduction_mode_from_name(const std::string& name);

// Parameters mapping one computing pattern onto the machine. Unused fields
// stay at their defaults for the other patterns.
struct Schedule {
  Pattern pattern = Pattern::GEMM;
  // GEMM
  std::size_t tile_m = 16, tile_n = 16, tile_k = 16;
  std::size_t threads_per_block = 64;
  std::size_t reg_tile_m = 2, reg_tile_n = 2;
  // VECTOR_REDUCTION
  ReductionMode mode = ReductionMode::HYBRID;
  // ELEMENTWISE_MUL: cooperating thread-group size T
  std::size_t group_threads = 32;
  // SCALAR_VECTOR: warps per vector t
  std::size_t warps_per_vector = 1;

  // Type invariants: positive tiles, threads within the block cap, T and 32*t
  // multiples of the warp size.
  void validate(const HardwareMeta& meta) const;

  bool operator==(const Schedule&) const = default;
};

Schedule default_schedule(Pattern p);

// ---------------------------------------------------------------------------
// Cost accounting
// ---------------------------------------------------------------------------

// Deterministic event counts for one kernel (or one whole pipeline when
// aggregated). Global counters use unique-scalar semantics: each scalar of a
// materialized operand counts once per kernel that reads it; within-kernel
// reuse and tile re-staging are charged to shared_accesses instead. This is
// what makes the fused GEMM measure exactly MN weight scalars against 2MN for
// the split baseline.
struct CostReport {
  std::uint64_t global_loads = 0;
  std::uint64_t global_stores = 0;
  std::uint64_t shared_accesses = 0;
  std::uint64_t reduction_iterations = 0;
  std::uint64_t cross_thread_ops = 0;
  std::uint64_t estimated_shared_bytes = 0;
  std::uint64_t estimated_registers = 0;
  double modeled_cost = 0.0;

  // Named slices of global_loads used by the traffic claims: weight-operand
  // loads of bound-computing kernels and X_lb/X_ub bias loads.
  std::uint64_t weight_loads = 0;
  std::uint64_t bound_loads = 0;

  // modeled_cost = global*(loads+stores) + shared*shared_accesses
  //              + reg*cross_thread_ops + sync*reduction_iterations
  void finalize(const HardwareMeta& meta);
  CostReport& operator+=(const CostReport& other);

  bool operator==(const CostReport&) const = default;
};

std::string cost_report_to_json(const CostReport& r, int indent = -1);

struct Resources {
  std::size_t shared_bytes = 0;
  std::size_t registers = 0;
};

// Closed-form staging estimates from tile sizes and element width.
// GEMM: shared = (tile_m*tile_k + 2*tile_k*tile_n) * elem_bytes (weight tile
// plus double-bound staging); registers = 2*rtm*rtn + rtm + rtn + 8.
Resources estimate_resources(const Schedule& sched, std::size_t elem_bytes = 4);

bool passes_hard_rules(const Schedule& sched, const HardwareMeta& meta,
                       std::size_t elem_bytes = 4);

// ---------------------------------------------------------------------------
// Executors (host emulation + cost accounting)
// ---------------------------------------------------------------------------

struct GemmResult {
  LinearBounds bounds;
  CostReport cost;
};

// Host scalar precision of the executors. F64 is the default and the only
// mode the soundness guarantees apply to; F32 exists for performance
// benchmarking (inputs quantized to f32, f32 accumulation, results widened
// back). Resource estimates always use the f32 staging convention.
enum class Precision { F64, F32 };

// Fused bound GEMM: W staged once per tile and sign-split at the register
// stage, both bounds accumulated in one pass. In F64 mode numerically
// identical to relax::propagate_affine. Throws on hard-rule violations.
GemmResult run_gemm(const Schedule& sched, const HardwareMeta& meta, const Tensor& w,
                    const LinearBounds& x, const Tensor* bias = nullptr,
                    Precision precision = Precision::F64);

// Reference baseline: materializes W_pos/W_neg and runs the two pair kernels
// plus the combining adds, counting their traffic.
GemmResult run_gemm_naive(const HardwareMeta& meta, const Tensor& w, const LinearBounds& x,
                          const Tensor* bias = nullptr, Precision precision = Precision::F64);

// Iteration-count formulas: SEQUENTIAL = n, PARALLEL32 (n == 32) = 5,
// HYBRID (n = 32k, padded up) = k + 5.
std::uint64_t reduction_iterations(ReductionMode mode, std::size_t n);

struct ReduceResult {
  Tensor values;
  CostReport cost;
};

// Generalized vector reduction y_i = sum_j f(x[i][j]) over an m x n matrix.
ReduceResult run_reduction(const Schedule& sched, const HardwareMeta& meta, const Tensor& x,
                           const std::function<double(double)>& f);

struct ElementwiseResult {
  LinearBounds bounds;
  CostReport cost;
};

// Sharing-oriented elementwise verification: stage bound weights once,
// concretize through the scheduled reduction, rescale in place.
ElementwiseResult run_elementwise(const Schedule& sched, const HardwareMeta& meta,
                                  const LinearBounds& x, const PerturbationSpec& spec,
                                  const relax::RelaxationProducer& producer);

// Baseline twin: one pass to concretize, a second pass to rescale, bound
// weights read twice and the concretized interval round-trips through global.
ElementwiseResult run_elementwise_naive(const HardwareMeta& meta, const LinearBounds& x,
                                        const PerturbationSpec& spec,
                                        const relax::RelaxationProducer& producer);

struct ScalarVectorResult {
  Tensor values;
  CostReport cost;
};

// Generalized scalar-vector multiplication y_i = f(s_i) * x_i with the scalar
// read once per vector and broadcast across the group.
ScalarVectorResult run_scalar_vector(const Schedule& sched, const HardwareMeta& meta,
                                     const Tensor& s, const Tensor& x,
                                     const std::function<double(double)>& f);

ScalarVectorResult run_scalar_vector_naive(const HardwareMeta& meta, const Tensor& s,
                                           const Tensor& x,
                                           const std::function<double(double)>& f);

// ---------------------------------------------------------------------------
// Closed-form modeled costs (no numeric execution; used by the autotuner)
// ---------------------------------------------------------------------------

CostReport modeled_gemm_cost(const Schedule& sched, const HardwareMeta& meta, std::size_t rows,
                             std::size_t inner, std::size_t outer, std::size_t pert_dim,
                             bool with_bias = true);
CostReport modeled_reduction_cost(const Schedule& sched, const HardwareMeta& meta,
                                  std::size_t vectors, std::size_t length);
CostReport modeled_elementwise_cost(const Schedule& sched, const HardwareMeta& meta,
                                    std::size_t neurons, std::size_t pert_dim);
CostReport modeled_scalar_vector_cost(const Schedule& sched, const HardwareMeta& meta,
                                      std::size_t m, std::size_t n);

// Baseline counterparts (split-form GEMM, two-pass elementwise, per-element
// scalar re-reads).
CostReport modeled_gemm_naive_cost(const HardwareMeta& meta, std::size_t rows, std::size_t inner,
                                   std::size_t outer, std::size_t pert_dim,
                                   bool with_bias = true);
CostReport modeled_elementwise_naive_cost(const HardwareMeta& meta, std::size_t neurons,
                                          std::size_t pert_dim);
CostReport modeled_scalar_vector_naive_cost(const HardwareMeta& meta, std::size_t m,
                                            std::size_t n);

// ---------------------------------------------------------------------------
// Pipeline accounting over verification graphs
// ---------------------------------------------------------------------------

struct ScheduleSet {
  Schedule gemm = default_schedule(Pattern::GEMM);
  Schedule reduction = default_schedule(Pattern::VECTOR_REDUCTION);
  Schedule elementwise = default_schedule(Pattern::ELEMENTWISE_MUL);
  Schedule scalar_vector = default_schedule(Pattern::SCALAR_VECTOR);
};

// Sums kernel costs over the graph's fusion groups. Edges internal to a group
// hand values over through shared memory (2 shared accesses per scalar)
// instead of a global store/reload pair. The report is a pure function of
// (graph structure, shapes, metafile, schedules).
CostReport estimate_graph_cost(const graph::VerGraph& g, const HardwareMeta& meta,
                               std::size_t pert_dim, const ScheduleSet& schedules = {});

}  // namespace faith::machine
