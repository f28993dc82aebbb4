#include "faith/autotune.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "faith/rng.hpp"

namespace faith::autotune {

using machine::HardwareMeta;
using machine::Pattern;
using machine::ReductionMode;
using machine::Schedule;

// ---------------------------------------------------------------------------
// Candidate spaces
// ---------------------------------------------------------------------------

CandidateSpace default_space(Pattern pattern, std::size_t reduction_length) {
  CandidateSpace space;
  space.pattern = pattern;
  switch (pattern) {
    case Pattern::GEMM: {
      const std::size_t tiles[] = {8, 16, 32, 64};
      const std::size_t regs[] = {1, 2, 4, 8};
      for (std::size_t tm : tiles) {
        for (std::size_t tn : tiles) {
          for (std::size_t tk : tiles) {
            for (std::size_t rm : regs) {
              for (std::size_t rn : regs) {
                if (rm > tm || rn > tn) continue;
                std::size_t threads = (tm / rm) * (tn / rn);
                if (threads < 32 || threads % 32 != 0) continue;
                Schedule s = machine::default_schedule(Pattern::GEMM);
                s.tile_m = tm;
                s.tile_n = tn;
                s.tile_k = tk;
                s.reg_tile_m = rm;
                s.reg_tile_n = rn;
                s.threads_per_block = threads;
                space.candidates.push_back(s);
              }
            }
          }
        }
      }
      break;
    }
    case Pattern::VECTOR_REDUCTION: {
      std::vector<ReductionMode> modes = {ReductionMode::SEQUENTIAL, ReductionMode::HYBRID};
      if (reduction_length == 32) modes.push_back(ReductionMode::PARALLEL32);
      for (ReductionMode m : modes) {
        Schedule s = machine::default_schedule(Pattern::VECTOR_REDUCTION);
        s.mode = m;
        space.candidates.push_back(s);
      }
      break;
    }
    case Pattern::ELEMENTWISE_MUL:
      for (std::size_t t : {32, 64, 128, 256}) {
        Schedule s = machine::default_schedule(Pattern::ELEMENTWISE_MUL);
        s.group_threads = t;
        space.candidates.push_back(s);
      }
      break;
    case Pattern::SCALAR_VECTOR:
      for (std::size_t t : {1, 2, 4}) {
        Schedule s = machine::default_schedule(Pattern::SCALAR_VECTOR);
        s.warps_per_vector = t;
        space.candidates.push_back(s);
      }
      break;
  }
  return space;
}

CandidateSpace filter_hard_rules(const CandidateSpace& space, const HardwareMeta& meta) {
  CandidateSpace out;
  out.pattern = space.pattern;
  for (const Schedule& s : space.candidates) {
    if (machine::passes_hard_rules(s, meta)) out.candidates.push_back(s);
  }
  if (out.candidates.empty()) {
    throw std::runtime_error("filter_hard_rules: no feasible schedule for pattern " +
                             machine::pattern_name(space.pattern));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

std::vector<std::string> feature_names() {
  return {"is_gemm",
          "is_reduction",
          "is_elementwise",
          "is_scalar_vector",
          "tile_m",
          "tile_n",
          "tile_k",
          "threads_per_block",
          "reg_tile_m",
          "reg_tile_n",
          "mode_sequential",
          "mode_parallel32",
          "mode_hybrid",
          "group_threads",
          "warps_per_vector",
          "shared_bytes",
          "registers",
          "blocks_per_sm",
          "hw_max_threads_per_block",
          "hw_shared_mem_per_block",
          "hw_registers_per_thread",
          "hw_num_sms",
          "hw_max_threads_per_sm"};
}

std::vector<double> extract_features(const Schedule& sched, const HardwareMeta& meta) {
  std::vector<double> f(23, 0.0);
  f[0] = sched.pattern == Pattern::GEMM ? 1.0 : 0.0;
  f[1] = sched.pattern == Pattern::VECTOR_REDUCTION ? 1.0 : 0.0;
  f[2] = sched.pattern == Pattern::ELEMENTWISE_MUL ? 1.0 : 0.0;
  f[3] = sched.pattern == Pattern::SCALAR_VECTOR ? 1.0 : 0.0;

  std::size_t threads_used = 32;
  switch (sched.pattern) {
    case Pattern::GEMM:
      f[4] = static_cast<double>(sched.tile_m);
      f[5] = static_cast<double>(sched.tile_n);
      f[6] = static_cast<double>(sched.tile_k);
      f[7] = static_cast<double>(sched.threads_per_block);
      f[8] = static_cast<double>(sched.reg_tile_m);
      f[9] = static_cast<double>(sched.reg_tile_n);
      threads_used = sched.threads_per_block;
      break;
    case Pattern::VECTOR_REDUCTION:
      f[10] = sched.mode == ReductionMode::SEQUENTIAL ? 1.0 : 0.0;
      f[11] = sched.mode == ReductionMode::PARALLEL32 ? 1.0 : 0.0;
      f[12] = sched.mode == ReductionMode::HYBRID ? 1.0 : 0.0;
      threads_used = sched.mode == ReductionMode::SEQUENTIAL ? 1 : 32;
      break;
    case Pattern::ELEMENTWISE_MUL:
      f[13] = static_cast<double>(sched.group_threads);
      threads_used = sched.group_threads;
      break;
    case Pattern::SCALAR_VECTOR:
      f[14] = static_cast<double>(sched.warps_per_vector);
      threads_used = sched.warps_per_vector * 32;
      break;
  }

  machine::Resources r = machine::estimate_resources(sched);
  f[15] = static_cast<double>(r.shared_bytes);
  f[16] = static_cast<double>(r.registers);

  // Occupancy proxy: how many such blocks one SM could host (soft rule).
  double by_threads =
      static_cast<double>(meta.max_threads_per_sm) / static_cast<double>(std::max<std::size_t>(threads_used, 1));
  double by_shared = r.shared_bytes > 0 ? static_cast<double>(meta.shared_mem_per_block) /
                                              static_cast<double>(r.shared_bytes)
                                        : 32.0;
  f[17] = std::min({by_threads, by_shared, 32.0});

  f[18] = static_cast<double>(meta.max_threads_per_block);
  f[19] = static_cast<double>(meta.shared_mem_per_block);
  f[20] = static_cast<double>(meta.registers_per_thread);
  f[21] = static_cast<double>(meta.num_sms);
  f[22] = static_cast<double>(meta.max_threads_per_sm);
  return f;
}

// ---------------------------------------------------------------------------
// Cost model
// ---------------------------------------------------------------------------

double CostModel::Tree::eval(const std::vector<double>& x) const {
  int i = 0;
  while (nodes[i].feature >= 0) {
    i = x[nodes[i].feature] <= nodes[i].threshold ? nodes[i].left : nodes[i].right;
  }
  return nodes[i].value;
}

CostModel::Tree CostModel::build_tree(const std::vector<std::vector<double>>& x,
                                      const std::vector<double>& residual,
                                      const std::vector<std::size_t>& index) {
  Tree tree;
  // Recursive split with an explicit work list of (node slot, samples, depth).
  struct Item {
    int slot;
    std::vector<std::size_t> samples;
    int depth;
  };
  tree.nodes.push_back({});
  std::vector<Item> work{{0, index, 0}};
  std::size_t nfeat = x.empty() ? 0 : x[0].size();

  while (!work.empty()) {
    Item item = std::move(work.back());
    work.pop_back();
    const auto& samples = item.samples;
    double sum = 0.0;
    for (std::size_t i : samples) sum += residual[i];
    double mean = sum / static_cast<double>(samples.size());

    bool make_leaf = item.depth >= params_.max_depth || samples.size() < 2 * params_.min_leaf;
    int best_feature = -1;
    double best_threshold = 0.0, best_score = -1.0;
    if (!make_leaf) {
      for (std::size_t f = 0; f < nfeat; ++f) {
        std::vector<std::size_t> order = samples;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
          if (x[a][f] != x[b][f]) return x[a][f] < x[b][f];
          return a < b;
        });
        double left_sum = 0.0;
        for (std::size_t i = 0; i + 1 < order.size(); ++i) {
          left_sum += residual[order[i]];
          if (x[order[i]][f] == x[order[i + 1]][f]) continue;
          std::size_t nl = i + 1, nr = order.size() - nl;
          if (nl < params_.min_leaf || nr < params_.min_leaf) continue;
          double right_sum = sum - left_sum;
          double score = left_sum * left_sum / static_cast<double>(nl) +
                         right_sum * right_sum / static_cast<double>(nr);
          if (score > best_score + 1e-12) {
            best_score = score;
            best_feature = static_cast<int>(f);
            best_threshold = 0.5 * (x[order[i]][f] + x[order[i + 1]][f]);
          }
        }
      }
      double base_score = sum * sum / static_cast<double>(samples.size());
      if (best_feature < 0 || best_score <= base_score + 1e-12) make_leaf = true;
    }

    if (make_leaf) {
      tree.nodes[item.slot].feature = -1;
      tree.nodes[item.slot].value = mean;
      continue;
    }
    std::vector<std::size_t> left, right;
    for (std::size_t i : samples) {
      (x[i][best_feature] <= best_threshold ? left : right).push_back(i);
    }
    int li = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back({});
    int ri = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back({});
    tree.nodes[item.slot].feature = best_feature;
    tree.nodes[item.slot].threshold = best_threshold;
    tree.nodes[item.slot].left = li;
    tree.nodes[item.slot].right = ri;
    work.push_back({li, std::move(left), item.depth + 1});
    work.push_back({ri, std::move(right), item.depth + 1});
  }
  return tree;
}

void CostModel::fit(const std::vector<std::vector<double>>& x, const std::vector<double>& y) {
  if (x.empty() || x.size() != y.size()) {
    throw std::invalid_argument("CostModel::fit: need n >= 1 samples with matching labels");
  }
  trees_.clear();
  base_ = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  std::vector<double> residual(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) residual[i] = y[i] - base_;
  std::vector<std::size_t> index(y.size());
  std::iota(index.begin(), index.end(), 0);

  for (int t = 0; t < params_.trees; ++t) {
    double ss = 0.0;
    for (double r : residual) ss += r * r;
    if (ss / static_cast<double>(residual.size()) < 1e-16) break;
    Tree tree = build_tree(x, residual, index);
    for (std::size_t i = 0; i < residual.size(); ++i) {
      residual[i] -= params_.learning_rate * tree.eval(x[i]);
    }
    trees_.push_back(std::move(tree));
  }
  trained_ = true;
}

double CostModel::predict(const std::vector<double>& x) const {
  if (!trained_) throw std::logic_error("CostModel::predict: model is not trained");
  double out = base_;
  for (const Tree& t : trees_) out += params_.learning_rate * t.eval(x);
  return out;
}

// ---------------------------------------------------------------------------
// Tuning loop
// ---------------------------------------------------------------------------

TuneResult tune(const CandidateSpace& space, const HardwareMeta& meta, const Profiler& profiler,
                std::uint64_t seed, const TuneOptions& options) {
  const auto& cands = space.candidates;
  if (cands.empty()) throw std::invalid_argument("tune: empty candidate space");

  std::vector<std::vector<double>> features(cands.size());
  for (std::size_t i = 0; i < cands.size(); ++i) features[i] = extract_features(cands[i], meta);

  std::vector<double> cost(cands.size(), 0.0);
  std::vector<bool> profiled(cands.size(), false);
  std::vector<TraceRecord> trace;
  std::size_t profiled_count = 0;

  auto profile_one = [&](std::size_t idx, std::size_t iteration) {
    double c;
    try {
      c = profiler(cands[idx]);
    } catch (const std::exception& e) {
      throw TuneError(std::string("tune: profiler failed on candidate ") + std::to_string(idx) +
                          ": " + e.what(),
                      trace);
    }
    cost[idx] = c;
    profiled[idx] = true;
    ++profiled_count;
    trace.push_back({idx, features[idx], c, iteration});
  };

  // Seed set: the default heuristic schedule first (when present), then
  // random draws. Small spaces are simply exhausted.
  if (cands.size() <= options.seed_candidates) {
    for (std::size_t i = 0; i < cands.size(); ++i) profile_one(i, 0);
  } else {
    Schedule def = machine::default_schedule(space.pattern);
    for (std::size_t i = 0; i < cands.size(); ++i) {
      if (cands[i] == def) {
        profile_one(i, 0);
        break;
      }
    }
    Rng rng(seed);
    while (profiled_count < options.seed_candidates) {
      std::size_t idx = static_cast<std::size_t>(rng.uniform_index(cands.size()));
      if (!profiled[idx]) profile_one(idx, 0);
    }
  }

  for (std::size_t iter = 1; iter <= options.iterations && profiled_count < cands.size();
       ++iter) {
    std::vector<std::vector<double>> xs;
    std::vector<double> ys;
    for (const TraceRecord& r : trace) {
      xs.push_back(r.features);
      ys.push_back(r.cost);
    }
    CostModel model;
    model.fit(xs, ys);

    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      if (!profiled[i]) ranked.emplace_back(model.predict(features[i]), i);
    }
    std::sort(ranked.begin(), ranked.end());
    std::size_t take = std::min<std::size_t>(options.top_k, ranked.size());
    // Profile the selected candidates in index order so the trace is
    // independent of any concurrent profiling order.
    std::vector<std::size_t> picks;
    for (std::size_t i = 0; i < take; ++i) picks.push_back(ranked[i].second);
    std::sort(picks.begin(), picks.end());
    for (std::size_t idx : picks) profile_one(idx, iter);
  }

  std::size_t best = SIZE_MAX;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (profiled[i] && (best == SIZE_MAX || cost[i] < cost[best])) best = i;
  }
  TuneResult result{cands[best], cost[best], std::move(trace)};
  if (!machine::passes_hard_rules(result.best, meta)) {
    throw std::logic_error("tune: selected schedule violates hard rules");
  }
  return result;
}

// ---------------------------------------------------------------------------
// Modeled-cost profilers
// ---------------------------------------------------------------------------

Profiler modeled_gemm_profiler(const HardwareMeta& meta, GemmWorkload w) {
  return [meta, w](const Schedule& s) {
    return machine::modeled_gemm_cost(s, meta, w.rows, w.inner, w.outer, w.pert_dim).modeled_cost;
  };
}

Profiler wall_clock_gemm_profiler(const HardwareMeta& meta, GemmWorkload w, std::uint64_t seed) {
  // One shared instance across candidate calls.
  Rng rng(seed ^ 0xba5eba11);
  auto weight = std::make_shared<Tensor>(Tensor::zeros({w.inner, w.outer}));
  for (std::size_t i = 0; i < weight->numel(); ++i) (*weight)[i] = rng.uniform(-0.5, 0.5);
  auto bounds = std::make_shared<LinearBounds>();
  bounds->lb = Tensor::zeros({w.rows, w.inner});
  bounds->ub = Tensor::zeros({w.rows, w.inner});
  bounds->lw = Tensor::zeros({w.rows, w.inner, w.pert_dim});
  bounds->uw = Tensor::zeros({w.rows, w.inner, w.pert_dim});
  for (std::size_t i = 0; i < bounds->lb.numel(); ++i) {
    double c = rng.uniform(-1.0, 1.0);
    bounds->lb[i] = c - rng.uniform(0.0, 0.1);
    bounds->ub[i] = c + rng.uniform(0.0, 0.1);
  }
  for (std::size_t i = 0; i < bounds->lw.numel(); ++i) {
    bounds->lw[i] = rng.uniform(-0.1, 0.1);
    bounds->uw[i] = bounds->lw[i];
  }
  return [meta, weight, bounds](const Schedule& s) {
    machine::run_gemm(s, meta, *weight, *bounds);  // warmup
    auto t0 = std::chrono::steady_clock::now();
    machine::run_gemm(s, meta, *weight, *bounds);
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
}

Profiler modeled_reduction_profiler(const HardwareMeta& meta, std::size_t vectors,
                                    std::size_t length) {
  return [meta, vectors, length](const Schedule& s) {
    return machine::modeled_reduction_cost(s, meta, vectors, length).modeled_cost;
  };
}

Profiler modeled_elementwise_profiler(const HardwareMeta& meta, std::size_t neurons,
                                      std::size_t pert_dim) {
  return [meta, neurons, pert_dim](const Schedule& s) {
    return machine::modeled_elementwise_cost(s, meta, neurons, pert_dim).modeled_cost;
  };
}

Profiler modeled_scalar_vector_profiler(const HardwareMeta& meta, std::size_t m, std::size_t n) {
  return [meta, m, n](const Schedule& s) {
    return machine::modeled_scalar_vector_cost(s, meta, m, n).modeled_cost;
  };
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

std::string trace_to_jsonl(const std::vector<TraceRecord>& trace) {
  std::ostringstream out;
  for (const TraceRecord& r : trace) {
    nlohmann::json j;
    j["candidate"] = r.candidate_index;
    j["iteration"] = r.iteration;
    j["cost"] = r.cost;
    j["features"] = r.features;
    out << j.dump() << "\n";
  }
  return out.str();
}

std::string schedule_to_json(const Schedule& s, int indent) {
  nlohmann::json j;
  j["pattern"] = machine::pattern_name(s.pattern);
  switch (s.pattern) {
    case Pattern::GEMM:
      j["tile_m"] = s.tile_m;
      j["tile_n"] = s.tile_n;
      j["tile_k"] = s.tile_k;
      j["threads_per_block"] = s.threads_per_block;
      j["reg_tile_m"] = s.reg_tile_m;
      j["reg_tile_n"] = s.reg_tile_n;
      break;
    case Pattern::VECTOR_REDUCTION:
      j["mode"] = machine::reduction_mode_name(s.mode);
      break;
    case Pattern::ELEMENTWISE_MUL:
      j["group_threads"] = s.group_threads;
      break;
    case Pattern::SCALAR_VECTOR:
      j["warps_per_vector"] = s.warps_per_vector;
      break;
  }
  return indent >= 0 ? j.dump(indent) : j.dump();
}

Schedule schedule_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  Schedule s = machine::default_schedule(machine::pattern_from_name(j.at("pattern")));
  switch (s.pattern) {
    case Pattern::GEMM:
      s.tile_m = j.at("tile_m").get<std::size_t>();
      s.tile_n = j.at("tile_n").get<std::size_t>();
      s.tile_k = j.at("tile_k").get<std::size_t>();
      s.threads_per_block = j.at("threads_per_block").get<std::size_t>();
      s.reg_tile_m = j.at("reg_tile_m").get<std::size_t>();
      s.reg_tile_n = j.at("reg_tile_n").get<std::size_t>();
      break;
    case Pattern::VECTOR_REDUCTION:
      s.mode = machine::reduction_mode_from_name(j.at("mode"));
      break;
    case Pattern::ELEMENTWISE_MUL:
      s.group_threads = j.at("group_threads").get<std::size_t>();
      break;
    case Pattern::SCALAR_VECTOR:
      s.warps_per_vector = j.at("warps_per_vector").get<std::size_t>();
      break;
  }
  return s;
}

}  // namespace faith::autotune
