#include "faith/cli.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "faith/autotune.hpp"
#include "faith/graph.hpp"
#include "faith/machine.hpp"
#include "faith/model.hpp"
#include "faith/relax.hpp"
#include "faith/rng.hpp"

namespace faith::cli {

namespace {

using nlohmann::json;

machine::HardwareMeta resolve_meta(const std::string& path) {
  if (!path.empty()) return machine::load_meta(path);
  machine::HardwareMeta meta;
  meta.name = "a100-like";
  meta.max_threads_per_block = 1024;
  meta.shared_mem_per_block = 166912;
  meta.registers_per_thread = 255;
  meta.num_sms = 108;
  meta.max_threads_per_sm = 2048;
  meta.cost_weights = {100.0, 8.0, 1.0, 20.0};
  return meta;
}

machine::ScheduleSet naive_schedules() {
  machine::ScheduleSet s;
  s.reduction.mode = machine::ReductionMode::SEQUENTIAL;
  s.gemm.reg_tile_m = 1;
  s.gemm.reg_tile_n = 1;
  return s;
}

double elapsed_seconds(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
}

std::size_t argmax(const Tensor& logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.numel(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

}  // namespace

int cmd_verify(const VerifyOptions& options, bool* verified_out) {
  try {
    model::TransformerSpec spec = model::load_model(options.model_path);
    Tensor x = model::load_embedding(options.input_path);
    if (x.rank() != 3 || x.extent(0) != 1 || x.extent(1) != spec.length ||
        x.extent(2) != spec.embed_dim) {
      throw std::runtime_error("input embedding " + x.shape_str() + " does not match model [1, " +
                               std::to_string(spec.length) + ", " +
                               std::to_string(spec.embed_dim) + "]");
    }
    PerturbationSpec pspec(options.norm, options.epsilon, x.numel());

    graph::VerGraph base = model::build_graph(spec);
    graph::VerGraph run_graph = options.fused ? graph::fuse_all(base) : base;

    Tensor logits = model::forward(spec, x);
    std::size_t predicted = argmax(logits);

    // An interval too wide for the relaxations (exponential overflow, softmax
    // normalizer) means the radius cannot be certified, not a usage error.
    bool verified = false;
    bool bounded = true;
    ConcreteBounds conc;
    auto start = std::chrono::steady_clock::now();
    try {
      LinearBounds out = graph::evaluate(run_graph, {{"x", x}}, pspec);
      conc = concretize(out, pspec);
      verified = check_robust(conc, predicted, options.margin);
    } catch (const std::domain_error&) {
      bounded = false;
    }
    double wall = elapsed_seconds(start);

    machine::HardwareMeta meta = resolve_meta(options.meta_path);
    machine::CostReport naive_cost = machine::estimate_graph_cost(
        graph::expand_softmax(base), meta, pspec.dim, naive_schedules());
    machine::CostReport fused_cost =
        machine::estimate_graph_cost(graph::fuse_all(base), meta, pspec.dim);

    json report;
    report["verified"] = verified;
    report["bounded"] = bounded;
    report["predicted_class"] = predicted;
    report["margin"] = options.margin;
    report["epsilon"] = options.epsilon;
    report["norm"] = norm_name(options.norm);
    report["mode"] = options.fused ? "fused" : "naive";
    report["wall_seconds"] = wall;
    report["classes"] = json::array();
    for (std::size_t i = 0; i < conc.lo.numel(); ++i) {
      report["classes"].push_back({{"lo", conc.lo[i]}, {"hi", conc.hi[i]}});
    }
    report["traffic"] = {
        {"naive", json::parse(machine::cost_report_to_json(naive_cost))},
        {"fused", json::parse(machine::cost_report_to_json(fused_cost))},
        {"weight_load_ratio", static_cast<double>(fused_cost.weight_loads) /
                                  static_cast<double>(naive_cost.weight_loads)},
        {"bound_load_ratio", static_cast<double>(fused_cost.bound_loads) /
                                 static_cast<double>(naive_cost.bound_loads)},
        {"modeled_cost_ratio", fused_cost.modeled_cost / naive_cost.modeled_cost}};
    if (!options.out_path.empty()) write_text(options.out_path, report.dump(1) + "\n");
    std::cout << (verified ? "verified" : "not verified") << " eps=" << options.epsilon
              << " norm=" << norm_name(options.norm) << " class=" << predicted << "\n";
    if (verified_out) *verified_out = verified;
    return verified ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "verify: " << e.what() << "\n";
    return 2;
  }
}

int cmd_maxeps(const MaxEpsOptions& options, double* eps_out) {
  try {
    model::TransformerSpec spec = model::load_model(options.model_path);
    Tensor x = model::load_embedding(options.input_path);
    graph::VerGraph g = graph::fuse_all(model::build_graph(spec));
    Tensor logits = model::forward(spec, x);
    std::size_t predicted = argmax(logits);

    std::size_t calls = 0;
    auto verified_at = [&](double eps, bool tolerate_blowup) {
      ++calls;
      PerturbationSpec pspec(options.norm, eps, x.numel());
      try {
        LinearBounds out = graph::evaluate(g, {{"x", x}}, pspec);
        return check_robust(concretize(out, pspec), predicted, 0.0);
      } catch (const std::domain_error&) {
        if (!tolerate_blowup) throw;
        return false;  // interval too wide to verify (softmax normalizer)
      } catch (const std::invalid_argument&) {
        if (!tolerate_blowup) throw;
        return false;  // bound coefficients overflowed at this radius
      }
    };

    if (!verified_at(0.0, false)) {
      throw std::runtime_error("misclassified input: not verifiable at epsilon = 0");
    }

    double result;
    if (verified_at(options.eps_max, true)) {
      result = options.eps_max;
    } else {
      double lo = 0.0, hi = options.eps_max;
      while (hi - lo > options.tol) {
        double mid = 0.5 * (lo + hi);
        if (verified_at(mid, true)) {
          lo = mid;
        } else {
          hi = mid;
        }
      }
      result = lo;
    }

    json report;
    report["max_epsilon"] = result;
    report["tol"] = options.tol;
    report["eps_max"] = options.eps_max;
    report["norm"] = norm_name(options.norm);
    report["verification_calls"] = calls;
    if (!options.out_path.empty()) write_text(options.out_path, report.dump(1) + "\n");
    std::cout << "max verified epsilon = " << result << " (" << calls << " calls)\n";
    if (eps_out) *eps_out = result;
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "maxeps: " << e.what() << "\n";
    return 2;
  }
}

int cmd_tune(const TuneCmdOptions& options) {
  try {
    machine::HardwareMeta meta = resolve_meta(options.meta_path);
    machine::Pattern pattern = machine::pattern_from_name(options.pattern);
    const auto& shape = options.shape;
    auto need = [&](std::size_t n) {
      if (shape.size() != n) {
        throw std::runtime_error("pattern " + options.pattern + " expects " + std::to_string(n) +
                                 " shape values, got " + std::to_string(shape.size()));
      }
    };
    autotune::Profiler profiler;
    std::size_t reduction_length = 0;
    switch (pattern) {
      case machine::Pattern::GEMM:
        need(4);
        profiler = autotune::modeled_gemm_profiler(
            meta, autotune::GemmWorkload{shape[0], shape[1], shape[2], shape[3]});
        break;
      case machine::Pattern::VECTOR_REDUCTION:
        need(2);
        reduction_length = shape[1];
        profiler = autotune::modeled_reduction_profiler(meta, shape[0], shape[1]);
        break;
      case machine::Pattern::ELEMENTWISE_MUL:
        need(2);
        profiler = autotune::modeled_elementwise_profiler(meta, shape[0], shape[1]);
        break;
      case machine::Pattern::SCALAR_VECTOR:
        need(2);
        profiler = autotune::modeled_scalar_vector_profiler(meta, shape[0], shape[1]);
        break;
    }
    autotune::CandidateSpace space =
        autotune::filter_hard_rules(autotune::default_space(pattern, reduction_length), meta);
    autotune::TuneResult result = autotune::tune(space, meta, profiler, options.seed);

    if (!options.out_path.empty()) {
      write_text(options.out_path, autotune::schedule_to_json(result.best) + "\n");
    }
    if (!options.trace_path.empty()) {
      write_text(options.trace_path, autotune::trace_to_jsonl(result.trace));
    }
    std::cout << "tuned " << options.pattern << ": cost " << result.best_cost << " over "
              << result.trace.size() << " profiled candidates\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "tune: " << e.what() << "\n";
    return 2;
  }
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

namespace {

LinearBounds random_bounds(Rng& rng, std::vector<std::size_t> shape, std::size_t pert) {
  std::size_t n = shape_numel(shape);
  std::vector<std::size_t> wshape = shape;
  wshape.push_back(pert);
  LinearBounds b;
  std::vector<double> lb(n), ub(n), lw(n * pert), uw(n * pert);
  for (std::size_t i = 0; i < n; ++i) {
    double c = rng.uniform(-1.0, 1.0);
    double w = rng.uniform(0.0, 0.1);
    lb[i] = c - w;
    ub[i] = c + w;
  }
  for (std::size_t i = 0; i < n * pert; ++i) {
    lw[i] = rng.uniform(-0.1, 0.1);
    uw[i] = lw[i] + rng.uniform(0.0, 0.01);
  }
  b.lb = Tensor(shape, std::move(lb));
  b.ub = Tensor(shape, std::move(ub));
  b.lw = Tensor(wshape, std::move(lw));
  b.uw = Tensor(wshape, std::move(uw));
  return b;
}

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double scale) {
  std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = rng.uniform(-scale, scale);
  return Tensor(std::move(shape), std::move(data));
}

struct BenchRow {
  std::string op;
  std::size_t length, embed;
  double modeled_naive, modeled_fused, modeled_ratio;
  double weight_load_ratio;  // gemm only, else 0
  double wall_naive, wall_fused;
};

double time_call(const std::function<void()>& fn) {
  fn();  // warmup: allocator and page-fault state
  auto start = std::chrono::steady_clock::now();
  fn();
  return elapsed_seconds(start);
}

}  // namespace

int cmd_bench(const BenchOptions& options) {
  try {
    machine::HardwareMeta meta = resolve_meta(options.meta_path);
    machine::Precision precision;
    if (options.precision == "f64") {
      precision = machine::Precision::F64;
    } else if (options.precision == "f32") {
      precision = machine::Precision::F32;
    } else {
      throw std::runtime_error("unknown precision '" + options.precision + "'");
    }
    std::size_t heads = 4;
    if (!options.model_path.empty()) {
      heads = model::load_model(options.model_path).num_heads;
    }
    std::vector<BenchRow> rows;

    auto bench_point = [&](std::size_t length, std::size_t embed) {
      std::size_t full_pert = length * embed;
      std::size_t wall_pert = std::min(options.wall_pert_cap, full_pert);
      Rng rng(options.seed ^ (length * 1315423911ull) ^ embed);

      // Verified matrix multiplication (projection layer shape).
      {
        autotune::CandidateSpace space = autotune::filter_hard_rules(
            autotune::default_space(machine::Pattern::GEMM), meta);
        autotune::TuneResult tuned = autotune::tune(
            space, meta,
            autotune::modeled_gemm_profiler(meta,
                                            autotune::GemmWorkload{length, embed, embed,
                                                                   full_pert}),
            options.seed);
        machine::CostReport fused =
            machine::modeled_gemm_cost(tuned.best, meta, length, embed, embed, full_pert);
        machine::CostReport naive =
            machine::modeled_gemm_naive_cost(meta, length, embed, embed, full_pert);
        Tensor w = random_tensor(rng, {embed, embed}, 0.5);
        LinearBounds x = random_bounds(rng, {length, embed}, wall_pert);
        double wall_naive = time_call(
            [&] { machine::run_gemm_naive(meta, w, x, nullptr, precision); });
        double wall_fused = time_call(
            [&] { machine::run_gemm(tuned.best, meta, w, x, nullptr, precision); });
        rows.push_back({"matmul_verify", length, embed, naive.modeled_cost, fused.modeled_cost,
                        fused.modeled_cost / naive.modeled_cost,
                        static_cast<double>(fused.weight_loads) /
                            static_cast<double>(naive.weight_loads),
                        wall_naive, wall_fused});
      }

      // Verified elementwise operators (ReLU and Tanh relaxations).
      for (const char* op : {"relu_verify", "tanh_verify"}) {
        std::size_t neurons = length * embed;
        autotune::CandidateSpace space = autotune::filter_hard_rules(
            autotune::default_space(machine::Pattern::ELEMENTWISE_MUL), meta);
        autotune::TuneResult tuned =
            autotune::tune(space, meta,
                           autotune::modeled_elementwise_profiler(meta, neurons, full_pert),
                           options.seed);
        machine::CostReport fused =
            machine::modeled_elementwise_cost(tuned.best, meta, neurons, full_pert);
        machine::CostReport naive = machine::modeled_elementwise_naive_cost(meta, neurons,
                                                                            full_pert);
        LinearBounds x = random_bounds(rng, {1, neurons}, wall_pert);
        PerturbationSpec pspec(Norm::LInf, 0.05, wall_pert);
        relax::RelaxationProducer producer =
            std::string(op) == "relu_verify"
                ? relax::RelaxationProducer(relax::relax_relu)
                : relax::RelaxationProducer(relax::relax_tanh);
        double wall_naive =
            time_call([&] { machine::run_elementwise_naive(meta, x, pspec, producer); });
        double wall_fused =
            time_call([&] { machine::run_elementwise(tuned.best, meta, x, pspec, producer); });
        rows.push_back({op, length, embed, naive.modeled_cost, fused.modeled_cost,
                        fused.modeled_cost / naive.modeled_cost, 0.0, wall_naive, wall_fused});
      }

      // Dot-product verification cores (generalized scalar-vector pattern).
      {
        std::size_t m = heads * length * length;
        std::size_t n = wall_pert + 1;
        autotune::CandidateSpace space = autotune::filter_hard_rules(
            autotune::default_space(machine::Pattern::SCALAR_VECTOR), meta);
        autotune::TuneResult tuned = autotune::tune(
            space, meta, autotune::modeled_scalar_vector_profiler(meta, m, full_pert + 1),
            options.seed);
        machine::CostReport fused =
            machine::modeled_scalar_vector_cost(tuned.best, meta, m, full_pert + 1);
        machine::CostReport naive =
            machine::modeled_scalar_vector_naive_cost(meta, m, full_pert + 1);
        Tensor s = random_tensor(rng, {m}, 1.0);
        Tensor xm = random_tensor(rng, {m, n}, 1.0);
        auto f = [](double v) { return v; };
        double wall_naive = time_call([&] { machine::run_scalar_vector_naive(meta, s, xm, f); });
        double wall_fused =
            time_call([&] { machine::run_scalar_vector(tuned.best, meta, s, xm, f); });
        rows.push_back({"dot_product_scalar_vector", length, embed, naive.modeled_cost,
                        fused.modeled_cost, fused.modeled_cost / naive.modeled_cost, 0.0,
                        wall_naive, wall_fused});
      }
    };

    for (std::size_t length : options.lengths) bench_point(length, 128);
    for (std::size_t embed : options.embeds) bench_point(16, embed);

    json out;
    out["wall_pert_cap"] = options.wall_pert_cap;
    out["precision"] = options.precision;
    out["meta"] = meta.name;
    out["rows"] = json::array();
    for (const BenchRow& r : rows) {
      out["rows"].push_back({{"op", r.op},
                             {"length", r.length},
                             {"embed", r.embed},
                             {"modeled_naive", r.modeled_naive},
                             {"modeled_fused", r.modeled_fused},
                             {"modeled_ratio", r.modeled_ratio},
                             {"weight_load_ratio", r.weight_load_ratio},
                             {"wall_naive", r.wall_naive},
                             {"wall_fused", r.wall_fused},
                             {"wall_ratio", r.wall_naive > 0 ? r.wall_fused / r.wall_naive : 0}});
    }
    if (!options.out_path.empty()) write_text(options.out_path, out.dump(1) + "\n");
    for (const BenchRow& r : rows) {
      std::cout << r.op << " L=" << r.length << " E=" << r.embed
                << " modeled_ratio=" << r.modeled_ratio
                << " wall_fused/naive=" << (r.wall_naive > 0 ? r.wall_fused / r.wall_naive : 0)
                << "\n";
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "bench: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace faith::cli
