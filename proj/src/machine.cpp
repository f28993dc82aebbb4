#include "faith/machine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace faith::machine {

namespace {

std::uint64_t ceil_div(std::uint64_t a, std::uint64_t b) { return (a + b - 1) / b; }

}  // namespace

// ---------------------------------------------------------------------------
// Metafile
// ---------------------------------------------------------------------------

void HardwareMeta::validate() const {
  if (warp_size != 32) throw std::invalid_argument("HardwareMeta: warp_size must be 32");
  if (max_threads_per_block == 0 || shared_mem_per_block == 0 || registers_per_thread == 0 ||
      num_sms == 0 || max_threads_per_sm == 0) {
    throw std::invalid_argument("HardwareMeta: all caps must be positive");
  }
  if (cost_weights.global <= 0 || cost_weights.shared <= 0 || cost_weights.reg <= 0 ||
      cost_weights.sync <= 0) {
    throw std::invalid_argument("HardwareMeta: cost weights must be positive");
  }
}

HardwareMeta meta_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  HardwareMeta m;
  if (j.contains("name")) m.name = j.at("name").get<std::string>();
  m.warp_size = j.at("warp_size").get<std::size_t>();
  m.max_threads_per_block = j.at("max_threads_per_block").get<std::size_t>();
  m.shared_mem_per_block = j.at("shared_mem_per_block").get<std::size_t>();
  m.registers_per_thread = j.at("registers_per_thread").get<std::size_t>();
  m.num_sms = j.at("num_sms").get<std::size_t>();
  m.max_threads_per_sm = j.at("max_threads_per_sm").get<std::size_t>();
  const auto& w = j.at("cost_weights");
  m.cost_weights.global = w.at("global").get<double>();
  m.cost_weights.shared = w.at("shared").get<double>();
  m.cost_weights.reg = w.at("reg").get<double>();
  m.cost_weights.sync = w.at("sync").get<double>();
  m.validate();
  return m;
}

std::string meta_to_json(const HardwareMeta& m, int indent) {
  nlohmann::json j;
  j["name"] = m.name;
  j["warp_size"] = m.warp_size;
  j["max_threads_per_block"] = m.max_threads_per_block;
  j["shared_mem_per_block"] = m.shared_mem_per_block;
  j["registers_per_thread"] = m.registers_per_thread;
  j["num_sms"] = m.num_sms;
  j["max_threads_per_sm"] = m.max_threads_per_sm;
  j["cost_weights"] = {{"global", m.cost_weights.global},
                       {"shared", m.cost_weights.shared},
                       {"reg", m.cost_weights.reg},
                       {"sync", m.cost_weights.sync}};
  return indent >= 0 ? j.dump(indent) : j.dump();
}

HardwareMeta load_meta(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_meta: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return meta_from_json(ss.str());
  } catch (const std::exception& e) {
    throw std::runtime_error("load_meta: " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

std::string pattern_name(Pattern p) {
  switch (p) {
    case Pattern::GEMM:
      return "gemm";
    case Pattern::VECTOR_REDUCTION:
      return "vector_reduction";
    case Pattern::ELEMENTWISE_MUL:
      return "elementwise_mul";
    case Pattern::SCALAR_VECTOR:
      return "scalar_vector";
  }
  return "?";
}

Pattern pattern_from_name(const std::string& name) {
  if (name == "gemm") return Pattern::GEMM;
  if (name == "vector_reduction") return Pattern::VECTOR_REDUCTION;
  if (name == "elementwise_mul") return Pattern::ELEMENTWISE_MUL;
  if (name == "scalar_vector") return Pattern::SCALAR_VECTOR;
  throw std::invalid_argument("pattern_from_name: unknown pattern '" + name + "'");
}

std::string reduction_mode_name(ReductionMode m) {
  switch (m) {
    case ReductionMode::SEQUENTIAL:
      return "sequential";
    case ReductionMode::PARALLEL32:
      return "parallel32";
    case ReductionMode::HYBRID:
      return "hybrid";
  }
  return "?";
}

ReductionMode reduction_mode_from_name(const std::string& name) {
  if (name == "sequential") return ReductionMode::SEQUENTIAL;
  if (name == "parallel32") return ReductionMode::PARALLEL32;
  if (name == "hybrid") return ReductionMode::HYBRID;
  throw std::invalid_argument("reduction_mode_from_name: unknown mode '" + name + "'");
}

void Schedule::validate(const HardwareMeta& meta) const {
  switch (pattern) {
    case Pattern::GEMM:
      if (tile_m == 0 || tile_n == 0 || tile_k == 0 || reg_tile_m == 0 || reg_tile_n == 0) {
        throw std::invalid_argument("Schedule: GEMM tiles must be positive");
      }
      if (threads_per_block == 0 || threads_per_block > meta.max_threads_per_block) {
        throw std::invalid_argument("Schedule: threads_per_block outside device cap");
      }
      break;
    case Pattern::VECTOR_REDUCTION:
      break;
    case Pattern::ELEMENTWISE_MUL:
      if (group_threads == 0 || group_threads % meta.warp_size != 0) {
        throw std::invalid_argument("Schedule: T must be a positive multiple of the warp size");
      }
      if (group_threads > meta.max_threads_per_block) {
        throw std::invalid_argument("Schedule: T outside device cap");
      }
      break;
    case Pattern::SCALAR_VECTOR:
      if (warps_per_vector == 0) {
        throw std::invalid_argument("Schedule: warps_per_vector must be >= 1");
      }
      if (warps_per_vector * meta.warp_size > meta.max_threads_per_block) {
        throw std::invalid_argument("Schedule: 32*t outside device cap");
      }
      break;
  }
}

Schedule default_schedule(Pattern p) {
  Schedule s;
  s.pattern = p;
  // GEMM defaults: 16^3 tiles, 2x2 register tiles, 64 threads.
  s.tile_m = s.tile_n = s.tile_k = 16;
  s.reg_tile_m = s.reg_tile_n = 2;
  s.threads_per_block = 64;
  s.mode = ReductionMode::HYBRID;
  s.group_threads = 32;
  s.warps_per_vector = 1;
  return s;
}

// ---------------------------------------------------------------------------
// Cost report
// ---------------------------------------------------------------------------

void CostReport::finalize(const HardwareMeta& meta) {
  modeled_cost = meta.cost_weights.global * static_cast<double>(global_loads + global_stores) +
                 meta.cost_weights.shared * static_cast<double>(shared_accesses) +
                 meta.cost_weights.reg * static_cast<double>(cross_thread_ops) +
                 meta.cost_weights.sync * static_cast<double>(reduction_iterations);
}

CostReport& CostReport::operator+=(const CostReport& other) {
  global_loads += other.global_loads;
  global_stores += other.global_stores;
  shared_accesses += other.shared_accesses;
  reduction_iterations += other.reduction_iterations;
  cross_thread_ops += other.cross_thread_ops;
  estimated_shared_bytes = std::max(estimated_shared_bytes, other.estimated_shared_bytes);
  estimated_registers = std::max(estimated_registers, other.estimated_registers);
  weight_loads += other.weight_loads;
  bound_loads += other.bound_loads;
  modeled_cost += other.modeled_cost;
  return *this;
}

std::string cost_report_to_json(const CostReport& r, int indent) {
  nlohmann::json j;
  j["global_loads"] = r.global_loads;
  j["global_stores"] = r.global_stores;
  j["shared_accesses"] = r.shared_accesses;
  j["reduction_iterations"] = r.reduction_iterations;
  j["cross_thread_ops"] = r.cross_thread_ops;
  j["estimated_shared_bytes"] = r.estimated_shared_bytes;
  j["estimated_registers"] = r.estimated_registers;
  j["weight_loads"] = r.weight_loads;
  j["bound_loads"] = r.bound_loads;
  j["modeled_cost"] = r.modeled_cost;
  return indent >= 0 ? j.dump(indent) : j.dump();
}

Resources estimate_resources(const Schedule& sched, std::size_t elem_bytes) {
  Resources r;
  switch (sched.pattern) {
    case Pattern::GEMM:
      // Weight tile plus lower/upper bound staging.
      r.shared_bytes =
          (sched.tile_m * sched.tile_k + 2 * sched.tile_k * sched.tile_n) * elem_bytes;
      r.registers = 2 * sched.reg_tile_m * sched.reg_tile_n + sched.reg_tile_m +
                    sched.reg_tile_n + 8;
      break;
    case Pattern::VECTOR_REDUCTION:
      r.shared_bytes = sched.mode == ReductionMode::SEQUENTIAL ? 0 : 32 * elem_bytes;
      r.registers = sched.mode == ReductionMode::SEQUENTIAL ? 8 : 12;
      break;
    case Pattern::ELEMENTWISE_MUL:
      // Staged lw/uw chunk plus the concretized pair per thread group.
      r.shared_bytes = (4 * sched.group_threads + 2) * elem_bytes;
      r.registers = 16;
      break;
    case Pattern::SCALAR_VECTOR:
      // One broadcast slot per extra warp.
      r.shared_bytes = (sched.warps_per_vector - 1) * 32 * elem_bytes;
      r.registers = 12;
      break;
  }
  return r;
}

bool passes_hard_rules(const Schedule& sched, const HardwareMeta& meta, std::size_t elem_bytes) {
  try {
    sched.validate(meta);
  } catch (const std::invalid_argument&) {
    return false;
  }
  Resources r = estimate_resources(sched, elem_bytes);
  return r.shared_bytes <= meta.shared_mem_per_block && r.registers <= meta.registers_per_thread;
}

namespace {

void require_hard_rules(const Schedule& sched, const HardwareMeta& meta) {
  sched.validate(meta);
  Resources r = estimate_resources(sched);
  if (r.shared_bytes > meta.shared_mem_per_block) {
    throw std::runtime_error("schedule violates hard rules: shared estimate " +
                             std::to_string(r.shared_bytes) + " bytes exceeds cap " +
                             std::to_string(meta.shared_mem_per_block));
  }
  if (r.registers > meta.registers_per_thread) {
    throw std::runtime_error("schedule violates hard rules: register estimate " +
                             std::to_string(r.registers) + " exceeds cap " +
                             std::to_string(meta.registers_per_thread));
  }
}

// ---------------------------------------------------------------------------
// Kernel cost formulas (shared by executors and the graph walker)
// ---------------------------------------------------------------------------

struct GemmDims {
  std::uint64_t rows;   // leading axes of X
  std::uint64_t inner;  // contraction dim
  std::uint64_t outer;  // output features
  std::uint64_t pert;   // perturbation dim D
};

// Fused kernel: W read once (MN), both bound biases once (2NK), weight rows
// once; tile re-staging and register-blocked operand reads go to shared.
CostReport gemm_cost_fused(const GemmDims& d, const Schedule& s, const HardwareMeta& meta,
                           bool with_bias) {
  CostReport c;
  std::uint64_t width = 1 + d.pert;
  c.weight_loads = d.inner * d.outer;
  c.bound_loads = 2 * d.rows * d.inner;
  c.global_loads = c.weight_loads + 2 * d.rows * d.inner * width + (with_bias ? d.outer : 0);
  c.global_stores = 2 * d.rows * d.outer * width;
  std::uint64_t blocks = ceil_div(d.rows, s.tile_m) * ceil_div(d.outer, s.tile_n) *
                         ceil_div(d.inner, s.tile_k);
  std::uint64_t staging = blocks * (s.tile_k * s.tile_n + 2 * s.tile_m * s.tile_k * width);
  std::uint64_t macs = 4 * d.rows * d.inner * d.outer * width;
  std::uint64_t use_reads = macs / s.reg_tile_m + macs / s.reg_tile_n;
  c.shared_accesses = staging + use_reads;
  Resources r = estimate_resources(s);
  c.estimated_shared_bytes = r.shared_bytes;
  c.estimated_registers = r.registers;
  c.finalize(meta);
  return c;
}

CostReport split_signs_cost(std::uint64_t inner, std::uint64_t outer, const HardwareMeta& meta) {
  CostReport c;
  c.global_loads = inner * outer;
  c.global_stores = 2 * inner * outer;
  c.finalize(meta);
  return c;
}

// One weight-half kernel computing both bounds' partial products.
CostReport matmul_pair_cost(const GemmDims& d, const HardwareMeta& meta) {
  CostReport c;
  std::uint64_t width = 1 + d.pert;
  c.weight_loads = d.inner * d.outer;
  c.bound_loads = 2 * d.rows * d.inner;
  c.global_loads = c.weight_loads + 2 * d.rows * d.inner * width;
  c.global_stores = 2 * d.rows * d.outer * width;
  std::uint64_t macs = 2 * d.rows * d.inner * d.outer * width;
  c.shared_accesses = 2 * macs;  // per-use reads, no register blocking
  c.finalize(meta);
  return c;
}

// One side's kernel reading W whole with a register-level sign split.
CostReport affine_bound_cost(const GemmDims& d, const HardwareMeta& meta, bool with_bias) {
  CostReport c;
  std::uint64_t width = 1 + d.pert;
  c.weight_loads = d.inner * d.outer;
  c.bound_loads = 2 * d.rows * d.inner;
  c.global_loads = c.weight_loads + 2 * d.rows * d.inner * width + (with_bias ? d.outer : 0);
  c.global_stores = d.rows * d.outer * width;
  std::uint64_t macs = 2 * d.rows * d.inner * d.outer * width;
  c.shared_accesses = 2 * macs;
  c.finalize(meta);
  return c;
}

CostReport streaming_cost(std::uint64_t in_scalars, std::uint64_t out_scalars,
                          const HardwareMeta& meta) {
  CostReport c;
  c.global_loads = in_scalars;
  c.global_stores = out_scalars;
  c.finalize(meta);
  return c;
}

// Sharing-oriented elementwise verification: weights staged once, scheduled
// concretization, in-place rescale.
CostReport elementwise_cost_fused(std::uint64_t neurons, std::uint64_t pert, const Schedule& s,
                                  const HardwareMeta& meta) {
  CostReport c;
  std::uint64_t width = 1 + pert;
  c.global_loads = 2 * neurons * width;
  c.global_stores = 2 * neurons * width;
  std::uint64_t vectors = 2 * neurons;  // one lw row and one uw row per neuron
  c.reduction_iterations = vectors * reduction_iterations(s.mode, pert ? pert : 1);
  if (s.mode != ReductionMode::SEQUENTIAL) c.cross_thread_ops = vectors * 31;
  // staging writes + rescale reads
  c.shared_accesses = 2 * neurons * width + 2 * neurons * width + 4 * neurons;
  Resources r = estimate_resources(s);
  c.estimated_shared_bytes = r.shared_bytes;
  c.estimated_registers = r.registers;
  c.finalize(meta);
  return c;
}

CostReport elementwise_cost_naive(std::uint64_t neurons, std::uint64_t pert,
                                  const HardwareMeta& meta) {
  CostReport c;
  std::uint64_t width = 1 + pert;
  // Concretize pass reads weights + biases, writes the interval; rescale pass
  // re-reads the weight rows and the stored interval.
  c.global_loads = 2 * neurons * width + 2 * neurons * pert + 2 * neurons;
  c.global_stores = 2 * neurons + 2 * neurons * width;
  std::uint64_t vectors = 2 * neurons;
  c.reduction_iterations = vectors * reduction_iterations(ReductionMode::SEQUENTIAL,
                                                          pert ? pert : 1);
  c.shared_accesses = 2 * neurons * width;
  c.finalize(meta);
  return c;
}

CostReport reduction_cost(std::uint64_t vectors, std::uint64_t n, const Schedule& s,
                          const HardwareMeta& meta, std::uint64_t loads, std::uint64_t stores) {
  CostReport c;
  c.global_loads = loads;
  c.global_stores = stores;
  c.reduction_iterations = vectors * reduction_iterations(s.mode, n);
  if (s.mode != ReductionMode::SEQUENTIAL) c.cross_thread_ops = vectors * 31;
  Resources r = estimate_resources(s);
  c.estimated_shared_bytes = r.shared_bytes;
  c.estimated_registers = r.registers;
  c.finalize(meta);
  return c;
}

CostReport scalar_vector_cost_fused(std::uint64_t m, std::uint64_t n, const Schedule& s,
                                    const HardwareMeta& meta) {
  CostReport c;
  c.global_loads = m + m * n;  // each scalar once, vectors once
  c.global_stores = m * n;
  c.cross_thread_ops = m;  // warp broadcast of each scalar
  c.shared_accesses = (s.warps_per_vector - 1) * 2 * m;  // cross-warp broadcast slots
  Resources r = estimate_resources(s);
  c.estimated_shared_bytes = r.shared_bytes;
  c.estimated_registers = r.registers;
  c.finalize(meta);
  return c;
}

CostReport scalar_vector_cost_naive(std::uint64_t m, std::uint64_t n, const HardwareMeta& meta) {
  CostReport c;
  c.global_loads = m * n + m * n;  // each thread re-reads the scalar per element
  c.global_stores = m * n;
  c.finalize(meta);
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Executors
// ---------------------------------------------------------------------------

namespace {

// Shared loop bodies of the GEMM executors, templated on the host scalar so
// the f32 benchmarking mode reuses the exact kernel structure.

// Fused: per (row, output) the weight scalar is read once and sign-split at
// the register stage; positive and negative partial sums live in separate
// accumulators until the final add, so in f64 mode the result matches the
// explicit four-multiplication form bit-for-bit. The positive and negative
// halves run as two register passes over the staged tile; per-column
// accumulation order over the contraction axis is the oracle's.
template <typename T>
void gemm_fused_kernel(const Schedule& sched, const T* w, const T* xlb, const T* xub,
                       const T* xlw, const T* xuw, const T* bias, std::size_t rows,
                       std::size_t c, std::size_t o, std::size_t d, T* ylb, T* yub, T* ylw,
                       T* yuw) {
  std::vector<T> uw_neg(d), lw_neg(d);
  for (std::size_t m0 = 0; m0 < rows; m0 += sched.tile_m) {
    std::size_t m1 = std::min(rows, m0 + sched.tile_m);
    for (std::size_t n0 = 0; n0 < o; n0 += sched.tile_n) {
      std::size_t n1 = std::min(o, n0 + sched.tile_n);
      for (std::size_t r = m0; r < m1; ++r) {
        for (std::size_t j = n0; j < n1; ++j) {
          T ub_pos = 0, ub_neg = 0, lb_pos = 0, lb_neg = 0;
          T* yuw_row = yuw + (r * o + j) * d;
          T* ylw_row = ylw + (r * o + j) * d;
          std::fill(uw_neg.begin(), uw_neg.end(), T(0));
          std::fill(lw_neg.begin(), lw_neg.end(), T(0));
          for (std::size_t k0 = 0; k0 < c; k0 += sched.tile_k) {
            std::size_t k1 = std::min(c, k0 + sched.tile_k);
            // Positive-half pass.
            for (std::size_t i = k0; i < k1; ++i) {
              T wp = std::max(w[i * o + j], T(0));
              ub_pos += wp * xub[r * c + i];
              lb_pos += wp * xlb[r * c + i];
              const T* xur = xuw + (r * c + i) * d;
              const T* xlr = xlw + (r * c + i) * d;
              for (std::size_t k = 0; k < d; ++k) {
                yuw_row[k] += wp * xur[k];
                ylw_row[k] += wp * xlr[k];
              }
            }
            // Negative-half pass over the same staged tile.
            for (std::size_t i = k0; i < k1; ++i) {
              T wn = std::min(w[i * o + j], T(0));
              ub_neg += wn * xlb[r * c + i];
              lb_neg += wn * xub[r * c + i];
              const T* xur = xuw + (r * c + i) * d;
              const T* xlr = xlw + (r * c + i) * d;
              for (std::size_t k = 0; k < d; ++k) {
                uw_neg[k] += wn * xlr[k];
                lw_neg[k] += wn * xur[k];
              }
            }
          }
          T bv = bias ? bias[j] : T(0);
          yub[r * o + j] = ub_pos + ub_neg + bv;
          ylb[r * o + j] = lb_pos + lb_neg + bv;
          for (std::size_t k = 0; k < d; ++k) {
            yuw_row[k] += uw_neg[k];
            ylw_row[k] += lw_neg[k];
          }
        }
      }
    }
  }
}

// One materialized weight half against both bound sides.
template <typename T>
void gemm_pair_kernel(const T* half, bool positive, const T* xlb, const T* xub, const T* xlw,
                      const T* xuw, std::size_t rows, std::size_t c, std::size_t o,
                      std::size_t d, T* plb, T* pub, T* plw, T* puw) {
  const T* for_ub = positive ? xub : xlb;
  const T* for_lb = positive ? xlb : xub;
  const T* for_uw = positive ? xuw : xlw;
  const T* for_lw = positive ? xlw : xuw;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < o; ++j) {
      T accu = 0, accl = 0;
      T* puw_row = puw + (r * o + j) * d;
      T* plw_row = plw + (r * o + j) * d;
      for (std::size_t i = 0; i < c; ++i) {
        T wv = half[i * o + j];
        accu += wv * for_ub[r * c + i];
        accl += wv * for_lb[r * c + i];
        const T* ur = for_uw + (r * c + i) * d;
        const T* lr = for_lw + (r * c + i) * d;
        for (std::size_t k = 0; k < d; ++k) {
          puw_row[k] += wv * ur[k];
          plw_row[k] += wv * lr[k];
        }
      }
      pub[r * o + j] = accu;
      plb[r * o + j] = accl;
    }
  }
}

std::vector<float> to_f32(const Tensor& t) {
  std::vector<float> out(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) out[i] = static_cast<float>(t[i]);
  return out;
}

void widen_into(const std::vector<float>& src, Tensor& dst) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<double>(src[i]);
}

struct GemmShapes {
  std::size_t rows, c, o, d;
  std::vector<std::size_t> oshape, owshape;
};

GemmShapes gemm_shapes(const Tensor& w, const LinearBounds& x, const char* context) {
  if (w.rank() != 2 || x.lb.rank() == 0 || x.lb.shape().back() != w.extent(0)) {
    throw std::invalid_argument(std::string(context) + ": inner dimensions do not conform");
  }
  GemmShapes s;
  s.c = w.extent(0);
  s.o = w.extent(1);
  s.rows = x.lb.numel() / s.c;
  s.d = x.pert_dim();
  s.oshape = x.lb.shape();
  s.oshape.back() = s.o;
  s.owshape = s.oshape;
  s.owshape.push_back(s.d);
  return s;
}

}  // namespace

GemmResult run_gemm(const Schedule& sched, const HardwareMeta& meta, const Tensor& w,
                    const LinearBounds& x, const Tensor* bias, Precision precision) {
  if (sched.pattern != Pattern::GEMM) throw std::invalid_argument("run_gemm: wrong pattern");
  require_hard_rules(sched, meta);
  x.validate("run_gemm");
  GemmShapes s = gemm_shapes(w, x, "run_gemm");
  if (bias && bias->numel() != s.o) throw std::invalid_argument("run_gemm: bias length mismatch");

  GemmResult res;
  res.bounds.lb = Tensor::zeros(s.oshape);
  res.bounds.ub = Tensor::zeros(s.oshape);
  res.bounds.lw = Tensor::zeros(s.owshape);
  res.bounds.uw = Tensor::zeros(s.owshape);

  if (precision == Precision::F64) {
    gemm_fused_kernel<double>(sched, w.data(), x.lb.data(), x.ub.data(), x.lw.data(),
                              x.uw.data(), bias ? bias->data() : nullptr, s.rows, s.c, s.o, s.d,
                              res.bounds.lb.data(), res.bounds.ub.data(), res.bounds.lw.data(),
                              res.bounds.uw.data());
  } else {
    std::vector<float> wf = to_f32(w), lbf = to_f32(x.lb), ubf = to_f32(x.ub),
                       lwf = to_f32(x.lw), uwf = to_f32(x.uw);
    std::vector<float> bf = bias ? to_f32(*bias) : std::vector<float>();
    std::vector<float> ylb(s.rows * s.o, 0.0f), yub(s.rows * s.o, 0.0f);
    std::vector<float> ylw(s.rows * s.o * s.d, 0.0f), yuw(s.rows * s.o * s.d, 0.0f);
    gemm_fused_kernel<float>(sched, wf.data(), lbf.data(), ubf.data(), lwf.data(), uwf.data(),
                             bias ? bf.data() : nullptr, s.rows, s.c, s.o, s.d, ylb.data(),
                             yub.data(), ylw.data(), yuw.data());
    widen_into(ylb, res.bounds.lb);
    widen_into(yub, res.bounds.ub);
    widen_into(ylw, res.bounds.lw);
    widen_into(yuw, res.bounds.uw);
  }

  GemmDims dims{s.rows, s.c, s.o, s.d};
  res.cost = gemm_cost_fused(dims, sched, meta, bias != nullptr);
  return res;
}

GemmResult run_gemm_naive(const HardwareMeta& meta, const Tensor& w, const LinearBounds& x,
                          const Tensor* bias, Precision precision) {
  x.validate("run_gemm_naive");
  GemmShapes s = gemm_shapes(w, x, "run_gemm_naive");
  if (bias && bias->numel() != s.o) {
    throw std::invalid_argument("run_gemm_naive: bias length mismatch");
  }

  GemmResult res;
  res.bounds.lb = Tensor::zeros(s.oshape);
  res.bounds.ub = Tensor::zeros(s.oshape);
  res.bounds.lw = Tensor::zeros(s.owshape);
  res.bounds.uw = Tensor::zeros(s.owshape);

  auto run_passes = [&](auto zero) {
    using T = decltype(zero);
    std::vector<T> wv(w.numel()), lb(x.lb.numel()), ub(x.ub.numel()), lw(x.lw.numel()),
        uw(x.uw.numel());
    for (std::size_t i = 0; i < w.numel(); ++i) wv[i] = static_cast<T>(w[i]);
    for (std::size_t i = 0; i < lb.size(); ++i) lb[i] = static_cast<T>(x.lb[i]);
    for (std::size_t i = 0; i < ub.size(); ++i) ub[i] = static_cast<T>(x.ub[i]);
    for (std::size_t i = 0; i < lw.size(); ++i) lw[i] = static_cast<T>(x.lw[i]);
    for (std::size_t i = 0; i < uw.size(); ++i) uw[i] = static_cast<T>(x.uw[i]);

    // Split kernel: materialize W_pos and W_neg.
    std::vector<T> wpos(w.numel()), wneg(w.numel());
    for (std::size_t i = 0; i < w.numel(); ++i) {
      wpos[i] = std::max(wv[i], T(0));
      wneg[i] = std::min(wv[i], T(0));
    }
    std::size_t nb = s.rows * s.o;
    std::size_t nw = nb * s.d;
    std::vector<T> p_lb(nb, T(0)), p_ub(nb, T(0)), p_lw(nw, T(0)), p_uw(nw, T(0));
    std::vector<T> n_lb(nb, T(0)), n_ub(nb, T(0)), n_lw(nw, T(0)), n_uw(nw, T(0));
    gemm_pair_kernel<T>(wpos.data(), true, lb.data(), ub.data(), lw.data(), uw.data(), s.rows,
                        s.c, s.o, s.d, p_lb.data(), p_ub.data(), p_lw.data(), p_uw.data());
    gemm_pair_kernel<T>(wneg.data(), false, lb.data(), ub.data(), lw.data(), uw.data(), s.rows,
                        s.c, s.o, s.d, n_lb.data(), n_ub.data(), n_lw.data(), n_uw.data());
    for (std::size_t i = 0; i < nb; ++i) {
      T bv = bias ? static_cast<T>((*bias)[i % s.o]) : T(0);
      res.bounds.lb[i] = static_cast<double>(p_lb[i] + n_lb[i] + bv);
      res.bounds.ub[i] = static_cast<double>(p_ub[i] + n_ub[i] + bv);
    }
    for (std::size_t i = 0; i < nw; ++i) {
      res.bounds.lw[i] = static_cast<double>(p_lw[i] + n_lw[i]);
      res.bounds.uw[i] = static_cast<double>(p_uw[i] + n_uw[i]);
    }
  };
  if (precision == Precision::F64) {
    run_passes(double{});
  } else {
    run_passes(float{});
  }

  GemmDims dims{s.rows, s.c, s.o, s.d};
  std::uint64_t width = 1 + static_cast<std::uint64_t>(s.d);
  res.cost = split_signs_cost(s.c, s.o, meta);
  res.cost += matmul_pair_cost(dims, meta);
  res.cost += matmul_pair_cost(dims, meta);
  res.cost += streaming_cost(4 * s.rows * s.o * width + (bias ? s.o : 0),
                             2 * s.rows * s.o * width, meta);
  return res;
}

std::uint64_t reduction_iterations(ReductionMode mode, std::size_t n) {
  if (n < 1) throw std::invalid_argument("reduction_iterations: n must be >= 1");
  switch (mode) {
    case ReductionMode::SEQUENTIAL:
      return n;
    case ReductionMode::PARALLEL32:
      if (n != 32) {
        throw std::invalid_argument("reduction_iterations: PARALLEL32 requires n == 32");
      }
      return 5;
    case ReductionMode::HYBRID: {
      std::uint64_t k = ceil_div(n, 32);  // padded to the next multiple of 32
      return k + 5;
    }
  }
  throw std::invalid_argument("reduction_iterations: unknown mode");
}

namespace {

// Emulates the lane-level reduction orders so numeric results match the
// scheduled kernels rather than a plain left fold.
double tree_fold_32(double lanes[32]) {
  for (int offset = 16; offset > 0; offset /= 2) {
    for (int t = 0; t < offset; ++t) lanes[t] += lanes[t + offset];
  }
  return lanes[0];
}

template <typename F>
double hybrid_fold(const double* x, std::size_t n, F&& f) {
  double lanes[32] = {0.0};
  std::size_t chunks = (n + 31) / 32;
  for (std::size_t c = 0; c < chunks; ++c) {
    for (std::size_t t = 0; t < 32; ++t) {
      std::size_t idx = c * 32 + t;
      if (idx < n) lanes[t] += f(x[idx]);  // padding adds the identity element
    }
  }
  return tree_fold_32(lanes);
}

}  // namespace

ReduceResult run_reduction(const Schedule& sched, const HardwareMeta& meta, const Tensor& x,
                           const std::function<double(double)>& f) {
  if (sched.pattern != Pattern::VECTOR_REDUCTION) {
    throw std::invalid_argument("run_reduction: wrong pattern");
  }
  if (x.rank() != 2) throw std::invalid_argument("run_reduction: expects an m x n matrix");
  std::size_t m = x.extent(0);
  std::size_t n = x.extent(1);

  ReduceResult res;
  res.values = Tensor::zeros({m});
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data() + i * n;
    switch (sched.mode) {
      case ReductionMode::SEQUENTIAL: {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += f(row[j]);
        res.values[i] = acc;
        break;
      }
      case ReductionMode::PARALLEL32: {
        if (n != 32) throw std::invalid_argument("run_reduction: PARALLEL32 requires n == 32");
        double lanes[32];
        for (std::size_t t = 0; t < 32; ++t) lanes[t] = f(row[t]);
        res.values[i] = tree_fold_32(lanes);
        break;
      }
      case ReductionMode::HYBRID:
        res.values[i] = hybrid_fold(row, n, f);
        break;
    }
  }
  res.cost = reduction_cost(m, n, sched, meta, m * n, m);
  return res;
}

ElementwiseResult run_elementwise(const Schedule& sched, const HardwareMeta& meta,
                                  const LinearBounds& x, const PerturbationSpec& spec,
                                  const relax::RelaxationProducer& producer) {
  if (sched.pattern != Pattern::ELEMENTWISE_MUL) {
    throw std::invalid_argument("run_elementwise: wrong pattern");
  }
  require_hard_rules(sched, meta);
  x.validate("run_elementwise");
  std::size_t n = x.neuron_count();
  std::size_t d = x.pert_dim();
  Norm q = spec.dual_norm();

  // Step 1 stages lw/uw once (accounted); step 2 concretizes with the hybrid
  // lane reduction; step 3 rescales through the relaxation lines.
  ConcreteBounds cb;
  cb.lo = Tensor::zeros(x.lb.shape());
  cb.hi = Tensor::zeros(x.ub.shape());
  auto norm_of = [&](const double* row) -> double {
    switch (q) {
      case Norm::L1:
        return hybrid_fold(row, d, [](double v) { return std::fabs(v); });
      case Norm::L2:
        return std::sqrt(hybrid_fold(row, d, [](double v) { return v * v; }));
      case Norm::LInf: {
        double mx = 0.0;
        for (std::size_t k = 0; k < d; ++k) mx = std::max(mx, std::fabs(row[k]));
        return mx;
      }
    }
    return 0.0;
  };
  for (std::size_t i = 0; i < n; ++i) {
    cb.lo[i] = x.lb[i] - spec.epsilon * norm_of(x.lw.data() + i * d);
    cb.hi[i] = x.ub[i] + spec.epsilon * norm_of(x.uw.data() + i * d);
  }

  ElementwiseResult res;
  res.bounds = relax::compose_elementwise(x, producer(cb));
  res.cost = elementwise_cost_fused(n, d, sched, meta);
  return res;
}

ElementwiseResult run_elementwise_naive(const HardwareMeta& meta, const LinearBounds& x,
                                        const PerturbationSpec& spec,
                                        const relax::RelaxationProducer& producer) {
  x.validate("run_elementwise_naive");
  ElementwiseResult res;
  res.bounds = relax::compose_elementwise(x, producer(concretize(x, spec)));
  res.cost = elementwise_cost_naive(x.neuron_count(), x.pert_dim(), meta);
  return res;
}

ScalarVectorResult run_scalar_vector(const Schedule& sched, const HardwareMeta& meta,
                                     const Tensor& s, const Tensor& x,
                                     const std::function<double(double)>& f) {
  if (sched.pattern != Pattern::SCALAR_VECTOR) {
    throw std::invalid_argument("run_scalar_vector: wrong pattern");
  }
  require_hard_rules(sched, meta);
  if (s.rank() != 1 || x.rank() != 2 || s.extent(0) != x.extent(0)) {
    throw std::invalid_argument("run_scalar_vector: expects s[m] and x[m x n]");
  }
  std::size_t m = x.extent(0);
  std::size_t n = x.extent(1);
  ScalarVectorResult res;
  res.values = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    double fs = f(s[i]);  // scalar read once, broadcast across the group
    for (std::size_t j = 0; j < n; ++j) res.values[i * n + j] = fs * x[i * n + j];
  }
  res.cost = scalar_vector_cost_fused(m, n, sched, meta);
  return res;
}

ScalarVectorResult run_scalar_vector_naive(const HardwareMeta& meta, const Tensor& s,
                                           const Tensor& x,
                                           const std::function<double(double)>& f) {
  if (s.rank() != 1 || x.rank() != 2 || s.extent(0) != x.extent(0)) {
    throw std::invalid_argument("run_scalar_vector_naive: expects s[m] and x[m x n]");
  }
  std::size_t m = x.extent(0);
  std::size_t n = x.extent(1);
  ScalarVectorResult res;
  res.values = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      res.values[i * n + j] = f(s[i]) * x[i * n + j];  // scalar re-read per element
    }
  }
  res.cost = scalar_vector_cost_naive(m, n, meta);
  return res;
}

// ---------------------------------------------------------------------------
// Closed-form modeled costs
// ---------------------------------------------------------------------------

CostReport modeled_gemm_cost(const Schedule& sched, const HardwareMeta& meta, std::size_t rows,
                             std::size_t inner, std::size_t outer, std::size_t pert_dim,
                             bool with_bias) {
  return gemm_cost_fused(GemmDims{rows, inner, outer, pert_dim}, sched, meta, with_bias);
}

CostReport modeled_reduction_cost(const Schedule& sched, const HardwareMeta& meta,
                                  std::size_t vectors, std::size_t length) {
  return reduction_cost(vectors, length, sched, meta, vectors * length, vectors);
}

CostReport modeled_elementwise_cost(const Schedule& sched, const HardwareMeta& meta,
                                    std::size_t neurons, std::size_t pert_dim) {
  return elementwise_cost_fused(neurons, pert_dim, sched, meta);
}

CostReport modeled_scalar_vector_cost(const Schedule& sched, const HardwareMeta& meta,
                                      std::size_t m, std::size_t n) {
  return scalar_vector_cost_fused(m, n, sched, meta);
}

CostReport modeled_gemm_naive_cost(const HardwareMeta& meta, std::size_t rows, std::size_t inner,
                                   std::size_t outer, std::size_t pert_dim, bool with_bias) {
  GemmDims dims{rows, inner, outer, pert_dim};
  std::uint64_t width = 1 + static_cast<std::uint64_t>(pert_dim);
  CostReport c = split_signs_cost(inner, outer, meta);
  c += matmul_pair_cost(dims, meta);
  c += matmul_pair_cost(dims, meta);
  c += streaming_cost(4 * rows * outer * width + (with_bias ? outer : 0),
                      2 * rows * outer * width, meta);
  return c;
}

CostReport modeled_elementwise_naive_cost(const HardwareMeta& meta, std::size_t neurons,
                                          std::size_t pert_dim) {
  return elementwise_cost_naive(neurons, pert_dim, meta);
}

CostReport modeled_scalar_vector_naive_cost(const HardwareMeta& meta, std::size_t m,
                                            std::size_t n) {
  return scalar_vector_cost_naive(m, n, meta);
}

// ---------------------------------------------------------------------------
// Graph pipeline accounting
// ---------------------------------------------------------------------------

namespace {

using graph::Node;
using graph::NodeKind;
using graph::VerGraph;

std::uint64_t numel_of(const std::vector<std::size_t>& shape) {
  std::uint64_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

// Scalars materialized by a node's output value.
std::uint64_t out_scalars(const Node& n, std::uint64_t width) {
  std::uint64_t numel = numel_of(n.out_shape);
  switch (n.kind) {
    case NodeKind::Weight:
      return numel;
    case NodeKind::SplitSigns:
      return 2 * numel;
    case NodeKind::AffineBound:
      return numel * width;  // one side
    case NodeKind::Input:
    case NodeKind::MatmulPair:
    default:
      return 2 * numel * width;  // both sides (bias + weight rows)
  }
}

// Scalars the consumer actually reads across edge u -> v (the one asymmetric
// case is a pair kernel reading only its half of a split).
std::uint64_t edge_scalars(const Node& u, const Node& v, std::uint64_t width) {
  if (u.kind == NodeKind::SplitSigns && v.kind == NodeKind::MatmulPair) {
    return numel_of(u.out_shape);
  }
  return out_scalars(u, width);
}

GemmDims gemm_dims_of(const VerGraph& g, const Node& n, std::uint64_t pert) {
  const Node& x = g.node(n.inputs.at(0));
  std::uint64_t inner = x.out_shape.back();
  std::uint64_t rows = numel_of(x.out_shape) / inner;
  std::uint64_t outer = n.out_shape.back();
  return GemmDims{rows, inner, outer, pert};
}

CostReport node_kernel_cost(const VerGraph& g, const Node& n, std::uint64_t pert,
                            const HardwareMeta& meta, const ScheduleSet& sch) {
  std::uint64_t width = 1 + pert;
  std::uint64_t numel = numel_of(n.out_shape);
  auto input_scalars = [&]() {
    std::uint64_t total = 0;
    for (std::size_t in : n.inputs) total += edge_scalars(g.node(in), n, width);
    return total;
  };
  switch (n.kind) {
    case NodeKind::Input:
    case NodeKind::Weight:
      return CostReport{};
    case NodeKind::SplitSigns: {
      const Node& w = g.node(n.inputs.at(0));
      return split_signs_cost(w.out_shape.at(0), w.out_shape.at(1), meta);
    }
    case NodeKind::MatmulPair:
      return matmul_pair_cost(gemm_dims_of(g, n, pert), meta);
    case NodeKind::AffineBound:
      return affine_bound_cost(gemm_dims_of(g, n, pert), meta, n.inputs.size() > 2);
    case NodeKind::AffineVerify:
      return gemm_cost_fused(gemm_dims_of(g, n, pert), sch.gemm, meta, n.inputs.size() > 2);
    case NodeKind::CombineHalves:
    case NodeKind::MergeSides:
    case NodeKind::Scale:
    case NodeKind::AddBounds:
      return streaming_cost(input_scalars(), 2 * numel * width, meta);
    case NodeKind::DotProduct: {
      const Node& a = g.node(n.inputs.at(0));
      const Node& b = g.node(n.inputs.at(1));
      std::uint64_t contraction = n.attrs.layout == relax::DotLayout::PairwiseSimilarity
                                      ? a.out_shape.back() / n.attrs.heads
                                      : a.out_shape.back();
      std::uint64_t terms = numel * contraction;
      CostReport c;
      // Both operands staged once; every product term touches four plane
      // coefficients broadcast across the group.
      c.global_loads = 2 * numel_of(a.out_shape) * width + 2 * numel_of(b.out_shape) * width;
      c.global_stores = 2 * numel * width;
      c.cross_thread_ops = terms;
      std::uint64_t vectors = 2 * (numel_of(a.out_shape) + numel_of(b.out_shape));
      c.reduction_iterations = vectors * reduction_iterations(sch.reduction.mode,
                                                              pert ? pert : 1);
      if (sch.reduction.mode != ReductionMode::SEQUENTIAL) c.cross_thread_ops += vectors * 31;
      c.shared_accesses = 2 * 4 * terms * width;
      c.finalize(meta);
      return c;
    }
    case NodeKind::ReluVerify:
    case NodeKind::TanhVerify:
    case NodeKind::SiluVerify:
    case NodeKind::ExpVerify:
    case NodeKind::RecipVerify:
      return sch.elementwise.pattern == Pattern::ELEMENTWISE_MUL &&
                     sch.reduction.mode != ReductionMode::SEQUENTIAL
                 ? elementwise_cost_fused(numel, pert, sch.elementwise, meta)
                 : elementwise_cost_naive(numel, pert, meta);
    case NodeKind::SumReduce:
    case NodeKind::MeanPool: {
      const Node& x = g.node(n.inputs.at(0));
      std::uint64_t in_numel = numel_of(x.out_shape);
      std::uint64_t axis_extent = x.out_shape.at(n.attrs.axis);
      std::uint64_t vectors = 2 * numel * width;
      return reduction_cost(vectors, axis_extent, sch.reduction, meta, 2 * in_numel * width,
                            2 * numel * width);
    }
    case NodeKind::MulBroadcast: {
      const Node& r = g.node(n.inputs.at(1));
      CostReport c;
      std::uint64_t m = numel;  // one broadcast coefficient pair per output
      bool broadcast = sch.scalar_vector.pattern == Pattern::SCALAR_VECTOR;
      std::uint64_t r_loads = broadcast ? 2 * numel_of(r.out_shape) * width : 2 * numel * width;
      c.global_loads = 2 * numel * width + r_loads;
      c.global_stores = 2 * numel * width;
      c.cross_thread_ops = broadcast ? m : 0;
      c.shared_accesses = (sch.scalar_vector.warps_per_vector - 1) * 2 * m;
      c.finalize(meta);
      return c;
    }
    case NodeKind::Softmax:
      throw std::invalid_argument(
          "estimate_graph_cost: expand softmax before cost estimation");
  }
  throw std::logic_error("node_kernel_cost: unhandled kind");
}

}  // namespace

CostReport estimate_graph_cost(const graph::VerGraph& g, const HardwareMeta& meta,
                               std::size_t pert_dim, const ScheduleSet& schedules) {
  g.validate();
  std::uint64_t width = 1 + static_cast<std::uint64_t>(pert_dim);

  std::vector<std::size_t> group_of(g.nodes().size(), SIZE_MAX);
  for (std::size_t gi = 0; gi < g.fusion_groups().size(); ++gi) {
    for (std::size_t id : g.fusion_groups()[gi]) group_of[id] = gi;
  }

  CostReport total;
  for (const Node& n : g.nodes()) {
    total += node_kernel_cost(g, n, pert_dim, meta, schedules);
  }
  // Values handed over inside a fusion group stay in shared memory instead of
  // a global store/reload round trip. Fused edges always have exactly one
  // consumer, so the per-edge adjustment cannot double-count.
  for (const Node& n : g.nodes()) {
    for (std::size_t in : n.inputs) {
      const Node& u = g.node(in);
      if (!graph::is_operator(u.kind) || !graph::is_operator(n.kind)) continue;
      if (group_of[u.id] == SIZE_MAX || group_of[u.id] != group_of[n.id]) continue;
      std::uint64_t s = edge_scalars(u, n, width);
      total.global_loads -= s;
      total.global_stores -= s;
      total.shared_accesses += 2 * s;
    }
  }
  total.finalize(meta);
  return total;
}

}  // namespace faith::machine
