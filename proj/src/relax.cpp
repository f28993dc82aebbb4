#include "faith/relax.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace faith::relax {

namespace {

inline double sech2(double x) {
  double t = std::tanh(x);
  return 1.0 - t * t;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Line {
  double a = 0.0;
  double b = 0.0;
};

Line chord(double lo, double hi, double flo, double fhi) {
  double s = (fhi - flo) / (hi - lo);
  return {s, flo - s * lo};
}

// Tangent point d in [blo, bhi] whose tangent line passes through
// (anchor, tanh(anchor)). Requires g(blo) < 0 <= g(bhi) where g is the
// signed gap between the tangent line at d and the curve, evaluated at the
// anchor. Returns the g >= 0 side of the bracket so the line stays sound.
double bisect_tanh_tangent(double anchor, double blo, double bhi) {
  double fa = std::tanh(anchor);
  double a = blo;
  double b = bhi;
  for (int it = 0; it < 60 && (b - a) > 1e-9; ++it) {
    double mid = 0.5 * (a + b);
    double g = std::tanh(mid) + sech2(mid) * (anchor - mid) - fa;
    if (g >= 0.0) {
      b = mid;
    } else {
      a = mid;
    }
  }
  return b;
}

// Envelope of tanh on one interval. Regions: concave (lo >= 0), convex
// (hi <= 0, handled by odd symmetry), and mixed. In the mixed case the upper
// line is the tangent through (lo, tanh lo) with tangent point in [0, hi];
// when no such point exists inside the bracket (strongly asymmetric
// intervals) the endpoint chord is sound and is used instead.
void tanh_lines(double lo, double hi, Line& lower, Line& upper);

void tanh_lines_nonneg(double lo, double hi, Line& lower, Line& upper) {
  // Concave region.
  lower = chord(lo, hi, std::tanh(lo), std::tanh(hi));
  double m = 0.5 * (lo + hi);
  double a = sech2(m);
  upper = {a, std::tanh(m) - a * m};
}

void tanh_lines(double lo, double hi, Line& lower, Line& upper) {
  if (lo == hi) {
    double a = sech2(lo);
    double b = std::tanh(lo) - a * lo;
    lower = {a, b};
    upper = {a, b};
    return;
  }
  if (lo >= 0.0) {
    tanh_lines_nonneg(lo, hi, lower, upper);
    return;
  }
  if (hi <= 0.0) {
    // tanh(x) = -tanh(-x): mirror the concave-region lines.
    Line ml, mu;
    tanh_lines_nonneg(-hi, -lo, ml, mu);
    lower = {mu.a, -mu.b};
    upper = {ml.a, -ml.b};
    return;
  }

  // Mixed sign. Upper line anchored at the left endpoint.
  double flo = std::tanh(lo);
  double gap_hi = std::tanh(hi) + sech2(hi) * (lo - hi) - flo;
  if (gap_hi < 0.0) {
    upper = chord(lo, hi, flo, std::tanh(hi));
  } else {
    double d = bisect_tanh_tangent(lo, 0.0, hi);
    double a = sech2(d);
    upper = {a, std::tanh(d) - a * d};
  }
  // Lower line by odd symmetry: the upper line of [-hi, -lo], negated.
  Line ml, mu;
  double mflo = std::tanh(-hi);
  double mgap = std::tanh(-lo) + sech2(-lo) * (-hi + lo) - mflo;
  if (mgap < 0.0) {
    mu = chord(-hi, -lo, mflo, std::tanh(-lo));
  } else {
    double d = bisect_tanh_tangent(-hi, 0.0, -lo);
    double a = sech2(d);
    mu = {a, std::tanh(d) - a * d};
  }
  (void)ml;
  lower = {mu.a, -mu.b};
}

void apply_elementwise(const Tensor& x, Tensor& out, double (*f)(double)) {
  out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
}

void require_same_neurons(const LinearBounds& a, const LinearBounds& b, const char* context) {
  if (!a.lb.same_shape(b.lb) || !a.lw.same_shape(b.lw)) {
    throw std::invalid_argument(std::string(context) + ": operand shape mismatch " +
                                a.lb.shape_str() + " vs " + b.lb.shape_str());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward evaluation
// ---------------------------------------------------------------------------

double silu_scalar(double x) { return x * sigmoid(x); }

double silu_derivative(double x) {
  double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

Tensor forward_relu(const Tensor& x) {
  Tensor out;
  apply_elementwise(x, out, [](double v) { return v > 0.0 ? v : 0.0; });
  return out;
}

Tensor forward_tanh(const Tensor& x) {
  Tensor out;
  apply_elementwise(x, out, [](double v) { return std::tanh(v); });
  return out;
}

Tensor forward_silu(const Tensor& x) {
  Tensor out;
  apply_elementwise(x, out, [](double v) { return silu_scalar(v); });
  return out;
}

Tensor forward_exp(const Tensor& x) {
  Tensor out;
  apply_elementwise(x, out, [](double v) { return std::exp(v); });
  return out;
}

Tensor forward_recip(const Tensor& x) {
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (x[i] <= 0.0) throw std::domain_error("forward_recip: non-positive input");
  }
  Tensor out;
  apply_elementwise(x, out, [](double v) { return 1.0 / v; });
  return out;
}

Tensor forward_matmul(const Tensor& x, const Tensor& w, const Tensor* bias) {
  if (w.rank() != 2) throw std::invalid_argument("forward_matmul: weight must be rank 2");
  std::size_t c = w.extent(0);
  std::size_t o = w.extent(1);
  if (x.rank() == 0 || x.shape().back() != c) {
    throw std::invalid_argument("forward_matmul: inner dimensions do not conform: x " +
                                x.shape_str() + " vs W " + w.shape_str());
  }
  if (bias && bias->numel() != o) {
    throw std::invalid_argument("forward_matmul: bias length mismatch");
  }
  std::size_t rows = x.numel() / c;
  std::vector<std::size_t> oshape = x.shape();
  oshape.back() = o;
  Tensor out = Tensor::zeros(oshape);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < o; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < c; ++i) acc += x[r * c + i] * w[i * o + j];
      out[r * o + j] = acc + (bias ? (*bias)[j] : 0.0);
    }
  }
  return out;
}

Tensor forward_pairwise_dot(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || !a.same_shape(b)) {
    throw std::invalid_argument("forward_pairwise_dot: expects two tensors of shape [B, L, D]");
  }
  std::size_t batch = a.extent(0), len = a.extent(1), d = a.extent(2);
  Tensor out = Tensor::zeros({batch, len, len});
  for (std::size_t bi = 0; bi < batch; ++bi) {
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = 0; j < len; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          acc += a[(bi * len + i) * d + k] * b[(bi * len + j) * d + k];
        }
        out[(bi * len + i) * len + j] = acc;
      }
    }
  }
  return out;
}

Tensor forward_softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw std::invalid_argument("forward_softmax: axis out of range");
  std::size_t n = x.extent(axis);
  std::size_t inner = x.trailing(axis + 1);
  std::size_t outer = x.numel() / (n * inner);
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t oi = 0; oi < outer; ++oi) {
    for (std::size_t ii = 0; ii < inner; ++ii) {
      double mx = -HUGE_VAL;
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[(oi * n + j) * inner + ii]);
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) sum += std::exp(x[(oi * n + j) * inner + ii] - mx);
      for (std::size_t j = 0; j < n; ++j) {
        out[(oi * n + j) * inner + ii] = std::exp(x[(oi * n + j) * inner + ii] - mx) / sum;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Affine propagation
// ---------------------------------------------------------------------------

LinearBounds propagate_affine(const LinearBounds& x, const Tensor& w, const Tensor* bias) {
  x.validate("propagate_affine");
  if (w.rank() != 2) throw std::invalid_argument("propagate_affine: weight must be rank 2");
  std::size_t c = w.extent(0);
  std::size_t o = w.extent(1);
  if (x.lb.rank() == 0 || x.lb.shape().back() != c) {
    throw std::invalid_argument("propagate_affine: inner dimensions do not conform: x " +
                                x.lb.shape_str() + " vs W " + w.shape_str());
  }
  if (bias && bias->numel() != o) {
    throw std::invalid_argument("propagate_affine: bias length mismatch");
  }
  std::size_t rows = x.lb.numel() / c;
  std::size_t d = x.pert_dim();

  std::vector<std::size_t> oshape = x.lb.shape();
  oshape.back() = o;
  std::vector<std::size_t> owshape = oshape;
  owshape.push_back(d);

  LinearBounds y;
  y.lb = Tensor::zeros(oshape);
  y.ub = Tensor::zeros(oshape);
  y.lw = Tensor::zeros(owshape);
  y.uw = Tensor::zeros(owshape);

  // Positive-half sums accumulate into the outputs directly; negative-half
  // sums use scratch rows and are added once at the end. This keeps the
  // operation order identical to materializing W_pos/W_neg and running four
  // separate multiplications, so results agree bit-for-bit.
  std::vector<double> uw_neg(d), lw_neg(d);
  const double* xlb = x.lb.data();
  const double* xub = x.ub.data();
  const double* xlw = x.lw.data();
  const double* xuw = x.uw.data();

  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < o; ++j) {
      double ub_pos = 0.0, ub_neg = 0.0, lb_pos = 0.0, lb_neg = 0.0;
      double* yuw = y.uw.data() + (r * o + j) * d;
      double* ylw = y.lw.data() + (r * o + j) * d;
      std::fill(uw_neg.begin(), uw_neg.end(), 0.0);
      std::fill(lw_neg.begin(), lw_neg.end(), 0.0);
      for (std::size_t i = 0; i < c; ++i) {
        double wv = w[i * o + j];
        double wp = std::max(wv, 0.0);
        double wn = std::min(wv, 0.0);
        ub_pos += wp * xub[r * c + i];
        ub_neg += wn * xlb[r * c + i];
        lb_pos += wp * xlb[r * c + i];
        lb_neg += wn * xub[r * c + i];
        const double* xur = xuw + (r * c + i) * d;
        const double* xlr = xlw + (r * c + i) * d;
        for (std::size_t k = 0; k < d; ++k) {
          yuw[k] += wp * xur[k];
          uw_neg[k] += wn * xlr[k];
          ylw[k] += wp * xlr[k];
          lw_neg[k] += wn * xur[k];
        }
      }
      double bv = bias ? (*bias)[j] : 0.0;
      y.ub[r * o + j] = ub_pos + ub_neg + bv;
      y.lb[r * o + j] = lb_pos + lb_neg + bv;
      for (std::size_t k = 0; k < d; ++k) {
        yuw[k] += uw_neg[k];
        ylw[k] += lw_neg[k];
      }
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Elementwise relaxations
// ---------------------------------------------------------------------------

ElementwiseLinearRelaxation relax_relu(const ConcreteBounds& c) {
  c.validate("relax_relu");
  std::size_t n = c.lo.numel();
  ElementwiseLinearRelaxation r;
  r.a_low = Tensor::zeros(c.lo.shape());
  r.b_low = Tensor::zeros(c.lo.shape());
  r.a_up = Tensor::zeros(c.lo.shape());
  r.b_up = Tensor::zeros(c.lo.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double lo = c.lo[i], hi = c.hi[i];
    if (lo >= 0.0) {
      r.a_low[i] = 1.0;
      r.a_up[i] = 1.0;
    } else if (hi <= 0.0) {
      // all coefficients stay zero
    } else {
      double s = hi / (hi - lo);
      r.a_up[i] = s;
      r.b_up[i] = -s * lo;
      // Lower line y = alpha * x; alpha = 0 when |lo| > |hi|, else 1.
      r.a_low[i] = (std::fabs(lo) > std::fabs(hi)) ? 0.0 : 1.0;
    }
  }
  return r;
}

ElementwiseLinearRelaxation relax_tanh(const ConcreteBounds& c) {
  c.validate("relax_tanh");
  std::size_t n = c.lo.numel();
  ElementwiseLinearRelaxation r;
  r.a_low = Tensor::zeros(c.lo.shape());
  r.b_low = Tensor::zeros(c.lo.shape());
  r.a_up = Tensor::zeros(c.lo.shape());
  r.b_up = Tensor::zeros(c.lo.shape());
  for (std::size_t i = 0; i < n; ++i) {
    Line lower, upper;
    tanh_lines(c.lo[i], c.hi[i], lower, upper);
    r.a_low[i] = lower.a;
    r.b_low[i] = lower.b;
    r.a_up[i] = upper.a;
    r.b_up[i] = upper.b;
  }
  return r;
}

double tanh_tangent_residual(double anchor, double tangent_point) {
  return std::tanh(tangent_point) + sech2(tangent_point) * (anchor - tangent_point) -
         std::tanh(anchor);
}

ElementwiseLinearRelaxation relax_exp(const ConcreteBounds& c) {
  c.validate("relax_exp");
  std::size_t n = c.lo.numel();
  ElementwiseLinearRelaxation r;
  r.a_low = Tensor::zeros(c.lo.shape());
  r.b_low = Tensor::zeros(c.lo.shape());
  r.a_up = Tensor::zeros(c.lo.shape());
  r.b_up = Tensor::zeros(c.lo.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double lo = c.lo[i], hi = c.hi[i];
    // Lower line: tangent at the midpoint, pulled back toward lo when the
    // interval is wider than ~2 so the line stays positive at lo. Any tangent
    // of a convex function is a valid lower bound; positivity keeps the
    // softmax normalizer inside the reciprocal's domain.
    double d = std::min(0.5 * (lo + hi), lo + 15.0 / 16.0);
    double ed = std::exp(d);
    r.a_low[i] = ed;
    r.b_low[i] = ed - ed * d;
    if (lo == hi) {
      r.a_up[i] = ed;
      r.b_up[i] = ed - ed * d;
    } else {
      Line up = chord(lo, hi, std::exp(lo), std::exp(hi));
      r.a_up[i] = up.a;
      r.b_up[i] = up.b;
    }
    if (!std::isfinite(r.b_low[i]) || !std::isfinite(r.a_up[i]) || !std::isfinite(r.b_up[i])) {
      throw std::domain_error("relax_exp: interval too wide, envelope overflows");
    }
  }
  return r;
}

ElementwiseLinearRelaxation relax_recip(const ConcreteBounds& c) {
  c.validate("relax_recip");
  std::size_t n = c.lo.numel();
  ElementwiseLinearRelaxation r;
  r.a_low = Tensor::zeros(c.lo.shape());
  r.b_low = Tensor::zeros(c.lo.shape());
  r.a_up = Tensor::zeros(c.lo.shape());
  r.b_up = Tensor::zeros(c.lo.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double lo = c.lo[i], hi = c.hi[i];
    if (lo <= 0.0) {
      throw std::domain_error("relax_recip: lower bound must be positive, got " +
                              std::to_string(lo));
    }
    double m = 0.5 * (lo + hi);
    double am = -1.0 / (m * m);
    r.a_low[i] = am;
    r.b_low[i] = 2.0 / m;  // tangent at the midpoint
    if (lo == hi) {
      r.a_up[i] = am;
      r.b_up[i] = 2.0 / m;
    } else {
      Line up = chord(lo, hi, 1.0 / lo, 1.0 / hi);
      r.a_up[i] = up.a;
      r.b_up[i] = up.b;
    }
  }
  return r;
}

ElementwiseLinearRelaxation relax_silu(const ConcreteBounds& c) {
  c.validate("relax_silu");
  std::size_t n = c.lo.numel();
  ElementwiseLinearRelaxation r;
  r.a_low = Tensor::zeros(c.lo.shape());
  r.b_low = Tensor::zeros(c.lo.shape());
  r.a_up = Tensor::zeros(c.lo.shape());
  r.b_up = Tensor::zeros(c.lo.shape());

  // SiLU is neither convex nor concave globally, so both lines share the
  // chord slope and intercepts are shifted to the extrema of f(x) - s*x over
  // the interval. Extrema are located on a dense grid; the shift includes a
  // curvature margin covering between-grid error (|silu''| <= 0.5 globally,
  // 0.6 used as the bound).
  constexpr int kGrid = 256;
  constexpr double kSecondDerivBound = 0.6;
  for (std::size_t i = 0; i < n; ++i) {
    double lo = c.lo[i], hi = c.hi[i];
    if (lo == hi) {
      double a = silu_derivative(lo);
      r.a_low[i] = a;
      r.a_up[i] = a;
      r.b_low[i] = silu_scalar(lo) - a * lo;
      r.b_up[i] = r.b_low[i];
      continue;
    }
    double s = (silu_scalar(hi) - silu_scalar(lo)) / (hi - lo);
    double step = (hi - lo) / kGrid;
    double gmin = HUGE_VAL, gmax = -HUGE_VAL;
    for (int k = 0; k <= kGrid; ++k) {
      double x = (k == kGrid) ? hi : lo + step * k;
      double g = silu_scalar(x) - s * x;
      gmin = std::min(gmin, g);
      gmax = std::max(gmax, g);
    }
    double margin = kSecondDerivBound * step * step / 8.0 + 1e-12;
    r.a_low[i] = s;
    r.a_up[i] = s;
    r.b_low[i] = gmin - margin;
    r.b_up[i] = gmax + margin;
  }
  return r;
}

LinearBounds compose_elementwise(const LinearBounds& x, const ElementwiseLinearRelaxation& r) {
  x.validate("compose_elementwise");
  if (!r.a_low.same_shape(x.lb)) {
    throw std::invalid_argument("compose_elementwise: relaxation shape " + r.a_low.shape_str() +
                                " does not match bounds " + x.lb.shape_str());
  }
  std::size_t n = x.neuron_count();
  std::size_t d = x.pert_dim();
  LinearBounds y;
  y.lb = Tensor::zeros(x.lb.shape());
  y.ub = Tensor::zeros(x.ub.shape());
  y.lw = Tensor::zeros(x.lw.shape());
  y.uw = Tensor::zeros(x.uw.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double au = r.a_up[i];
    const double* src_u = (au >= 0.0) ? x.uw.data() + i * d : x.lw.data() + i * d;
    y.ub[i] = au * ((au >= 0.0) ? x.ub[i] : x.lb[i]) + r.b_up[i];
    double* dst_u = y.uw.data() + i * d;
    for (std::size_t k = 0; k < d; ++k) dst_u[k] = au * src_u[k];

    double al = r.a_low[i];
    const double* src_l = (al >= 0.0) ? x.lw.data() + i * d : x.uw.data() + i * d;
    y.lb[i] = al * ((al >= 0.0) ? x.lb[i] : x.ub[i]) + r.b_low[i];
    double* dst_l = y.lw.data() + i * d;
    for (std::size_t k = 0; k < d; ++k) dst_l[k] = al * src_l[k];
  }
  return y;
}

BilinearRelaxation relax_bilinear(const ConcreteBounds& cx, const ConcreteBounds& cy) {
  cx.validate("relax_bilinear");
  cy.validate("relax_bilinear");
  if (!cx.lo.same_shape(cy.lo)) {
    throw std::invalid_argument("relax_bilinear: operand shape mismatch");
  }
  std::size_t n = cx.lo.numel();
  BilinearRelaxation r;
  r.lo_x = Tensor::zeros(cx.lo.shape());
  r.lo_y = Tensor::zeros(cx.lo.shape());
  r.lo_c = Tensor::zeros(cx.lo.shape());
  r.up_x = Tensor::zeros(cx.lo.shape());
  r.up_y = Tensor::zeros(cx.lo.shape());
  r.up_c = Tensor::zeros(cx.lo.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double lx = cx.lo[i], ly = cy.lo[i], uy = cy.hi[i];
    r.lo_x[i] = ly;
    r.lo_y[i] = lx;
    r.lo_c[i] = -lx * ly;
    r.up_x[i] = uy;
    r.up_y[i] = lx;
    r.up_c[i] = -lx * uy;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Dot products and softmax decomposition
// ---------------------------------------------------------------------------

namespace {

// Adds one McCormick-bounded product term into the output accumulators.
// xi/yi index neurons of a and b respectively.
inline void accumulate_product_term(const LinearBounds& a, const LinearBounds& b,
                                    const ConcreteBounds& ca, const ConcreteBounds& cb,
                                    std::size_t xi, std::size_t yi, std::size_t d, double* out_lb,
                                    double* out_ub, double* out_lw, double* out_uw) {
  double lx = ca.lo[xi];
  double ly = cb.lo[yi];
  double uy = cb.hi[yi];

  // Lower plane: z >= ly*x + lx*y - lx*ly
  {
    double cx = ly, cy = lx;
    const double* xr = (cx >= 0.0) ? a.lw.data() + xi * d : a.uw.data() + xi * d;
    const double* yr = (cy >= 0.0) ? b.lw.data() + yi * d : b.uw.data() + yi * d;
    *out_lb += cx * ((cx >= 0.0) ? a.lb[xi] : a.ub[xi]) +
               cy * ((cy >= 0.0) ? b.lb[yi] : b.ub[yi]) - lx * ly;
    if (cx != 0.0) {
      for (std::size_t k = 0; k < d; ++k) out_lw[k] += cx * xr[k];
    }
    if (cy != 0.0) {
      for (std::size_t k = 0; k < d; ++k) out_lw[k] += cy * yr[k];
    }
  }
  // Upper plane: z <= uy*x + lx*y - lx*uy
  {
    double cx = uy, cy = lx;
    const double* xr = (cx >= 0.0) ? a.uw.data() + xi * d : a.lw.data() + xi * d;
    const double* yr = (cy >= 0.0) ? b.uw.data() + yi * d : b.lw.data() + yi * d;
    *out_ub += cx * ((cx >= 0.0) ? a.ub[xi] : a.lb[xi]) +
               cy * ((cy >= 0.0) ? b.ub[yi] : b.lb[yi]) - lx * uy;
    if (cx != 0.0) {
      for (std::size_t k = 0; k < d; ++k) out_uw[k] += cx * xr[k];
    }
    if (cy != 0.0) {
      for (std::size_t k = 0; k < d; ++k) out_uw[k] += cy * yr[k];
    }
  }
}

}  // namespace

LinearBounds propagate_dot_product(const LinearBounds& a, const LinearBounds& b,
                                   const PerturbationSpec& spec, DotLayout layout,
                                   std::size_t num_heads) {
  a.validate("propagate_dot_product");
  b.validate("propagate_dot_product");
  if (num_heads == 0) throw std::invalid_argument("propagate_dot_product: num_heads must be >= 1");
  std::size_t d = a.pert_dim();
  if (d != b.pert_dim()) {
    throw std::invalid_argument("propagate_dot_product: perturbation dims differ");
  }
  ConcreteBounds ca = concretize(a, spec);
  ConcreteBounds cb = concretize(b, spec);

  LinearBounds y;
  if (layout == DotLayout::PairwiseSimilarity) {
    // a: Q [B, L, H*Dh], b: K [B, L, H*Dh] -> scores [B, H, L, L]
    if (a.lb.rank() != 3 || !a.lb.same_shape(b.lb)) {
      throw std::invalid_argument("propagate_dot_product: similarity expects two [B, L, E] inputs");
    }
    std::size_t batch = a.lb.extent(0), len = a.lb.extent(1), e = a.lb.extent(2);
    if (e % num_heads != 0) {
      throw std::invalid_argument("propagate_dot_product: feature dim not divisible by heads");
    }
    std::size_t hd = e / num_heads;
    y.lb = Tensor::zeros({batch, num_heads, len, len});
    y.ub = Tensor::zeros({batch, num_heads, len, len});
    y.lw = Tensor::zeros({batch, num_heads, len, len, d});
    y.uw = Tensor::zeros({batch, num_heads, len, len, d});
    for (std::size_t bi = 0; bi < batch; ++bi) {
      for (std::size_t h = 0; h < num_heads; ++h) {
        for (std::size_t i = 0; i < len; ++i) {
          for (std::size_t j = 0; j < len; ++j) {
            std::size_t oidx = ((bi * num_heads + h) * len + i) * len + j;
            double* lw_row = y.lw.data() + oidx * d;
            double* uw_row = y.uw.data() + oidx * d;
            for (std::size_t k = 0; k < hd; ++k) {
              std::size_t xi = (bi * len + i) * e + h * hd + k;
              std::size_t yi = (bi * len + j) * e + h * hd + k;
              accumulate_product_term(a, b, ca, cb, xi, yi, d, &y.lb[oidx], &y.ub[oidx], lw_row,
                                      uw_row);
            }
          }
        }
      }
    }
  } else {
    // a: scores [B, H, L, L], b: V [B, L, H*Dh] -> context [B, L, H*Dh]
    if (a.lb.rank() != 4 || b.lb.rank() != 3) {
      throw std::invalid_argument(
          "propagate_dot_product: weighted-values expects [B, H, L, L] and [B, L, E]");
    }
    std::size_t batch = a.lb.extent(0), heads = a.lb.extent(1), len = a.lb.extent(2);
    std::size_t e = b.lb.extent(2);
    if (heads != num_heads || a.lb.extent(3) != len || b.lb.extent(0) != batch ||
        b.lb.extent(1) != len || e % num_heads != 0) {
      throw std::invalid_argument("propagate_dot_product: weighted-values shape mismatch");
    }
    std::size_t hd = e / num_heads;
    y.lb = Tensor::zeros({batch, len, e});
    y.ub = Tensor::zeros({batch, len, e});
    y.lw = Tensor::zeros({batch, len, e, d});
    y.uw = Tensor::zeros({batch, len, e, d});
    for (std::size_t bi = 0; bi < batch; ++bi) {
      for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t k = 0; k < hd; ++k) {
            std::size_t oidx = (bi * len + i) * e + h * hd + k;
            double* lw_row = y.lw.data() + oidx * d;
            double* uw_row = y.uw.data() + oidx * d;
            for (std::size_t j = 0; j < len; ++j) {
              std::size_t xi = ((bi * heads + h) * len + i) * len + j;
              std::size_t yi = (bi * len + j) * e + h * hd + k;
              accumulate_product_term(a, b, ca, cb, xi, yi, d, &y.lb[oidx], &y.ub[oidx], lw_row,
                                      uw_row);
            }
          }
        }
      }
    }
  }
  return y;
}

LinearBounds propagate_add(const LinearBounds& a, const LinearBounds& b) {
  a.validate("propagate_add");
  b.validate("propagate_add");
  require_same_neurons(a, b, "propagate_add");
  LinearBounds y;
  y.lb = Tensor::zeros(a.lb.shape());
  y.ub = Tensor::zeros(a.ub.shape());
  y.lw = Tensor::zeros(a.lw.shape());
  y.uw = Tensor::zeros(a.uw.shape());
  for (std::size_t i = 0; i < a.lb.numel(); ++i) {
    y.lb[i] = a.lb[i] + b.lb[i];
    y.ub[i] = a.ub[i] + b.ub[i];
  }
  for (std::size_t i = 0; i < a.lw.numel(); ++i) {
    y.lw[i] = a.lw[i] + b.lw[i];
    y.uw[i] = a.uw[i] + b.uw[i];
  }
  return y;
}

LinearBounds propagate_scale(const LinearBounds& x, double s) {
  x.validate("propagate_scale");
  LinearBounds y;
  y.lb = Tensor::zeros(x.lb.shape());
  y.ub = Tensor::zeros(x.ub.shape());
  y.lw = Tensor::zeros(x.lw.shape());
  y.uw = Tensor::zeros(x.uw.shape());
  if (s >= 0.0) {
    for (std::size_t i = 0; i < x.lb.numel(); ++i) {
      y.lb[i] = s * x.lb[i];
      y.ub[i] = s * x.ub[i];
    }
    for (std::size_t i = 0; i < x.lw.numel(); ++i) {
      y.lw[i] = s * x.lw[i];
      y.uw[i] = s * x.uw[i];
    }
  } else {
    for (std::size_t i = 0; i < x.lb.numel(); ++i) {
      y.lb[i] = s * x.ub[i];
      y.ub[i] = s * x.lb[i];
    }
    for (std::size_t i = 0; i < x.lw.numel(); ++i) {
      y.lw[i] = s * x.uw[i];
      y.uw[i] = s * x.lw[i];
    }
  }
  return y;
}

LinearBounds propagate_sum_axis(const LinearBounds& x, std::size_t axis) {
  x.validate("propagate_sum_axis");
  if (axis >= x.lb.rank()) throw std::invalid_argument("propagate_sum_axis: axis out of range");
  std::size_t n = x.lb.extent(axis);
  std::size_t inner = x.lb.trailing(axis + 1);
  std::size_t outer = x.lb.numel() / (n * inner);
  std::size_t d = x.pert_dim();

  std::vector<std::size_t> oshape = x.lb.shape();
  oshape[axis] = 1;
  std::vector<std::size_t> owshape = oshape;
  owshape.push_back(d);

  LinearBounds y;
  y.lb = Tensor::zeros(oshape);
  y.ub = Tensor::zeros(oshape);
  y.lw = Tensor::zeros(owshape);
  y.uw = Tensor::zeros(owshape);
  for (std::size_t oi = 0; oi < outer; ++oi) {
    for (std::size_t ii = 0; ii < inner; ++ii) {
      std::size_t oidx = oi * inner + ii;
      double* ylw = y.lw.data() + oidx * d;
      double* yuw = y.uw.data() + oidx * d;
      for (std::size_t j = 0; j < n; ++j) {
        std::size_t idx = (oi * n + j) * inner + ii;
        y.lb[oidx] += x.lb[idx];
        y.ub[oidx] += x.ub[idx];
        const double* xlr = x.lw.data() + idx * d;
        const double* xur = x.uw.data() + idx * d;
        for (std::size_t k = 0; k < d; ++k) {
          ylw[k] += xlr[k];
          yuw[k] += xur[k];
        }
      }
    }
  }
  return y;
}

LinearBounds propagate_mul_broadcast(const LinearBounds& x, const LinearBounds& r,
                                     std::size_t axis, const PerturbationSpec& spec) {
  x.validate("propagate_mul_broadcast");
  r.validate("propagate_mul_broadcast");
  if (axis >= x.lb.rank() || r.lb.rank() != x.lb.rank() || r.lb.extent(axis) != 1) {
    throw std::invalid_argument("propagate_mul_broadcast: operand shapes incompatible");
  }
  std::size_t n = x.lb.extent(axis);
  std::size_t inner = x.lb.trailing(axis + 1);
  std::size_t outer = x.lb.numel() / (n * inner);
  std::size_t d = x.pert_dim();

  ConcreteBounds cx = concretize(x, spec);
  ConcreteBounds cr = concretize(r, spec);

  LinearBounds y;
  y.lb = Tensor::zeros(x.lb.shape());
  y.ub = Tensor::zeros(x.ub.shape());
  y.lw = Tensor::zeros(x.lw.shape());
  y.uw = Tensor::zeros(x.uw.shape());
  for (std::size_t oi = 0; oi < outer; ++oi) {
    for (std::size_t ii = 0; ii < inner; ++ii) {
      std::size_t ridx = oi * inner + ii;
      for (std::size_t j = 0; j < n; ++j) {
        std::size_t idx = (oi * n + j) * inner + ii;
        accumulate_product_term(x, r, cx, cr, idx, ridx, d, &y.lb[idx], &y.ub[idx],
                                y.lw.data() + idx * d, y.uw.data() + idx * d);
      }
    }
  }
  return y;
}

LinearBounds propagate_softmax(const LinearBounds& x, std::size_t axis,
                               const PerturbationSpec& spec) {
  x.validate("propagate_softmax");
  if (axis >= x.lb.rank()) throw std::invalid_argument("propagate_softmax: axis out of range");
  ConcreteBounds cx = concretize(x, spec);
  LinearBounds e = compose_elementwise(x, relax_exp(cx));
  LinearBounds s = propagate_sum_axis(e, axis);
  ConcreteBounds cs = concretize(s, spec);
  // relax_recip raises a domain error if the summed lower bound is <= 0;
  // with exponential lower tangents this indicates an interval too wide to
  // verify rather than an internal bug.
  LinearBounds r = compose_elementwise(s, relax_recip(cs));
  return propagate_mul_broadcast(e, r, axis, spec);
}

}  // namespace faith::relax
