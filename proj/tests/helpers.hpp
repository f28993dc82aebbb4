#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "faith/bounds.hpp"
#include "faith/relax.hpp"
#include "faith/rng.hpp"
#include "faith/tensor.hpp"

namespace faith::testing {

// Samples a perturbation vector with ||delta||_p <= eps. With probability
// ~1/4 the sample is pushed onto the sphere to exercise the boundary.
inline std::vector<double> sample_in_ball(Rng& rng, Norm p, double eps, std::size_t dim) {
  std::vector<double> delta(dim);
  switch (p) {
    case Norm::LInf:
      for (double& v : delta) v = rng.uniform(-eps, eps);
      if (rng.uniform() < 0.25) {
        for (double& v : delta) v = v >= 0.0 ? eps : -eps;
      }
      break;
    case Norm::L2: {
      double ss = 0.0;
      for (double& v : delta) {
        v = rng.normal();
        ss += v * v;
      }
      double norm = std::sqrt(ss);
      if (norm == 0.0) norm = 1.0;
      double radius = eps * std::pow(rng.uniform(), 1.0 / static_cast<double>(dim));
      if (rng.uniform() < 0.25) radius = eps;
      for (double& v : delta) v = v / norm * radius;
      break;
    }
    case Norm::L1: {
      double s = 0.0;
      for (double& v : delta) {
        v = -std::log(1.0 - rng.uniform());
        s += v;
      }
      double radius = eps * rng.uniform();
      if (rng.uniform() < 0.25) radius = eps;
      for (double& v : delta) {
        v = v / s * radius;
        if (rng.uniform() < 0.5) v = -v;
      }
      break;
    }
  }
  return delta;
}

inline double lower_form_at(const LinearBounds& b, std::size_t i,
                            const std::vector<double>& delta) {
  double v = b.lb[i];
  const double* row = b.lw.data() + i * delta.size();
  for (std::size_t k = 0; k < delta.size(); ++k) v += row[k] * delta[k];
  return v;
}

inline double upper_form_at(const LinearBounds& b, std::size_t i,
                            const std::vector<double>& delta) {
  double v = b.ub[i];
  const double* row = b.uw.data() + i * delta.size();
  for (std::size_t k = 0; k < delta.size(); ++k) v += row[k] * delta[k];
  return v;
}

// Checks every sampled perturbation keeps the exact value inside the linear
// forms and the linear forms inside the concretized interval.
inline bool forms_bound_value(const LinearBounds& b, std::size_t i,
                              const std::vector<double>& delta, double exact, double slack) {
  return lower_form_at(b, i, delta) <= exact + slack &&
         exact <= upper_form_at(b, i, delta) + slack;
}

// Brute-force affine propagation: materializes W_pos / W_neg and runs four
// separate multiplications plus a final add, exactly as the decomposed
// baseline computes it.
inline LinearBounds affine_four_mul_oracle(const LinearBounds& x, const Tensor& w,
                                           const Tensor* bias) {
  std::size_t c = w.extent(0), o = w.extent(1);
  std::size_t rows = x.lb.numel() / c;
  std::size_t d = x.pert_dim();
  Tensor wpos = Tensor::zeros(w.shape());
  Tensor wneg = Tensor::zeros(w.shape());
  for (std::size_t i = 0; i < w.numel(); ++i) {
    wpos[i] = std::max(w[i], 0.0);
    wneg[i] = std::min(w[i], 0.0);
  }

  std::vector<std::size_t> oshape = x.lb.shape();
  oshape.back() = o;
  std::vector<std::size_t> owshape = oshape;
  owshape.push_back(d);

  auto mul_bias = [&](const Tensor& half, const Tensor& src) {
    Tensor out = Tensor::zeros(oshape);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < o; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < c; ++i) acc += half[i * o + j] * src[r * c + i];
        out[r * o + j] = acc;
      }
    }
    return out;
  };
  auto mul_rows = [&](const Tensor& half, const Tensor& src) {
    Tensor out = Tensor::zeros(owshape);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < o; ++j) {
        double* orow = out.data() + (r * o + j) * d;
        for (std::size_t i = 0; i < c; ++i) {
          double wv = half[i * o + j];
          const double* srow = src.data() + (r * c + i) * d;
          for (std::size_t k = 0; k < d; ++k) orow[k] += wv * srow[k];
        }
      }
    }
    return out;
  };

  Tensor ub1 = mul_bias(wpos, x.ub), ub2 = mul_bias(wneg, x.lb);
  Tensor lb1 = mul_bias(wpos, x.lb), lb2 = mul_bias(wneg, x.ub);
  Tensor uw1 = mul_rows(wpos, x.uw), uw2 = mul_rows(wneg, x.lw);
  Tensor lw1 = mul_rows(wpos, x.lw), lw2 = mul_rows(wneg, x.uw);

  LinearBounds y;
  y.lb = Tensor::zeros(oshape);
  y.ub = Tensor::zeros(oshape);
  y.lw = Tensor::zeros(owshape);
  y.uw = Tensor::zeros(owshape);
  for (std::size_t i = 0; i < y.lb.numel(); ++i) {
    double bv = bias ? (*bias)[i % o] : 0.0;
    y.ub[i] = ub1[i] + ub2[i] + bv;
    y.lb[i] = lb1[i] + lb2[i] + bv;
  }
  for (std::size_t i = 0; i < y.lw.numel(); ++i) {
    y.uw[i] = uw1[i] + uw2[i];
    y.lw[i] = lw1[i] + lw2[i];
  }
  return y;
}

// Grid soundness of envelope lines over an interval: returns the worst
// violation (positive = unsound by that much).
inline double envelope_violation(const std::function<double(double)>& f, double lo, double hi,
                                 double a_low, double b_low, double a_up, double b_up,
                                 int points = 1000) {
  double worst = -HUGE_VAL;
  for (int k = 0; k <= points; ++k) {
    double x = points == 0 ? lo : lo + (hi - lo) * k / points;
    double fx = f(x);
    worst = std::max(worst, (a_low * x + b_low) - fx);
    worst = std::max(worst, fx - (a_up * x + b_up));
  }
  return worst;
}

inline Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double scale) {
  std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = rng.uniform(-scale, scale);
  return Tensor(std::move(shape), std::move(data));
}

// Random but self-consistent linear bounds: the lower form never exceeds the
// upper form anywhere on the ball (shared weight rows, lb <= ub).
inline LinearBounds random_consistent_bounds(Rng& rng, std::vector<std::size_t> shape,
                                             std::size_t pert, double scale = 1.0) {
  std::size_t n = shape_numel(shape);
  std::vector<std::size_t> wshape = shape;
  wshape.push_back(pert);
  LinearBounds b;
  b.lw = random_tensor(rng, wshape, scale);
  b.uw = b.lw;
  std::vector<double> lb(n), ub(n);
  for (std::size_t i = 0; i < n; ++i) {
    double c = rng.uniform(-scale, scale);
    lb[i] = c - rng.uniform(0.0, scale);
    ub[i] = c + rng.uniform(0.0, scale);
  }
  b.lb = Tensor(shape, std::move(lb));
  b.ub = Tensor(wshape.empty() ? shape : shape, std::move(ub));
  return b;
}

}  // namespace faith::testing
