#include "faith/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace faith {

Norm dual(Norm p) {
  switch (p) {
    case Norm::L1:
      return Norm::LInf;
    case Norm::L2:
      return Norm::L2;
    case Norm::LInf:
      return Norm::L1;
  }
  throw std::invalid_argument("dual: unknown norm");
}

std::string norm_name(Norm p) {
  switch (p) {
    case Norm::L1:
      return "l1";
    case Norm::L2:
      return "l2";
    case Norm::LInf:
      return "linf";
  }
  return "?";
}

Norm norm_from_name(const std::string& name) {
  if (name == "l1") return Norm::L1;
  if (name == "l2") return Norm::L2;
  if (name == "linf") return Norm::LInf;
  throw std::invalid_argument("norm_from_name: unknown norm '" + name + "'");
}

PerturbationSpec::PerturbationSpec(Norm p_, double epsilon_, std::size_t dim_)
    : p(p_), epsilon(epsilon_), dim(dim_) {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
    throw std::invalid_argument("PerturbationSpec: epsilon must be finite and >= 0");
  }
  if (dim < 1) {
    throw std::invalid_argument("PerturbationSpec: dim must be >= 1");
  }
}

void LinearBounds::validate(const std::string& context) const {
  if (!lw.same_shape(uw)) {
    throw std::invalid_argument(context + ": lw/uw shape mismatch " + lw.shape_str() + " vs " +
                                uw.shape_str());
  }
  if (!lb.same_shape(ub)) {
    throw std::invalid_argument(context + ": lb/ub shape mismatch");
  }
  if (lw.rank() != lb.rank() + 1) {
    throw std::invalid_argument(context + ": lw rank must be lb rank + 1");
  }
  for (std::size_t a = 0; a < lb.rank(); ++a) {
    if (lw.extent(a) != lb.extent(a)) {
      throw std::invalid_argument(context + ": lw " + lw.shape_str() +
                                  " does not extend lb " + lb.shape_str());
    }
  }
}

void ConcreteBounds::validate(const std::string& context) const {
  if (!lo.same_shape(hi)) {
    throw std::invalid_argument(context + ": lo/hi shape mismatch");
  }
  for (std::size_t i = 0; i < lo.numel(); ++i) {
    if (lo[i] > hi[i]) {
      throw std::invalid_argument(context + ": lo > hi at neuron " + std::to_string(i));
    }
  }
}

double row_norm(std::span<const double> row, Norm q) {
  switch (q) {
    case Norm::L1: {
      double s = 0.0;
      for (double v : row) s += std::fabs(v);
      return s;
    }
    case Norm::L2: {
      double s = 0.0;
      for (double v : row) s += v * v;
      return std::sqrt(s);
    }
    case Norm::LInf: {
      double m = 0.0;
      for (double v : row) m = std::max(m, std::fabs(v));
      return m;
    }
  }
  throw std::invalid_argument("row_norm: unknown norm");
}

LinearBounds input_bounds(const Tensor& x, const PerturbationSpec& spec) {
  if (x.numel() != spec.dim) {
    throw std::invalid_argument("input_bounds: input has " + std::to_string(x.numel()) +
                                " elements, spec.dim is " + std::to_string(spec.dim));
  }
  std::size_t n = x.numel();
  std::vector<std::size_t> wshape = x.shape();
  wshape.push_back(spec.dim);

  LinearBounds out;
  out.lb = x;
  out.ub = x;
  out.lw = Tensor::zeros(wshape);
  out.uw = Tensor::zeros(wshape);
  for (std::size_t i = 0; i < n; ++i) {
    out.lw[i * n + i] = 1.0;
    out.uw[i * n + i] = 1.0;
  }
  return out;
}

ConcreteBounds concretize(const LinearBounds& b, const PerturbationSpec& spec) {
  b.validate("concretize");
  std::size_t n = b.neuron_count();
  std::size_t d = b.pert_dim();
  Norm q = spec.dual_norm();

  ConcreteBounds out;
  out.lo = Tensor::zeros(b.lb.shape());
  out.hi = Tensor::zeros(b.ub.shape());
  const double* lw = b.lw.data();
  const double* uw = b.uw.data();
  for (std::size_t i = 0; i < n; ++i) {
    double ln = row_norm(std::span<const double>(lw + i * d, d), q);
    double un = row_norm(std::span<const double>(uw + i * d, d), q);
    out.lo[i] = b.lb[i] - spec.epsilon * ln;
    out.hi[i] = b.ub[i] + spec.epsilon * un;
  }
  return out;
}

bool check_robust(const ConcreteBounds& pred_bounds, std::size_t true_class, double margin) {
  std::size_t n = pred_bounds.lo.numel();
  if (true_class >= n) {
    throw std::out_of_range("check_robust: true_class " + std::to_string(true_class) +
                            " out of range for " + std::to_string(n) + " classes");
  }
  if (margin < 0.0) {
    throw std::invalid_argument("check_robust: margin must be >= 0");
  }
  double lo_t = pred_bounds.lo[true_class];
  for (std::size_t j = 0; j < n; ++j) {
    if (j == true_class) continue;
    if (!(lo_t > pred_bounds.hi[j] + margin)) return false;
  }
  return true;
}

}  // namespace faith
