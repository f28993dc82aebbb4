#pragma once

#include <cstddef>
#include <span>
#include <string>

#include "faith/tensor.hpp"

namespace faith {

// Norm order of the perturbation ball.
enum class Norm { L1, L2, LInf };

Norm dual(Norm p);
std::string norm_name(Norm p);
Norm norm_from_name(const std::string& name);

// epsilon-ball definition: all x' with ||x' - x||_p <= epsilon, where the
// perturbation vector delta = x' - x lives in R^dim.
struct PerturbationSpec {
  Norm p = Norm::LInf;
  double epsilon = 0.0;
  std::size_t dim = 1;

  PerturbationSpec() = default;
  PerturbationSpec(Norm p_, double epsilon_, std::size_t dim_);

  Norm dual_norm() const { return dual(p); }
};

// Per-neuron linear bounds over the perturbation vector:
//   lb[i] + lw[i] . delta  <=  value_i  <=  ub[i] + uw[i] . delta
// lw/uw have the neuron shape plus a trailing axis of extent dim.
struct LinearBounds {
  Tensor lw;  // [*neuron_shape, dim]
  Tensor lb;  // [*neuron_shape]
  Tensor uw;
  Tensor ub;

  std::size_t neuron_count() const { return lb.numel(); }
  std::size_t pert_dim() const { return lw.rank() == 0 ? 0 : lw.shape().back(); }
  const std::vector<std::size_t>& neuron_shape() const { return lb.shape(); }

  void validate(const std::string& context) const;
};

// Scalar interval per neuron (X_l, X_u).
struct ConcreteBounds {
  Tensor lo;
  Tensor hi;

  void validate(const std::string& context) const;
};

// Vector norm of a coefficient row, used with the dual order q = dual(p).
double row_norm(std::span<const double> row, Norm q);

// Bounds for the input layer: lb = ub = x, lw = uw = identity rows (one-hot
// at the neuron's own index).
LinearBounds input_bounds(const Tensor& x, const PerturbationSpec& spec);

// Collapses linear bounds to scalar intervals over the epsilon-ball:
//   lo[i] = lb[i] - eps * ||lw[i]||_q,  hi[i] = ub[i] + eps * ||uw[i]||_q
// with q the dual of the perturbation norm. This is the tightest interval
// consistent with the linear forms.
ConcreteBounds concretize(const LinearBounds& b, const PerturbationSpec& spec);

// True iff lo[true_class] > hi[j] + margin for every other class j.
bool check_robust(const ConcreteBounds& pred_bounds, std::size_t true_class, double margin);

}  // namespace faith
