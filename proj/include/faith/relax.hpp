#pragma once

#include <cstddef>
#include <functional>

#include "faith/bounds.hpp"
#include "faith/tensor.hpp"

namespace faith::relax {

// Per-neuron sound linear envelope of an elementwise function f on the
// neuron's concretized interval [lo, hi]:
//   a_low * x + b_low  <=  f(x)  <=  a_up * x + b_up    for all x in [lo, hi]
struct ElementwiseLinearRelaxation {
  Tensor a_low;
  Tensor b_low;
  Tensor a_up;
  Tensor b_up;
};

// Per-element sound planes for z = x * y over the box [lx,ux] x [ly,uy]:
//   lo_x * x + lo_y * y + lo_c  <=  z  <=  up_x * x + up_y * y + up_c
struct BilinearRelaxation {
  Tensor lo_x, lo_y, lo_c;
  Tensor up_x, up_y, up_c;
};

// A producer turns concretized intervals into per-neuron envelope lines.
// Custom elementwise operators plug in through this signature alone.
using RelaxationProducer = std::function<ElementwiseLinearRelaxation(const ConcreteBounds&)>;

// ---------------------------------------------------------------------------
// Exact forward evaluation (oracle path, no bounds involved)
// ---------------------------------------------------------------------------

Tensor forward_relu(const Tensor& x);
Tensor forward_tanh(const Tensor& x);
Tensor forward_silu(const Tensor& x);
Tensor forward_exp(const Tensor& x);
Tensor forward_recip(const Tensor& x);
// y = x . W + bias, contracting the last axis of x with the first of W.
Tensor forward_matmul(const Tensor& x, const Tensor& w, const Tensor* bias = nullptr);
// Pairwise similarity y[.., i, j] = sum_d a[.., i, d] * b[.., j, d].
Tensor forward_pairwise_dot(const Tensor& a, const Tensor& b);
Tensor forward_softmax(const Tensor& x, std::size_t axis);

double silu_scalar(double x);
double silu_derivative(double x);

// ---------------------------------------------------------------------------
// Bound propagation rules
// ---------------------------------------------------------------------------

// Verified affine layer y = x . W (+ bias). Bound computation splits on the
// sign of each weight: positive weights pass the same-side bound through,
// negative weights swap sides. Internally W_pos = max(W, 0) and
// W_neg = min(W, 0), accumulated separately, so W_pos + W_neg = W and the
// result is bit-identical to materializing the split matrices.
LinearBounds propagate_affine(const LinearBounds& x, const Tensor& w,
                              const Tensor* bias = nullptr);

ElementwiseLinearRelaxation relax_relu(const ConcreteBounds& c);
ElementwiseLinearRelaxation relax_tanh(const ConcreteBounds& c);
ElementwiseLinearRelaxation relax_exp(const ConcreteBounds& c);
ElementwiseLinearRelaxation relax_recip(const ConcreteBounds& c);
ElementwiseLinearRelaxation relax_silu(const ConcreteBounds& c);

// Applies per-neuron envelope lines to linear bounds. Realizes
// y = f(l,u) * x + g(l,u): a non-negative slope keeps the side, a negative
// slope swaps lower and upper forms (mirroring the affine sign rule
// per element).
LinearBounds compose_elementwise(const LinearBounds& x, const ElementwiseLinearRelaxation& r);

// McCormick planes for z = x * y on per-element boxes:
//   z >= ly*x + lx*y - lx*ly        z <= uy*x + lx*y - lx*uy
BilinearRelaxation relax_bilinear(const ConcreteBounds& cx, const ConcreteBounds& cy);

// Contraction layouts for verified dot products.
//   PairwiseSimilarity: y[b,h,i,j] = sum_d q[b,i,(h,d)] * k[b,j,(h,d)]
//   WeightedValues:     y[b,i,(h,d)] = sum_j s[b,h,i,j] * v[b,j,(h,d)]
// Head slices address the feature axis of shape heads*head_dim.
enum class DotLayout { PairwiseSimilarity, WeightedValues };

// Verified dot product with both operands perturbed. Boxes are concretized
// internally; each product term is bounded by its McCormick planes, whose x/y
// coefficients are composed sign-awarely with the operands' linear forms and
// summed over the contraction axis.
LinearBounds propagate_dot_product(const LinearBounds& a, const LinearBounds& b,
                                   const PerturbationSpec& spec, DotLayout layout,
                                   std::size_t num_heads = 1);

// Elementwise sum of two bound tensors over the same neuron shape.
LinearBounds propagate_add(const LinearBounds& a, const LinearBounds& b);

// Exact scaling by a scalar (sign-aware).
LinearBounds propagate_scale(const LinearBounds& x, double s);

// Sum-reduction along `axis` of the neuron shape (affine with all-ones
// weights). The reduced axis keeps extent 1.
LinearBounds propagate_sum_axis(const LinearBounds& x, std::size_t axis);

// Per-element product x[..., j, ...] * r[..., 0, ...] where r broadcasts
// along `axis`; bounded by McCormick planes.
LinearBounds propagate_mul_broadcast(const LinearBounds& x, const LinearBounds& r,
                                     std::size_t axis, const PerturbationSpec& spec);

// Verified softmax along `axis`, decomposed as exp -> sum -> reciprocal ->
// bilinear multiply. Throws if the concretized sum's lower bound is not
// positive (reciprocal domain).
LinearBounds propagate_softmax(const LinearBounds& x, std::size_t axis,
                               const PerturbationSpec& spec);

// Tangent-point residual of the last mixed-interval tanh search; exposed for
// the convergence check.
double tanh_tangent_residual(double anchor, double tangent_point);

}  // namespace faith::relax
