#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "faith/relax.hpp"
#include "helpers.hpp"

using namespace faith;
using namespace faith::testing;
namespace rx = faith::relax;

namespace {

ConcreteBounds interval(double lo, double hi) {
  ConcreteBounds c;
  c.lo = Tensor({1}, {lo});
  c.hi = Tensor({1}, {hi});
  return c;
}

// Random intervals weighted toward the interesting cases (mixed sign, tight,
// degenerate).
ConcreteBounds random_interval(Rng& rng) {
  double a = rng.uniform(-4.0, 4.0);
  double w = rng.uniform() < 0.1 ? 0.0 : rng.uniform(0.0, 5.0);
  return interval(a, a + w);
}

}  // namespace

TEST_CASE("forward: elementwise operators and the dot-product similarity") {
  Tensor r = rx::forward_relu(Tensor({2}, {-1.0, 2.0}));
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 2.0);
  CHECK(rx::forward_tanh(Tensor({1}, {0.0}))[0] == 0.0);

  // Q = K = identity rows: the pairwise similarity is the Gram matrix = I.
  Tensor eye({1, 3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor gram = rx::forward_pairwise_dot(eye, eye);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(gram.at({0, i, j}) == (i == j ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("propagate_affine: corner example and degenerate sign split") {
  // Interval inputs lb=[0,0], ub=[1,1]; y = 2*x0 - 3*x1.
  LinearBounds x;
  x.lb = Tensor({2}, {0.0, 0.0});
  x.ub = Tensor({2}, {1.0, 1.0});
  x.lw = Tensor::zeros({2, 1});
  x.uw = Tensor::zeros({2, 1});
  Tensor w({2, 1}, {2.0, -3.0});
  LinearBounds y = rx::propagate_affine(x, w);
  CHECK(y.ub[0] == 2.0);   // corner (1, 0)
  CHECK(y.lb[0] == -3.0);  // corner (0, 1)

  // All-non-negative weights: upper uses only ub, lower only lb.
  Tensor wpos({2, 1}, {0.5, 1.5});
  LinearBounds y2 = rx::propagate_affine(x, wpos);
  CHECK(y2.ub[0] == 2.0);
  CHECK(y2.lb[0] == 0.0);
}

TEST_CASE("propagate_affine: W_pos + W_neg reconstructs W exactly") {
  Rng rng(5);
  Tensor w = random_tensor(rng, {6, 4}, 2.0);
  for (std::size_t i = 0; i < w.numel(); ++i) {
    double wp = std::max(w[i], 0.0);
    double wn = std::min(w[i], 0.0);
    CHECK(wp + wn == w[i]);
  }
}

TEST_CASE("propagate_affine: bit-for-bit against the four-multiplication oracle") {
  Rng rng(23);
  for (int rep = 0; rep < 10; ++rep) {
    std::size_t c = 1 + rng.uniform_index(12);
    std::size_t o = 1 + rng.uniform_index(12);
    std::size_t d = 1 + rng.uniform_index(8);
    std::size_t rows = 1 + rng.uniform_index(4);
    LinearBounds x = random_consistent_bounds(rng, {rows, c}, d);
    x.uw = random_tensor(rng, {rows, c, d}, 1.0);  // decouple the weight rows
    Tensor w = random_tensor(rng, {c, o}, 1.5);
    Tensor bias = random_tensor(rng, {o}, 0.5);

    LinearBounds got = rx::propagate_affine(x, w, &bias);
    LinearBounds want = affine_four_mul_oracle(x, w, &bias);
    CHECK(std::memcmp(got.lb.data(), want.lb.data(), got.lb.numel() * sizeof(double)) == 0);
    CHECK(std::memcmp(got.ub.data(), want.ub.data(), got.ub.numel() * sizeof(double)) == 0);
    CHECK(std::memcmp(got.lw.data(), want.lw.data(), got.lw.numel() * sizeof(double)) == 0);
    CHECK(std::memcmp(got.uw.data(), want.uw.data(), got.uw.numel() * sizeof(double)) == 0);
  }

  CHECK_THROWS_AS(
      rx::propagate_affine(random_consistent_bounds(rng, {2, 3}, 2), Tensor::zeros({4, 2})),
      std::invalid_argument);
}

TEST_CASE("relax_relu: region cases") {
  auto r1 = rx::relax_relu(interval(2.0, 3.0));
  CHECK(r1.a_low[0] == 1.0);
  CHECK(r1.a_up[0] == 1.0);
  CHECK(r1.b_low[0] == 0.0);
  CHECK(r1.b_up[0] == 0.0);

  auto r2 = rx::relax_relu(interval(-3.0, -1.0));
  CHECK(r2.a_low[0] == 0.0);
  CHECK(r2.a_up[0] == 0.0);
  CHECK(r2.b_up[0] == 0.0);

  auto r3 = rx::relax_relu(interval(-1.0, 1.0));
  CHECK(r3.a_up[0] == doctest::Approx(0.5));
  CHECK(r3.b_up[0] == doctest::Approx(0.5));
  CHECK(r3.a_low[0] == 1.0);  // |lo| == |hi| tie selects the identity line
  CHECK(r3.b_low[0] == 0.0);

  auto r4 = rx::relax_relu(interval(-2.0, 1.0));
  CHECK(r4.a_low[0] == 0.0);  // |lo| > |hi| selects the zero line
}

TEST_CASE("relax_tanh: point, concave chord, and odd symmetry") {
  auto point = rx::relax_tanh(interval(0.0, 0.0));
  CHECK(point.a_low[0] == doctest::Approx(1.0));
  CHECK(point.b_low[0] == doctest::Approx(0.0));
  CHECK(point.a_up[0] == doctest::Approx(1.0));
  CHECK(point.b_up[0] == doctest::Approx(0.0));

  auto concave = rx::relax_tanh(interval(1.0, 2.0));
  double slope = (std::tanh(2.0) - std::tanh(1.0)) / 1.0;
  CHECK(concave.a_low[0] == doctest::Approx(slope).epsilon(1e-12));
  CHECK(concave.b_low[0] == doctest::Approx(std::tanh(1.0) - slope).epsilon(1e-12));

  auto sym = rx::relax_tanh(interval(-2.0, 2.0));
  CHECK(sym.a_low[0] == doctest::Approx(sym.a_up[0]).epsilon(1e-12));
  CHECK(sym.b_low[0] == doctest::Approx(-sym.b_up[0]).epsilon(1e-12));
}

TEST_CASE("relax_tanh: tangent search residual below 1e-6") {
  for (auto [lo, hi] : std::vector<std::pair<double, double>>{
           {-2.0, 2.0}, {-1.0, 3.0}, {-0.5, 0.7}, {-3.0, 2.5}}) {
    auto r = rx::relax_tanh(interval(lo, hi));
    double a = r.a_up[0];
    // Tangent case: the line passes through (lo, tanh lo); recover the point.
    if (std::fabs(a * lo + r.b_up[0] - std::tanh(lo)) < 1e-9 && a < 1.0) {
      double d = std::atanh(std::sqrt(1.0 - a));
      CHECK(std::fabs(rx::tanh_tangent_residual(lo, d)) < 1e-6);
    }
  }
}

TEST_CASE("relax_exp and relax_recip: stated lines") {
  auto e0 = rx::relax_exp(interval(0.0, 0.0));
  CHECK(e0.a_low[0] == doctest::Approx(1.0));
  CHECK(e0.b_low[0] == doctest::Approx(1.0));  // y = x + 1
  CHECK(e0.a_up[0] == doctest::Approx(1.0));

  auto e1 = rx::relax_exp(interval(0.0, 1.0));
  CHECK(e1.a_up[0] == doctest::Approx(std::exp(1.0) - 1.0).epsilon(1e-12));
  CHECK(e1.b_up[0] == doctest::Approx(1.0).epsilon(1e-12));

  auto r = rx::relax_recip(interval(1.0, 2.0));
  CHECK(r.a_up[0] == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(r.b_up[0] == doctest::Approx(1.5).epsilon(1e-12));

  CHECK_THROWS_AS(rx::relax_recip(interval(-1.0, 2.0)), std::domain_error);
  CHECK_THROWS_AS(rx::relax_recip(interval(0.0, 2.0)), std::domain_error);
}

TEST_CASE("grid soundness: relu, tanh, exp, recip and silu envelopes") {
  Rng rng(31);
  auto relu = [](double v) { return v > 0.0 ? v : 0.0; };
  auto tanh_f = [](double v) { return std::tanh(v); };
  auto exp_f = [](double v) { return std::exp(v); };
  auto recip_f = [](double v) { return 1.0 / v; };
  auto silu_f = [](double v) { return rx::silu_scalar(v); };

  for (int rep = 0; rep < 1000; ++rep) {
    ConcreteBounds c = random_interval(rng);
    double lo = c.lo[0], hi = c.hi[0];
    auto rr = rx::relax_relu(c);
    CHECK(envelope_violation(relu, lo, hi, rr.a_low[0], rr.b_low[0], rr.a_up[0], rr.b_up[0]) <=
          1e-9);
    auto rt = rx::relax_tanh(c);
    CHECK(envelope_violation(tanh_f, lo, hi, rt.a_low[0], rt.b_low[0], rt.a_up[0], rt.b_up[0]) <=
          1e-9);
    auto re = rx::relax_exp(c);
    CHECK(envelope_violation(exp_f, lo, hi, re.a_low[0], re.b_low[0], re.a_up[0], re.b_up[0]) <=
          1e-9);
    auto rs = rx::relax_silu(c);
    CHECK(envelope_violation(silu_f, lo, hi, rs.a_low[0], rs.b_low[0], rs.a_up[0], rs.b_up[0]) <=
          1e-9);

    ConcreteBounds pos = interval(0.05 + std::fabs(lo), 0.05 + std::fabs(lo) + (hi - lo));
    auto rc = rx::relax_recip(pos);
    CHECK(envelope_violation(recip_f, pos.lo[0], pos.hi[0], rc.a_low[0], rc.b_low[0], rc.a_up[0],
                             rc.b_up[0]) <= 1e-9);
  }
}

TEST_CASE("compose_elementwise: identity, interval rescale and sign swap") {
  Rng rng(37);
  LinearBounds x = random_consistent_bounds(rng, {4}, 3);

  rx::ElementwiseLinearRelaxation idr;
  idr.a_low = Tensor::full({4}, 1.0);
  idr.b_low = Tensor::zeros({4});
  idr.a_up = Tensor::full({4}, 1.0);
  idr.b_up = Tensor::zeros({4});
  LinearBounds y = rx::compose_elementwise(x, idr);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(y.lb[i] == x.lb[i]);
    CHECK(y.ub[i] == x.ub[i]);
  }

  // a_up = 0.5, b_up = 0.5 on the interval [-1, 1] with zero weights.
  LinearBounds iv;
  iv.lb = Tensor({1}, {-1.0});
  iv.ub = Tensor({1}, {1.0});
  iv.lw = Tensor::zeros({1, 2});
  iv.uw = Tensor::zeros({1, 2});
  rx::ElementwiseLinearRelaxation half;
  half.a_low = Tensor({1}, {1.0});
  half.b_low = Tensor::zeros({1});
  half.a_up = Tensor({1}, {0.5});
  half.b_up = Tensor({1}, {0.5});
  LinearBounds hv = rx::compose_elementwise(iv, half);
  CHECK(hv.ub[0] == doctest::Approx(1.0));

  // Negative upper slope swaps to the lower form.
  LinearBounds xs = random_consistent_bounds(rng, {2}, 3);
  xs.uw = random_tensor(rng, {2, 3}, 1.0);
  rx::ElementwiseLinearRelaxation neg;
  neg.a_low = Tensor::zeros({2});
  neg.b_low = Tensor::zeros({2});
  neg.a_up = Tensor::full({2}, -0.5);
  neg.b_up = Tensor::zeros({2});
  LinearBounds ys = rx::compose_elementwise(xs, neg);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(ys.uw[i * 3 + k] == -0.5 * xs.lw[i * 3 + k]);
    }
  }
}

TEST_CASE("relax_bilinear: McCormick planes on the stated boxes") {
  // Zero-width boxes collapse to the exact product.
  auto planes0 = rx::relax_bilinear(interval(0.7, 0.7), interval(-1.2, -1.2));
  double z = 0.7 * -1.2;
  CHECK(planes0.lo_x[0] * 0.7 + planes0.lo_y[0] * -1.2 + planes0.lo_c[0] ==
        doctest::Approx(z).epsilon(1e-12));
  CHECK(planes0.up_x[0] * 0.7 + planes0.up_y[0] * -1.2 + planes0.up_c[0] ==
        doctest::Approx(z).epsilon(1e-12));

  // Unit box: lower plane z >= 0, upper plane z <= x.
  auto unit = rx::relax_bilinear(interval(0.0, 1.0), interval(0.0, 1.0));
  CHECK(unit.lo_x[0] == 0.0);
  CHECK(unit.lo_y[0] == 0.0);
  CHECK(unit.lo_c[0] == 0.0);
  CHECK(unit.up_x[0] == 1.0);
  CHECK(unit.up_y[0] == 0.0);
  CHECK(unit.up_c[0] == 0.0);

  // Plane soundness on a 32x32 grid over random boxes.
  Rng rng(41);
  for (int rep = 0; rep < 200; ++rep) {
    double lx = rng.uniform(-2, 2), ux = lx + rng.uniform(0, 2);
    double ly = rng.uniform(-2, 2), uy = ly + rng.uniform(0, 2);
    auto p = rx::relax_bilinear(interval(lx, ux), interval(ly, uy));
    for (int i = 0; i <= 32; ++i) {
      for (int j = 0; j <= 32; ++j) {
        double x = lx + (ux - lx) * i / 32.0;
        double y = ly + (uy - ly) * j / 32.0;
        double prod = x * y;
        CHECK(p.lo_x[0] * x + p.lo_y[0] * y + p.lo_c[0] <= prod + 1e-9);
        CHECK(p.up_x[0] * x + p.up_y[0] * y + p.up_c[0] >= prod - 1e-9);
      }
    }
  }
}

TEST_CASE("propagate_dot_product: zero-width collapse and sampled soundness") {
  Rng rng(43);
  std::size_t len = 3, e = 4, dpert = len * e;
  PerturbationSpec spec(Norm::LInf, 0.05, dpert);

  // Exact collapse: point bounds with zero weights reproduce the dot product.
  Tensor qv = random_tensor(rng, {1, len, e}, 1.0);
  Tensor kv = random_tensor(rng, {1, len, e}, 1.0);
  auto point_bounds = [&](const Tensor& t) {
    LinearBounds b;
    b.lb = t;
    b.ub = t;
    std::vector<std::size_t> ws = t.shape();
    ws.push_back(dpert);
    b.lw = Tensor::zeros(ws);
    b.uw = Tensor::zeros(ws);
    return b;
  };
  LinearBounds exact = rx::propagate_dot_product(point_bounds(qv), point_bounds(kv), spec,
                                                 rx::DotLayout::PairwiseSimilarity, 1);
  Tensor gram = rx::forward_pairwise_dot(qv, kv);
  for (std::size_t i = 0; i < gram.numel(); ++i) {
    CHECK(exact.lb[i] == doctest::Approx(gram[i]).epsilon(1e-12));
    CHECK(exact.ub[i] == doctest::Approx(gram[i]).epsilon(1e-12));
  }

  // Monte-Carlo soundness through perturbed affine projections.
  Tensor x0 = random_tensor(rng, {1, len, e}, 0.5);
  Tensor wq = random_tensor(rng, {e, e}, 0.4);
  Tensor wk = random_tensor(rng, {e, e}, 0.4);
  LinearBounds xin = input_bounds(x0, spec);
  LinearBounds xr;  // reshape the flat input bounds to [1, len, e]
  xr.lb = Tensor({1, len, e}, std::vector<double>(x0.data(), x0.data() + x0.numel()));
  xr.ub = xr.lb;
  xr.lw = Tensor({1, len, e, dpert},
                 std::vector<double>(xin.lw.data(), xin.lw.data() + xin.lw.numel()));
  xr.uw = xr.lw;
  LinearBounds q = rx::propagate_affine(xr, wq);
  LinearBounds k = rx::propagate_affine(xr, wk);
  LinearBounds scores =
      rx::propagate_dot_product(q, k, spec, rx::DotLayout::PairwiseSimilarity, 2);
  ConcreteBounds cs = concretize(scores, spec);

  for (int s = 0; s < 10000; ++s) {
    auto delta = sample_in_ball(rng, spec.p, spec.epsilon, spec.dim);
    Tensor xp = x0;
    for (std::size_t i = 0; i < xp.numel(); ++i) xp[i] += delta[i];
    Tensor qp = rx::forward_matmul(xp, wq);
    Tensor kp = rx::forward_matmul(xp, wk);
    // per-head Gram entries (2 heads of width e/2)
    std::size_t hd = e / 2;
    std::size_t idx = 0;
    for (std::size_t h = 0; h < 2; ++h) {
      for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t j = 0; j < len; ++j, ++idx) {
          double acc = 0.0;
          for (std::size_t dd = 0; dd < hd; ++dd) {
            acc += qp[i * e + h * hd + dd] * kp[j * e + h * hd + dd];
          }
          CHECK(acc >= cs.lo[idx] - 1e-7);
          CHECK(acc <= cs.hi[idx] + 1e-7);
        }
      }
    }
  }
}

TEST_CASE("propagate_softmax: exactness at zero radius and sampled soundness") {
  Rng rng(47);
  std::size_t n = 4, dpert = n;
  // Uniform logits at zero radius: all probabilities 1/4.
  {
    PerturbationSpec spec(Norm::LInf, 0.0, dpert);
    LinearBounds x = input_bounds(Tensor::full({n}, 0.3), spec);
    LinearBounds y = rx::propagate_softmax(x, 0, spec);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(y.lb[i] == doctest::Approx(0.25).epsilon(1e-6));
      CHECK(y.ub[i] == doctest::Approx(0.25).epsilon(1e-6));
    }
  }
  // Random logits at zero radius match the exact softmax within 1e-6.
  {
    PerturbationSpec spec(Norm::L2, 0.0, dpert);
    Tensor logits = random_tensor(rng, {n}, 2.0);
    LinearBounds x = input_bounds(logits, spec);
    LinearBounds y = rx::propagate_softmax(x, 0, spec);
    Tensor want = rx::forward_softmax(logits, 0);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(y.lb[i] == doctest::Approx(want[i]).epsilon(1e-6));
      CHECK(y.ub[i] == doctest::Approx(want[i]).epsilon(1e-6));
    }
  }
  // Monte-Carlo soundness on a perturbed 3-logit input.
  {
    std::size_t m = 3;
    PerturbationSpec spec(Norm::LInf, 0.05, m);
    Tensor logits = random_tensor(rng, {m}, 1.0);
    LinearBounds x = input_bounds(logits, spec);
    LinearBounds y = rx::propagate_softmax(x, 0, spec);
    ConcreteBounds c = concretize(y, spec);
    for (int s = 0; s < 10000; ++s) {
      auto delta = sample_in_ball(rng, spec.p, spec.epsilon, m);
      Tensor lp = logits;
      for (std::size_t i = 0; i < m; ++i) lp[i] += delta[i];
      Tensor probs = rx::forward_softmax(lp, 0);
      for (std::size_t i = 0; i < m; ++i) {
        CHECK(probs[i] >= c.lo[i] - 1e-7);
        CHECK(probs[i] <= c.hi[i] + 1e-7);
      }
    }
  }
}

TEST_CASE("end-to-end soundness: affine / activation chains under sampling") {
  Rng rng(53);
  for (Norm p : {Norm::LInf, Norm::L2}) {
    std::size_t in = 6, hid = 5, out = 3;
    PerturbationSpec spec(p, 0.08, in);
    Tensor x0 = random_tensor(rng, {in}, 0.8);
    Tensor w1 = random_tensor(rng, {in, hid}, 0.8);
    Tensor b1 = random_tensor(rng, {hid}, 0.3);
    Tensor w2 = random_tensor(rng, {hid, out}, 0.8);

    LinearBounds b = input_bounds(x0, spec);
    LinearBounds h = rx::propagate_affine(b, w1, &b1);
    LinearBounds a = rx::compose_elementwise(h, rx::relax_relu(concretize(h, spec)));
    LinearBounds t = rx::compose_elementwise(a, rx::relax_tanh(concretize(a, spec)));
    LinearBounds y = rx::propagate_affine(t, w2);
    ConcreteBounds c = concretize(y, spec);

    for (int s = 0; s < 2000; ++s) {
      auto delta = sample_in_ball(rng, p, spec.epsilon, in);
      Tensor xp = x0;
      for (std::size_t i = 0; i < in; ++i) xp[i] += delta[i];
      Tensor hp = rx::forward_matmul(xp, w1, &b1);
      Tensor ap = rx::forward_relu(hp);
      Tensor tp = rx::forward_tanh(ap);
      Tensor yp = rx::forward_matmul(tp, w2);
      for (std::size_t i = 0; i < out; ++i) {
        CHECK(yp[i] >= c.lo[i] - 1e-7);
        CHECK(yp[i] <= c.hi[i] + 1e-7);
      }
    }
  }
}

// Generality check: a SiLU verifier needs nothing beyond a new envelope
// producer; compose_elementwise and the concretization machinery are reused
// unchanged through their public interfaces.
namespace {

rx::ElementwiseLinearRelaxation silu_producer_local(const ConcreteBounds& c) {
  std::size_t n = c.lo.numel();
  rx::ElementwiseLinearRelaxation r;
  r.a_low = Tensor::zeros(c.lo.shape());
  r.b_low = Tensor::zeros(c.lo.shape());
  r.a_up = Tensor::zeros(c.lo.shape());
  r.b_up = Tensor::zeros(c.lo.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double lo = c.lo[i], hi = c.hi[i];
    if (lo == hi) {
      double a = rx::silu_derivative(lo);
      r.a_low[i] = r.a_up[i] = a;
      r.b_low[i] = r.b_up[i] = rx::silu_scalar(lo) - a * lo;
      continue;
    }
    double s = (rx::silu_scalar(hi) - rx::silu_scalar(lo)) / (hi - lo);
    double gmin = HUGE_VAL, gmax = -HUGE_VAL;
    const int grid = 512;
    for (int k = 0; k <= grid; ++k) {
      double x = lo + (hi - lo) * k / grid;
      double g = rx::silu_scalar(x) - s * x;
      gmin = std::min(gmin, g);
      gmax = std::max(gmax, g);
    }
    double margin = 0.6 * (hi - lo) / grid * (hi - lo) / grid / 8.0 + 1e-12;
    r.a_low[i] = s;
    r.a_up[i] = s;
    r.b_low[i] = gmin - margin;
    r.b_up[i] = gmax + margin;
  }
  return r;
}

}  // namespace

TEST_CASE("generality: SiLU added through the public relaxation interface only") {
  Rng rng(59);
  std::size_t in = 5;
  PerturbationSpec spec(Norm::LInf, 0.06, in);
  Tensor x0 = random_tensor(rng, {in}, 0.8);
  Tensor w = random_tensor(rng, {in, in}, 0.8);

  LinearBounds b = input_bounds(x0, spec);
  LinearBounds h = rx::propagate_affine(b, w);
  LinearBounds y = rx::compose_elementwise(h, silu_producer_local(concretize(h, spec)));
  ConcreteBounds c = concretize(y, spec);

  for (int s = 0; s < 4000; ++s) {
    auto delta = sample_in_ball(rng, spec.p, spec.epsilon, in);
    Tensor xp = x0;
    for (std::size_t i = 0; i < in; ++i) xp[i] += delta[i];
    Tensor hp = rx::forward_matmul(xp, w);
    Tensor sp = rx::forward_silu(hp);
    for (std::size_t i = 0; i < in; ++i) {
      CHECK(sp[i] >= c.lo[i] - 1e-7);
      CHECK(sp[i] <= c.hi[i] + 1e-7);
    }
  }
}

TEST_CASE("relax_tanh: all envelope slopes stay non-negative") {
  Rng rng(61);
  for (int rep = 0; rep < 500; ++rep) {
    ConcreteBounds c = random_interval(rng);
    auto r = rx::relax_tanh(c);
    CHECK(r.a_low[0] >= 0.0);
    CHECK(r.a_up[0] >= 0.0);
  }
}

TEST_CASE("propagate_softmax: normalizer stays in the reciprocal domain; overflow refuses") {
  std::size_t n = 4;
  // Wide but representable: the guarded exponential lower envelope keeps the
  // summed normalizer's lower bound positive, so the decomposition returns
  // (loose) bounds instead of tripping the reciprocal's domain check.
  PerturbationSpec wide(Norm::LInf, 400.0, n);
  LinearBounds x = input_bounds(Tensor::zeros({n}), wide);
  LinearBounds y = rx::propagate_softmax(x, 0, wide);
  for (std::size_t i = 0; i < n; ++i) CHECK(y.lb[i] <= y.ub[i]);

  // Past double range the envelope overflows and the operator refuses.
  PerturbationSpec huge(Norm::LInf, 800.0, n);
  LinearBounds x2 = input_bounds(Tensor::zeros({n}), huge);
  CHECK_THROWS_AS(rx::propagate_softmax(x2, 0, huge), std::domain_error);
}
