#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "faith/graph.hpp"
#include "faith/relax.hpp"
#include "helpers.hpp"

using namespace faith;
using namespace faith::testing;
namespace gr = faith::graph;
namespace rx = faith::relax;

namespace {

// Baseline split-form affine verification subgraph; returns the combine node.
std::size_t add_split_affine(gr::VerGraph& g, std::size_t x, const Tensor& w, const Tensor* bias,
                             std::vector<std::size_t> out_shape) {
  std::size_t wn = g.add_weight(w);
  std::size_t split = g.add_node(gr::NodeKind::SplitSigns, {}, {wn}, w.shape());
  gr::NodeAttrs pos;
  pos.sign = gr::SignHalf::Positive;
  std::size_t mp = g.add_node(gr::NodeKind::MatmulPair, pos, {x, split}, out_shape);
  gr::NodeAttrs neg;
  neg.sign = gr::SignHalf::Negative;
  std::size_t mn = g.add_node(gr::NodeKind::MatmulPair, neg, {x, split}, out_shape);
  std::vector<std::size_t> ins = {mp, mn};
  if (bias) ins.push_back(g.add_weight(*bias));
  return g.add_node(gr::NodeKind::CombineHalves, {}, ins, out_shape);
}

// Per-side affine verification subgraph; returns the merge node.
std::size_t add_per_side_affine(gr::VerGraph& g, std::size_t x, const Tensor& w,
                                const Tensor* bias, std::vector<std::size_t> out_shape) {
  std::size_t wn = g.add_weight(w);
  std::vector<std::size_t> ins = {x, wn};
  if (bias) ins.push_back(g.add_weight(*bias));
  gr::NodeAttrs lo;
  lo.side = gr::BoundSide::Lower;
  std::size_t nl = g.add_node(gr::NodeKind::AffineBound, lo, ins, out_shape);
  gr::NodeAttrs up;
  up.side = gr::BoundSide::Upper;
  std::size_t nu = g.add_node(gr::NodeKind::AffineBound, up, ins, out_shape);
  return g.add_node(gr::NodeKind::MergeSides, {}, {nl, nu}, out_shape);
}

std::size_t count_kind(const gr::VerGraph& g, gr::NodeKind k) {
  std::size_t n = 0;
  for (const auto& node : g.nodes()) {
    if (node.kind == k) ++n;
  }
  return n;
}

// A small random verification workload: chains of affine blocks (either
// decomposed form), activations, scales and residual adds, with an optional
// attention block (dot products + softmax).
gr::VerGraph random_workload(Rng& rng, std::size_t len, std::size_t e) {
  gr::VerGraph g;
  std::vector<std::size_t> shape = {1, len, e};
  std::size_t cur = g.add_input("x", shape);
  std::size_t ops = 2 + rng.uniform_index(4);
  for (std::size_t i = 0; i < ops; ++i) {
    switch (rng.uniform_index(6)) {
      case 0: {
        Tensor w = random_tensor(rng, {e, e}, 0.6 / std::sqrt(double(e)));
        Tensor b = random_tensor(rng, {e}, 0.05);
        cur = add_split_affine(g, cur, w, &b, shape);
        break;
      }
      case 1: {
        Tensor w = random_tensor(rng, {e, e}, 0.6 / std::sqrt(double(e)));
        cur = add_per_side_affine(g, cur, w, nullptr, shape);
        break;
      }
      case 2:
        cur = g.add_node(rng.uniform() < 0.5 ? gr::NodeKind::ReluVerify
                                             : gr::NodeKind::TanhVerify,
                         {}, {cur}, shape);
        break;
      case 3: {
        gr::NodeAttrs sc;
        sc.scale = rng.uniform(-1.2, 1.2);
        cur = g.add_node(gr::NodeKind::Scale, sc, {cur}, shape);
        break;
      }
      case 4: {
        // Residual: affine branch added back to the trunk (diamond pattern).
        Tensor w = random_tensor(rng, {e, e}, 0.5 / std::sqrt(double(e)));
        std::size_t branch = add_split_affine(g, cur, w, nullptr, shape);
        cur = g.add_node(gr::NodeKind::AddBounds, {}, {cur, branch}, shape);
        break;
      }
      case 5: {
        // Attention block with two heads.
        std::size_t heads = 2;
        Tensor wq = random_tensor(rng, {e, e}, 0.5 / std::sqrt(double(e)));
        Tensor wk = random_tensor(rng, {e, e}, 0.5 / std::sqrt(double(e)));
        Tensor wv = random_tensor(rng, {e, e}, 0.5 / std::sqrt(double(e)));
        std::size_t q = add_split_affine(g, cur, wq, nullptr, shape);
        std::size_t k = add_split_affine(g, cur, wk, nullptr, shape);
        std::size_t v = add_split_affine(g, cur, wv, nullptr, shape);
        gr::NodeAttrs dq;
        dq.layout = rx::DotLayout::PairwiseSimilarity;
        dq.heads = heads;
        std::size_t scores =
            g.add_node(gr::NodeKind::DotProduct, dq, {q, k}, {1, heads, len, len});
        gr::NodeAttrs sc;
        sc.scale = 1.0 / std::sqrt(double(e) / double(heads));
        std::size_t scaled =
            g.add_node(gr::NodeKind::Scale, sc, {scores}, {1, heads, len, len});
        gr::NodeAttrs sm;
        sm.axis = 3;
        std::size_t probs = g.add_node(gr::NodeKind::Softmax, sm, {scaled}, {1, heads, len, len});
        gr::NodeAttrs dv;
        dv.layout = rx::DotLayout::WeightedValues;
        dv.heads = heads;
        cur = g.add_node(gr::NodeKind::DotProduct, dv, {probs, v}, shape);
        break;
      }
    }
  }
  return g;
}

double max_bounds_diff(const LinearBounds& a, const LinearBounds& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.lb.numel(); ++i) {
    m = std::max(m, std::fabs(a.lb[i] - b.lb[i]));
    m = std::max(m, std::fabs(a.ub[i] - b.ub[i]));
  }
  for (std::size_t i = 0; i < a.lw.numel(); ++i) {
    m = std::max(m, std::fabs(a.lw[i] - b.lw[i]));
    m = std::max(m, std::fabs(a.uw[i] - b.uw[i]));
  }
  return m;
}

}  // namespace

TEST_CASE("categorize: the three operator classes") {
  gr::VerGraph g;
  std::size_t x = g.add_input("x", {1, 2, 4});
  std::size_t relu = g.add_node(gr::NodeKind::ReluVerify, {}, {x}, {1, 2, 4});
  std::size_t add = g.add_node(gr::NodeKind::AddBounds, {}, {x, relu}, {1, 2, 4});
  std::size_t wn = g.add_weight(Tensor::zeros({4, 4}));
  gr::NodeAttrs lo;
  lo.side = gr::BoundSide::Lower;
  std::size_t mm = g.add_node(gr::NodeKind::AffineBound, lo, {add, wn}, {1, 2, 4});

  CHECK(gr::categorize(g.node(relu)) == gr::OpCategory::INPUT_REDUCTION_COMPUTE);
  CHECK(gr::categorize(g.node(add)) == gr::OpCategory::STRICT_ELEMENTWISE);
  CHECK(gr::categorize(g.node(mm)) == gr::OpCategory::DENSE_COMPUTATION);
  CHECK_THROWS_AS(gr::categorize(g.node(x)), std::invalid_argument);

  gr::NodeAttrs sm;
  sm.axis = 2;
  std::size_t soft = g.add_node(gr::NodeKind::Softmax, sm, {mm}, {1, 2, 4});
  CHECK(gr::categorize(g.node(soft)) == gr::OpCategory::INPUT_REDUCTION_COMPUTE);
}

TEST_CASE("fuse_weight_pairing: pattern, no-op and dual-path equality") {
  Rng rng(61);
  Tensor w = random_tensor(rng, {4, 4}, 0.5);
  Tensor b = random_tensor(rng, {4}, 0.1);

  gr::VerGraph g;
  std::size_t x = g.add_input("x", {1, 2, 4});
  add_split_affine(g, x, w, &b, {1, 2, 4});
  CHECK(count_kind(g, gr::NodeKind::SplitSigns) == 1);

  gr::VerGraph fused = gr::fuse_weight_pairing(g);
  CHECK(count_kind(fused, gr::NodeKind::SplitSigns) == 0);
  CHECK(count_kind(fused, gr::NodeKind::MatmulPair) == 0);
  CHECK(count_kind(fused, gr::NodeKind::AffineVerify) == 1);

  // Absent pattern: identity transform.
  gr::VerGraph plain;
  std::size_t px = plain.add_input("x", {1, 2, 4});
  plain.add_node(gr::NodeKind::ReluVerify, {}, {px}, {1, 2, 4});
  CHECK(gr::fuse_weight_pairing(plain) == plain);

  // Numeric outputs unchanged.
  PerturbationSpec spec(Norm::LInf, 0.05, 8);
  Tensor xv = random_tensor(rng, {1, 2, 4}, 0.5);
  LinearBounds a = gr::evaluate(g, {{"x", xv}}, spec);
  LinearBounds c = gr::evaluate(fused, {{"x", xv}}, spec);
  CHECK(max_bounds_diff(a, c) <= 1e-12);
}

TEST_CASE("fuse_double_bound: pair fusion and dual-path equality") {
  Rng rng(67);
  Tensor w = random_tensor(rng, {4, 3}, 0.5);
  Tensor b = random_tensor(rng, {3}, 0.1);

  gr::VerGraph g;
  std::size_t x = g.add_input("x", {2, 4});
  add_per_side_affine(g, x, w, &b, {2, 3});
  CHECK(count_kind(g, gr::NodeKind::AffineBound) == 2);

  gr::VerGraph fused = gr::fuse_double_bound(g);
  CHECK(count_kind(fused, gr::NodeKind::AffineBound) == 0);
  CHECK(count_kind(fused, gr::NodeKind::AffineVerify) == 1);

  gr::VerGraph single;
  std::size_t sx = single.add_input("x", {2, 4});
  std::size_t wn = single.add_weight(w);
  single.add_node(gr::NodeKind::AffineVerify, {}, {sx, wn}, {2, 3});
  CHECK(gr::fuse_double_bound(single) == single);

  PerturbationSpec spec(Norm::L2, 0.1, 8);
  Tensor xv = random_tensor(rng, {2, 4}, 0.5);
  LinearBounds a = gr::evaluate(g, {{"x", xv}}, spec);
  LinearBounds c = gr::evaluate(fused, {{"x", xv}}, spec);
  CHECK(max_bounds_diff(a, c) <= 1e-12);
}

TEST_CASE("fuse_cross_layer: the stated pairing rules") {
  auto fused_together = [](gr::NodeKind first, gr::NodeKind second) {
    gr::VerGraph g;
    std::size_t x = g.add_input("x", {1, 2, 4});
    gr::NodeAttrs a1, a2;
    std::vector<std::size_t> in1 = {x};
    if (first == gr::NodeKind::AffineBound) {
      a1.side = gr::BoundSide::Lower;
      in1.push_back(g.add_weight(Tensor::zeros({4, 4})));
    }
    if (first == gr::NodeKind::Softmax) a1.axis = 2;
    std::size_t n1 = g.add_node(first, a1, in1, {1, 2, 4});
    std::vector<std::size_t> in2 = {n1};
    if (second == gr::NodeKind::AffineBound) {
      a2.side = gr::BoundSide::Lower;
      in2.push_back(g.add_weight(Tensor::zeros({4, 4})));
    }
    if (second == gr::NodeKind::Softmax) a2.axis = 2;
    std::size_t n2 = g.add_node(second, a2, in2, {1, 2, 4});
    gr::VerGraph out = gr::fuse_cross_layer(g);
    std::vector<std::size_t> g1, g2;
    for (const auto& group : out.fusion_groups()) {
      for (std::size_t id : group) {
        if (id == n1) g1 = group;
        if (id == n2) g2 = group;
      }
    }
    return g1 == g2;
  };

  // dense + strict-elementwise: fuse
  CHECK(fused_together(gr::NodeKind::AffineBound, gr::NodeKind::Scale));
  CHECK(fused_together(gr::NodeKind::AffineBound, gr::NodeKind::AddBounds));
  // dense + input-reduction-compute: never
  CHECK_FALSE(fused_together(gr::NodeKind::AffineBound, gr::NodeKind::ReluVerify));
  CHECK_FALSE(fused_together(gr::NodeKind::AffineBound, gr::NodeKind::Softmax));
  // input-reduction-compute + strict-elementwise: fuse
  CHECK(fused_together(gr::NodeKind::ReluVerify, gr::NodeKind::Scale));
  CHECK(fused_together(gr::NodeKind::TanhVerify, gr::NodeKind::Scale));
  // strict-elementwise chains: fuse
  CHECK(fused_together(gr::NodeKind::Scale, gr::NodeKind::Scale));
  // strict-elementwise followed by dense or reduction: no
  CHECK_FALSE(fused_together(gr::NodeKind::Scale, gr::NodeKind::AffineBound));
  CHECK_FALSE(fused_together(gr::NodeKind::Scale, gr::NodeKind::ReluVerify));
  CHECK_FALSE(fused_together(gr::NodeKind::Scale, gr::NodeKind::Softmax));
  // reduction + reduction and dense + dense: no
  CHECK_FALSE(fused_together(gr::NodeKind::ReluVerify, gr::NodeKind::TanhVerify));
  CHECK_FALSE(fused_together(gr::NodeKind::AffineBound, gr::NodeKind::AffineBound));
}

TEST_CASE("fuse_cross_layer: chain grouping and multi-consumer blocking") {
  // relu -> scale -> scale -> scale collapses into a single group.
  {
    gr::VerGraph g;
    std::size_t x = g.add_input("x", {1, 2, 4});
    std::size_t r = g.add_node(gr::NodeKind::ReluVerify, {}, {x}, {1, 2, 4});
    gr::NodeAttrs sc;
    sc.scale = 2.0;
    std::size_t s1 = g.add_node(gr::NodeKind::Scale, sc, {r}, {1, 2, 4});
    std::size_t s2 = g.add_node(gr::NodeKind::Scale, sc, {s1}, {1, 2, 4});
    std::size_t s3 = g.add_node(gr::NodeKind::Scale, sc, {s2}, {1, 2, 4});
    gr::VerGraph out = gr::fuse_cross_layer(g);
    CHECK(out.fusion_groups().size() == 1);
    CHECK(out.fusion_groups()[0] == std::vector<std::size_t>{r, s1, s2, s3});
  }
  // A multi-consumer output blocks fusion across both edges.
  {
    gr::VerGraph g;
    std::size_t x = g.add_input("x", {1, 2, 4});
    std::size_t r = g.add_node(gr::NodeKind::ReluVerify, {}, {x}, {1, 2, 4});
    gr::NodeAttrs sc;
    sc.scale = 0.5;
    std::size_t s1 = g.add_node(gr::NodeKind::Scale, sc, {r}, {1, 2, 4});
    std::size_t s2 = g.add_node(gr::NodeKind::Scale, sc, {r}, {1, 2, 4});
    std::size_t a = g.add_node(gr::NodeKind::AddBounds, {}, {s1, s2}, {1, 2, 4});
    gr::VerGraph out = gr::fuse_cross_layer(g);
    std::vector<std::size_t> group_of(out.nodes().size(), SIZE_MAX);
    for (std::size_t gi = 0; gi < out.fusion_groups().size(); ++gi) {
      for (std::size_t id : out.fusion_groups()[gi]) group_of[id] = gi;
    }
    CHECK(group_of[r] != group_of[s1]);
    CHECK(group_of[r] != group_of[s2]);
    // The add still joins its first single-consumer producer.
    CHECK(group_of[a] == group_of[s1]);
  }
}

TEST_CASE("no fusion group pairs dense with a following reduction operator") {
  Rng rng(71);
  for (int rep = 0; rep < 25; ++rep) {
    gr::VerGraph g = gr::fuse_all(random_workload(rng, 3, 4));
    for (const auto& group : g.fusion_groups()) {
      bool has_dense = false;
      for (std::size_t id : group) {
        auto cat = gr::categorize(g.node(id));
        if (cat == gr::OpCategory::DENSE_COMPUTATION) has_dense = true;
        if (cat == gr::OpCategory::INPUT_REDUCTION_COMPUTE) CHECK_FALSE(has_dense);
      }
    }
  }
}

TEST_CASE("fusion passes are idempotent") {
  Rng rng(73);
  for (int rep = 0; rep < 10; ++rep) {
    gr::VerGraph g = random_workload(rng, 3, 4);
    gr::VerGraph once = gr::fuse_weight_pairing(g);
    CHECK(gr::fuse_weight_pairing(once) == once);
    gr::VerGraph db = gr::fuse_double_bound(once);
    CHECK(gr::fuse_double_bound(db) == db);
    gr::VerGraph all = gr::fuse_all(g);
    CHECK(gr::fuse_all(all) == all);
  }
}

TEST_CASE("evaluate: single affine node equals propagate_affine") {
  Rng rng(79);
  Tensor w = random_tensor(rng, {4, 5}, 0.5);
  gr::VerGraph g;
  std::size_t x = g.add_input("x", {1, 4});
  std::size_t wn = g.add_weight(w);
  g.add_node(gr::NodeKind::AffineVerify, {}, {x, wn}, {1, 5});

  PerturbationSpec spec(Norm::LInf, 0.1, 4);
  Tensor xv = random_tensor(rng, {1, 4}, 1.0);
  LinearBounds got = gr::evaluate(g, {{"x", xv}}, spec);
  LinearBounds want = rx::propagate_affine(input_bounds(xv, spec), w);
  CHECK(max_bounds_diff(got, want) == 0.0);
}

TEST_CASE("evaluate: softmax expansion matches the composite operator") {
  Rng rng(83);
  gr::VerGraph g;
  std::size_t x = g.add_input("x", {1, 2, 4});
  gr::NodeAttrs sm;
  sm.axis = 2;
  g.add_node(gr::NodeKind::Softmax, sm, {x}, {1, 2, 4});

  gr::VerGraph ex = gr::expand_softmax(g);
  CHECK(count_kind(ex, gr::NodeKind::Softmax) == 0);
  CHECK(count_kind(ex, gr::NodeKind::ExpVerify) == 1);
  CHECK(count_kind(ex, gr::NodeKind::SumReduce) == 1);
  CHECK(count_kind(ex, gr::NodeKind::RecipVerify) == 1);
  CHECK(count_kind(ex, gr::NodeKind::MulBroadcast) == 1);

  PerturbationSpec spec(Norm::LInf, 0.03, 8);
  Tensor xv = random_tensor(rng, {1, 2, 4}, 0.8);
  LinearBounds a = gr::evaluate(g, {{"x", xv}}, spec);
  LinearBounds b = gr::evaluate(ex, {{"x", xv}}, spec);
  CHECK(max_bounds_diff(a, b) <= 1e-12);
}

TEST_CASE("fusion is semantics-preserving on random workloads") {
  Rng rng(89);
  for (int rep = 0; rep < 25; ++rep) {
    gr::VerGraph g = random_workload(rng, 3, 4);
    gr::VerGraph fused = gr::fuse_all(g);
    PerturbationSpec spec(Norm::LInf, 0.02, 12);
    Tensor xv = random_tensor(rng, {1, 3, 4}, 0.5);
    LinearBounds a = gr::evaluate(g, {{"x", xv}}, spec);
    LinearBounds b = gr::evaluate(fused, {{"x", xv}}, spec);
    CHECK(max_bounds_diff(a, b) <= 1e-9);
  }
}

TEST_CASE("graph JSON round trip") {
  Rng rng(97);
  gr::VerGraph g = random_workload(rng, 3, 4);
  gr::VerGraph fused = gr::fuse_all(g);
  std::string text = gr::to_json(fused, 1);
  gr::VerGraph back = gr::graph_from_json(text);
  CHECK(back == fused);

  PerturbationSpec spec(Norm::LInf, 0.02, 12);
  Tensor xv = random_tensor(rng, {1, 3, 4}, 0.5);
  LinearBounds a = gr::evaluate(fused, {{"x", xv}}, spec);
  LinearBounds b = gr::evaluate(back, {{"x", xv}}, spec);
  CHECK(max_bounds_diff(a, b) == 0.0);

  CHECK_THROWS(gr::graph_from_json("{\"format\":\"bogus\",\"nodes\":[],\"constants\":[]}"));
}

TEST_CASE("evaluate: error paths") {
  gr::VerGraph g;
  std::size_t x = g.add_input("x", {1, 2});
  g.add_node(gr::NodeKind::ReluVerify, {}, {x}, {1, 2});
  PerturbationSpec spec(Norm::LInf, 0.1, 2);
  CHECK_THROWS_AS(gr::evaluate(g, {}, spec), std::invalid_argument);  // missing binding

  gr::VerGraph two_sinks;
  std::size_t y = two_sinks.add_input("x", {1, 2});
  two_sinks.add_node(gr::NodeKind::ReluVerify, {}, {y}, {1, 2});
  two_sinks.add_node(gr::NodeKind::TanhVerify, {}, {y}, {1, 2});
  CHECK_THROWS_AS(gr::evaluate(two_sinks, {{"x", Tensor::zeros({1, 2})}}, spec),
                  std::invalid_argument);
}

#include "faith/machine.hpp"
#include "faith/model.hpp"

TEST_CASE("pipeline accounting: weight traffic halves through the fusion passes") {
  faith::machine::HardwareMeta meta;
  meta.name = "test";
  faith::model::SyntheticConfig cfg;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  cfg.embed_dim = 8;
  cfg.ffn_dim = 16;
  cfg.length = 4;
  faith::model::TransformerSpec spec = faith::model::gen_synthetic(3001, cfg);
  gr::VerGraph base = faith::model::build_graph(spec);
  std::size_t pert = cfg.length * cfg.embed_dim;

  faith::machine::ScheduleSet naive_set;
  naive_set.reduction.mode = faith::machine::ReductionMode::SEQUENTIAL;
  faith::machine::CostReport naive =
      faith::machine::estimate_graph_cost(gr::expand_softmax(base), meta, pert, naive_set);
  faith::machine::CostReport fused =
      faith::machine::estimate_graph_cost(gr::fuse_all(base), meta, pert);

  // Measured, not hard-coded: every affine kernel in the unfused pipeline
  // reads its weight half pair; the fused pipeline reads each W once.
  CHECK(naive.weight_loads == 2 * fused.weight_loads);
  gr::VerGraph fused_graph = gr::fuse_all(base);
  std::size_t expect_weights = 0;
  for (const auto& n : fused_graph.nodes()) {
    if (n.kind == gr::NodeKind::AffineVerify) {
      const auto& w = fused_graph.node(n.inputs[1]);
      expect_weights += w.out_shape[0] * w.out_shape[1];
    }
  }
  CHECK(fused.weight_loads == expect_weights);
  CHECK(naive.bound_loads == 2 * fused.bound_loads);
  CHECK(fused.modeled_cost < naive.modeled_cost);

  // Pure function of (graph, shapes, metafile, schedules).
  CHECK(faith::machine::estimate_graph_cost(gr::fuse_all(base), meta, pert) == fused);

  // Cost estimation requires the softmax expansion.
  CHECK_THROWS_AS(faith::machine::estimate_graph_cost(base, meta, pert),
                  std::invalid_argument);
}
