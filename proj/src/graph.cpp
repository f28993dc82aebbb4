#include "faith/graph.hpp"

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <variant>

#include <json.hpp>

namespace faith::graph {

namespace {

const std::map<NodeKind, std::string> kKindNames = {
    {NodeKind::Input, "input"},
    {NodeKind::Weight, "weight"},
    {NodeKind::SplitSigns, "split_signs"},
    {NodeKind::MatmulPair, "matmul_pair"},
    {NodeKind::CombineHalves, "combine_halves"},
    {NodeKind::AffineBound, "affine_bound"},
    {NodeKind::MergeSides, "merge_sides"},
    {NodeKind::AffineVerify, "affine_verify"},
    {NodeKind::DotProduct, "dot_product"},
    {NodeKind::Scale, "scale"},
    {NodeKind::AddBounds, "add"},
    {NodeKind::MeanPool, "mean_pool"},
    {NodeKind::ReluVerify, "relu_verify"},
    {NodeKind::TanhVerify, "tanh_verify"},
    {NodeKind::SiluVerify, "silu_verify"},
    {NodeKind::Softmax, "softmax"},
    {NodeKind::ExpVerify, "exp_verify"},
    {NodeKind::SumReduce, "sum_reduce"},
    {NodeKind::RecipVerify, "recip_verify"},
    {NodeKind::MulBroadcast, "mul_broadcast"},
};

}  // namespace

std::string node_kind_name(NodeKind k) { return kKindNames.at(k); }

NodeKind node_kind_from_name(const std::string& name) {
  for (const auto& [kind, kname] : kKindNames) {
    if (kname == name) return kind;
  }
  throw std::invalid_argument("node_kind_from_name: unknown kind '" + name + "'");
}

std::string op_category_name(OpCategory c) {
  switch (c) {
    case OpCategory::INPUT_REDUCTION_COMPUTE:
      return "input_reduction_compute";
    case OpCategory::STRICT_ELEMENTWISE:
      return "strict_elementwise";
    case OpCategory::DENSE_COMPUTATION:
      return "dense_computation";
  }
  return "?";
}

bool is_operator(NodeKind k) { return k != NodeKind::Input && k != NodeKind::Weight; }

std::size_t VerGraph::add_input(const std::string& name, std::vector<std::size_t> shape) {
  Node n;
  n.id = nodes_.size();
  n.kind = NodeKind::Input;
  n.attrs.name = name;
  n.out_shape = std::move(shape);
  nodes_.push_back(std::move(n));
  reset_fusion_groups();
  return nodes_.back().id;
}

std::size_t VerGraph::add_constant(Tensor value) {
  constants_.push_back(std::move(value));
  return constants_.size() - 1;
}

std::size_t VerGraph::add_weight(Tensor value) {
  Node n;
  n.id = nodes_.size();
  n.kind = NodeKind::Weight;
  n.out_shape = value.shape();
  n.constant = static_cast<int>(add_constant(std::move(value)));
  nodes_.push_back(std::move(n));
  reset_fusion_groups();
  return nodes_.back().id;
}

std::size_t VerGraph::add_node(NodeKind kind, NodeAttrs attrs, std::vector<std::size_t> inputs,
                               std::vector<std::size_t> out_shape) {
  std::size_t id = nodes_.size();
  for (std::size_t in : inputs) {
    if (in >= id) {
      throw std::invalid_argument("VerGraph::add_node: input id " + std::to_string(in) +
                                  " must precede node " + std::to_string(id));
    }
  }
  Node n;
  n.id = id;
  n.kind = kind;
  n.attrs = std::move(attrs);
  n.inputs = std::move(inputs);
  n.out_shape = std::move(out_shape);
  nodes_.push_back(std::move(n));
  reset_fusion_groups();
  return id;
}

void VerGraph::set_fusion_groups(std::vector<std::vector<std::size_t>> groups) {
  fusion_groups_ = std::move(groups);
}

void VerGraph::reset_fusion_groups() {
  fusion_groups_.clear();
  for (const Node& n : nodes_) {
    if (is_operator(n.kind)) fusion_groups_.push_back({n.id});
  }
}

std::vector<std::size_t> VerGraph::consumers(std::size_t id) const {
  std::vector<std::size_t> out;
  for (const Node& n : nodes_) {
    for (std::size_t in : n.inputs) {
      if (in == id) {
        out.push_back(n.id);
        break;
      }
    }
  }
  return out;
}

void VerGraph::validate() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.id != i) throw std::logic_error("VerGraph: node id out of order");
    for (std::size_t in : n.inputs) {
      if (in >= i) throw std::logic_error("VerGraph: cycle or forward edge");
    }
    if (n.kind == NodeKind::Weight &&
        (n.constant < 0 || static_cast<std::size_t>(n.constant) >= constants_.size())) {
      throw std::logic_error("VerGraph: weight node without constant");
    }
  }
  // Every operator node in exactly one group.
  std::vector<int> seen(nodes_.size(), 0);
  for (const auto& group : fusion_groups_) {
    for (std::size_t id : group) {
      if (id >= nodes_.size() || !is_operator(nodes_[id].kind)) {
        throw std::logic_error("VerGraph: fusion group contains non-operator node");
      }
      if (seen[id]++) throw std::logic_error("VerGraph: node in two fusion groups");
    }
  }
  for (const Node& n : nodes_) {
    if (is_operator(n.kind) && !seen[n.id]) {
      throw std::logic_error("VerGraph: operator node missing from fusion groups");
    }
  }
}

bool VerGraph::operator==(const VerGraph& other) const {
  if (nodes_ != other.nodes_ || fusion_groups_ != other.fusion_groups_) return false;
  if (constants_.size() != other.constants_.size()) return false;
  for (std::size_t i = 0; i < constants_.size(); ++i) {
    if (!constants_[i].same_shape(other.constants_[i])) return false;
    for (std::size_t j = 0; j < constants_[i].numel(); ++j) {
      if (constants_[i][j] != other.constants_[i][j]) return false;
    }
  }
  return true;
}

OpCategory categorize(const Node& node) {
  switch (node.kind) {
    case NodeKind::ReluVerify:
    case NodeKind::TanhVerify:
    case NodeKind::SiluVerify:
    case NodeKind::Softmax:
    case NodeKind::SumReduce:
      return OpCategory::INPUT_REDUCTION_COMPUTE;
    case NodeKind::Scale:
    case NodeKind::AddBounds:
    case NodeKind::SplitSigns:
    case NodeKind::CombineHalves:
    case NodeKind::MergeSides:
    case NodeKind::ExpVerify:
    case NodeKind::RecipVerify:
    case NodeKind::MulBroadcast:
      return OpCategory::STRICT_ELEMENTWISE;
    case NodeKind::MatmulPair:
    case NodeKind::AffineBound:
    case NodeKind::AffineVerify:
    case NodeKind::DotProduct:
    case NodeKind::MeanPool:
      return OpCategory::DENSE_COMPUTATION;
    case NodeKind::Input:
    case NodeKind::Weight:
      break;
  }
  throw std::invalid_argument("categorize: '" + node_kind_name(node.kind) +
                              "' is not an operator kind");
}

// ---------------------------------------------------------------------------
// Rewrites
// ---------------------------------------------------------------------------

VerGraph expand_softmax(const VerGraph& g) {
  bool any = false;
  for (const Node& n : g.nodes()) {
    if (n.kind == NodeKind::Softmax) any = true;
  }
  if (!any) return g;

  VerGraph out;
  std::vector<std::size_t> remap(g.nodes().size(), SIZE_MAX);
  for (const Node& n : g.nodes()) {
    if (n.kind != NodeKind::Softmax) {
      std::vector<std::size_t> ins;
      for (std::size_t in : n.inputs) ins.push_back(remap[in]);
      if (n.kind == NodeKind::Input) {
        remap[n.id] = out.add_input(n.attrs.name, n.out_shape);
      } else if (n.kind == NodeKind::Weight) {
        remap[n.id] = out.add_weight(g.constant(n.constant));
      } else {
        remap[n.id] = out.add_node(n.kind, n.attrs, ins, n.out_shape);
      }
      continue;
    }
    std::size_t src = remap[n.inputs.at(0)];
    std::size_t axis = n.attrs.axis;
    std::vector<std::size_t> reduced = n.out_shape;
    reduced.at(axis) = 1;
    NodeAttrs ax;
    ax.axis = axis;
    std::size_t e = out.add_node(NodeKind::ExpVerify, ax, {src}, n.out_shape);
    std::size_t s = out.add_node(NodeKind::SumReduce, ax, {e}, reduced);
    std::size_t r = out.add_node(NodeKind::RecipVerify, ax, {s}, reduced);
    remap[n.id] = out.add_node(NodeKind::MulBroadcast, ax, {e, r}, n.out_shape);
  }
  out.reset_fusion_groups();
  return out;
}

namespace {

struct AffineMatch {
  std::size_t anchor;  // CombineHalves or MergeSides node
  std::size_t bounds_input;
  std::size_t weight_node;
  std::optional<std::size_t> bias_node;
  std::vector<std::size_t> removed;
};

VerGraph apply_affine_matches(const VerGraph& g, const std::vector<AffineMatch>& matches) {
  if (matches.empty()) return g;
  VerGraph out;
  std::vector<bool> dead(g.nodes().size(), false);
  std::map<std::size_t, const AffineMatch*> anchors;
  for (const AffineMatch& m : matches) {
    for (std::size_t id : m.removed) dead[id] = true;
    anchors[m.anchor] = &m;
  }
  std::vector<std::size_t> remap(g.nodes().size(), SIZE_MAX);
  for (const Node& n : g.nodes()) {
    if (dead[n.id]) continue;
    auto it = anchors.find(n.id);
    if (it != anchors.end()) {
      const AffineMatch& m = *it->second;
      std::vector<std::size_t> ins = {remap[m.bounds_input], remap[m.weight_node]};
      if (m.bias_node) ins.push_back(remap[*m.bias_node]);
      remap[n.id] = out.add_node(NodeKind::AffineVerify, NodeAttrs{}, ins, n.out_shape);
      continue;
    }
    if (n.kind == NodeKind::Input) {
      remap[n.id] = out.add_input(n.attrs.name, n.out_shape);
    } else if (n.kind == NodeKind::Weight) {
      remap[n.id] = out.add_weight(g.constant(n.constant));
    } else {
      std::vector<std::size_t> ins;
      for (std::size_t in : n.inputs) {
        if (remap[in] == SIZE_MAX) {
          throw std::logic_error("apply_affine_matches: dangling edge into removed pattern");
        }
        ins.push_back(remap[in]);
      }
      remap[n.id] = out.add_node(n.kind, n.attrs, ins, n.out_shape);
    }
  }
  out.reset_fusion_groups();
  return out;
}

bool single_consumer(const VerGraph& g, std::size_t id, std::size_t expected) {
  auto cs = g.consumers(id);
  return cs.size() == 1 && cs[0] == expected;
}

}  // namespace

VerGraph fuse_weight_pairing(const VerGraph& g) {
  std::vector<AffineMatch> matches;
  for (const Node& n : g.nodes()) {
    if (n.kind != NodeKind::CombineHalves || n.inputs.size() < 2) continue;
    const Node& a = g.node(n.inputs[0]);
    const Node& b = g.node(n.inputs[1]);
    if (a.kind != NodeKind::MatmulPair || b.kind != NodeKind::MatmulPair) continue;
    const Node* pos = a.attrs.sign == SignHalf::Positive ? &a : &b;
    const Node* neg = a.attrs.sign == SignHalf::Negative ? &a : &b;
    if (pos->attrs.sign != SignHalf::Positive || neg->attrs.sign != SignHalf::Negative) continue;
    if (pos->inputs.size() != 2 || neg->inputs.size() != 2) continue;
    if (pos->inputs[0] != neg->inputs[0] || pos->inputs[1] != neg->inputs[1]) continue;
    const Node& split = g.node(pos->inputs[1]);
    if (split.kind != NodeKind::SplitSigns || split.inputs.size() != 1) continue;
    // The split halves and the partial products must have no other readers.
    if (g.consumers(split.id).size() != 2) continue;
    if (!single_consumer(g, pos->id, n.id) || !single_consumer(g, neg->id, n.id)) continue;

    AffineMatch m;
    m.anchor = n.id;
    m.bounds_input = pos->inputs[0];
    m.weight_node = split.inputs[0];
    if (n.inputs.size() == 3) m.bias_node = n.inputs[2];
    m.removed = {split.id, pos->id, neg->id};
    matches.push_back(std::move(m));
  }
  return apply_affine_matches(g, matches);
}

VerGraph fuse_double_bound(const VerGraph& g) {
  std::vector<AffineMatch> matches;
  for (const Node& n : g.nodes()) {
    if (n.kind != NodeKind::MergeSides || n.inputs.size() < 2) continue;
    const Node& a = g.node(n.inputs[0]);
    const Node& b = g.node(n.inputs[1]);
    if (a.kind != NodeKind::AffineBound || b.kind != NodeKind::AffineBound) continue;
    const Node* lower = a.attrs.side == BoundSide::Lower ? &a : &b;
    const Node* upper = a.attrs.side == BoundSide::Upper ? &a : &b;
    if (lower->attrs.side != BoundSide::Lower || upper->attrs.side != BoundSide::Upper) continue;
    if (lower->inputs != upper->inputs) continue;
    if (lower->inputs.size() < 2) continue;
    if (!single_consumer(g, lower->id, n.id) || !single_consumer(g, upper->id, n.id)) continue;

    AffineMatch m;
    m.anchor = n.id;
    m.bounds_input = lower->inputs[0];
    m.weight_node = lower->inputs[1];
    if (lower->inputs.size() == 3) m.bias_node = lower->inputs[2];
    m.removed = {lower->id, upper->id};
    matches.push_back(std::move(m));
  }
  return apply_affine_matches(g, matches);
}

VerGraph fuse_cross_layer(const VerGraph& g) {
  VerGraph out = g;
  std::vector<std::size_t> group_of(g.nodes().size(), SIZE_MAX);
  std::vector<std::vector<std::size_t>> groups;

  for (const Node& n : g.nodes()) {
    if (!is_operator(n.kind)) continue;
    std::size_t joined = SIZE_MAX;
    if (categorize(n) == OpCategory::STRICT_ELEMENTWISE) {
      for (std::size_t in : n.inputs) {
        const Node& producer = g.node(in);
        if (!is_operator(producer.kind)) continue;
        if (g.consumers(in).size() != 1) continue;  // multi-consumer edge blocks fusion
        joined = group_of[in];
        break;
      }
    }
    if (joined == SIZE_MAX) {
      group_of[n.id] = groups.size();
      groups.push_back({n.id});
    } else {
      group_of[n.id] = joined;
      groups[joined].push_back(n.id);
    }
  }
  out.set_fusion_groups(std::move(groups));
  return out;
}

VerGraph fuse_all(const VerGraph& g) {
  return fuse_cross_layer(fuse_double_bound(fuse_weight_pairing(expand_softmax(g))));
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace {

// Partial products of one weight half toward both output bounds.
struct PartialBounds {
  Tensor lb, ub;  // bias parts
  Tensor lw, uw;  // weight-row parts
};

// One side's finished bound pieces.
struct HalfBounds {
  BoundSide side = BoundSide::Lower;
  Tensor b;
  Tensor w;
};

struct SplitHalves {
  Tensor pos, neg;
};

using Value = std::variant<Tensor, SplitHalves, LinearBounds, PartialBounds, HalfBounds>;

const LinearBounds& as_bounds(const Value& v, const char* context) {
  const LinearBounds* b = std::get_if<LinearBounds>(&v);
  if (!b) throw std::invalid_argument(std::string(context) + ": expected a bounds value");
  return *b;
}

const Tensor& as_tensor(const Value& v, const char* context) {
  const Tensor* t = std::get_if<Tensor>(&v);
  if (!t) throw std::invalid_argument(std::string(context) + ": expected a tensor value");
  return *t;
}

// One weight half times both input bound tensors, biases and weight rows.
PartialBounds matmul_half(const LinearBounds& x, const Tensor& half, SignHalf sign) {
  std::size_t c = half.extent(0);
  std::size_t o = half.extent(1);
  if (x.lb.shape().back() != c) {
    throw std::invalid_argument("matmul_pair: inner dimensions do not conform");
  }
  std::size_t rows = x.lb.numel() / c;
  std::size_t d = x.pert_dim();
  std::vector<std::size_t> oshape = x.lb.shape();
  oshape.back() = o;
  std::vector<std::size_t> owshape = oshape;
  owshape.push_back(d);

  // Positive half multiplies the same-side bound; negative half swaps sides.
  const Tensor& for_ub = sign == SignHalf::Positive ? x.ub : x.lb;
  const Tensor& for_lb = sign == SignHalf::Positive ? x.lb : x.ub;
  const Tensor& for_uw = sign == SignHalf::Positive ? x.uw : x.lw;
  const Tensor& for_lw = sign == SignHalf::Positive ? x.lw : x.uw;

  PartialBounds p;
  p.lb = Tensor::zeros(oshape);
  p.ub = Tensor::zeros(oshape);
  p.lw = Tensor::zeros(owshape);
  p.uw = Tensor::zeros(owshape);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < o; ++j) {
      double accu = 0.0, accl = 0.0;
      double* puw = p.uw.data() + (r * o + j) * d;
      double* plw = p.lw.data() + (r * o + j) * d;
      for (std::size_t i = 0; i < c; ++i) {
        double wv = half[i * o + j];
        accu += wv * for_ub[r * c + i];
        accl += wv * for_lb[r * c + i];
        const double* ur = for_uw.data() + (r * c + i) * d;
        const double* lr = for_lw.data() + (r * c + i) * d;
        for (std::size_t k = 0; k < d; ++k) {
          puw[k] += wv * ur[k];
          plw[k] += wv * lr[k];
        }
      }
      p.ub[r * o + j] = accu;
      p.lb[r * o + j] = accl;
    }
  }
  return p;
}

HalfBounds affine_one_side(const LinearBounds& x, const Tensor& w, const Tensor* bias,
                           BoundSide side) {
  LinearBounds full = relax::propagate_affine(x, w, bias);
  HalfBounds h;
  h.side = side;
  h.b = side == BoundSide::Lower ? full.lb : full.ub;
  h.w = side == BoundSide::Lower ? full.lw : full.uw;
  return h;
}

LinearBounds elementwise_verify(const LinearBounds& x, const PerturbationSpec& spec,
                                NodeKind kind) {
  ConcreteBounds c = concretize(x, spec);
  switch (kind) {
    case NodeKind::ReluVerify:
      return relax::compose_elementwise(x, relax::relax_relu(c));
    case NodeKind::TanhVerify:
      return relax::compose_elementwise(x, relax::relax_tanh(c));
    case NodeKind::SiluVerify:
      return relax::compose_elementwise(x, relax::relax_silu(c));
    case NodeKind::ExpVerify:
      return relax::compose_elementwise(x, relax::relax_exp(c));
    case NodeKind::RecipVerify:
      return relax::compose_elementwise(x, relax::relax_recip(c));
    default:
      throw std::logic_error("elementwise_verify: not an elementwise kind");
  }
}

}  // namespace

LinearBounds evaluate(const VerGraph& g, const std::map<std::string, Tensor>& inputs,
                      const PerturbationSpec& spec) {
  g.validate();
  std::vector<std::optional<Value>> values(g.nodes().size());
  std::vector<std::size_t> remaining(g.nodes().size(), 0);
  for (const Node& n : g.nodes()) {
    for (std::size_t in : n.inputs) ++remaining[in];
  }

  std::size_t sink = SIZE_MAX;
  for (const Node& n : g.nodes()) {
    if (is_operator(n.kind) && remaining[n.id] == 0) {
      if (sink != SIZE_MAX) throw std::invalid_argument("evaluate: graph has multiple sinks");
      sink = n.id;
    }
  }
  if (sink == SIZE_MAX) throw std::invalid_argument("evaluate: graph has no operator sink");

  auto input_value = [&](const Node& n) -> Value {
    auto it = inputs.find(n.attrs.name);
    if (it == inputs.end()) {
      throw std::invalid_argument("evaluate: missing input binding '" + n.attrs.name + "'");
    }
    return input_bounds(it->second, spec);
  };

  for (const Node& n : g.nodes()) {
    Value v;
    switch (n.kind) {
      case NodeKind::Input:
        v = input_value(n);
        break;
      case NodeKind::Weight:
        v = g.constant(n.constant);
        break;
      case NodeKind::SplitSigns: {
        const Tensor& w = as_tensor(*values[n.inputs.at(0)], "split_signs");
        SplitHalves halves{Tensor::zeros(w.shape()), Tensor::zeros(w.shape())};
        for (std::size_t i = 0; i < w.numel(); ++i) {
          halves.pos[i] = std::max(w[i], 0.0);
          halves.neg[i] = std::min(w[i], 0.0);
        }
        v = std::move(halves);
        break;
      }
      case NodeKind::MatmulPair: {
        const LinearBounds& x = as_bounds(*values[n.inputs.at(0)], "matmul_pair");
        const SplitHalves* halves = std::get_if<SplitHalves>(&*values[n.inputs.at(1)]);
        if (!halves) throw std::invalid_argument("matmul_pair: expected split halves input");
        const Tensor& half = n.attrs.sign == SignHalf::Positive ? halves->pos : halves->neg;
        v = matmul_half(x, half, n.attrs.sign);
        break;
      }
      case NodeKind::CombineHalves: {
        const PartialBounds* a = std::get_if<PartialBounds>(&*values[n.inputs.at(0)]);
        const PartialBounds* b = std::get_if<PartialBounds>(&*values[n.inputs.at(1)]);
        if (!a || !b) throw std::invalid_argument("combine_halves: expected partial products");
        const Tensor* bias =
            n.inputs.size() > 2 ? &as_tensor(*values[n.inputs[2]], "combine_halves") : nullptr;
        LinearBounds y;
        y.lb = Tensor::zeros(a->lb.shape());
        y.ub = Tensor::zeros(a->ub.shape());
        y.lw = Tensor::zeros(a->lw.shape());
        y.uw = Tensor::zeros(a->uw.shape());
        std::size_t o = a->lb.shape().back();
        for (std::size_t i = 0; i < y.lb.numel(); ++i) {
          double bv = bias ? (*bias)[i % o] : 0.0;
          y.lb[i] = a->lb[i] + b->lb[i] + bv;
          y.ub[i] = a->ub[i] + b->ub[i] + bv;
        }
        for (std::size_t i = 0; i < y.lw.numel(); ++i) {
          y.lw[i] = a->lw[i] + b->lw[i];
          y.uw[i] = a->uw[i] + b->uw[i];
        }
        v = std::move(y);
        break;
      }
      case NodeKind::AffineBound: {
        const LinearBounds& x = as_bounds(*values[n.inputs.at(0)], "affine_bound");
        const Tensor& w = as_tensor(*values[n.inputs.at(1)], "affine_bound");
        const Tensor* bias =
            n.inputs.size() > 2 ? &as_tensor(*values[n.inputs[2]], "affine_bound") : nullptr;
        v = affine_one_side(x, w, bias, n.attrs.side);
        break;
      }
      case NodeKind::MergeSides: {
        const HalfBounds* a = std::get_if<HalfBounds>(&*values[n.inputs.at(0)]);
        const HalfBounds* b = std::get_if<HalfBounds>(&*values[n.inputs.at(1)]);
        if (!a || !b) throw std::invalid_argument("merge_sides: expected half bounds");
        const HalfBounds* lower = a->side == BoundSide::Lower ? a : b;
        const HalfBounds* upper = a->side == BoundSide::Upper ? a : b;
        if (lower->side != BoundSide::Lower || upper->side != BoundSide::Upper) {
          throw std::invalid_argument("merge_sides: need one lower and one upper half");
        }
        LinearBounds y;
        y.lb = lower->b;
        y.lw = lower->w;
        y.ub = upper->b;
        y.uw = upper->w;
        v = std::move(y);
        break;
      }
      case NodeKind::AffineVerify: {
        const LinearBounds& x = as_bounds(*values[n.inputs.at(0)], "affine_verify");
        const Tensor& w = as_tensor(*values[n.inputs.at(1)], "affine_verify");
        const Tensor* bias =
            n.inputs.size() > 2 ? &as_tensor(*values[n.inputs[2]], "affine_verify") : nullptr;
        v = relax::propagate_affine(x, w, bias);
        break;
      }
      case NodeKind::DotProduct: {
        const LinearBounds& a = as_bounds(*values[n.inputs.at(0)], "dot_product");
        const LinearBounds& b = as_bounds(*values[n.inputs.at(1)], "dot_product");
        v = relax::propagate_dot_product(a, b, spec, n.attrs.layout, n.attrs.heads);
        break;
      }
      case NodeKind::Scale:
        v = relax::propagate_scale(as_bounds(*values[n.inputs.at(0)], "scale"), n.attrs.scale);
        break;
      case NodeKind::AddBounds:
        v = relax::propagate_add(as_bounds(*values[n.inputs.at(0)], "add"),
                                 as_bounds(*values[n.inputs.at(1)], "add"));
        break;
      case NodeKind::MeanPool: {
        const LinearBounds& x = as_bounds(*values[n.inputs.at(0)], "mean_pool");
        std::size_t extent = x.lb.extent(n.attrs.axis);
        v = relax::propagate_scale(relax::propagate_sum_axis(x, n.attrs.axis),
                                   1.0 / static_cast<double>(extent));
        break;
      }
      case NodeKind::ReluVerify:
      case NodeKind::TanhVerify:
      case NodeKind::SiluVerify:
      case NodeKind::ExpVerify:
      case NodeKind::RecipVerify:
        v = elementwise_verify(as_bounds(*values[n.inputs.at(0)], "elementwise"), spec, n.kind);
        break;
      case NodeKind::Softmax:
        v = relax::propagate_softmax(as_bounds(*values[n.inputs.at(0)], "softmax"), n.attrs.axis,
                                     spec);
        break;
      case NodeKind::SumReduce:
        v = relax::propagate_sum_axis(as_bounds(*values[n.inputs.at(0)], "sum_reduce"),
                                      n.attrs.axis);
        break;
      case NodeKind::MulBroadcast:
        v = relax::propagate_mul_broadcast(as_bounds(*values[n.inputs.at(0)], "mul_broadcast"),
                                           as_bounds(*values[n.inputs.at(1)], "mul_broadcast"),
                                           n.attrs.axis, spec);
        break;
    }
    values[n.id] = std::move(v);
    // Release inputs that have no further consumers.
    for (std::size_t in : n.inputs) {
      if (--remaining[in] == 0 && in != sink) values[in].reset();
    }
  }

  LinearBounds result = as_bounds(*values[sink], "evaluate");
  result.validate("evaluate result");
  for (const Tensor* t : {&result.lb, &result.ub, &result.lw, &result.uw}) {
    for (std::size_t i = 0; i < t->numel(); ++i) {
      if (!std::isfinite((*t)[i])) {
        throw std::domain_error("evaluate: bounds overflowed at this radius");
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// JSON import/export
// ---------------------------------------------------------------------------

namespace {

using nlohmann::json;

// Edge role names per operator kind, in input order.
std::vector<std::string> input_roles(NodeKind kind, std::size_t count) {
  switch (kind) {
    case NodeKind::SplitSigns:
      return {"w"};
    case NodeKind::MatmulPair:
      return {"x", "halves"};
    case NodeKind::CombineHalves:
      return count == 3 ? std::vector<std::string>{"pos", "neg", "bias"}
                        : std::vector<std::string>{"pos", "neg"};
    case NodeKind::AffineBound:
    case NodeKind::AffineVerify:
      return count == 3 ? std::vector<std::string>{"x", "w", "bias"}
                        : std::vector<std::string>{"x", "w"};
    case NodeKind::MergeSides:
    case NodeKind::DotProduct:
    case NodeKind::AddBounds:
      return {"a", "b"};
    case NodeKind::MulBroadcast:
      return {"x", "r"};
    default:
      return {"x"};
  }
}

json attrs_to_json(const Node& n) {
  json a = json::object();
  switch (n.kind) {
    case NodeKind::MatmulPair:
      a["sign"] = n.attrs.sign == SignHalf::Positive ? "pos" : "neg";
      break;
    case NodeKind::AffineBound:
      a["side"] = n.attrs.side == BoundSide::Lower ? "lower" : "upper";
      break;
    case NodeKind::DotProduct:
      a["layout"] = n.attrs.layout == relax::DotLayout::PairwiseSimilarity ? "similarity"
                                                                           : "weighted_values";
      a["heads"] = n.attrs.heads;
      break;
    case NodeKind::Scale:
      a["scale"] = n.attrs.scale;
      break;
    case NodeKind::Softmax:
    case NodeKind::SumReduce:
    case NodeKind::RecipVerify:
    case NodeKind::ExpVerify:
    case NodeKind::MulBroadcast:
    case NodeKind::MeanPool:
      a["axis"] = n.attrs.axis;
      break;
    case NodeKind::Input:
      a["name"] = n.attrs.name;
      break;
    default:
      break;
  }
  return a;
}

NodeAttrs attrs_from_json(NodeKind kind, const json& a) {
  NodeAttrs attrs;
  switch (kind) {
    case NodeKind::MatmulPair:
      attrs.sign = a.at("sign").get<std::string>() == "pos" ? SignHalf::Positive
                                                            : SignHalf::Negative;
      break;
    case NodeKind::AffineBound:
      attrs.side = a.at("side").get<std::string>() == "lower" ? BoundSide::Lower
                                                              : BoundSide::Upper;
      break;
    case NodeKind::DotProduct:
      attrs.layout = a.at("layout").get<std::string>() == "similarity"
                         ? relax::DotLayout::PairwiseSimilarity
                         : relax::DotLayout::WeightedValues;
      attrs.heads = a.at("heads").get<std::size_t>();
      break;
    case NodeKind::Scale:
      attrs.scale = a.at("scale").get<double>();
      break;
    case NodeKind::Softmax:
    case NodeKind::SumReduce:
    case NodeKind::RecipVerify:
    case NodeKind::ExpVerify:
    case NodeKind::MulBroadcast:
    case NodeKind::MeanPool:
      attrs.axis = a.at("axis").get<std::size_t>();
      break;
    case NodeKind::Input:
      attrs.name = a.at("name").get<std::string>();
      break;
    default:
      break;
  }
  return attrs;
}

}  // namespace

std::string to_json(const VerGraph& g, int indent) {
  json j;
  j["format"] = "faith-graph/v1";
  j["nodes"] = json::array();
  for (const Node& n : g.nodes()) {
    json jn;
    jn["id"] = n.id;
    jn["kind"] = node_kind_name(n.kind);
    jn["attrs"] = attrs_to_json(n);
    if (!n.inputs.empty()) {
      json edges = json::object();
      std::vector<std::string> roles = input_roles(n.kind, n.inputs.size());
      for (std::size_t i = 0; i < n.inputs.size(); ++i) edges[roles.at(i)] = n.inputs[i];
      jn["edges"] = std::move(edges);
    }
    jn["shape"] = n.out_shape;
    if (n.kind == NodeKind::Weight) jn["constant"] = n.constant;
    j["nodes"].push_back(std::move(jn));
  }
  j["constants"] = json::array();
  for (const Tensor& c : g.constants()) {
    json jc;
    jc["shape"] = c.shape();
    jc["data"] = std::vector<double>(c.data(), c.data() + c.numel());
    j["constants"].push_back(std::move(jc));
  }
  j["fusion_groups"] = g.fusion_groups();
  return indent >= 0 ? j.dump(indent) : j.dump();
}

VerGraph graph_from_json(const std::string& text) {
  json j = json::parse(text);
  if (j.at("format").get<std::string>() != "faith-graph/v1") {
    throw std::invalid_argument("graph_from_json: unsupported format");
  }
  VerGraph g;
  std::vector<Tensor> constants;
  for (const json& jc : j.at("constants")) {
    constants.emplace_back(jc.at("shape").get<std::vector<std::size_t>>(),
                           jc.at("data").get<std::vector<double>>());
  }
  for (const json& jn : j.at("nodes")) {
    NodeKind kind = node_kind_from_name(jn.at("kind").get<std::string>());
    NodeAttrs attrs = attrs_from_json(kind, jn.at("attrs"));
    auto shape = jn.at("shape").get<std::vector<std::size_t>>();
    std::size_t id;
    if (kind == NodeKind::Input) {
      id = g.add_input(attrs.name, shape);
    } else if (kind == NodeKind::Weight) {
      id = g.add_weight(constants.at(jn.at("constant").get<std::size_t>()));
    } else {
      // Named edges are ordered back through the role table.
      std::vector<std::size_t> inputs;
      if (jn.contains("edges")) {
        const json& edges = jn.at("edges");
        std::vector<std::string> roles = input_roles(kind, edges.size());
        for (const std::string& role : roles) inputs.push_back(edges.at(role).get<std::size_t>());
      }
      id = g.add_node(kind, attrs, std::move(inputs), shape);
    }
    if (id != jn.at("id").get<std::size_t>()) {
      throw std::invalid_argument("graph_from_json: node ids must be dense and ordered");
    }
  }
  if (j.contains("fusion_groups")) {
    g.set_fusion_groups(j.at("fusion_groups").get<std::vector<std::vector<std::size_t>>>());
  }
  g.validate();
  return g;
}

}  // namespace faith::graph
