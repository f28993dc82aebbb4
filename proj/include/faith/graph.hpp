#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "faith/bounds.hpp"
#include "faith/relax.hpp"
#include "faith/tensor.hpp"

namespace faith::graph {

// Operator vocabulary of the verification IR. The affine verification of one
// layer exists in three granularities:
//   * split form (the baseline of the projection-layer computation graph):
//     SplitSigns -> two MatmulPair kernels -> CombineHalves
//   * per-side form: AffineBound(lower) + AffineBound(upper) -> MergeSides
//   * fused form: AffineVerify
// The kernel-fusion passes rewrite the first two forms into the third.
enum class NodeKind {
  Input,
  Weight,
  SplitSigns,
  MatmulPair,
  CombineHalves,
  AffineBound,
  MergeSides,
  AffineVerify,
  DotProduct,
  Scale,
  AddBounds,
  MeanPool,
  ReluVerify,
  TanhVerify,
  SiluVerify,
  Softmax,
  ExpVerify,
  SumReduce,
  RecipVerify,
  MulBroadcast,
};

std::string node_kind_name(NodeKind k);
NodeKind node_kind_from_name(const std::string& name);

enum class OpCategory { INPUT_REDUCTION_COMPUTE, STRICT_ELEMENTWISE, DENSE_COMPUTATION };

std::string op_category_name(OpCategory c);

enum class SignHalf { Positive, Negative };
enum class BoundSide { Lower, Upper };

struct NodeAttrs {
  SignHalf sign = SignHalf::Positive;                              // MatmulPair
  BoundSide side = BoundSide::Lower;                               // AffineBound
  relax::DotLayout layout = relax::DotLayout::PairwiseSimilarity;  // DotProduct
  std::size_t heads = 1;                                           // DotProduct
  double scale = 1.0;                                              // Scale
  std::size_t axis = 0;  // Softmax / SumReduce / MulBroadcast / MeanPool
  std::string name;      // Input binding

  bool operator==(const NodeAttrs&) const = default;
};

struct Node {
  std::size_t id = 0;
  NodeKind kind = NodeKind::Input;
  NodeAttrs attrs;
  std::vector<std::size_t> inputs;  // producer node ids, all < id
  int constant = -1;                // Weight: index into the constant table
  std::vector<std::size_t> out_shape;

  bool operator==(const Node&) const = default;
};

class VerGraph {
 public:
  std::size_t add_input(const std::string& name, std::vector<std::size_t> shape);
  std::size_t add_weight(Tensor value);
  std::size_t add_node(NodeKind kind, NodeAttrs attrs, std::vector<std::size_t> inputs,
                       std::vector<std::size_t> out_shape);

  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const std::vector<Tensor>& constants() const { return constants_; }
  const Tensor& constant(std::size_t index) const { return constants_.at(index); }
  std::size_t add_constant(Tensor value);

  const std::vector<std::vector<std::size_t>>& fusion_groups() const { return fusion_groups_; }
  void set_fusion_groups(std::vector<std::vector<std::size_t>> groups);
  // One singleton group per operator node (Input/Weight carry no compute).
  void reset_fusion_groups();

  std::vector<std::size_t> consumers(std::size_t id) const;
  void validate() const;

  bool operator==(const VerGraph& other) const;

 private:
  std::vector<Node> nodes_;
  std::vector<Tensor> constants_;
  std::vector<std::vector<std::size_t>> fusion_groups_;
};

// Total over operator kinds; throws on Input/Weight (data sources are not
// operators).
OpCategory categorize(const Node& node);
bool is_operator(NodeKind k);

// Rewrites every Softmax node into its exp -> sum -> recip -> multiply
// primitive chain. Runs before categorization so fusion sees the reduction
// core of the normalization.
VerGraph expand_softmax(const VerGraph& g);

// Replaces split-form affine verification (SplitSigns feeding the pos/neg
// multiplication pair) with a fused node that reads W once. Identity when the
// pattern is absent.
VerGraph fuse_weight_pairing(const VerGraph& g);

// Replaces per-side AffineBound pairs over the same inputs with one node
// computing both bounds, so input bounds are loaded once.
VerGraph fuse_double_bound(const VerGraph& g);

// Greedy single-pass cross-layer grouping in topological order:
//   dense + following strict-elementwise        -> fuse
//   dense + input-reduction-compute             -> never
//   input-reduction-compute + strict-elementwise -> fuse
//   chains of strict-elementwise                -> fuse
// A node joins at most one group; multi-consumer outputs block fusion across
// that edge.
VerGraph fuse_cross_layer(const VerGraph& g);

// expand_softmax, both kernel fusions, then cross-layer grouping.
VerGraph fuse_all(const VerGraph& g);

// Executes fusion groups in topological order through the relax operations
// and returns the bounds of the unique sink node.
LinearBounds evaluate(const VerGraph& g, const std::map<std::string, Tensor>& inputs,
                      const PerturbationSpec& spec);

// JSON import/export (schema documented in the README).
std::string to_json(const VerGraph& g, int indent = -1);
VerGraph graph_from_json(const std::string& text);

}  // namespace faith::graph
