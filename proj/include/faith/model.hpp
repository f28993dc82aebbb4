#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "faith/graph.hpp"
#include "faith/tensor.hpp"

namespace faith::model {

enum class Activation { ReLU, Tanh, SiLU };

std::string activation_name(Activation a);
Activation activation_from_name(const std::string& name);

struct LayerWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // attention projections [E,E] / [E]
  Tensor w1, b1, w2, b2;                  // FFN [E,F], [F], [F,E], [E]
};

// Transformer classifier: per-layer attention + FFN blocks with residual
// connections (no layer normalization), mean pooling over positions, and a
// linear head.
struct TransformerSpec {
  std::size_t num_layers = 1;
  std::size_t num_heads = 4;
  std::size_t embed_dim = 128;
  std::size_t ffn_dim = 512;
  std::size_t length = 16;
  std::size_t batch_size = 1;
  std::size_t num_classes = 2;
  Activation activation = Activation::ReLU;
  std::vector<LayerWeights> layers;
  Tensor wc, bc;  // classifier head [E,C] / [C]

  std::size_t head_dim() const { return embed_dim / num_heads; }
  void validate() const;
  std::size_t parameter_count() const;
};

struct SyntheticConfig {
  std::size_t num_layers = 1;
  std::size_t num_heads = 4;
  std::size_t embed_dim = 128;
  std::size_t ffn_dim = 0;  // 0: 4 * embed_dim
  std::size_t length = 16;
  std::size_t num_classes = 2;
  Activation activation = Activation::ReLU;
};

// Seeded uniform(-0.5/sqrt(fan_in), +0.5/sqrt(fan_in)) weights, rounded to
// f32 so the save/load round trip is exact.
TransformerSpec gen_synthetic(std::uint64_t seed, const SyntheticConfig& config);

// Seeded input embeddings of shape [1, length, embed_dim].
Tensor gen_synthetic_input(std::uint64_t seed, const TransformerSpec& spec);

// Manifest format "faith-model/v1": JSON layer list with per-tensor shapes
// and either inline values or little-endian f32 blob references.
void save_model(const TransformerSpec& spec, const std::string& manifest_path,
                bool inline_weights = true);
TransformerSpec load_model(const std::string& manifest_path);

// Embedding input files ("faith-embedding/v1"): JSON header plus inline
// values or an f32 blob.
void save_embedding(const Tensor& x, const std::string& path, bool inline_values = true);
Tensor load_embedding(const std::string& path);

// Baseline verification graph (split-form affine kernels, unexpanded
// softmax). Its evaluation at epsilon = 0 equals the exact forward pass.
graph::VerGraph build_graph(const TransformerSpec& spec);

// Exact forward pass producing logits [batch, 1, num_classes]. Plain dense
// arithmetic, independent of the bound-propagation code paths.
Tensor forward(const TransformerSpec& spec, const Tensor& x);

// Reusable-workspace forward evaluator for sampling loops.
class ForwardEvaluator {
 public:
  explicit ForwardEvaluator(const TransformerSpec& spec);
  // x is [batch, length, embed]; returns logits [batch * num_classes].
  const std::vector<double>& operator()(const Tensor& x);

 private:
  const TransformerSpec& spec_;
  std::vector<double> cur_, q_, k_, v_, scores_, ctx_, attn_, ffn_, logits_, pooled_;
};

}  // namespace faith::model
