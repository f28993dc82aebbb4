#include "faith/model.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "faith/relax.hpp"
#include "faith/rng.hpp"

namespace faith::model {

namespace fs = std::filesystem;
using nlohmann::json;

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::ReLU:
      return "relu";
    case Activation::Tanh:
      return "tanh";
    case Activation::SiLU:
      return "silu";
  }
  return "?";
}

Activation activation_from_name(const std::string& name) {
  if (name == "relu") return Activation::ReLU;
  if (name == "tanh") return Activation::Tanh;
  if (name == "silu") return Activation::SiLU;
  throw std::invalid_argument("activation_from_name: unknown activation '" + name + "'");
}

void TransformerSpec::validate() const {
  if (num_layers < 1 || num_layers > 6) {
    throw std::invalid_argument("TransformerSpec: num_layers must be in [1, 6]");
  }
  if (num_heads == 0 || embed_dim % num_heads != 0) {
    throw std::invalid_argument("TransformerSpec: embed_dim must be divisible by num_heads");
  }
  if (layers.size() != num_layers) {
    throw std::invalid_argument("TransformerSpec: layer weight count mismatch");
  }
  auto expect = [](const Tensor& t, std::vector<std::size_t> shape, const std::string& what) {
    if (t.shape() != shape) {
      throw std::invalid_argument("TransformerSpec: " + what + " has shape " + t.shape_str() +
                                  ", expected " + shape_to_string(shape));
    }
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerWeights& w = layers[l];
    std::string p = "layers[" + std::to_string(l) + "].";
    expect(w.wq, {embed_dim, embed_dim}, p + "wq");
    expect(w.bq, {embed_dim}, p + "bq");
    expect(w.wk, {embed_dim, embed_dim}, p + "wk");
    expect(w.bk, {embed_dim}, p + "bk");
    expect(w.wv, {embed_dim, embed_dim}, p + "wv");
    expect(w.bv, {embed_dim}, p + "bv");
    expect(w.wo, {embed_dim, embed_dim}, p + "wo");
    expect(w.bo, {embed_dim}, p + "bo");
    expect(w.w1, {embed_dim, ffn_dim}, p + "w1");
    expect(w.b1, {ffn_dim}, p + "b1");
    expect(w.w2, {ffn_dim, embed_dim}, p + "w2");
    expect(w.b2, {embed_dim}, p + "b2");
  }
  expect(wc, {embed_dim, num_classes}, "classifier.w");
  expect(bc, {num_classes}, "classifier.b");
}

std::size_t TransformerSpec::parameter_count() const {
  std::size_t per_layer = 4 * (embed_dim * embed_dim + embed_dim) + embed_dim * ffn_dim +
                          ffn_dim + ffn_dim * embed_dim + embed_dim;
  return num_layers * per_layer + embed_dim * num_classes + num_classes;
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

namespace {

Tensor gen_tensor(Rng& rng, std::vector<std::size_t> shape, std::size_t fan_in) {
  double bound = 0.5 / std::sqrt(static_cast<double>(fan_in));
  std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    data[i] = static_cast<double>(static_cast<float>(rng.uniform(-bound, bound)));
  }
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace

TransformerSpec gen_synthetic(std::uint64_t seed, const SyntheticConfig& config) {
  TransformerSpec spec;
  spec.num_layers = config.num_layers;
  spec.num_heads = config.num_heads;
  spec.embed_dim = config.embed_dim;
  spec.ffn_dim = config.ffn_dim ? config.ffn_dim : 4 * config.embed_dim;
  spec.length = config.length;
  spec.num_classes = config.num_classes;
  spec.activation = config.activation;

  Rng rng(seed);
  std::size_t e = spec.embed_dim, f = spec.ffn_dim, c = spec.num_classes;
  for (std::size_t l = 0; l < spec.num_layers; ++l) {
    LayerWeights w;
    w.wq = gen_tensor(rng, {e, e}, e);
    w.bq = gen_tensor(rng, {e}, e);
    w.wk = gen_tensor(rng, {e, e}, e);
    w.bk = gen_tensor(rng, {e}, e);
    w.wv = gen_tensor(rng, {e, e}, e);
    w.bv = gen_tensor(rng, {e}, e);
    w.wo = gen_tensor(rng, {e, e}, e);
    w.bo = gen_tensor(rng, {e}, e);
    w.w1 = gen_tensor(rng, {e, f}, e);
    w.b1 = gen_tensor(rng, {f}, e);
    w.w2 = gen_tensor(rng, {f, e}, f);
    w.b2 = gen_tensor(rng, {e}, f);
    spec.layers.push_back(std::move(w));
  }
  spec.wc = gen_tensor(rng, {e, c}, e);
  spec.bc = gen_tensor(rng, {c}, e);
  spec.validate();
  return spec;
}

Tensor gen_synthetic_input(std::uint64_t seed, const TransformerSpec& spec) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::size_t n = spec.batch_size * spec.length * spec.embed_dim;
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    data[i] = static_cast<double>(static_cast<float>(rng.uniform(-0.5, 0.5)));
  }
  return Tensor({spec.batch_size, spec.length, spec.embed_dim}, std::move(data));
}

// ---------------------------------------------------------------------------
// Manifest I/O
// ---------------------------------------------------------------------------

namespace {

struct BlobWriter {
  std::ofstream out;
  std::string filename;
  std::size_t offset = 0;  // in f32 elements

  json write(const Tensor& t) {
    json ref;
    ref["shape"] = t.shape();
    ref["blob"] = filename;
    ref["offset"] = offset;
    for (std::size_t i = 0; i < t.numel(); ++i) {
      float v = static_cast<float>(t[i]);
      out.write(reinterpret_cast<const char*>(&v), sizeof(float));
    }
    offset += t.numel();
    return ref;
  }
};

json tensor_ref_inline(const Tensor& t) {
  json ref;
  ref["shape"] = t.shape();
  std::vector<double> vals(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) {
    vals[i] = static_cast<double>(static_cast<float>(t[i]));
  }
  ref["values"] = vals;
  return ref;
}

struct BlobCache {
  fs::path base_dir;
  std::map<std::string, std::vector<float>> blobs;

  const std::vector<float>& get(const std::string& name, const std::string& context) {
    auto it = blobs.find(name);
    if (it != blobs.end()) return it->second;
    fs::path path = base_dir / name;
    std::ifstream in(path, std::ios::binary);
    if (!in) {
      throw std::runtime_error("cannot open blob '" + name + "' (referenced by " + context + ")");
    }
    in.seekg(0, std::ios::end);
    std::streamoff bytes = in.tellg();
    in.seekg(0);
    std::vector<float> data(static_cast<std::size_t>(bytes) / sizeof(float));
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    return blobs.emplace(name, std::move(data)).first->second;
  }
};

Tensor read_tensor(const json& ref, BlobCache& cache, const std::string& context) {
  auto shape = ref.at("shape").get<std::vector<std::size_t>>();
  std::size_t n = shape_numel(shape);
  std::vector<double> data;
  data.reserve(n);
  if (ref.contains("values")) {
    auto vals = ref.at("values").get<std::vector<double>>();
    if (vals.size() != n) {
      throw std::runtime_error(context + ": shape " + shape_to_string(shape) + " expects " +
                               std::to_string(n) + " values, got " + std::to_string(vals.size()));
    }
    data.assign(vals.begin(), vals.end());
  } else if (ref.contains("blob")) {
    const std::string blob_name = ref.at("blob").get<std::string>();
    const auto& blob = cache.get(blob_name, context);
    std::size_t offset = ref.value("offset", std::size_t{0});
    if (offset + n > blob.size()) {
      throw std::runtime_error("blob '" + blob_name + "' truncated reading " + context + " (" +
                               std::to_string(offset + n) + " elements needed, " +
                               std::to_string(blob.size()) + " present)");
    }
    for (std::size_t i = 0; i < n; ++i) data.push_back(static_cast<double>(blob[offset + i]));
  } else {
    throw std::runtime_error(context + ": tensor reference needs 'values' or 'blob'");
  }
  try {
    return Tensor(std::move(shape), std::move(data));
  } catch (const std::exception& e) {
    throw std::runtime_error(context + ": " + e.what());
  }
}

}  // namespace

void save_model(const TransformerSpec& spec, const std::string& manifest_path,
                bool inline_weights) {
  spec.validate();
  json j;
  j["format"] = "faith-model/v1";
  j["num_layers"] = spec.num_layers;
  j["num_heads"] = spec.num_heads;
  j["embed_dim"] = spec.embed_dim;
  j["ffn_dim"] = spec.ffn_dim;
  j["length"] = spec.length;
  j["batch_size"] = spec.batch_size;
  j["num_classes"] = spec.num_classes;
  j["activation"] = activation_name(spec.activation);

  BlobWriter blob;
  std::function<json(const Tensor&)> ref;
  if (inline_weights) {
    ref = tensor_ref_inline;
  } else {
    fs::path bin = fs::path(manifest_path).replace_extension(".bin");
    blob.filename = bin.filename().string();
    blob.out.open(bin, std::ios::binary);
    if (!blob.out) throw std::runtime_error("save_model: cannot write blob " + bin.string());
    ref = [&blob](const Tensor& t) { return blob.write(t); };
  }

  j["layers"] = json::array();
  for (const LayerWeights& w : spec.layers) {
    json jl;
    jl["wq"] = ref(w.wq);
    jl["bq"] = ref(w.bq);
    jl["wk"] = ref(w.wk);
    jl["bk"] = ref(w.bk);
    jl["wv"] = ref(w.wv);
    jl["bv"] = ref(w.bv);
    jl["wo"] = ref(w.wo);
    jl["bo"] = ref(w.bo);
    jl["w1"] = ref(w.w1);
    jl["b1"] = ref(w.b1);
    jl["w2"] = ref(w.w2);
    jl["b2"] = ref(w.b2);
    j["layers"].push_back(std::move(jl));
  }
  j["classifier"] = {{"w", ref(spec.wc)}, {"b", ref(spec.bc)}};

  std::ofstream out(manifest_path);
  if (!out) throw std::runtime_error("save_model: cannot write " + manifest_path);
  out << j.dump(1) << "\n";
}

TransformerSpec load_model(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("load_model: cannot open '" + manifest_path + "'");
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error("load_model: " + manifest_path + ": " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "faith-model/v1") {
      throw std::runtime_error("unsupported format");
    }
    TransformerSpec spec;
    spec.num_layers = j.at("num_layers").get<std::size_t>();
    spec.num_heads = j.at("num_heads").get<std::size_t>();
    spec.embed_dim = j.at("embed_dim").get<std::size_t>();
    spec.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    spec.length = j.at("length").get<std::size_t>();
    spec.batch_size = j.value("batch_size", std::size_t{1});
    spec.num_classes = j.at("num_classes").get<std::size_t>();
    spec.activation = activation_from_name(j.at("activation").get<std::string>());

    BlobCache cache{fs::path(manifest_path).parent_path(), {}};
    const json& jlayers = j.at("layers");
    for (std::size_t l = 0; l < jlayers.size(); ++l) {
      const json& jl = jlayers[l];
      std::string p = "layers[" + std::to_string(l) + "].";
      LayerWeights w;
      w.wq = read_tensor(jl.at("wq"), cache, p + "wq");
      w.bq = read_tensor(jl.at("bq"), cache, p + "bq");
      w.wk = read_tensor(jl.at("wk"), cache, p + "wk");
      w.bk = read_tensor(jl.at("bk"), cache, p + "bk");
      w.wv = read_tensor(jl.at("wv"), cache, p + "wv");
      w.bv = read_tensor(jl.at("bv"), cache, p + "bv");
      w.wo = read_tensor(jl.at("wo"), cache, p + "wo");
      w.bo = read_tensor(jl.at("bo"), cache, p + "bo");
      w.w1 = read_tensor(jl.at("w1"), cache, p + "w1");
      w.b1 = read_tensor(jl.at("b1"), cache, p + "b1");
      w.w2 = read_tensor(jl.at("w2"), cache, p + "w2");
      w.b2 = read_tensor(jl.at("b2"), cache, p + "b2");
      spec.layers.push_back(std::move(w));
    }
    spec.wc = read_tensor(j.at("classifier").at("w"), cache, "classifier.w");
    spec.bc = read_tensor(j.at("classifier").at("b"), cache, "classifier.b");
    spec.validate();
    return spec;
  } catch (const std::exception& e) {
    throw std::runtime_error("load_model: " + manifest_path + ": " + e.what());
  }
}

void save_embedding(const Tensor& x, const std::string& path, bool inline_values) {
  json j;
  j["format"] = "faith-embedding/v1";
  if (inline_values) {
    j["tensor"] = tensor_ref_inline(x);
  } else {
    BlobWriter blob;
    fs::path bin = fs::path(path).replace_extension(".bin");
    blob.filename = bin.filename().string();
    blob.out.open(bin, std::ios::binary);
    if (!blob.out) throw std::runtime_error("save_embedding: cannot write blob " + bin.string());
    j["tensor"] = blob.write(x);
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_embedding: cannot write " + path);
  out << j.dump(1) << "\n";
}

Tensor load_embedding(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_embedding: cannot open '" + path + "'");
  try {
    json j;
    in >> j;
    if (j.at("format").get<std::string>() != "faith-embedding/v1") {
      throw std::runtime_error("unsupported format");
    }
    BlobCache cache{fs::path(path).parent_path(), {}};
    return read_tensor(j.at("tensor"), cache, "embedding");
  } catch (const std::exception& e) {
    throw std::runtime_error("load_embedding: " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

namespace {

std::size_t affine_baseline(graph::VerGraph& g, std::size_t x, const Tensor& w, const Tensor& b,
                            std::vector<std::size_t> out_shape) {
  std::size_t wn = g.add_weight(w);
  std::size_t bn = g.add_weight(b);
  std::size_t split = g.add_node(graph::NodeKind::SplitSigns, {}, {wn}, w.shape());
  graph::NodeAttrs pos;
  pos.sign = graph::SignHalf::Positive;
  std::size_t mp = g.add_node(graph::NodeKind::MatmulPair, pos, {x, split}, out_shape);
  graph::NodeAttrs neg;
  neg.sign = graph::SignHalf::Negative;
  std::size_t mn = g.add_node(graph::NodeKind::MatmulPair, neg, {x, split}, out_shape);
  return g.add_node(graph::NodeKind::CombineHalves, {}, {mp, mn, bn}, out_shape);
}

}  // namespace

graph::VerGraph build_graph(const TransformerSpec& spec) {
  spec.validate();
  if (spec.batch_size != 1) {
    throw std::invalid_argument(
        "build_graph: verification covers one sentence at a time (batch_size must be 1)");
  }
  std::size_t b = spec.batch_size, len = spec.length, e = spec.embed_dim;
  std::size_t h = spec.num_heads, f = spec.ffn_dim, c = spec.num_classes;
  std::vector<std::size_t> tok_shape = {b, len, e};
  std::vector<std::size_t> score_shape = {b, h, len, len};

  graph::VerGraph g;
  std::size_t cur = g.add_input("x", tok_shape);
  for (const LayerWeights& w : spec.layers) {
    std::size_t q = affine_baseline(g, cur, w.wq, w.bq, tok_shape);
    std::size_t k = affine_baseline(g, cur, w.wk, w.bk, tok_shape);
    std::size_t v = affine_baseline(g, cur, w.wv, w.bv, tok_shape);

    graph::NodeAttrs dq;
    dq.layout = relax::DotLayout::PairwiseSimilarity;
    dq.heads = h;
    std::size_t scores = g.add_node(graph::NodeKind::DotProduct, dq, {q, k}, score_shape);

    graph::NodeAttrs sc;
    sc.scale = 1.0 / std::sqrt(static_cast<double>(spec.head_dim()));
    std::size_t scaled = g.add_node(graph::NodeKind::Scale, sc, {scores}, score_shape);

    graph::NodeAttrs sm;
    sm.axis = 3;
    std::size_t probs = g.add_node(graph::NodeKind::Softmax, sm, {scaled}, score_shape);

    graph::NodeAttrs dv;
    dv.layout = relax::DotLayout::WeightedValues;
    dv.heads = h;
    std::size_t ctx = g.add_node(graph::NodeKind::DotProduct, dv, {probs, v}, tok_shape);

    std::size_t attn = affine_baseline(g, ctx, w.wo, w.bo, tok_shape);
    std::size_t res1 = g.add_node(graph::NodeKind::AddBounds, {}, {cur, attn}, tok_shape);

    std::size_t f1 = affine_baseline(g, res1, w.w1, w.b1, {b, len, f});
    graph::NodeAttrs none;
    graph::NodeKind act_kind = graph::NodeKind::ReluVerify;
    if (spec.activation == Activation::Tanh) act_kind = graph::NodeKind::TanhVerify;
    if (spec.activation == Activation::SiLU) act_kind = graph::NodeKind::SiluVerify;
    std::size_t act = g.add_node(act_kind, none, {f1}, {b, len, f});
    std::size_t f2 = affine_baseline(g, act, w.w2, w.b2, tok_shape);
    cur = g.add_node(graph::NodeKind::AddBounds, {}, {res1, f2}, tok_shape);
  }

  graph::NodeAttrs pool;
  pool.axis = 1;
  std::size_t pooled = g.add_node(graph::NodeKind::MeanPool, pool, {cur}, {b, 1, e});
  affine_baseline(g, pooled, spec.wc, spec.bc, {b, 1, c});
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// Exact forward pass
// ---------------------------------------------------------------------------

namespace {

inline double apply_activation(Activation a, double x) {
  switch (a) {
    case Activation::ReLU:
      return x > 0.0 ? x : 0.0;
    case Activation::Tanh:
      return std::tanh(x);
    case Activation::SiLU:
      return relax::silu_scalar(x);
  }
  return x;
}

// rows x in_dim times [in_dim x out_dim] plus bias.
void dense(const std::vector<double>& x, std::size_t rows, const Tensor& w, const Tensor& b,
           std::vector<double>& out) {
  std::size_t c = w.extent(0), o = w.extent(1);
  out.assign(rows * o, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * c;
    for (std::size_t i = 0; i < c; ++i) {
      double xv = xr[i];
      const double* wr = w.data() + i * o;
      double* orow = out.data() + r * o;
      for (std::size_t j = 0; j < o; ++j) orow[j] += xv * wr[j];
    }
    for (std::size_t j = 0; j < o; ++j) out[r * o + j] += b[j];
  }
}

}  // namespace

ForwardEvaluator::ForwardEvaluator(const TransformerSpec& spec) : spec_(spec) {
  spec_.validate();
}

const std::vector<double>& ForwardEvaluator::operator()(const Tensor& x) {
  std::size_t b = x.extent(0), len = x.extent(1), e = x.extent(2);
  if (e != spec_.embed_dim) throw std::invalid_argument("forward: embed dim mismatch");
  std::size_t rows = b * len;
  std::size_t heads = spec_.num_heads;
  std::size_t hd = spec_.head_dim();
  double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  cur_.assign(x.data(), x.data() + x.numel());
  for (const LayerWeights& w : spec_.layers) {
    dense(cur_, rows, w.wq, w.bq, q_);
    dense(cur_, rows, w.wk, w.bk, k_);
    dense(cur_, rows, w.wv, w.bv, v_);

    scores_.assign(b * heads * len * len, 0.0);
    for (std::size_t bi = 0; bi < b; ++bi) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < len; ++i) {
          for (std::size_t j = 0; j < len; ++j) {
            double acc = 0.0;
            const double* qi = q_.data() + ((bi * len + i) * e) + h * hd;
            const double* kj = k_.data() + ((bi * len + j) * e) + h * hd;
            for (std::size_t d = 0; d < hd; ++d) acc += qi[d] * kj[d];
            scores_[((bi * heads + h) * len + i) * len + j] = acc * inv_sqrt_hd;
          }
          // softmax over j
          double* row = scores_.data() + ((bi * heads + h) * len + i) * len;
          double mx = row[0];
          for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, row[j]);
          double sum = 0.0;
          for (std::size_t j = 0; j < len; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
          }
          for (std::size_t j = 0; j < len; ++j) row[j] /= sum;
        }
      }
    }

    ctx_.assign(rows * e, 0.0);
    for (std::size_t bi = 0; bi < b; ++bi) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < len; ++i) {
          const double* prow = scores_.data() + ((bi * heads + h) * len + i) * len;
          double* crow = ctx_.data() + (bi * len + i) * e + h * hd;
          for (std::size_t j = 0; j < len; ++j) {
            const double* vj = v_.data() + (bi * len + j) * e + h * hd;
            double p = prow[j];
            for (std::size_t d = 0; d < hd; ++d) crow[d] += p * vj[d];
          }
        }
      }
    }

    dense(ctx_, rows, w.wo, w.bo, attn_);
    for (std::size_t i = 0; i < cur_.size(); ++i) cur_[i] += attn_[i];

    dense(cur_, rows, w.w1, w.b1, ffn_);
    for (double& v : ffn_) v = apply_activation(spec_.activation, v);
    dense(ffn_, rows, w.w2, w.b2, attn_);
    for (std::size_t i = 0; i < cur_.size(); ++i) cur_[i] += attn_[i];
  }

  // Mean-pool over positions, then the classifier head.
  pooled_.assign(b * e, 0.0);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t d = 0; d < e; ++d) pooled_[bi * e + d] += cur_[(bi * len + i) * e + d];
    }
    for (std::size_t d = 0; d < e; ++d) pooled_[bi * e + d] /= static_cast<double>(len);
  }
  dense(pooled_, b, spec_.wc, spec_.bc, logits_);
  return logits_;
}

Tensor forward(const TransformerSpec& spec, const Tensor& x) {
  if (x.rank() != 3) throw std::invalid_argument("forward: input must be [batch, length, embed]");
  ForwardEvaluator eval(spec);
  const std::vector<double>& logits = eval(x);
  return Tensor({x.extent(0), 1, spec.num_classes}, logits);
}

}  // namespace faith::model
