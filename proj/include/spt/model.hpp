// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "spt/drop_path.hpp"
#include "spt/numcore/graph.hpp"
#include "spt/random.hpp"
#include "spt/seqdata.hpp"

namespace spt {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  std::size_t layers = 12;
  std::size_t hidden = 192;
  std::size_t heads = 4;
  std::size_t mlp_size = 768;
  std::size_t num_classes = 6;
  std::size_t input_dim = kAlphabetSize;
  std::size_t max_len = 1024;
  bool use_positional = true;
  double drop_path_rate = 0.1;

  std::size_t head_dim() const { return heads == 0 ? 0 : hidden / heads; }

  void validate() const {
    if (hidden == 0 || heads == 0 || mlp_size == 0 || num_classes == 0 || max_len == 0) {
      throw std::invalid_argument("ModelConfig: hidden, heads, mlp_size, num_classes and max_len must be positive");
    }
    if (hidden % heads != 0) {
      throw std::invalid_argument("ModelConfig: hidden size " + std::to_string(hidden) +
                                  " is not divisible by " + std::to_string(heads) + " heads");
    }
    if (input_dim != kAlphabetSize) {
      throw std::invalid_argument("ModelConfig: input_dim must be " + std::to_string(kAlphabetSize));
    }
    if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) {
      throw std::invalid_argument("ModelConfig: drop_path_rate must be in [0, 1)");
    }
  }

  /// Named variants: tiny, small, base. Layers/hidden/heads/MLP are fixed.
  static ModelConfig preset(std::string_view name, std::size_t num_classes = 6) {
    ModelConfig c;
    c.num_classes = num_classes;
    if (name == "tiny") {
      c.layers = 12, c.hidden = 192, c.heads = 4, c.mlp_size = 768;
    } else if (name == "small") {
      c.layers = 12, c.hidden = 384, c.heads = 6, c.mlp_size = 1536;
    } else if (name == "base") {
      c.layers = 12, c.hidden = 768, c.heads = 12, c.mlp_size = 3072;
    } else {
      throw std::invalid_argument("unknown preset '" + std::string(name) + "' (tiny, small, base)");
    }
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"layers", c.layers},       {"hidden", c.hidden},
                     {"heads", c.heads},         {"mlp_size", c.mlp_size},
                     {"num_classes", c.num_classes}, {"input_dim", c.input_dim},
                     {"max_len", c.max_len},     {"use_positional", c.use_positional},
                     {"drop_path_rate", c.drop_path_rate}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.layers = j.value("layers", d.layers);
  c.hidden = j.value("hidden", d.hidden);
  c.heads = j.value("heads", d.heads);
  c.mlp_size = j.value("mlp_size", d.mlp_size);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.input_dim = j.value("input_dim", d.input_dim);
  c.max_len = j.value("max_len", d.max_len);
  c.use_positional = j.value("use_positional", d.use_positional);
  c.drop_path_rate = j.value("drop_path_rate", d.drop_path_rate);
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

enum class ParamGroup { embedding, block, head };

struct ParamInfo {
  std::string name;
  ParamGroup group = ParamGroup::embedding;
  std::size_t block = 0;  // 1-based for ParamGroup::block
  bool weight_decay = false;
};

/// Parameters of one pre-norm transformer block. `Slot` is a matrix for the
/// model itself and a graph Var once bound to a tape.
template <class Slot>
struct BlockParams {
  Slot norm1_scale, norm1_shift;
  Slot wq, bq, wk, bk, wv, bv, wo, bo;
  Slot norm2_scale, norm2_shift;
  Slot fc1_w, fc1_b, fc2_w, fc2_b;
};

template <class Slot>
struct ModelParams {
  Slot proj_w, proj_b;  // d x D, 1 x D
  Slot cls;             // 1 x D
  Slot pos;             // (max_len + 1) x D
  std::vector<BlockParams<Slot>> blocks;
  Slot norm_scale, norm_shift;
  Slot head_w, head_b;  // D x C, 1 x C
};

/// Visits every parameter in canonical order. The order defines checkpoint
/// layout and optimizer state layout.
template <class Params, class F>
void for_each_param(Params& p, F&& f) {
  auto emit = [&](auto& slot, std::string name, ParamGroup group, std::size_t block, bool decay) {
    f(ParamInfo{std::move(name), group, block, decay}, slot);
  };
  emit(p.proj_w, "embed.proj.weight", ParamGroup::embedding, 0, true);
  emit(p.proj_b, "embed.proj.bias", ParamGroup::embedding, 0, false);
  emit(p.cls, "embed.cls", ParamGroup::embedding, 0, false);
  emit(p.pos, "embed.pos", ParamGroup::embedding, 0, false);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    const std::size_t l = i + 1;
    const std::string pre = "blocks." + std::to_string(l) + ".";
    emit(b.norm1_scale, pre + "norm1.scale", ParamGroup::block, l, false);
    emit(b.norm1_shift, pre + "norm1.shift", ParamGroup::block, l, false);
    emit(b.wq, pre + "attn.wq", ParamGroup::block, l, true);
    emit(b.bq, pre + "attn.bq", ParamGroup::block, l, false);
    emit(b.wk, pre + "attn.wk", ParamGroup::block, l, true);
    emit(b.bk, pre + "attn.bk", ParamGroup::block, l, false);
    emit(b.wv, pre + "attn.wv", ParamGroup::block, l, true);
    emit(b.bv, pre + "attn.bv", ParamGroup::block, l, false);
    emit(b.wo, pre + "attn.wo", ParamGroup::block, l, true);
    emit(b.bo, pre + "attn.bo", ParamGroup::block, l, false);
    emit(b.norm2_scale, pre + "norm2.scale", ParamGroup::block, l, false);
    emit(b.norm2_shift, pre + "norm2.shift", ParamGroup::block, l, false);
    emit(b.fc1_w, pre + "mlp.fc1.weight", ParamGroup::block, l, true);
    emit(b.fc1_b, pre + "mlp.fc1.bias", ParamGroup::block, l, false);
    emit(b.fc2_w, pre + "mlp.fc2.weight", ParamGroup::block, l, true);
    emit(b.fc2_b, pre + "mlp.fc2.bias", ParamGroup::block, l, false);
  }
  emit(p.norm_scale, "norm.scale", ParamGroup::head, 0, false);
  emit(p.norm_shift, "norm.shift", ParamGroup::head, 0, false);
  emit(p.head_w, "head.weight", ParamGroup::head, 0, true);
  emit(p.head_b, "head.bias", ParamGroup::head, 0, false);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <class T>
struct SPTModel {
  ModelConfig config;
  ModelParams<Matrix<T>> params;

  template <class F>
  void for_each_parameter(F&& f) {
    for_each_param(params, f);
  }
  template <class F>
  void for_each_parameter(F&& f) const {
    for_each_param(params, f);
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for_each_parameter([&](const ParamInfo&, const Matrix<T>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  /// Same parameters at another precision.
  template <class U>
  SPTModel<U> cast() const {
    SPTModel<U> out = allocate_as<U>();
    std::vector<const Matrix<T>*> src;
    for_each_parameter([&](const ParamInfo&, const Matrix<T>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.for_each_parameter([&](const ParamInfo&, Matrix<U>& m) { m = src[i++]->template cast<U>(); });
    return out;
  }

  template <class U>
  SPTModel<U> allocate_as() const;
};

/// Parameter shapes implied by a config, all zero.
template <class T>
SPTModel<T> allocate_model(const ModelConfig& cfg) {
  cfg.validate();
  const auto D = static_cast<Index>(cfg.hidden);
  const auto M = static_cast<Index>(cfg.mlp_size);
  const auto d = static_cast<Index>(cfg.input_dim);
  const auto C = static_cast<Index>(cfg.num_classes);
  using Mat = Matrix<T>;
  SPTModel<T> m;
  m.config = cfg;
  auto& p = m.params;
  p.proj_w = Mat::Zero(d, D);
  p.proj_b = Mat::Zero(1, D);
  p.cls = Mat::Zero(1, D);
  p.pos = Mat::Zero(static_cast<Index>(cfg.max_len) + 1, D);
  p.blocks.resize(cfg.layers);
  for (auto& b : p.blocks) {
    b.norm1_scale = Mat::Ones(1, D);
    b.norm1_shift = Mat::Zero(1, D);
    for (Mat* w : {&b.wq, &b.wk, &b.wv, &b.wo}) *w = Mat::Zero(D, D);
    for (Mat* w : {&b.bq, &b.bk, &b.bv, &b.bo}) *w = Mat::Zero(1, D);
    b.norm2_scale = Mat::Ones(1, D);
    b.norm2_shift = Mat::Zero(1, D);
    b.fc1_w = Mat::Zero(D, M);
    b.fc1_b = Mat::Zero(1, M);
    b.fc2_w = Mat::Zero(M, D);
    b.fc2_b = Mat::Zero(1, D);
  }
  p.norm_scale = Mat::Ones(1, D);
  p.norm_shift = Mat::Zero(1, D);
  p.head_w = Mat::Zero(D, C);
  p.head_b = Mat::Zero(1, C);
  return m;
}

template <class T>
template <class U>
SPTModel<U> SPTModel<T>::allocate_as() const {
  return allocate_model<U>(config);
}

inline bool is_norm_scale(const std::string& name) {
  return name.size() >= 6 && name.compare(name.size() - 6, 6, ".scale") == 0;
}

/// Truncated normal (std 0.02) for weight matrices, CLS and positional
/// table; zeros for biases and norm shifts; ones for norm scales.
template <class T>
SPTModel<T> build_model(const ModelConfig& cfg, std::uint64_t rng_seed) {
  SPTModel<T> m = allocate_model<T>(cfg);
  Rng rng(derive_seed(rng_seed, "model.init"));
  m.for_each_parameter([&](const ParamInfo& info, Matrix<T>& w) {
    const bool random = info.weight_decay || info.name == "embed.cls" || info.name == "embed.pos";
    if (random) {
      for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(truncated_normal(rng, 0.02));
    } else if (is_norm_scale(info.name)) {
      w.setOnes();
    } else {
      w.setZero();
    }
  });
  return m;
}

template <class T>
std::size_t param_count(const SPTModel<T>& m) {
  return m.param_count();
}

/// Exact parameter count for a config without allocating it.
inline std::size_t param_count(const ModelConfig& c) {
  const std::size_t D = c.hidden, M = c.mlp_size;
  const std::size_t embed = c.input_dim * D + D + D + (c.max_len + 1) * D;
  const std::size_t block = 4 * (D * D + D) + 4 * D + (D * M + M) + (M * D + D);
  const std::size_t head = 2 * D + D * c.num_classes + c.num_classes;
  return embed + c.layers * block + head;
}

// ---------------------------------------------------------------------------
// Forward pass on a tape
// ---------------------------------------------------------------------------

struct ForwardOptions {
  bool training = false;
  std::optional<double> drop_path_rate;  // overrides ModelConfig::drop_path_rate
  std::uint64_t drop_path_seed = 0;
  bool params_require_grad = false;
  bool input_requires_grad = false;
};

struct ForwardPass {
  Var input;                       // P x d encoding
  Var embedded;                    // (P+1) x D, E_0
  std::vector<Var> block_outputs;  // E_1 .. E_L
  std::vector<Var> feature_maps;   // Norm1(E_{l-1}), the tokens block l attends over
  Var z;                           // 1 x D
  Var logits;                      // 1 x C
  ModelParams<Var> params;
};

template <class T>
ModelParams<Var> bind_params(Graph<T>& g, const SPTModel<T>& m, bool requires_grad) {
  ModelParams<Var> vars;
  vars.blocks.resize(m.params.blocks.size());
  std::vector<Var*> slots;
  for_each_param(vars, [&](const ParamInfo&, Var& v) { slots.push_back(&v); });
  std::size_t i = 0;
  m.for_each_parameter([&](const ParamInfo&, const Matrix<T>& w) { *slots[i++] = g.param(w, requires_grad); });
  return vars;
}

/// Multi-head scaled dot-product self-attention on already-normalized rows.
/// Head i uses column slice [i*d_k, (i+1)*d_k) of each projection.
template <class T>
Var attention(Graph<T>& g, const BlockParams<Var>& b, Var x, std::size_t heads) {
  const Var q = g.add(g.matmul(x, b.wq), b.bq);
  const Var k = g.add(g.matmul(x, b.wk), b.bk);
  const Var v = g.add(g.matmul(x, b.wv), b.bv);
  const Index width = g.value(q).cols();
  const Index dk = width / static_cast<Index>(heads);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Index at = static_cast<Index>(h) * dk;
    const Var qh = heads == 1 ? q : g.slice_cols(q, at, dk);
    const Var kh = heads == 1 ? k : g.slice_cols(k, at, dk);
    const Var vh = heads == 1 ? v : g.slice_cols(v, at, dk);
    const Var probs = g.softmax_rows(g.scale(g.matmul_nt(qh, kh), inv_sqrt));
    outs.push_back(g.matmul(probs, vh));
  }
  const Var cat = heads == 1 ? outs[0] : g.concat_cols(outs);
  return g.add(g.matmul(cat, b.wo), b.bo);
}

/// Attention of one block evaluated eagerly (no gradients).
template <class T>
Matrix<T> attention(const SPTModel<T>& m, std::size_t block_index, const Matrix<T>& x) {
  if (block_index < 1 || block_index > m.params.blocks.size()) {
    throw std::out_of_range("attention: block index out of range");
  }
  Graph<T> g;
  const auto& b = m.params.blocks[block_index - 1];
  BlockParams<Var> bv;
  bv.wq = g.param(b.wq, false), bv.bq = g.param(b.bq, false);
  bv.wk = g.param(b.wk, false), bv.bk = g.param(b.bk, false);
  bv.wv = g.param(b.wv, false), bv.bv = g.param(b.bv, false);
  bv.wo = g.param(b.wo, false), bv.bo = g.param(b.bo, false);
  const Var xv = g.constant(x);
  return g.value(attention(g, bv, xv, m.config.heads));
}

/// E_0 = [cls; X * W + b] + pos[0..P].
template <class T>
Var embed(Graph<T>& g, const SPTModel<T>& m, const ModelParams<Var>& p, Var input) {
  const Index P = g.value(input).rows();
  if (static_cast<std::size_t>(P) > m.config.max_len) {
    throw std::length_error("sequence length " + std::to_string(P) + " exceeds max_len " +
                            std::to_string(m.config.max_len));
  }
  const Var ami = g.add(g.matmul(input, p.proj_w), p.proj_b);
  Var e0 = g.concat_rows(p.cls, ami);
  if (m.config.use_positional) e0 = g.add(e0, g.slice_rows(p.pos, 0, P + 1));
  return e0;
}

/// Pre-norm block stack. Records E_1..E_L in `pass.block_outputs`, each
/// block's normalized attention input in `pass.feature_maps` (invalid when
/// that branch was dropped) and the final-normed CLS row in `pass.z`.
template <class T>
void encode(Graph<T>& g, const SPTModel<T>& m, ForwardPass& pass, const ForwardOptions& opt) {
  const auto& cfg = m.config;
  Rng rng(opt.drop_path_seed);
  const double rate = opt.drop_path_rate.value_or(cfg.drop_path_rate);
  Var e = pass.embedded;
  pass.block_outputs.clear();
  pass.feature_maps.clear();
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& b = pass.params.blocks[l];
    const double f_attn = drop_path_factor(rate, opt.training, rng);
    const double f_mlp = drop_path_factor(rate, opt.training, rng);
    Var normed;
    if (f_attn != 0.0) {
      normed = g.layer_norm_rows(e, b.norm1_scale, b.norm1_shift);
      Var branch = attention(g, b, normed, cfg.heads);
      if (f_attn != 1.0) branch = g.scale(branch, static_cast<T>(f_attn));
      e = g.add(e, branch);
    }
    if (f_mlp != 0.0) {
      const Var n2 = g.layer_norm_rows(e, b.norm2_scale, b.norm2_shift);
      const Var hidden = g.gelu(g.add(g.matmul(n2, b.fc1_w), b.fc1_b));
      Var branch = g.add(g.matmul(hidden, b.fc2_w), b.fc2_b);
      if (f_mlp != 1.0) branch = g.scale(branch, static_cast<T>(f_mlp));
      e = g.add(e, branch);
    }
    pass.feature_maps.push_back(normed);
    pass.block_outputs.push_back(e);
  }
  pass.z = g.layer_norm_rows(g.select_row(e, 0), pass.params.norm_scale, pass.params.norm_shift);
}

/// Full forward pass from a P x d encoding to 1 x C logits.
template <class T>
ForwardPass forward(Graph<T>& g, const SPTModel<T>& m, const Matrix<T>& encoding,
                    const ForwardOptions& opt = {}) {
  if (static_cast<std::size_t>(encoding.cols()) != m.config.input_dim) {
    throw ShapeError("forward: encoding has " + std::to_string(encoding.cols()) + " columns, expected " +
                     std::to_string(m.config.input_dim));
  }
  ForwardPass pass;
  pass.params = bind_params(g, m, opt.params_require_grad);
  pass.input = g.input(encoding, opt.input_requires_grad);
  pass.embedded = embed(g, m, pass.params, pass.input);
  encode(g, m, pass, opt);
  pass.logits = g.add(g.matmul(pass.z, pass.params.head_w), pass.params.head_b);
  return pass;
}

/// Raw pre-softmax class scores, evaluation mode.
template <class T>
RowVector<T> classify(const SPTModel<T>& m, const EncodedSequence<T>& enc) {
  Graph<T> g;
  const ForwardPass pass = forward(g, m, enc.matrix);
  return g.value(pass.logits).row(0);
}

/// Argmax with lowest-index tie-break.
template <class Derived>
std::size_t argmax(const Eigen::MatrixBase<Derived>& v) {
  std::size_t best = 0;
  for (Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(static_cast<Index>(best))) best = static_cast<std::size_t>(i);
  }
  return best;
}

template <class T>
std::size_t predict(const SPTModel<T>& m, const EncodedSequence<T>& enc) {
  return argmax(classify(m, enc));
}

}  // namespace spt
