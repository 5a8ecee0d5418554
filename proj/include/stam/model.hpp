#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stam/attention.hpp"
#include "stam/config.hpp"
#include "stam/embedding.hpp"
#include "stam/errors.hpp"
#include "stam/graph.hpp"
#include "stam/ops.hpp"
#include "stam/rng.hpp"
#include "stam/tensor.hpp"

namespace stam {

// How frame embeddings become a clip representation.
//   factorized: temporal transformer over the frame embeddings
//   mean_pool:  average of the frame embeddings
//   joint:      spatial blocks run with the joint space-time key set; the
//               class token of the first frame is the readout
enum class Variant { factorized, mean_pool, joint };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::factorized: return "factorized";
    case Variant::mean_pool: return "mean-pool";
    case Variant::joint: return "joint";
  }
  return "unknown";
}

inline Variant parse_variant(const std::string& name) {
  if (name == "factorized") return Variant::factorized;
  if (name == "mean-pool") return Variant::mean_pool;
  if (name == "joint") return Variant::joint;
  throw ConfigError("unknown variant '" + name + "' (expected factorized, mean-pool or joint)");
}

struct ModelConfig {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 3;
  std::size_t patch = 4;
  std::size_t frames = 8;
  std::size_t dim = 64;
  std::size_t heads_space = 4;
  std::size_t heads_time = 4;
  std::size_t layers_space = 2;
  std::size_t layers_time = 2;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 4;
  Variant variant = Variant::factorized;

  // Desk-scale configuration used for the synthetic tasks.
  static ModelConfig desk() { return ModelConfig{}; }

  // 16 frames of 224x224 RGB, ViT-B spatial stack (12 layers, 12 heads) and a
  // 6-layer, 8-head temporal stack.
  static ModelConfig full_scale() {
    ModelConfig c;
    c.height = c.width = 224;
    c.channels = 3;
    c.patch = 16;
    c.frames = 16;
    c.dim = 768;
    c.heads_space = 12;
    c.heads_time = 8;
    c.layers_space = 12;
    c.layers_time = 6;
    c.mlp_ratio = 4;
    c.num_classes = 400;
    return c;
  }

  PatchGrid grid() const { return PatchGrid{height, width, channels, patch}; }
  std::size_t num_patches() const { return grid().num_patches(); }
  std::size_t tokens_per_frame() const { return num_patches() + 1; }
  std::size_t mlp_dim() const { return mlp_ratio * dim; }

  void validate() const {
    grid().validate();
    if (frames == 0) throw ConfigError("frames must be at least 1");
    if (dim == 0) throw ConfigError("dim must be positive");
    if (heads_space == 0 || dim % heads_space != 0) {
      throw ConfigError("dim " + std::to_string(dim) + " is not divisible by heads_space " +
                        std::to_string(heads_space));
    }
    if (heads_time == 0 || dim % heads_time != 0) {
      throw ConfigError("dim " + std::to_string(dim) + " is not divisible by heads_time " +
                        std::to_string(heads_time));
    }
    if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
    if (num_classes == 0) throw ConfigError("classes must be at least 1");
  }

  // Applies one key; returns false when the key is not a model key.
  bool apply(const std::string& key, const std::string& value) {
    auto set = [&](std::size_t& field) {
      field = static_cast<std::size_t>(parse_uint(key, value));
      return true;
    };
    if (key == "height") return set(height);
    if (key == "width") return set(width);
    if (key == "channels") return set(channels);
    if (key == "patch") return set(patch);
    if (key == "frames") return set(frames);
    if (key == "dim") return set(dim);
    if (key == "heads_space") return set(heads_space);
    if (key == "heads_time") return set(heads_time);
    if (key == "layers_space") return set(layers_space);
    if (key == "layers_time") return set(layers_time);
    if (key == "mlp_ratio") return set(mlp_ratio);
    if (key == "classes") return set(num_classes);
    if (key == "variant") {
      variant = parse_variant(value);
      return true;
    }
    return false;
  }

  static ModelConfig from_key_values(const KeyValues& kvs) {
    ModelConfig c;
    for (const auto& [k, v] : kvs) {
      if (!c.apply(k, v)) throw ConfigError("unknown model config key '" + k + "'");
    }
    c.validate();
    return c;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "height=" << height << "\nwidth=" << width << "\nchannels=" << channels
       << "\npatch=" << patch << "\nframes=" << frames << "\ndim=" << dim
       << "\nheads_space=" << heads_space << "\nheads_time=" << heads_time
       << "\nlayers_space=" << layers_space << "\nlayers_time=" << layers_time
       << "\nmlp_ratio=" << mlp_ratio << "\nclasses=" << num_classes
       << "\nvariant=" << to_string(variant) << "\n";
    return os.str();
  }

  bool operator==(const ModelConfig&) const = default;
};

// Closed-form number of learnable scalars. Independent of the variant: every
// variant carries the same tensors.
inline std::uint64_t parameter_count(const ModelConfig& c) {
  const std::uint64_t d = c.dim, dm = c.mlp_dim();
  const std::uint64_t block = 4 * d * d + 2 * d * dm + dm + d + 4 * d;
  return d * c.grid().patch_dim()                      // E
         + c.frames * c.tokens_per_frame() * d         // positional table
         + d                                           // frame class token
         + (c.layers_space + c.layers_time) * block    // blocks
         + 2 * d                                       // frame-embedding LN
         + d                                           // temporal class token
         + 2 * d                                       // final LN
         + c.num_classes * d + c.num_classes;          // classifier
}

template <typename T>
struct ModelParams {
  EmbeddingParams<T> embedding;
  std::vector<BlockParams<T>> spatial;
  Tensor<T> frame_ln_gamma, frame_ln_beta;
  Tensor<T> temporal_token;
  std::vector<BlockParams<T>> temporal;
  Tensor<T> final_ln_gamma, final_ln_beta;
  Tensor<T> head_w, head_b;

  // Normal(0, 0.02) weights; zero biases, class tokens and LN shifts; unit LN
  // scales.
  static ModelParams init(const ModelConfig& c, std::uint64_t seed) {
    c.validate();
    Rng rng(seed);
    ModelParams p;
    p.embedding = EmbeddingParams<T>::init(c.frames, c.grid(), c.dim, rng);
    for (std::size_t l = 0; l < c.layers_space; ++l)
      p.spatial.push_back(BlockParams<T>::init(c.dim, c.heads_space, c.mlp_dim(), rng));
    p.frame_ln_gamma = Tensor<T>(Shape{c.dim}, T{1});
    p.frame_ln_beta = Tensor<T>(Shape{c.dim});
    p.temporal_token = Tensor<T>(Shape{c.dim});
    for (std::size_t l = 0; l < c.layers_time; ++l)
      p.temporal.push_back(BlockParams<T>::init(c.dim, c.heads_time, c.mlp_dim(), rng));
    p.final_ln_gamma = Tensor<T>(Shape{c.dim}, T{1});
    p.final_ln_beta = Tensor<T>(Shape{c.dim});
    p.head_w = Tensor<T>(Shape{c.num_classes, c.dim});
    for (auto& v : p.head_w.data()) v = static_cast<T>(rng.normal(0.0, 0.02));
    p.head_b = Tensor<T>(Shape{c.num_classes});
    return p;
  }

  // Every tensor with its checkpoint name, sorted by name.
  std::vector<std::pair<std::string, Tensor<T>*>> named() {
    std::vector<std::pair<std::string, Tensor<T>*>> out{
        {"embed.cls", &embedding.class_token},
        {"embed.pos", &embedding.positions},
        {"embed.proj", &embedding.projection},
        {"frame_ln.beta", &frame_ln_beta},
        {"frame_ln.gamma", &frame_ln_gamma},
        {"temporal.cls", &temporal_token},
        {"final_ln.beta", &final_ln_beta},
        {"final_ln.gamma", &final_ln_gamma},
        {"head.b", &head_b},
        {"head.w", &head_w}};
    for (std::size_t l = 0; l < spatial.size(); ++l)
      for (auto& e : spatial[l].named("spatial." + std::to_string(l) + ".")) out.push_back(e);
    for (std::size_t l = 0; l < temporal.size(); ++l)
      for (auto& e : temporal[l].named("temporal." + std::to_string(l) + ".")) out.push_back(e);
    std::sort(out.begin(), out.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
  }

  std::vector<Tensor<T>*> tensors() {
    std::vector<Tensor<T>*> out;
    for (auto& e : named()) out.push_back(e.second);
    return out;
  }

  std::uint64_t count() {
    std::uint64_t n = 0;
    for (auto* t : tensors()) n += t->numel();
    return n;
  }

  void zero_grad() {
    for (auto* t : tensors()) t->zero_grad();
  }
};

namespace detail {

template <typename T>
void check_clip(const ModelConfig& c, const Tensor<T>& clip) {
  if (clip.shape() != Shape{c.frames, c.height, c.width, c.channels}) {
    throw ConfigError("clip shape " + shape_str(clip.shape()) + " does not match model input " +
                      shape_str(Shape{c.frames, c.height, c.width, c.channels}));
  }
}

}  // namespace detail

// Token states [F*(N+1), D] after the spatial stack. `kind` selects the
// per-frame key set (spatial) or the joint space-time key set (joint).
template <typename T>
Var encode_tokens(Graph<T>& g, ModelParams<T>& p, const ModelConfig& c, const Tensor<T>& clip,
                  AttentionKind kind, AttentionRecorder<T>* recorder = nullptr) {
  detail::check_clip(c, clip);
  const std::size_t tokens = c.tokens_per_frame();
  Var z = reshape(g, embed_clip(g, clip, p.embedding, c.patch), Shape{c.frames * tokens, c.dim});
  KeySet keys;
  if (kind == AttentionKind::spatial) {
    keys = KeySet::per_frame(c.frames, tokens);
  } else if (kind == AttentionKind::joint) {
    keys = KeySet::joint(c.frames, c.num_patches());
  } else {
    throw ConfigError("encode_tokens: the spatial stack runs spatial or joint attention");
  }
  for (std::size_t l = 0; l < p.spatial.size(); ++l)
    z = msa_block(g, z, p.spatial[l], keys, kind, l, recorder);
  return z;
}

// f_t = LN(z_(0,t)) for every frame: [F, D].
template <typename T>
Var frame_embeddings(Graph<T>& g, ModelParams<T>& p, const ModelConfig& c, const Tensor<T>& clip,
                     AttentionKind kind, AttentionRecorder<T>* recorder = nullptr) {
  Var z = encode_tokens(g, p, c, clip, kind, recorder);
  Var cls = select_token(g, reshape(g, z, Shape{c.frames, c.tokens_per_frame(), c.dim}), 0);
  return layer_norm(g, cls, g.param(p.frame_ln_gamma), g.param(p.frame_ln_beta));
}

template <typename T>
Var spatial_forward(Graph<T>& g, ModelParams<T>& p, const ModelConfig& c, const Tensor<T>& clip,
                    AttentionRecorder<T>* recorder = nullptr) {
  return frame_embeddings(g, p, c, clip, AttentionKind::spatial, recorder);
}

// Prepends the temporal class token to f [F, D], runs the temporal stack and
// returns y = LN(z_0) [D].
template <typename T>
Var temporal_forward(Graph<T>& g, ModelParams<T>& p, Var f,
                     AttentionRecorder<T>* recorder = nullptr) {
  const Tensor<T>& fv = g.value(f);
  if (fv.rank() != 2 || fv.dim(1) != p.temporal_token.numel()) {
    throw DimensionError("temporal_forward: frame embeddings " + shape_str(fv.shape()) +
                         " do not match width " + std::to_string(p.temporal_token.numel()));
  }
  const std::size_t frames = fv.dim(0), d = fv.dim(1);
  Var seq = prepend_token(g, reshape(g, f, Shape{1, frames, d}), g.param(p.temporal_token));
  Var z = reshape(g, seq, Shape{frames + 1, d});
  const KeySet keys = KeySet::full(frames + 1);
  for (std::size_t l = 0; l < p.temporal.size(); ++l)
    z = msa_block(g, z, p.temporal[l], keys, AttentionKind::temporal, l, recorder);
  Var cls = reshape(g, select_token(g, reshape(g, z, Shape{1, frames + 1, d}), 0), Shape{d});
  return layer_norm(g, cls, g.param(p.final_ln_gamma), g.param(p.final_ln_beta));
}

// Single linear layer: logits = W_cls y + b_cls.
template <typename T>
Var classify(Graph<T>& g, ModelParams<T>& p, Var y) {
  const std::size_t d = g.value(y).numel();
  Var logits = linear(g, reshape(g, y, Shape{1, d}), g.param(p.head_w), g.param(p.head_b));
  return reshape(g, logits, Shape{p.head_b.numel()});
}

// Logits [num_classes] for one clip [F, H, W, C] under c.variant.
template <typename T>
Var forward(Graph<T>& g, ModelParams<T>& p, const ModelConfig& c, const Tensor<T>& clip,
            AttentionRecorder<T>* recorder = nullptr) {
  switch (c.variant) {
    case Variant::factorized:
      return classify(g, p, temporal_forward(g, p, spatial_forward(g, p, c, clip, recorder), recorder));
    case Variant::mean_pool:
      return classify(g, p, mean_rows(g, spatial_forward(g, p, c, clip, recorder)));
    case Variant::joint: {
      Var z = encode_tokens(g, p, c, clip, AttentionKind::joint, recorder);
      Var cls = reshape(g, select_token(g, reshape(g, z, Shape{1, c.frames * c.tokens_per_frame(), c.dim}), 0),
                        Shape{c.dim});
      return classify(g, p, layer_norm(g, cls, g.param(p.final_ln_gamma), g.param(p.final_ln_beta)));
    }
  }
  throw ConfigError("unknown variant");
}

template <typename T>
Tensor<T> predict(ModelParams<T>& p, const ModelConfig& c, const Tensor<T>& clip) {
  Graph<T> g;
  return g.value(forward(g, p, c, clip));
}

// Index of the largest logit; ties go to the lowest index.
template <typename T>
std::size_t argmax(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// Per-frame weights [F] of the temporal class token in the last temporal
// layer: averaged over heads, the class-token self weight dropped and the F
// remaining entries renormalized to sum to one.
template <typename T>
Tensor<T> frame_attention_weights(ModelParams<T>& p, const ModelConfig& c, const Tensor<T>& clip) {
  if (c.variant != Variant::factorized) {
    throw UnsupportedVariantError("frame attention weights need the factorized variant, got " +
                                  std::string(to_string(c.variant)));
  }
  if (c.layers_time == 0) throw ConfigError("frame attention weights need at least one temporal layer");
  AttentionRecorder<T> records;
  Graph<T> g;
  forward(g, p, c, clip, &records);
  const std::size_t last = c.layers_time - 1;
  // Summing over heads is enough: the 1/A of the head average cancels in the
  // renormalization.
  std::vector<T> acc(c.frames + 1, T{0});
  for (const auto& r : records) {
    if (r.kind != AttentionKind::temporal || r.layer != last) continue;
    for (std::size_t j = 0; j <= c.frames; ++j) acc[r.keys[j]] += r.weights[j];
  }
  Tensor<T> out(Shape{c.frames});
  T total{0};
  for (std::size_t t = 0; t < c.frames; ++t) total += acc[t + 1];
  for (std::size_t t = 0; t < c.frames; ++t) out[t] = acc[t + 1] / total;
  return out;
}

}  // namespace stam
