#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stam/errors.hpp"
#include "stam/graph.hpp"
#include "stam/ops.hpp"
#include "stam/rng.hpp"
#include "stam/tensor.hpp"

namespace stam {

enum class AttentionKind { spatial, temporal, joint };

inline std::string_view to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::spatial: return "spatial";
    case AttentionKind::temporal: return "temporal";
    case AttentionKind::joint: return "joint";
  }
  return "unknown";
}

// Which tokens each query attends to. Every row has the same number of keys;
// index[row * width + j] is the sequence position of key j of that row.
struct KeySet {
  std::size_t rows = 0;
  std::size_t width = 0;
  std::vector<std::uint32_t> index;

  std::uint32_t at(std::size_t row, std::size_t j) const { return index[row * width + j]; }

  // Every token attends to the whole sequence (temporal stack).
  static KeySet full(std::size_t seq_len) {
    KeySet ks{seq_len, seq_len, std::vector<std::uint32_t>(seq_len * seq_len)};
    for (std::size_t i = 0; i < seq_len; ++i)
      for (std::size_t j = 0; j < seq_len; ++j) ks.index[i * seq_len + j] = static_cast<std::uint32_t>(j);
    return ks;
  }

  // Frames of `tokens` consecutive positions; a token attends only within its
  // own frame (spatial stack).
  static KeySet per_frame(std::size_t frames, std::size_t tokens) {
    KeySet ks{frames * tokens, tokens, std::vector<std::uint32_t>(frames * tokens * tokens)};
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t i = 0; i < tokens; ++i)
        for (std::size_t j = 0; j < tokens; ++j)
          ks.index[((t * tokens) + i) * tokens + j] = static_cast<std::uint32_t>(t * tokens + j);
    return ks;
  }

  // Joint space-time key set over frames of (1 + patches) tokens: a token of
  // frame t attends to the class token of frame t followed by every patch
  // token of every frame, in (frame, patch) order. Class tokens of other
  // frames are not keys.
  static KeySet joint(std::size_t frames, std::size_t patches) {
    const std::size_t tokens = patches + 1;
    const std::size_t width = frames * patches + 1;
    KeySet ks{frames * tokens, width, std::vector<std::uint32_t>(frames * tokens * width)};
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t i = 0; i < tokens; ++i) {
        std::uint32_t* row = ks.index.data() + (t * tokens + i) * width;
        *row++ = static_cast<std::uint32_t>(t * tokens);
        for (std::size_t t2 = 0; t2 < frames; ++t2)
          for (std::size_t p = 1; p <= patches; ++p) *row++ = static_cast<std::uint32_t>(t2 * tokens + p);
      }
    return ks;
  }
};

// Multiply-accumulates executed by attention_scores on this thread.
inline std::uint64_t& score_mac_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

// Weights of one attention block. The per-head projections W_Q, W_K, W_V
// [D_h, D] are stacked along rows into [D, D] (head a owns rows
// a*D_h .. (a+1)*D_h); W_O consumes the head outputs concatenated in head
// order.
template <typename T>
struct BlockParams {
  std::size_t heads = 1;
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> wq, wk, wv, wo;
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> w1, b1, w2, b2;

  static BlockParams init(std::size_t dim, std::size_t heads, std::size_t mlp_dim, Rng& rng,
                          double std = 0.02) {
    if (heads == 0 || dim % heads != 0) {
      throw ConfigError("model width D=" + std::to_string(dim) +
                        " is not divisible by head count A=" + std::to_string(heads));
    }
    BlockParams p;
    p.heads = heads;
    p.ln1_gamma = Tensor<T>(Shape{dim}, T{1});
    p.ln1_beta = Tensor<T>(Shape{dim});
    p.ln2_gamma = Tensor<T>(Shape{dim}, T{1});
    p.ln2_beta = Tensor<T>(Shape{dim});
    for (Tensor<T>* w : {&p.wq, &p.wk, &p.wv, &p.wo}) *w = Tensor<T>(Shape{dim, dim});
    p.w1 = Tensor<T>(Shape{mlp_dim, dim});
    p.b1 = Tensor<T>(Shape{mlp_dim});
    p.w2 = Tensor<T>(Shape{dim, mlp_dim});
    p.b2 = Tensor<T>(Shape{dim});
    for (Tensor<T>* w : {&p.wq, &p.wk, &p.wv, &p.wo, &p.w1, &p.w2})
      for (auto& v : w->data()) v = static_cast<T>(rng.normal(0.0, std));
    return p;
  }

  std::size_t dim() const { return wq.dim(1); }
  std::size_t head_dim() const { return dim() / heads; }
  std::size_t mlp_dim() const { return w1.dim(0); }

  std::vector<std::pair<std::string, Tensor<T>*>> named(const std::string& prefix) {
    return {{prefix + "attn.wk", &wk},      {prefix + "attn.wo", &wo},
            {prefix + "attn.wq", &wq},      {prefix + "attn.wv", &wv},
            {prefix + "ln1.beta", &ln1_beta}, {prefix + "ln1.gamma", &ln1_gamma},
            {prefix + "ln2.beta", &ln2_beta}, {prefix + "ln2.gamma", &ln2_gamma},
            {prefix + "mlp.b1", &b1},       {prefix + "mlp.b2", &b2},
            {prefix + "mlp.w1", &w1},       {prefix + "mlp.w2", &w2}};
  }
};

// Softmax weights of one head of one layer. Row i holds the weights over the
// keys listed in keys[i * width ...]; dense() scatters them into a full
// [queries, seq_len] matrix with zeros for positions that are not keys.
template <typename T>
struct AttentionRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  AttentionKind kind = AttentionKind::spatial;
  Tensor<T> weights;
  std::vector<std::uint32_t> keys;

  Tensor<T> dense(std::size_t seq_len) const {
    const std::size_t rows = weights.dim(0), width = weights.dim(1);
    Tensor<T> out(Shape{rows, seq_len});
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < width; ++j) out[i * seq_len + keys[i * width + j]] = weights[i * width + j];
    return out;
  }
};

template <typename T>
using AttentionRecorder = std::vector<AttentionRecord<T>>;

struct Qkv {
  Var q, k, v;
};

// q, k, v [S, D_h] of one head: W_Q^(a) LN1(z) per token (likewise k, v).
template <typename T>
Qkv qkv_project(Graph<T>& g, Var z, BlockParams<T>& block, std::size_t head) {
  if (head >= block.heads) {
    throw ConfigError("head index " + std::to_string(head) + " out of range for A=" +
                      std::to_string(block.heads));
  }
  const std::size_t dh = block.head_dim();
  Var x = layer_norm(g, z, g.param(block.ln1_gamma), g.param(block.ln1_beta));
  auto proj = [&](Tensor<T>& w) {
    return linear(g, x, slice_rows(g, g.param(w), head * dh, (head + 1) * dh));
  };
  return {proj(block.wq), proj(block.wk), proj(block.wv)};
}

// Scaled dot products q_i . k_key / sqrt(D_h) for every head over the key set:
// q, k [S, A*D_h] -> [A, S, K].
template <typename T>
Var attention_scores(Graph<T>& g, Var q, Var k, const KeySet& keys, std::size_t heads) {
  const Tensor<T>& qv = g.value(q);
  const Tensor<T>& kv = g.value(k);
  if (qv.rank() != 2 || kv.rank() != 2 || qv.dim(1) != kv.dim(1) || heads == 0 ||
      qv.dim(1) % heads != 0 || qv.dim(0) != keys.rows) {
    throw DimensionError("attention_scores: q " + shape_str(qv.shape()) + " and k " +
                         shape_str(kv.shape()) + " incompatible with " +
                         std::to_string(keys.rows) + " query rows and " + std::to_string(heads) +
                         " heads");
  }
  for (std::uint32_t key : keys.index) {
    if (key >= kv.dim(0)) throw DimensionError("attention_scores: key index out of range");
  }
  const std::size_t s = keys.rows, kw = keys.width, d = qv.dim(1), dh = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  Tensor<T> y(Shape{heads, s, kw});
  std::uint64_t macs = 0;
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < s; ++i) {
      const T* qi = qv.ptr() + i * d + h * dh;
      T* yi = y.ptr() + (h * s + i) * kw;
      for (std::size_t j = 0; j < kw; ++j) {
        yi[j] = kernels::dot(qi, kv.ptr() + keys.at(i, j) * d + h * dh, dh) * scale;
        macs += dh;
      }
    }
  score_mac_counter() += macs;
  return g.record(std::move(y), {q, k}, [=, index = keys.index](Graph<T>& g, const Tensor<T>&,
                                                                 std::span<const T> dy) {
    const T* qp = g.value(q).ptr();
    const T* kp = g.value(k).ptr();
    const bool gq = g.requires_grad(q), gk = g.requires_grad(k);
    T* dq = gq ? g.grad(q).data() : nullptr;
    T* dk = gk ? g.grad(k).data() : nullptr;
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < s; ++i) {
        const T* dyi = dy.data() + (h * s + i) * kw;
        for (std::size_t j = 0; j < kw; ++j) {
          const T c = dyi[j] * scale;
          const std::size_t key = index[i * kw + j];
          if (gq) {
            T* dqi = dq + i * d + h * dh;
            const T* kk = kp + key * d + h * dh;
            for (std::size_t e = 0; e < dh; ++e) dqi[e] += c * kk[e];
          }
          if (gk) {
            T* dkk = dk + key * d + h * dh;
            const T* qi = qp + i * d + h * dh;
            for (std::size_t e = 0; e < dh; ++e) dkk[e] += c * qi[e];
          }
        }
      }
  });
}

// Weighted sum of values: alpha [A, S, K], v [S, A*D_h] -> [S, A*D_h], the
// head outputs concatenated in head order.
template <typename T>
Var attention_combine(Graph<T>& g, Var alpha, Var v, const KeySet& keys) {
  const Tensor<T>& av = g.value(alpha);
  const Tensor<T>& vv = g.value(v);
  if (av.rank() != 3 || vv.rank() != 2 || av.dim(1) != keys.rows || av.dim(2) != keys.width ||
      vv.dim(1) % av.dim(0) != 0) {
    throw DimensionError("attention_combine: weights " + shape_str(av.shape()) +
                         " and values " + shape_str(vv.shape()) + " do not conform");
  }
  const std::size_t heads = av.dim(0), s = keys.rows, kw = keys.width, d = vv.dim(1),
                    dh = d / heads;
  Tensor<T> y(Shape{s, d});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < s; ++i) {
      const T* ai = av.ptr() + (h * s + i) * kw;
      T* yi = y.ptr() + i * d + h * dh;
      for (std::size_t j = 0; j < kw; ++j) {
        const T a = ai[j];
        const T* vk = vv.ptr() + keys.at(i, j) * d + h * dh;
        for (std::size_t e = 0; e < dh; ++e) yi[e] += a * vk[e];
      }
    }
  return g.record(std::move(y), {alpha, v}, [=, index = keys.index](Graph<T>& g, const Tensor<T>&,
                                                                     std::span<const T> dy) {
    const T* ap = g.value(alpha).ptr();
    const T* vp = g.value(v).ptr();
    const bool ga = g.requires_grad(alpha), gv = g.requires_grad(v);
    T* da = ga ? g.grad(alpha).data() : nullptr;
    T* dv = gv ? g.grad(v).data() : nullptr;
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < s; ++i) {
        const T* dyi = dy.data() + i * d + h * dh;
        for (std::size_t j = 0; j < kw; ++j) {
          const std::size_t key = index[i * kw + j];
          if (ga) da[(h * s + i) * kw + j] += kernels::dot(dyi, vp + key * d + h * dh, dh);
          if (gv) {
            const T a = ap[(h * s + i) * kw + j];
            T* dvk = dv + key * d + h * dh;
            for (std::size_t e = 0; e < dh; ++e) dvk[e] += a * dyi[e];
          }
        }
      }
  });
}

// Single-head attention over the whole sequence: q, k [S, D_h] -> [S, S].
template <typename T>
Var attention_weights(Graph<T>& g, Var q, Var k) {
  const std::size_t s = g.value(q).dim(0);
  const KeySet keys = KeySet::full(s);
  Var scores = attention_scores(g, q, k, keys, 1);
  return reshape(g, softmax(g, scores), Shape{s, s});
}

// Single-head combine: alpha [S, S], v [S, D_h] -> [S, D_h].
template <typename T>
Var attention_combine(Graph<T>& g, Var alpha, Var v) {
  const Tensor<T>& av = g.value(alpha);
  if (av.rank() != 2 || av.dim(0) != av.dim(1)) {
    throw DimensionError("attention_combine: weights must be [S, S], got " + shape_str(av.shape()));
  }
  const std::size_t s = av.dim(0);
  const KeySet keys = KeySet::full(s);
  return attention_combine(g, reshape(g, alpha, Shape{1, s, s}), v, keys);
}

// Joint space-time weights for q, k [F*(N+1), A*D_h]: every row spans the
// N*F + 1 keys of KeySet::joint. Returns [A, F*(N+1), N*F + 1].
template <typename T>
Var joint_attention_weights(Graph<T>& g, Var q, Var k, std::size_t frames, std::size_t patches,
                            std::size_t heads) {
  const KeySet keys = KeySet::joint(frames, patches);
  return softmax(g, attention_scores(g, q, k, keys, heads));
}

// One pre-norm attention block over z [S, D]:
//   z' = W_O [s^(1); ...; s^(A)] + z,   out = MLP(LN2(z')) + z'
// with attention restricted to `keys`. Weights are appended to `recorder`
// when it is non-null.
template <typename T>
Var msa_block(Graph<T>& g, Var z, BlockParams<T>& block, const KeySet& keys, AttentionKind kind,
              std::size_t layer, AttentionRecorder<T>* recorder = nullptr) {
  const Tensor<T>& zv = g.value(z);
  if (zv.rank() != 2 || zv.dim(0) != keys.rows || zv.dim(1) != block.dim()) {
    throw ConfigError(std::string(to_string(kind)) + " block " + std::to_string(layer) +
                      ": input " + shape_str(zv.shape()) + " does not match " +
                      std::to_string(keys.rows) + " tokens of width " + std::to_string(block.dim()));
  }
  Var x = layer_norm(g, z, g.param(block.ln1_gamma), g.param(block.ln1_beta));
  Var q = linear(g, x, g.param(block.wq));
  Var k = linear(g, x, g.param(block.wk));
  Var v = linear(g, x, g.param(block.wv));
  Var alpha = softmax(g, attention_scores(g, q, k, keys, block.heads));
  if (recorder) {
    const Tensor<T>& av = g.value(alpha);
    const std::size_t per_head = keys.rows * keys.width;
    for (std::size_t h = 0; h < block.heads; ++h) {
      recorder->push_back(AttentionRecord<T>{
          layer, h, kind,
          Tensor<T>(Shape{keys.rows, keys.width},
                    std::vector<T>(av.ptr() + h * per_head, av.ptr() + (h + 1) * per_head)),
          keys.index});
    }
  }
  Var heads_out = attention_combine(g, alpha, v, keys);
  Var z1 = add(g, linear(g, heads_out, g.param(block.wo)), z);
  Var h = layer_norm(g, z1, g.param(block.ln2_gamma), g.param(block.ln2_beta));
  h = gelu(g, linear(g, h, g.param(block.w1), g.param(block.b1)));
  return add(g, linear(g, h, g.param(block.w2), g.param(block.b2)), z1);
}

}  // namespace stam
