#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <new>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "stam/attention.hpp"
#include "stam/errors.hpp"
#include "stam/ops.hpp"
#include "stam/rng.hpp"

namespace stam {

// Operation counts of one variant. Matrix products count one per
// multiply-accumulate; softmax counts 4 per element (max, exp, sum, divide).
struct StageCounts {
  std::uint64_t qkv = 0;
  std::uint64_t score = 0;
  std::uint64_t softmax = 0;
  std::uint64_t combine = 0;
  std::uint64_t out_proj = 0;
  std::uint64_t mlp = 0;

  std::uint64_t total() const { return qkv + score + softmax + combine + out_proj + mlp; }
  StageCounts& operator+=(const StageCounts& o) {
    qkv += o.qkv;
    score += o.score;
    softmax += o.softmax;
    combine += o.combine;
    out_proj += o.out_proj;
    mlp += o.mlp;
    return *this;
  }
  bool operator==(const StageCounts&) const = default;
};

struct FlopConfig {
  std::size_t frames = 8;
  std::size_t patches = 16;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t layers_space = 2;
  std::size_t layers_time = 2;
  std::size_t mlp_ratio = 4;

  void validate() const {
    if (frames == 0 || patches == 0 || dim == 0 || heads == 0 || mlp_ratio == 0 || dim % heads != 0) {
      throw ConfigError("attention_flops: need positive F, N, D, A, mlp ratio and D divisible by A");
    }
  }
};

struct FlopReport {
  FlopConfig config;
  // Spatial plus temporal stacks.
  StageCounts factorized;
  // L_space blocks over the joint space-time key set.
  StageCounts joint;
  // Class-token-free model: (FN)^2 against FN^2 + F^2, kept as an exact
  // fraction.
  std::uint64_t simplified_joint = 0;
  std::uint64_t simplified_factorized = 0;

  double simplified_ratio() const {
    return static_cast<double>(simplified_joint) / static_cast<double>(simplified_factorized);
  }
  double exact_score_ratio() const { return static_cast<double>(joint.score) / static_cast<double>(factorized.score); }
};

// Counts for one block of `queries` tokens that each see `keys` keys.
inline StageCounts block_counts(std::uint64_t queries, std::uint64_t keys, std::uint64_t dim, std::uint64_t heads,
                                std::uint64_t mlp_dim) {
  StageCounts c;
  c.qkv = 3 * queries * dim * dim;
  c.score = queries * keys * dim;
  c.softmax = 4 * heads * queries * keys;
  c.combine = queries * keys * dim;
  c.out_proj = queries * dim * dim;
  c.mlp = 2 * queries * dim * mlp_dim;
  return c;
}

// Spatial layers see N+1 keys per token over F(N+1) tokens, temporal layers
// F+1 keys over F+1 tokens, and joint layers FN+1 keys over F(N+1) tokens.
inline FlopReport attention_flops(const FlopConfig& cfg) {
  cfg.validate();
  const std::uint64_t f = cfg.frames, n = cfg.patches, d = cfg.dim, a = cfg.heads, dm = cfg.dim * cfg.mlp_ratio;
  FlopReport r;
  r.config = cfg;
  const StageCounts spatial = block_counts(f * (n + 1), n + 1, d, a, dm);
  const StageCounts temporal = block_counts(f + 1, f + 1, d, a, dm);
  const StageCounts joint = block_counts(f * (n + 1), f * n + 1, d, a, dm);
  for (std::size_t l = 0; l < cfg.layers_space; ++l) {
    r.factorized += spatial;
    r.joint += joint;
  }
  for (std::size_t l = 0; l < cfg.layers_time; ++l) r.factorized += temporal;
  r.simplified_joint = (f * n) * (f * n);
  r.simplified_factorized = f * n * n + f * f;
  return r;
}

namespace kernels {

// Forward attention for every head over a key set: out = softmax(q k^T /
// sqrt(D_h)) v, one query row at a time so memory stays O(K).
template <typename T>
void attention_core(const T* q, const T* k, const T* v, T* out, const KeySet& keys, std::size_t dim,
                    std::size_t heads, std::vector<T>& scratch) {
  const std::size_t dh = dim / heads, kw = keys.width;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  scratch.resize(2 * kw);
  T* s = scratch.data();
  T* w = s + kw;
  std::fill(out, out + keys.rows * dim, T{0});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < keys.rows; ++i) {
      const T* qi = q + i * dim + h * dh;
      const std::uint32_t* idx = keys.index.data() + i * kw;
      for (std::size_t j = 0; j < kw; ++j) s[j] = dot(qi, k + idx[j] * dim + h * dh, dh) * scale;
      softmax_row(s, w, kw);
      T* oi = out + i * dim + h * dh;
      for (std::size_t j = 0; j < kw; ++j) {
        const T a = w[j];
        const T* vj = v + idx[j] * dim + h * dh;
        for (std::size_t e = 0; e < dh; ++e) oi[e] += a * vj[e];
      }
    }
}

}  // namespace kernels

struct TimingConfig {
  std::size_t patches = 64;
  std::vector<std::size_t> frames{8, 16, 32, 64};
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t reps = 5;
  std::uint64_t seed = 0;
  // Working-set bound per measurement; larger sizes raise SizeError.
  std::size_t max_bytes = std::size_t{4} << 30;

  void validate() const {
    if (reps < 5) throw ConfigError("timing needs at least 5 repetitions, got " + std::to_string(reps));
    if (frames.empty()) throw ConfigError("timing needs at least one frame count");
    if (patches == 0 || dim == 0 || heads == 0 || dim % heads != 0) {
      throw ConfigError("timing needs positive N, D, A with D divisible by A");
    }
    for (std::size_t f : frames)
      if (f == 0) throw ConfigError("frame counts must be positive");
  }
};

struct TimingRow {
  std::string variant;
  std::size_t frames = 0;
  std::size_t patches = 0;
  std::size_t dim = 0;
  std::uint64_t score_flops = 0;
  std::uint64_t total_flops = 0;
  double median_ms = 0;
};

struct TimingTable {
  std::vector<TimingRow> rows;

  std::vector<TimingRow> of(std::string_view variant) const {
    std::vector<TimingRow> out;
    for (const auto& r : rows)
      if (r.variant == variant) out.push_back(r);
    return out;
  }
};

// Least-squares slope of log(median_ms) against log(F).
inline double loglog_slope(const std::vector<TimingRow>& rows) {
  if (rows.size() < 2) throw ContractError("slope fit needs at least two points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(rows.size());
  for (const auto& r : rows) {
    const double x = std::log(static_cast<double>(r.frames));
    const double y = std::log(r.median_ms);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : (v[m - 1] + v[m]) / 2;
}

template <typename T>
std::vector<T> random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  std::vector<T> out(rows * cols);
  for (auto& x : out) x = static_cast<T>(rng.normal());
  return out;
}

}  // namespace detail

// Median wall time of the forward attention core (scores, softmax, weighted
// sum) of one layer per variant: factorized = one spatial plus one temporal
// layer, joint = one joint layer. Rows are appended to `table` as they are
// measured, so a SizeError leaves the completed rows in place.
template <typename T>
void time_attention(const TimingConfig& cfg, TimingTable& table) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t d = cfg.dim, n = cfg.patches, tokens = n + 1;
  std::vector<T> scratch;
  for (std::size_t f : cfg.frames) {
    const FlopReport flops = attention_flops(FlopConfig{f, n, d, cfg.heads, 1, 1, 4});
    for (const std::string_view variant : {std::string_view("factorized"), std::string_view("joint")}) {
      const bool joint = variant == "joint";
      const std::size_t rows = f * tokens;
      const std::size_t width = joint ? f * n + 1 : tokens;
      const std::size_t bytes = rows * width * sizeof(std::uint32_t) + 4 * rows * d * sizeof(T);
      if (bytes > cfg.max_bytes) {
        throw SizeError("attention benchmark at F=" + std::to_string(f) + ", N=" + std::to_string(n) + " needs " +
                        std::to_string(bytes) + " bytes, limit " + std::to_string(cfg.max_bytes));
      }
      try {
        const KeySet keys = joint ? KeySet::joint(f, n) : KeySet::per_frame(f, tokens);
        const KeySet frame_keys = KeySet::full(f + 1);
        const std::vector<T> q = detail::random_matrix<T>(rows, d, rng);
        const std::vector<T> k = detail::random_matrix<T>(rows, d, rng);
        const std::vector<T> v = detail::random_matrix<T>(rows, d, rng);
        std::vector<T> out(rows * d);
        auto run = [&] {
          kernels::attention_core(q.data(), k.data(), v.data(), out.data(), keys, d, cfg.heads, scratch);
          if (!joint) {
            kernels::attention_core(q.data(), k.data(), v.data(), out.data(), frame_keys, d, cfg.heads, scratch);
          }
        };
        run();
        std::vector<double> ms;
        for (std::size_t r = 0; r < cfg.reps; ++r) {
          const auto t0 = std::chrono::steady_clock::now();
          run();
          ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        }
        const StageCounts& c = joint ? flops.joint : flops.factorized;
        table.rows.push_back(TimingRow{std::string(variant), f, n, d, c.score, c.total(), detail::median(ms)});
      } catch (const std::bad_alloc&) {
        throw SizeError("out of memory timing " + std::string(variant) + " attention at F=" + std::to_string(f) +
                        ", N=" + std::to_string(n));
      }
    }
  }
}

inline std::string timing_csv(const TimingTable& t) {
  std::ostringstream os;
  os << "variant,F,N,D,score_flops,total_flops,median_ms\n";
  os.setf(std::ios::fixed);
  os.precision(6);
  for (const auto& r : t.rows)
    os << r.variant << ',' << r.frames << ',' << r.patches << ',' << r.dim << ',' << r.score_flops << ','
       << r.total_flops << ',' << r.median_ms << '\n';
  return os.str();
}

// Score-stage MACs actually executed by attention_scores for one spatial,
// temporal or joint layer on random inputs.
template <typename T>
std::uint64_t measured_score_macs(std::size_t frames, std::size_t patches, std::size_t dim, std::size_t heads,
                                  AttentionKind kind, std::uint64_t seed = 0) {
  Rng rng(seed);
  const std::size_t tokens = patches + 1;
  KeySet keys;
  switch (kind) {
    case AttentionKind::spatial: keys = KeySet::per_frame(frames, tokens); break;
    case AttentionKind::temporal: keys = KeySet::full(frames + 1); break;
    case AttentionKind::joint: keys = KeySet::joint(frames, patches); break;
  }
  Graph<T> g;
  Var q = g.input(Tensor<T>(Shape{keys.rows, dim}, detail::random_matrix<T>(keys.rows, dim, rng)));
  Var k = g.input(Tensor<T>(Shape{keys.rows, dim}, detail::random_matrix<T>(keys.rows, dim, rng)));
  const std::uint64_t before = score_mac_counter();
  attention_scores(g, q, k, keys, heads);
  return score_mac_counter() - before;
}

}  // namespace stam
