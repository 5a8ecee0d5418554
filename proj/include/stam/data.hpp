#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stam/errors.hpp"
#include "stam/rng.hpp"
#include "stam/tensor.hpp"

namespace stam {

// A clip of T frames [T, H, W, C] with values in [0, 1].
struct VideoClip {
  Tensor<float> frames;
  std::uint32_t label = 0;
  std::uint64_t source_id = 0;
  // Frame that carries the class signal (key-frame task only), else -1.
  std::int32_t signal_frame = -1;

  std::size_t num_frames() const { return frames.dim(0); }
};

// Indices of F frames spread uniformly over a T-frame video, taking the
// midpoint of each of F equal segments: floor((i + 0.5) * T / F).
inline std::vector<std::size_t> uniform_sample(std::size_t total, std::size_t count) {
  if (count == 0 || count > total) {
    throw SamplingError("cannot sample " + std::to_string(count) + " frames from a video of " +
                        std::to_string(total) + " frames");
  }
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = ((2 * i + 1) * total) / (2 * count);
  return idx;
}

// Clip restricted to the given frame indices.
inline VideoClip select_frames(const VideoClip& clip, const std::vector<std::size_t>& indices) {
  const Shape& s = clip.frames.shape();
  const std::size_t frame_size = s[1] * s[2] * s[3];
  std::vector<float> data;
  data.reserve(indices.size() * frame_size);
  for (std::size_t t : indices) {
    if (t >= s[0]) throw SamplingError("frame index " + std::to_string(t) + " out of range");
    const float* src = clip.frames.ptr() + t * frame_size;
    data.insert(data.end(), src, src + frame_size);
  }
  VideoClip out = clip;
  out.frames = Tensor<float>(Shape{indices.size(), s[1], s[2], s[3]}, std::move(data));
  out.signal_frame = -1;
  for (std::size_t i = 0; i < indices.size(); ++i)
    if (static_cast<std::int32_t>(indices[i]) == clip.signal_frame) out.signal_frame = static_cast<std::int32_t>(i);
  return out;
}

enum class Task { order_pair, moving_bar, key_frame };

inline std::string_view to_string(Task t) {
  switch (t) {
    case Task::order_pair: return "order-pair";
    case Task::moving_bar: return "moving-bar";
    case Task::key_frame: return "key-frame";
  }
  return "unknown";
}

inline Task parse_task(const std::string& name) {
  if (name == "order-pair") return Task::order_pair;
  if (name == "moving-bar") return Task::moving_bar;
  if (name == "key-frame") return Task::key_frame;
  throw ConfigError("unknown task '" + name + "' (expected order-pair, moving-bar or key-frame)");
}

// order-pair: every clip shows a bright horizontal bar A and a dim vertical
//   bar B, both at one randomly drawn bar slot, each for half of the frames.
//   The label is the temporal arrangement of the A and B segments (AB / BA
//   with two classes; AABB, BBAA, ABBA, BAAB, ABAB, BABA over quarters
//   otherwise). Every class sees the same multiset of frames; only the order
//   differs.
// moving-bar: a bar sweeps across the frame; the label is the direction
//   (right, left, down, up).
// key-frame: one random frame shows the class pattern, all others are
//   background noise.
struct SyntheticTaskSpec {
  Task task = Task::order_pair;
  std::size_t classes = 4;
  std::size_t frames = 8;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 3;
  double noise_std = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 2) throw ConfigError("synthetic task needs at least 2 classes");
    if (frames == 0 || height < 4 || width < 4 || channels == 0) {
      throw ConfigError("synthetic task needs at least 1 frame of at least 4x4 pixels");
    }
    if (noise_std < 0) throw ConfigError("noise_std must be non-negative");
    switch (task) {
      case Task::order_pair: {
        if (classes > 6) throw ConfigError("order-pair supports at most 6 classes");
        const std::size_t segments = classes == 2 ? 2 : 4;
        if (frames % segments != 0) {
          throw ConfigError("order-pair with " + std::to_string(classes) + " classes needs a frame count divisible by " +
                            std::to_string(segments) + ", got " + std::to_string(frames));
        }
        break;
      }
      case Task::moving_bar:
        if (classes > 4) throw ConfigError("moving-bar supports at most 4 classes");
        if (frames < 2) throw ConfigError("moving-bar needs at least 2 frames");
        break;
      case Task::key_frame:
        if (classes > 6) throw ConfigError("key-frame supports at most 6 classes");
        break;
    }
  }
};

namespace synth {

inline constexpr float kBackground = 0.15f;
inline constexpr float kForeground = 0.85f;
// Order-pair B bars are dimmer, so A and B differ in patch content even at
// slots where both bars cover whole patches.
inline constexpr float kDimForeground = 0.55f;
inline constexpr std::size_t kBarSlots = 3;

enum class Glyph { hbar, vbar, diagonal, antidiagonal, box, cross };

// Binary H x W mask. `slot` in [0, kBarSlots) shifts bars across the frame.
inline std::vector<std::uint8_t> glyph_mask(Glyph glyph, std::size_t slot, std::size_t h, std::size_t w) {
  std::vector<std::uint8_t> m(h * w, 0);
  const std::size_t th = std::max<std::size_t>(1, h / 4), tw = std::max<std::size_t>(1, w / 4);
  const std::size_t r0 = slot * (h - th) / (kBarSlots - 1);
  const std::size_t c0 = slot * (w - tw) / (kBarSlots - 1);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      bool on = false;
      // Diagonals are measured on a square grid scaled to the frame.
      const double u = static_cast<double>(r) / h, v = static_cast<double>(c) / w;
      switch (glyph) {
        case Glyph::hbar: on = r >= r0 && r < r0 + th; break;
        case Glyph::vbar: on = c >= c0 && c < c0 + tw; break;
        case Glyph::diagonal: on = std::abs(u - v) < 0.15; break;
        case Glyph::antidiagonal: on = std::abs(u + v - 1.0) < 0.15; break;
        case Glyph::box:
          on = (r == h / 4 || r == 3 * h / 4 || c == w / 4 || c == 3 * w / 4) && r >= h / 4 &&
               r <= 3 * h / 4 && c >= w / 4 && c <= 3 * w / 4;
          break;
        case Glyph::cross: on = r == h / 2 || c == w / 2 || r + 1 == h / 2 || c + 1 == w / 2; break;
      }
      m[r * w + c] = on ? 1 : 0;
    }
  return m;
}

// Writes mask-shaded pixels plus clamped Gaussian noise into one frame.
inline void paint(float* frame, const std::vector<std::uint8_t>* mask, std::size_t h, std::size_t w,
                  std::size_t c, double noise_std, Rng& rng, float foreground = kForeground) {
  for (std::size_t i = 0; i < h * w; ++i) {
    const float base = (mask && (*mask)[i]) ? foreground : kBackground;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double v = base + noise_std * rng.normal();
      frame[i * c + ch] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
}

inline constexpr std::array<std::string_view, 6> kQuarterArrangements{"AABB", "BBAA", "ABBA",
                                                                       "BAAB", "ABAB", "BABA"};

inline std::string_view arrangement(std::size_t classes, std::size_t label) {
  if (classes == 2) return label == 0 ? "AB" : "BA";
  return kQuarterArrangements[label];
}

}  // namespace synth

// One order-pair clip with a given label and bar slot. Noise is drawn for the
// A frames (in time order) and then for the B frames, so two labels
// generated from the same rng state show exactly the same multiset of frames.
inline VideoClip make_order_pair_clip(const SyntheticTaskSpec& spec, std::size_t label, std::size_t slot,
                                      Rng& rng) {
  const std::size_t t = spec.frames, h = spec.height, w = spec.width, c = spec.channels;
  const std::string_view arr = synth::arrangement(spec.classes, label);
  const auto mask_a = synth::glyph_mask(synth::Glyph::hbar, slot, h, w);
  const auto mask_b = synth::glyph_mask(synth::Glyph::vbar, slot, h, w);
  VideoClip clip{Tensor<float>(Shape{t, h, w, c}), static_cast<std::uint32_t>(label), 0, -1};
  const std::size_t frame_size = h * w * c;
  for (char which : {'A', 'B'}) {
    for (std::size_t f = 0; f < t; ++f) {
      if (arr[f * arr.size() / t] != which) continue;
      synth::paint(clip.frames.ptr() + f * frame_size, which == 'A' ? &mask_a : &mask_b, h, w, c,
                   spec.noise_std, rng, which == 'A' ? synth::kForeground : synth::kDimForeground);
    }
  }
  return clip;
}

inline VideoClip make_moving_bar_clip(const SyntheticTaskSpec& spec, std::size_t label, Rng& rng) {
  const std::size_t t = spec.frames, h = spec.height, w = spec.width, c = spec.channels;
  VideoClip clip{Tensor<float>(Shape{t, h, w, c}), static_cast<std::uint32_t>(label), 0, -1};
  const bool horizontal_motion = label < 2;
  const std::size_t extent = horizontal_motion ? w : h;
  const std::size_t thick = std::max<std::size_t>(1, extent / 8);
  for (std::size_t f = 0; f < t; ++f) {
    std::size_t pos = f * (extent - thick) / (t - 1);
    if (label == 1 || label == 3) pos = extent - thick - pos;
    std::vector<std::uint8_t> mask(h * w, 0);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t col = 0; col < w; ++col) {
        const std::size_t coord = horizontal_motion ? col : r;
        mask[r * w + col] = coord >= pos && coord < pos + thick;
      }
    synth::paint(clip.frames.ptr() + f * h * w * c, &mask, h, w, c, spec.noise_std, rng);
  }
  return clip;
}

inline VideoClip make_key_frame_clip(const SyntheticTaskSpec& spec, std::size_t label,
                                     std::size_t signal_frame, Rng& rng) {
  const std::size_t t = spec.frames, h = spec.height, w = spec.width, c = spec.channels;
  static constexpr std::array<synth::Glyph, 6> glyphs{synth::Glyph::hbar, synth::Glyph::vbar,
                                                      synth::Glyph::diagonal, synth::Glyph::antidiagonal,
                                                      synth::Glyph::box, synth::Glyph::cross};
  const auto mask = synth::glyph_mask(glyphs[label], 1, h, w);
  VideoClip clip{Tensor<float>(Shape{t, h, w, c}), static_cast<std::uint32_t>(label), 0,
                 static_cast<std::int32_t>(signal_frame)};
  for (std::size_t f = 0; f < t; ++f)
    synth::paint(clip.frames.ptr() + f * h * w * c, f == signal_frame ? &mask : nullptr, h, w, c,
                 spec.noise_std, rng);
  return clip;
}

// `count` clips with labels cycling 0, 1, ..., classes-1; deterministic in
// spec.seed.
inline std::vector<VideoClip> gen_synthetic(const SyntheticTaskSpec& spec, std::size_t count) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<VideoClip> clips;
  clips.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t label = i % spec.classes;
    VideoClip clip;
    switch (spec.task) {
      case Task::order_pair: {
        const std::size_t slot = rng.index(synth::kBarSlots);
        clip = make_order_pair_clip(spec, label, slot, rng);
        break;
      }
      case Task::moving_bar: clip = make_moving_bar_clip(spec, label, rng); break;
      case Task::key_frame: {
        const std::size_t key = rng.index(spec.frames);
        clip = make_key_frame_clip(spec, label, key, rng);
        break;
      }
    }
    clip.source_id = i;
    clips.push_back(std::move(clip));
  }
  return clips;
}

// Mirrors every frame left-right.
inline Tensor<float> flip_horizontal(const Tensor<float>& frames) {
  const std::size_t t = frames.dim(0), h = frames.dim(1), w = frames.dim(2), c = frames.dim(3);
  Tensor<float> out(frames.shape());
  for (std::size_t f = 0; f < t; ++f)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t col = 0; col < w; ++col)
        for (std::size_t ch = 0; ch < c; ++ch)
          out[((f * h + r) * w + (w - 1 - col)) * c + ch] = frames[((f * h + r) * w + col) * c + ch];
  return out;
}

struct CropOffset {
  std::size_t row = 0;
  std::size_t col = 0;
  bool operator==(const CropOffset&) const = default;
};

struct AugmentResult {
  VideoClip clip;
  bool flipped = false;
  // Crop origin used for each frame.
  std::vector<CropOffset> offsets;
};

// One flip decision and one crop origin, applied to every frame of the clip.
inline AugmentResult augment(const VideoClip& clip, Rng& rng, bool flip_enabled, std::size_t crop_size) {
  const std::size_t t = clip.frames.dim(0), h = clip.frames.dim(1), w = clip.frames.dim(2),
                    c = clip.frames.dim(3);
  if (crop_size == 0 || crop_size > std::min(h, w)) {
    throw ConfigError("crop size " + std::to_string(crop_size) + " does not fit frames of " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  AugmentResult res;
  res.flipped = flip_enabled && rng.coin();
  const CropOffset origin{rng.index(h - crop_size + 1), rng.index(w - crop_size + 1)};
  const Tensor<float> src = res.flipped ? flip_horizontal(clip.frames) : clip.frames;
  Tensor<float> out(Shape{t, crop_size, crop_size, c});
  for (std::size_t f = 0; f < t; ++f) {
    res.offsets.push_back(origin);
    for (std::size_t r = 0; r < crop_size; ++r) {
      const float* row = src.ptr() + ((f * h + origin.row + r) * w + origin.col) * c;
      std::copy_n(row, crop_size * c, out.ptr() + ((f * crop_size + r) * crop_size) * c);
    }
  }
  res.clip = clip;
  res.clip.frames = std::move(out);
  return res;
}

}  // namespace stam
