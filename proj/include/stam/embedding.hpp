#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "stam/errors.hpp"
#include "stam/graph.hpp"
#include "stam/ops.hpp"
#include "stam/rng.hpp"
#include "stam/tensor.hpp"

namespace stam {

// Non-overlapping P x P tiling of an H x W x C frame.
struct PatchGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::size_t patch = 0;

  void validate() const {
    if (patch == 0 || height == 0 || width == 0 || channels == 0 ||
        height % patch != 0 || width % patch != 0) {
      throw ConfigError("frame " + std::to_string(height) + "x" + std::to_string(width) +
                        " (H x W) is not divisible into patches of side P=" +
                        std::to_string(patch));
    }
  }
  std::size_t rows() const { return height / patch; }
  std::size_t cols() const { return width / patch; }
  std::size_t num_patches() const { return rows() * cols(); }
  std::size_t patch_dim() const { return channels * patch * patch; }
};

// [H, W, C] -> [N, C*P*P]. Patches are ordered row-major over the patch grid
// and each patch is flattened row-major over (row, col, channel).
template <typename T>
Tensor<T> patchify(const Tensor<T>& frame, std::size_t patch) {
  if (frame.rank() != 3) {
    throw DimensionError("patchify: expected [H, W, C], got " + shape_str(frame.shape()));
  }
  const PatchGrid grid{frame.dim(0), frame.dim(1), frame.dim(2), patch};
  grid.validate();
  const std::size_t w = grid.width, c = grid.channels, p = patch;
  Tensor<T> out(Shape{grid.num_patches(), grid.patch_dim()});
  T* dst = out.ptr();
  for (std::size_t gr = 0; gr < grid.rows(); ++gr)
    for (std::size_t gc = 0; gc < grid.cols(); ++gc)
      for (std::size_t r = 0; r < p; ++r) {
        const T* src = frame.ptr() + ((gr * p + r) * w + gc * p) * c;
        for (std::size_t i = 0; i < p * c; ++i) *dst++ = src[i];
      }
  return out;
}

// [F, H, W, C] -> [F, N, C*P*P]
template <typename T>
Tensor<T> patchify_clip(const Tensor<T>& clip, std::size_t patch) {
  if (clip.rank() != 4) {
    throw DimensionError("patchify_clip: expected [F, H, W, C], got " + shape_str(clip.shape()));
  }
  const std::size_t frames = clip.dim(0);
  const std::size_t frame_size = clip.numel() / frames;
  const PatchGrid grid{clip.dim(1), clip.dim(2), clip.dim(3), patch};
  grid.validate();
  Tensor<T> out(Shape{frames, grid.num_patches(), grid.patch_dim()});
  const std::size_t out_size = grid.num_patches() * grid.patch_dim();
  for (std::size_t f = 0; f < frames; ++f) {
    Tensor<T> frame(Shape{clip.dim(1), clip.dim(2), clip.dim(3)},
                    std::vector<T>(clip.ptr() + f * frame_size,
                                   clip.ptr() + (f + 1) * frame_size));
    const Tensor<T> patches = patchify(frame, patch);
    std::copy_n(patches.ptr(), out_size, out.ptr() + f * out_size);
  }
  return out;
}

// Patch projection E [D, C*P*P], positional table [F, N+1, D] indexed by
// (frame, token) with token 0 the class position, and one class token [D]
// shared by every frame.
template <typename T>
struct EmbeddingParams {
  Tensor<T> projection;
  Tensor<T> positions;
  Tensor<T> class_token;

  static EmbeddingParams init(std::size_t frames, const PatchGrid& grid, std::size_t dim,
                              Rng& rng, double std = 0.02) {
    grid.validate();
    EmbeddingParams p{Tensor<T>(Shape{dim, grid.patch_dim()}),
                      Tensor<T>(Shape{frames, grid.num_patches() + 1, dim}),
                      Tensor<T>(Shape{dim})};
    for (auto& v : p.projection.data()) v = static_cast<T>(rng.normal(0.0, std));
    for (auto& v : p.positions.data()) v = static_cast<T>(rng.normal(0.0, std));
    return p;
  }

  std::size_t dim() const { return projection.dim(0); }
  std::size_t frames() const { return positions.dim(0); }
  std::size_t tokens_per_frame() const { return positions.dim(1); }
};

// Token sequence of a clip: out[t, 0] = class_token + pos[t, 0] and
// out[t, p] = E x_(p,t) + pos[t, p] for p >= 1. Returns [F, N+1, D].
template <typename T>
Var embed_clip(Graph<T>& g, const Tensor<T>& clip, EmbeddingParams<T>& params,
               std::size_t patch) {
  if (clip.rank() != 4) {
    throw ConfigError("embed_clip: expected clip [F, H, W, C], got " + shape_str(clip.shape()));
  }
  const PatchGrid grid{clip.dim(1), clip.dim(2), clip.dim(3), patch};
  grid.validate();
  const std::size_t frames = clip.dim(0);
  if (params.projection.rank() != 2 || params.projection.dim(1) != grid.patch_dim() ||
      params.positions.rank() != 3 || params.positions.dim(0) != frames ||
      params.positions.dim(1) != grid.num_patches() + 1 ||
      params.positions.dim(2) != params.dim() ||
      params.class_token.shape() != Shape{params.dim()}) {
    throw ConfigError("embed_clip: clip " + shape_str(clip.shape()) + " with P=" +
                      std::to_string(patch) + " does not match projection " +
                      shape_str(params.projection.shape()) + ", positions " +
                      shape_str(params.positions.shape()) + ", class token " +
                      shape_str(params.class_token.shape()));
  }
  Var patches = g.input(patchify_clip(clip, patch));
  Var tokens = linear(g, patches, g.param(params.projection));
  Var with_cls = prepend_token(g, tokens, g.param(params.class_token));
  return add(g, with_cls, g.param(params.positions));
}

}  // namespace stam
