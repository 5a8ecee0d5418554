#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "stam/gradcheck.hpp"
#include "stam/model.hpp"
#include "stam/ops.hpp"
#include "stam/rng.hpp"

namespace stam {

struct ModelCheckOptions {
  std::uint64_t seed = 0;
  double step = 1e-5;
  // Coordinates drawn from every tensor; smaller tensors are checked whole.
  std::size_t per_tensor = 64;
  std::size_t clips = 2;
  // Std of Gaussian noise added to every initialized parameter, so the check
  // runs at a generic point rather than at zero tokens, zero biases and
  // near-uniform attention.
  double jitter = 0.1;
  // Negative control: perturbs one analytic gradient entry before comparison.
  bool corrupt_gradient = false;
};

// Finite-difference check of the full model: mean cross-entropy of `clips`
// random clips with random labels, parameters initialized from `seed`.
inline GradCheckReport<double> model_gradient_check(const ModelConfig& c, const ModelCheckOptions& o) {
  c.validate();
  ModelParams<double> params = ModelParams<double>::init(c, o.seed);
  Rng rng(derive_seed(o.seed, 1));
  if (o.jitter > 0)
    for (auto* t : params.tensors())
      for (auto& v : t->data()) v += rng.normal(0.0, o.jitter);
  std::vector<Tensor<double>> clips;
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < o.clips; ++i) {
    Tensor<double> clip(Shape{c.frames, c.height, c.width, c.channels});
    for (auto& v : clip.data()) v = rng.uniform();
    clips.push_back(std::move(clip));
    labels.push_back(rng.index(c.num_classes));
  }
  auto loss = [&](Graph<double>& g) {
    std::vector<Var> logits;
    for (const auto& clip : clips) logits.push_back(forward(g, params, c, clip));
    return cross_entropy(g, stack(g, logits), std::span<const std::size_t>(labels));
  };
  const std::vector<Tensor<double>*> tensors = params.tensors();
  const std::span<Tensor<double>* const> view(tensors);
  const std::vector<ParamCoord> coords = sample_coords<double>(view, o.per_tensor, rng);
  std::function<void(std::span<Tensor<double>* const>)> tamper;
  if (o.corrupt_gradient) {
    const ParamCoord target = coords.front();
    tamper = [target](std::span<Tensor<double>* const> ps) {
      auto g = ps[target.tensor]->grad();
      g[target.index] = g[target.index] * 1.5 + 1e-3;
    };
  }
  return finite_difference_check<double>(loss, view, o.step, coords, tamper);
}

}  // namespace stam
