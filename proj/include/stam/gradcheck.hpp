#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "stam/errors.hpp"
#include "stam/graph.hpp"
#include "stam/rng.hpp"
#include "stam/tensor.hpp"

namespace stam {

// One scalar entry of one parameter tensor.
struct ParamCoord {
  std::size_t tensor = 0;
  std::size_t index = 0;
};

template <typename T>
struct GradCheckReport {
  T max_rel_error = T{0};
  std::size_t checked = 0;
  ParamCoord worst{};
  T worst_analytic = T{0};
  T worst_numeric = T{0};
};

// Up to `per_tensor` distinct coordinates from every tensor, chosen with `rng`.
// Tensors with at most `per_tensor` entries are covered completely.
template <typename T>
std::vector<ParamCoord> sample_coords(std::span<Tensor<T>* const> params,
                                      std::size_t per_tensor, Rng& rng) {
  std::vector<ParamCoord> coords;
  for (std::size_t t = 0; t < params.size(); ++t) {
    const std::size_t n = params[t]->numel();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (n > per_tensor) {
      rng.shuffle(std::span<std::size_t>(idx));
      idx.resize(per_tensor);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) coords.push_back({t, i});
  }
  return coords;
}

// Compares reverse-mode gradients of the scalar `loss` against central
// differences (f(p + h) - f(p - h)) / 2h. The relative error of an entry is
// |analytic - fd| / max(|analytic|, |fd|, 1e-12); the maximum is returned.
//
// `loss` records a forward pass on the graph it is given and returns the
// scalar output. An empty `coords` checks every entry of every tensor.
// `tamper`, if set, edits the analytic gradients before comparison (used as a
// negative control).
template <typename T, typename Loss>
GradCheckReport<T> finite_difference_check(
    Loss&& loss, std::span<Tensor<T>* const> params, T step,
    std::span<const ParamCoord> coords = {},
    const std::function<void(std::span<Tensor<T>* const>)>& tamper = {}) {
  if (!(step > T{0})) throw ContractError("finite_difference_check: step must be positive");

  auto evaluate = [&]() -> T {
    Graph<T> g;
    Var out = loss(g);
    if (g.value(out).numel() != 1) {
      throw ContractError("finite_difference_check: loss must be scalar, got shape " +
                          shape_str(g.value(out).shape()));
    }
    return g.value(out).item();
  };

  for (Tensor<T>* p : params) p->zero_grad();
  {
    Graph<T> g;
    Var out = loss(g);
    if (g.value(out).numel() != 1) {
      throw ContractError("finite_difference_check: loss must be scalar, got shape " +
                          shape_str(g.value(out).shape()));
    }
    g.backward(out);
  }
  if (tamper) tamper(params);

  std::vector<ParamCoord> all;
  if (coords.empty()) {
    for (std::size_t t = 0; t < params.size(); ++t)
      for (std::size_t i = 0; i < params[t]->numel(); ++i) all.push_back({t, i});
    coords = all;
  }

  GradCheckReport<T> report;
  for (const ParamCoord& c : coords) {
    Tensor<T>& p = *params[c.tensor];
    const T saved = p[c.index];
    p[c.index] = saved + step;
    const T plus = evaluate();
    p[c.index] = saved - step;
    const T minus = evaluate();
    p[c.index] = saved;

    const T numeric = (plus - minus) / (T{2} * step);
    const T analytic = std::as_const(p).grad()[c.index];
    const T denom = std::max({std::abs(analytic), std::abs(numeric), T(1e-12)});
    const T rel = std::abs(analytic - numeric) / denom;
    ++report.checked;
    if (rel > report.max_rel_error || report.checked == 1) {
      report.max_rel_error = rel;
      report.worst = c;
      report.worst_analytic = analytic;
      report.worst_numeric = numeric;
    }
  }
  return report;
}

}  // namespace stam
