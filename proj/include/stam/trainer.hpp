#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "stam/config.hpp"
#include "stam/data.hpp"
#include "stam/errors.hpp"
#include "stam/graph.hpp"
#include "stam/io.hpp"
#include "stam/model.hpp"
#include "stam/ops.hpp"
#include "stam/rng.hpp"
#include "stam/tensor.hpp"

namespace stam {

struct TrainConfig {
  std::size_t epochs = 12;
  std::size_t batch_size = 32;
  double peak_lr = 3e-4;
  std::size_t warmup_steps = 50;
  double min_lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  bool flip = false;
  // Square crop side; 0 disables cropping. A crop must equal the model input
  // size, so it only shifts content when the dataset frames are larger.
  std::size_t crop = 0;
  // Global gradient-norm bound; 0 disables clipping.
  double grad_clip = 0.0;
  // Writes wall_s as 0 so that repeated runs produce identical metrics.
  bool deterministic = false;

  bool apply(const std::string& key, const std::string& value) {
    if (key == "epochs") epochs = parse_uint(key, value);
    else if (key == "batch_size") batch_size = parse_uint(key, value);
    else if (key == "peak_lr") peak_lr = parse_double(key, value);
    else if (key == "warmup_steps") warmup_steps = parse_uint(key, value);
    else if (key == "min_lr") min_lr = parse_double(key, value);
    else if (key == "beta1") beta1 = parse_double(key, value);
    else if (key == "beta2") beta2 = parse_double(key, value);
    else if (key == "adam_eps") adam_eps = parse_double(key, value);
    else if (key == "weight_decay") weight_decay = parse_double(key, value);
    else if (key == "seed") seed = parse_uint(key, value);
    else if (key == "flip") flip = parse_bool(key, value);
    else if (key == "crop") crop = parse_uint(key, value);
    else if (key == "grad_clip") grad_clip = parse_double(key, value);
    else if (key == "deterministic") deterministic = parse_bool(key, value);
    else return false;
    return true;
  }

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(peak_lr > min_lr) || !(min_lr >= 0)) {
      throw ConfigError("learning rates need peak_lr > min_lr >= 0, got peak_lr=" + format_double(peak_lr) +
                        ", min_lr=" + format_double(min_lr));
    }
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
    if (!(grad_clip >= 0)) throw ConfigError("grad_clip must be non-negative");
  }

  // Optimizer steps for a training set of `clips` clips.
  std::size_t total_steps(std::size_t clips) const {
    return epochs * ((clips + batch_size - 1) / batch_size);
  }

  void validate_schedule(std::size_t total) const {
    if (total > 0 && warmup_steps >= total) {
      throw ConfigError("warmup_steps=" + std::to_string(warmup_steps) + " must be below the " +
                        std::to_string(total) + " total optimizer steps");
    }
  }
};

// Model and training keys from one key=value file. Unknown keys are errors.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  static RunConfig from_key_values(const KeyValues& kvs) {
    RunConfig rc;
    for (const auto& [k, v] : kvs)
      if (!rc.model.apply(k, v) && !rc.train.apply(k, v)) throw ConfigError("unknown config key '" + k + "'");
    rc.model.validate();
    rc.train.validate();
    return rc;
  }
};

// Linear warmup from 0 to peak, then cosine decay to min_lr at `total`.
// Steps past `total` stay at min_lr.
inline double lr_schedule(std::size_t step, std::size_t total, const TrainConfig& c) {
  if (step >= total) return c.min_lr;
  if (step < c.warmup_steps) return c.peak_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  const double progress =
      static_cast<double>(step - c.warmup_steps) / static_cast<double>(total - c.warmup_steps);
  return c.min_lr + (c.peak_lr - c.min_lr) * (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
}

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t t = 0;
};

// One Adam step with bias correction and decoupled weight decay:
//   p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
template <typename T>
void optimizer_step(std::span<Tensor<T>* const> params, AdamState<T>& state, double lr, const TrainConfig& c) {
  if (state.m.empty()) {
    for (const Tensor<T>* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("optimizer state holds " + std::to_string(state.m.size()) + " tensors, got " +
                        std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->has_grad()) throw ContractError("parameter " + std::to_string(i) + " has no gradient");
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = params[i]->grad();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = c.beta1 * static_cast<double>(m[j]) + (1.0 - c.beta1) * gj;
      const double vj = c.beta2 * static_cast<double>(v[j]) + (1.0 - c.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = (mj / bc1) / (std::sqrt(vj / bc2) + c.adam_eps) + c.weight_decay * static_cast<double>(p[j]);
      p[j] = static_cast<T>(static_cast<double>(p[j]) - lr * update);
    }
  }
}

// Scales all gradients so their joint L2 norm is at most `bound`. Returns the
// norm before scaling.
template <typename T>
double clip_grad_norm(std::span<Tensor<T>* const> params, double bound) {
  double sq = 0;
  for (Tensor<T>* p : params)
    for (T gv : p->grad()) sq += static_cast<double>(gv) * static_cast<double>(gv);
  const double norm = std::sqrt(sq);
  if (bound > 0 && norm > bound) {
    const T scale = static_cast<T>(bound / norm);
    for (Tensor<T>* p : params)
      for (T& gv : p->grad()) gv *= scale;
  }
  return norm;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_acc = std::numeric_limits<double>::quiet_NaN();
  double wall_s = 0;
};

struct Metrics {
  std::vector<EpochMetrics> epochs;
  // Learning rate used by each optimizer step, in order.
  std::vector<double> lr_trace;
};

inline std::string metrics_csv(const Metrics& m) {
  std::ostringstream os;
  os << "epoch,step,lr,train_loss,train_acc,val_acc,wall_s\n";
  os.setf(std::ios::fixed);
  os.precision(6);
  for (const EpochMetrics& e : m.epochs) {
    os << e.epoch << ',' << e.step << ',' << e.lr << ',' << e.train_loss << ',' << e.train_acc << ',';
    if (std::isnan(e.val_acc)) os << "nan";
    else os << e.val_acc;
    os << ',' << e.wall_s << '\n';
  }
  return os.str();
}

inline void write_metrics_csv(const std::string& path, const Metrics& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << metrics_csv(m);
  if (!out) throw Error("write to '" + path + "' failed");
}

namespace detail {

inline void check_dataset(const ModelConfig& c, const Dataset& ds, std::size_t crop, const std::string& role) {
  const std::size_t h = crop ? crop : ds.height, w = crop ? crop : ds.width;
  if (h != c.height || w != c.width || ds.channels != c.channels || ds.frames < c.frames) {
    throw CheckpointError(role + " clips of " + std::to_string(ds.frames) + " frames " + std::to_string(ds.height) +
                          "x" + std::to_string(ds.width) + "x" + std::to_string(ds.channels) +
                          (crop ? " cropped to " + std::to_string(crop) : std::string()) +
                          " do not fit a model of " + std::to_string(c.frames) + " frames " +
                          std::to_string(c.height) + "x" + std::to_string(c.width) + "x" +
                          std::to_string(c.channels));
  }
  if (ds.num_classes > c.num_classes) {
    throw CheckpointError(role + " set has " + std::to_string(ds.num_classes) + " classes, model has " +
                          std::to_string(c.num_classes));
  }
  for (std::size_t i = 0; i < ds.clips.size(); ++i) {
    if (ds.clips[i].label >= c.num_classes) {
      throw LabelError(role + " clip " + std::to_string(i) + " has label " + std::to_string(ds.clips[i].label), i);
    }
  }
}

}  // namespace detail

// The F uniformly sampled frames of a clip as [F, H, W, C] in precision T,
// with pixels mapped from [0, 1] to [-1, 1].
template <typename T>
Tensor<T> model_input(const VideoClip& clip, std::size_t frames) {
  Tensor<T> x = select_frames(clip, uniform_sample(clip.num_frames(), frames)).frames.template cast<T>();
  for (auto& v : x.data()) v = T{2} * v - T{1};
  return x;
}

// Mean cross-entropy of the model over a dataset.
template <typename T>
double mean_loss(ModelParams<T>& p, const ModelConfig& c, const Dataset& ds) {
  if (ds.clips.empty()) throw ContractError("mean_loss: dataset is empty");
  detail::check_dataset(c, ds, 0, "evaluation");
  double total = 0;
  for (const VideoClip& clip : ds.clips) {
    Graph<T> g;
    Var logits = reshape(g, forward(g, p, c, model_input<T>(clip, c.frames)), Shape{1, c.num_classes});
    const std::size_t label = clip.label;
    total += static_cast<double>(g.value(cross_entropy(g, logits, std::span<const std::size_t>(&label, 1))).item());
  }
  return total / static_cast<double>(ds.clips.size());
}

// Top-1 accuracy; ties between logits go to the lowest class index.
template <typename T>
double evaluate(ModelParams<T>& p, const ModelConfig& c, const Dataset& ds) {
  if (ds.clips.empty()) throw ContractError("evaluate: dataset is empty");
  detail::check_dataset(c, ds, 0, "evaluation");
  std::size_t correct = 0;
  for (const VideoClip& clip : ds.clips) {
    const Tensor<T> logits = predict(p, c, model_input<T>(clip, c.frames));
    if (argmax<T>(logits.data()) == clip.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.clips.size());
}

template <typename T>
struct TrainResult {
  ModelParams<T> params;
  Metrics metrics;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Minibatch training from a seeded initialization. Shuffling and
// augmentation draw from streams derived from `tc.seed`; the model is
// initialized from the same seed.
template <typename T>
TrainResult<T> train(const ModelConfig& mc, const TrainConfig& tc, const Dataset& train_set,
                     const Dataset* val_set = nullptr, const EpochCallback& on_epoch = {}) {
  mc.validate();
  tc.validate();
  detail::check_dataset(mc, train_set, tc.crop, "training");
  if (val_set) detail::check_dataset(mc, *val_set, 0, "validation");
  const std::size_t n = train_set.clips.size();
  const std::size_t total = tc.total_steps(n);
  tc.validate_schedule(total);

  TrainResult<T> res{ModelParams<T>::init(mc, derive_seed(tc.seed, 0)), {}};
  ModelParams<T>& params = res.params;
  const std::vector<Tensor<T>*> tensors = params.tensors();
  AdamState<T> adam;
  Rng shuffle_rng(derive_seed(tc.seed, 1));
  Rng augment_rng(derive_seed(tc.seed, 2));
  std::vector<std::size_t> order(n);
  const auto start = std::chrono::steady_clock::now();
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0;
    std::size_t correct = 0;
    double lr = tc.min_lr;
    for (std::size_t b0 = 0; b0 < n; b0 += tc.batch_size) {
      const std::size_t b1 = std::min(n, b0 + tc.batch_size);
      Graph<T> g;
      std::vector<Var> logits;
      std::vector<std::size_t> labels;
      for (std::size_t i = b0; i < b1; ++i) {
        VideoClip clip = train_set.clips[order[i]];
        if (tc.flip || tc.crop) {
          clip = augment(clip, augment_rng, tc.flip, tc.crop ? tc.crop : std::min(clip.frames.dim(1), clip.frames.dim(2))).clip;
        }
        logits.push_back(forward(g, params, mc, model_input<T>(clip, mc.frames)));
        labels.push_back(clip.label);
      }
      Var batch_logits = stack(g, logits);
      Var loss = cross_entropy(g, batch_logits, std::span<const std::size_t>(labels));
      const Tensor<T>& lv = g.value(batch_logits);
      for (std::size_t r = 0; r < labels.size(); ++r)
        if (argmax<T>(std::span<const T>(lv.ptr() + r * mc.num_classes, mc.num_classes)) == labels[r]) ++correct;
      loss_sum += static_cast<double>(g.value(loss).item()) * static_cast<double>(labels.size());

      params.zero_grad();
      g.backward(loss);
      if (tc.grad_clip > 0) clip_grad_norm<T>(tensors, tc.grad_clip);
      ++step;
      lr = lr_schedule(step, total, tc);
      res.metrics.lr_trace.push_back(lr);
      optimizer_step<T>(tensors, adam, lr, tc);
    }
    EpochMetrics em;
    em.epoch = epoch;
    em.step = step;
    em.lr = lr;
    em.train_loss = n ? loss_sum / static_cast<double>(n) : 0.0;
    em.train_acc = n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
    if (val_set && !val_set->clips.empty()) em.val_acc = evaluate(params, mc, *val_set);
    em.wall_s = tc.deterministic
                    ? 0.0
                    : std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    res.metrics.epochs.push_back(em);
    if (on_epoch) on_epoch(em);
  }
  return res;
}

}  // namespace stam
