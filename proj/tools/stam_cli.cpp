// Command-line front end: data generation, training, evaluation, gradient
// check, attention benchmark and frame-attention dump.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error, 3 check failure.

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "stam/stam.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitCheckFailed = 3;

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw stam::Error("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw stam::Error("write to '" + path + "' failed");
}

struct GenDataArgs {
  std::string task = "order-pair";
  std::size_t clips = 0;
  std::size_t frames = 8;
  std::size_t size = 16;
  std::size_t channels = 3;
  std::size_t classes = 4;
  double noise = 0.1;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_gen_data(const GenDataArgs& a) {
  stam::SyntheticTaskSpec spec;
  spec.task = stam::parse_task(a.task);
  spec.classes = a.classes;
  spec.frames = a.frames;
  spec.height = spec.width = a.size;
  spec.channels = a.channels;
  spec.noise_std = a.noise;
  spec.seed = a.seed;
  const stam::Dataset ds = stam::Dataset::from_clips(stam::gen_synthetic(spec, a.clips), a.classes, a.frames,
                                                     a.size, a.size, a.channels);
  stam::write_dataset(a.out, ds);
  std::cout << "clips=" << ds.clips.size() << " bytes=" << ds.file_bytes() << "\n";
  return kExitOk;
}

struct RunArgs {
  std::string config;
  std::string data;
  std::string val_data;
  std::string ckpt;
  std::string metrics;
  std::optional<std::size_t> epochs;
  std::optional<std::string> variant;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  bool quiet = false;
};

stam::RunConfig load_run_config(const RunArgs& a) {
  stam::KeyValues kvs;
  if (!a.config.empty()) kvs = stam::read_key_values_file(a.config);
  if (a.epochs) kvs.emplace_back("epochs", std::to_string(*a.epochs));
  if (a.variant) kvs.emplace_back("variant", *a.variant);
  if (a.seed) kvs.emplace_back("seed", std::to_string(*a.seed));
  if (a.deterministic) kvs.emplace_back("deterministic", "true");
  return stam::RunConfig::from_key_values(kvs);
}

int cmd_train(const RunArgs& a) {
  const stam::RunConfig rc = load_run_config(a);
  const stam::Dataset train_set = stam::read_dataset(a.data);
  std::optional<stam::Dataset> val_set;
  if (!a.val_data.empty()) val_set = stam::read_dataset(a.val_data);
  auto report = [&](const stam::EpochMetrics& e) {
    if (a.quiet) return;
    std::cout << "epoch=" << e.epoch << " step=" << e.step << " lr=" << fixed6(e.lr)
              << " train_loss=" << fixed6(e.train_loss) << " train_acc=" << fixed6(e.train_acc)
              << " val_acc=" << (std::isnan(e.val_acc) ? std::string("nan") : fixed6(e.val_acc))
              << " wall_s=" << fixed6(e.wall_s) << std::endl;
  };
  auto result = stam::train<double>(rc.model, rc.train, train_set, val_set ? &*val_set : nullptr, report);
  stam::write_checkpoint(a.ckpt, rc.model, result.params);
  if (!a.metrics.empty()) stam::write_metrics_csv(a.metrics, result.metrics);
  return kExitOk;
}

int cmd_init(const RunArgs& a) {
  const stam::RunConfig rc = load_run_config(a);
  auto params = stam::ModelParams<double>::init(rc.model, stam::derive_seed(rc.train.seed, 0));
  stam::write_checkpoint(a.ckpt, rc.model, params);
  std::cout << "parameters=" << params.count() << "\n";
  return kExitOk;
}

int cmd_eval(const RunArgs& a) {
  auto ck = stam::read_checkpoint<double>(a.ckpt);
  const stam::Dataset ds = stam::read_dataset(a.data);
  std::cout << "top1=" << fixed6(stam::evaluate(ck.params, ck.config, ds)) << "\n";
  return kExitOk;
}

struct GradcheckArgs {
  std::string config;
  std::uint64_t seed = 0;
  std::size_t per_tensor = 64;
  double jitter = 0.1;
  bool corrupt = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  stam::ModelConfig mc;
  if (!a.config.empty()) mc = stam::RunConfig::from_key_values(stam::read_key_values_file(a.config)).model;
  stam::ModelCheckOptions o;
  o.seed = a.seed;
  o.per_tensor = a.per_tensor;
  o.jitter = a.jitter;
  o.corrupt_gradient = a.corrupt;
  const auto r = stam::model_gradient_check(mc, o);
  std::cout << "max_rel_error=" << r.max_rel_error << " checked=" << r.checked << "\n";
  return r.max_rel_error < 1e-4 ? kExitOk : kExitCheckFailed;
}

struct BenchArgs {
  std::size_t patches = 64;
  std::vector<std::size_t> frames{8, 16, 32, 64};
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t reps = 5;
  std::string precision = "double";
  std::string out;
};

int cmd_bench(const BenchArgs& a) {
  stam::TimingConfig tc;
  tc.patches = a.patches;
  tc.frames = a.frames;
  tc.dim = a.dim;
  tc.heads = a.heads;
  tc.reps = a.reps;
  stam::TimingTable table;
  int code = kExitOk;
  try {
    if (a.precision == "float") stam::time_attention<float>(tc, table);
    else stam::time_attention<double>(tc, table);
  } catch (const stam::SizeError& e) {
    std::cerr << "error: " << e.what() << " (partial results kept)\n";
    code = kExitRuntime;
  }
  const std::string csv = stam::timing_csv(table);
  if (a.out.empty()) std::cout << csv;
  else write_text(a.out, csv);
  for (const char* v : {"factorized", "joint"}) {
    const auto rows = table.of(v);
    if (rows.size() >= 2) std::cout << "slope_" << v << "=" << fixed6(stam::loglog_slope(rows)) << "\n";
  }
  return code;
}

struct AttnArgs {
  std::string ckpt;
  std::string data;
  std::size_t clip = 0;
  std::string out;
};

int cmd_attn(const AttnArgs& a) {
  auto ck = stam::read_checkpoint<double>(a.ckpt);
  const stam::Dataset ds = stam::read_dataset(a.data);
  if (a.clip >= ds.clips.size()) {
    throw stam::ConfigError("clip index " + std::to_string(a.clip) + " out of range for " +
                            std::to_string(ds.clips.size()) + " clips");
  }
  const stam::VideoClip& clip = ds.clips[a.clip];
  const auto input = stam::model_input<double>(clip, ck.config.frames);
  const auto w = stam::frame_attention_weights(ck.params, ck.config, input);
  std::string csv = "frame_index,weight\n";
  for (std::size_t t = 0; t < w.numel(); ++t) csv += std::to_string(t) + "," + fixed6(w[t]) + "\n";
  if (a.out.empty()) std::cout << csv;
  else write_text(a.out, csv);
  return kExitOk;
}

void add_run_flags(CLI::App* cmd, RunArgs& a) {
  cmd->add_option("--config", a.config, "key=value config file (model and training keys)");
  cmd->add_option("--epochs", a.epochs, "override: number of epochs");
  cmd->add_option("--variant", a.variant, "override: factorized, mean-pool or joint");
  cmd->add_option("--seed", a.seed, "override: seed for init, shuffling and augmentation");
  cmd->add_flag("--deterministic", a.deterministic, "write wall_s as 0 so reruns are byte-identical");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Factorized space-time attention: data, training, checks and benchmarks"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic dataset file");
  gen_cmd->add_option("--task", gen.task, "order-pair, moving-bar or key-frame")->capture_default_str();
  gen_cmd->add_option("--clips", gen.clips, "number of clips")->required();
  gen_cmd->add_option("--frames", gen.frames, "frames per clip")->capture_default_str();
  gen_cmd->add_option("--size", gen.size, "frame height and width")->capture_default_str();
  gen_cmd->add_option("--channels", gen.channels, "channels per pixel")->capture_default_str();
  gen_cmd->add_option("--classes", gen.classes, "number of classes")->capture_default_str();
  gen_cmd->add_option("--noise", gen.noise, "pixel noise standard deviation")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "generator seed")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "output dataset path")->required();

  RunArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoint and metrics");
  train_cmd->add_option("--data", train_args.data, "training dataset")->required();
  train_cmd->add_option("--val-data", train_args.val_data, "validation dataset");
  train_cmd->add_option("--ckpt", train_args.ckpt, "output checkpoint path")->required();
  train_cmd->add_option("--metrics", train_args.metrics, "output metrics CSV path");
  train_cmd->add_flag("--quiet", train_args.quiet, "do not print per-epoch progress");
  add_run_flags(train_cmd, train_args);

  RunArgs init_args;
  auto* init_cmd = app.add_subcommand("init", "write the initial checkpoint a training run starts from");
  init_cmd->add_option("--ckpt", init_args.ckpt, "output checkpoint path")->required();
  add_run_flags(init_cmd, init_args);

  RunArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "print top-1 accuracy of a checkpoint on a dataset");
  eval_cmd->add_option("--ckpt", eval_args.ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--data", eval_args.data, "dataset path")->required();

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "compare model gradients with central differences");
  gc_cmd->add_option("--config", gc.config, "key=value config file; desk config if absent");
  gc_cmd->add_option("--seed", gc.seed, "parameter and input seed")->capture_default_str();
  gc_cmd->add_option("--per-tensor", gc.per_tensor, "coordinates checked per tensor")->capture_default_str();
  gc_cmd->add_option("--jitter", gc.jitter, "std of noise added to the initial parameters")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  gc_cmd->add_flag("--corrupt-grad", gc.corrupt, "negative control: perturb one analytic gradient");

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "time factorized and joint attention over a frame sweep");
  bench_cmd->add_option("--N", bench.patches, "patches per frame")->capture_default_str();
  bench_cmd->add_option("--F-sweep", bench.frames, "comma-separated frame counts")
      ->delimiter(',')
      ->capture_default_str();
  bench_cmd->add_option("--D", bench.dim, "token width")->capture_default_str();
  bench_cmd->add_option("--heads", bench.heads, "attention heads")->capture_default_str();
  bench_cmd->add_option("--reps", bench.reps, "timed repetitions (at least 5)")->capture_default_str();
  bench_cmd->add_option("--precision", bench.precision, "float or double")
      ->check(CLI::IsMember({"float", "double"}))
      ->capture_default_str();
  bench_cmd->add_option("--out", bench.out, "output CSV path; stdout if absent");

  AttnArgs attn;
  auto* attn_cmd = app.add_subcommand("attn", "dump per-frame attention weights of one clip");
  attn_cmd->add_option("--ckpt", attn.ckpt, "checkpoint path")->required();
  attn_cmd->add_option("--data", attn.data, "dataset path")->required();
  attn_cmd->add_option("--clip", attn.clip, "clip index")->capture_default_str();
  attn_cmd->add_option("--out", attn.out, "output CSV path; stdout if absent");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(train_args);
    if (*init_cmd) return cmd_init(init_args);
    if (*eval_cmd) return cmd_eval(eval_args);
    if (*gc_cmd) return cmd_gradcheck(gc);
    if (*bench_cmd) return cmd_bench(bench);
    if (*attn_cmd) return cmd_attn(attn);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
