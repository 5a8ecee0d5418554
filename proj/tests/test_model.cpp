#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "stam/model.hpp"
#include "stam/model_check.hpp"
#include "stam/rng.hpp"

using namespace stam;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.height = c.width = 8;
  c.patch = 4;
  c.frames = 3;
  c.dim = 8;
  c.heads_space = 2;
  c.heads_time = 2;
  c.layers_space = 1;
  c.layers_time = 1;
  c.mlp_ratio = 2;
  c.num_classes = 3;
  return c;
}

Tensor<double> random_clip(const ModelConfig& c, Rng& rng) {
  Tensor<double> t(Shape{c.frames, c.height, c.width, c.channels});
  for (auto& v : t.data()) v = rng.uniform();
  return t;
}

}  // namespace

TEST(ModelConfig, FullScaleDefaults) {
  const ModelConfig p = ModelConfig::full_scale();
  EXPECT_EQ(p.layers_space, 12u);
  EXPECT_EQ(p.heads_space, 12u);
  EXPECT_EQ(p.layers_time, 6u);
  EXPECT_EQ(p.heads_time, 8u);
  EXPECT_EQ(p.num_patches(), 196u);
  EXPECT_EQ(p.frames, 16u);
}

TEST(ModelConfig, DeskDefaults) {
  const ModelConfig c = ModelConfig::desk();
  EXPECT_EQ(c.dim, 64u);
  EXPECT_EQ(c.heads_space, 4u);
  EXPECT_EQ(c.layers_space, 2u);
  EXPECT_EQ(c.layers_time, 2u);
  EXPECT_EQ(c.patch, 4u);
  EXPECT_EQ(c.height, 16u);
  EXPECT_EQ(c.frames, 8u);
  EXPECT_EQ(c.num_classes, 4u);
}

TEST(ModelConfig, TextRoundTripAndUnknownKeys) {
  ModelConfig c = small_config();
  c.variant = Variant::mean_pool;
  EXPECT_EQ(ModelConfig::from_key_values(parse_key_values(c.to_text())), c);
  EXPECT_THROW(ModelConfig::from_key_values({{"dimm", "8"}}), ConfigError);
  EXPECT_THROW(ModelConfig::from_key_values({{"variant", "average"}}), ConfigError);
  EXPECT_THROW(ModelConfig::from_key_values({{"dim", "10"}, {"heads_space", "4"}}), ConfigError);
}

TEST(ModelParams, CountMatchesClosedForm) {
  ModelConfig wide = small_config();
  wide.height = 12;
  wide.width = 16;
  wide.channels = 2;
  wide.num_classes = 7;
  for (const ModelConfig& c : {ModelConfig::desk(), small_config(), wide})
    EXPECT_EQ(ModelParams<double>::init(c, 1).count(), parameter_count(c));
  EXPECT_EQ(parameter_count(ModelConfig::desk()), 211332u);
}

TEST(ModelParams, NamesAreSortedAndUnique) {
  auto p = ModelParams<double>::init(ModelConfig::desk(), 2);
  const auto named = p.named();
  for (std::size_t i = 1; i < named.size(); ++i) EXPECT_LT(named[i - 1].first, named[i].first);
}

TEST(SpatialForward, ShapeIsFramesByDim) {
  Rng rng(1);
  const ModelConfig c = small_config();
  auto p = ModelParams<double>::init(c, 1);
  Graph<double> g;
  EXPECT_EQ(g.value(spatial_forward(g, p, c, random_clip(c, rng))).shape(), (Shape{c.frames, c.dim}));
}

TEST(SpatialForward, EmptyStackNormalizesClassPositions) {
  Rng rng(2);
  ModelConfig c = small_config();
  c.layers_space = 0;
  auto p = ModelParams<double>::init(c, 3);
  for (std::size_t i = 0; i < c.dim; ++i) p.embedding.class_token[i] = 0.1 * static_cast<double>(i);
  Graph<double> g;
  const auto& f = g.value(spatial_forward(g, p, c, random_clip(c, rng)));
  const std::size_t tokens = c.tokens_per_frame();
  for (std::size_t t = 0; t < c.frames; ++t) {
    std::vector<double> x(c.dim);
    double mean = 0, var = 0;
    for (std::size_t d = 0; d < c.dim; ++d) {
      x[d] = p.embedding.class_token[d] + p.embedding.positions[(t * tokens) * c.dim + d];
      mean += x[d] / static_cast<double>(c.dim);
    }
    for (double v : x) var += (v - mean) * (v - mean) / static_cast<double>(c.dim);
    for (std::size_t d = 0; d < c.dim; ++d)
      EXPECT_NEAR(f[t * c.dim + d], (x[d] - mean) / std::sqrt(var + 1e-6), 1e-12);
  }
}

TEST(TemporalForward, EmptyStackNormalizesTemporalToken) {
  ModelConfig c = small_config();
  c.layers_time = 0;
  auto p = ModelParams<double>::init(c, 4);
  for (std::size_t i = 0; i < c.dim; ++i) p.temporal_token[i] = static_cast<double>(i % 3);
  Graph<double> g;
  const auto& y = g.value(temporal_forward(g, p, g.input(Tensor<double>(Shape{c.frames, c.dim}, 0.7))));
  ASSERT_EQ(y.shape(), Shape{c.dim});
  double mean = 0, var = 0;
  for (std::size_t d = 0; d < c.dim; ++d) mean += p.temporal_token[d] / static_cast<double>(c.dim);
  for (std::size_t d = 0; d < c.dim; ++d)
    var += (p.temporal_token[d] - mean) * (p.temporal_token[d] - mean) / static_cast<double>(c.dim);
  for (std::size_t d = 0; d < c.dim; ++d) EXPECT_NEAR(y[d], (p.temporal_token[d] - mean) / std::sqrt(var + 1e-6), 1e-12);
}

TEST(TemporalForward, AttentionRowsSpanAllFramesPlusClassToken) {
  Rng rng(5);
  const ModelConfig c = small_config();
  auto p = ModelParams<double>::init(c, 5);
  AttentionRecorder<double> rec;
  Graph<double> g;
  forward(g, p, c, random_clip(c, rng), &rec);
  std::size_t temporal = 0;
  for (const auto& r : rec) {
    if (r.kind != AttentionKind::temporal) continue;
    ++temporal;
    EXPECT_EQ(r.weights.shape(), (Shape{c.frames + 1, c.frames + 1}));
  }
  EXPECT_EQ(temporal, c.layers_time * c.heads_time);
}

TEST(Classify, ZeroWeightsGiveZeroLogits) {
  ModelConfig c = small_config();
  auto p = ModelParams<double>::init(c, 6);
  for (auto& v : p.head_w.data()) v = 0;
  Graph<double> g;
  for (double v : g.value(classify(g, p, g.input(Tensor<double>(Shape{c.dim}, 1.3)))).data()) EXPECT_EQ(v, 0.0);
}

TEST(Classify, SingleClassGivesOneLogit) {
  ModelConfig c = small_config();
  c.num_classes = 1;
  auto p = ModelParams<double>::init(c, 7);
  Graph<double> g;
  EXPECT_EQ(g.value(classify(g, p, g.input(Tensor<double>(Shape{c.dim}, 1.0)))).numel(), 1u);
}

TEST(Classify, HandTwoClassProduct) {
  ModelConfig c = small_config();
  c.dim = 2;
  c.heads_space = c.heads_time = 1;
  c.num_classes = 2;
  auto p = ModelParams<double>::init(c, 8);
  p.head_w = Tensor<double>(Shape{2, 2}, {1, 2, -3, 0.5});
  p.head_b = Tensor<double>(Shape{2}, {0.25, -1});
  Graph<double> g;
  const auto& logits = g.value(classify(g, p, g.input(Tensor<double>(Shape{2}, {2, 4}))));
  EXPECT_DOUBLE_EQ(logits[0], 1 * 2 + 2 * 4 + 0.25);
  EXPECT_DOUBLE_EQ(logits[1], -3 * 2 + 0.5 * 4 - 1);
}

TEST(Forward, AllVariantsEmitClassLogits) {
  Rng rng(9);
  for (Variant v : {Variant::factorized, Variant::mean_pool, Variant::joint}) {
    ModelConfig c = small_config();
    c.variant = v;
    auto p = ModelParams<double>::init(c, 9);
    const auto logits = predict(p, c, random_clip(c, rng));
    EXPECT_EQ(logits.shape(), Shape{c.num_classes}) << to_string(v);
    for (double x : logits.data()) EXPECT_TRUE(std::isfinite(x));
  }
}

TEST(Forward, MeanPoolOfIdenticalFramesEqualsSingleFrame) {
  Rng rng(10);
  ModelConfig c = small_config();
  c.variant = Variant::mean_pool;
  auto p = ModelParams<double>::init(c, 10);
  const std::size_t row = c.tokens_per_frame() * c.dim;
  for (std::size_t t = 1; t < c.frames; ++t)
    for (std::size_t i = 0; i < row; ++i) p.embedding.positions[t * row + i] = p.embedding.positions[i];
  ModelConfig one = c;
  one.frames = 1;
  auto p1 = ModelParams<double>::init(one, 10);
  for (auto& [name, t] : p1.named()) {
    for (auto& [name2, t2] : p.named())
      if (name == name2 && name != "embed.pos") *t = *t2;
  }
  for (std::size_t i = 0; i < row; ++i) p1.embedding.positions[i] = p.embedding.positions[i];
  Tensor<double> frame(Shape{1, c.height, c.width, c.channels});
  for (auto& v : frame.data()) v = rng.uniform();
  Tensor<double> clip(Shape{c.frames, c.height, c.width, c.channels});
  for (std::size_t i = 0; i < clip.numel(); ++i) clip[i] = frame[i % frame.numel()];
  const auto a = predict(p, c, clip);
  const auto b = predict(p1, one, frame);
  for (std::size_t k = 0; k < c.num_classes; ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
}

TEST(Forward, MeanAggregatorIsPermutationInvariant) {
  Rng rng(11);
  const Tensor<double> f(Shape{4, 3}, {1, 2, 3, -1, 0.5, 2, 7, 1, 0, 0.25, -3, 1});
  Tensor<double> perm(Shape{4, 3});
  const std::size_t order[4] = {2, 0, 3, 1};
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t d = 0; d < 3; ++d) perm[t * 3 + d] = f[order[t] * 3 + d];
  Graph<double> g;
  const auto& a = g.value(mean_rows(g, g.input(f)));
  const auto& b = g.value(mean_rows(g, g.input(perm)));
  for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(a[d], b[d], 1e-12);
}

TEST(Forward, SingleFrameSpatialStageMatchesJoint) {
  Rng rng(12);
  ModelConfig c = small_config();
  c.frames = 1;
  auto p = ModelParams<double>::init(c, 12);
  const auto clip = random_clip(c, rng);
  Graph<double> g;
  const auto& a = g.value(frame_embeddings(g, p, c, clip, AttentionKind::spatial));
  const auto& b = g.value(frame_embeddings(g, p, c, clip, AttentionKind::joint));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Forward, ClipShapeMismatchIsConfigError) {
  const ModelConfig c = small_config();
  auto p = ModelParams<double>::init(c, 13);
  Graph<double> g;
  EXPECT_THROW(forward(g, p, c, Tensor<double>(Shape{c.frames + 1, c.height, c.width, c.channels})), ConfigError);
}

TEST(Forward, SmallModelGradientsMatchFiniteDifferences) {
  for (Variant v : {Variant::factorized, Variant::mean_pool, Variant::joint}) {
    ModelConfig c = small_config();
    c.variant = v;
    ModelCheckOptions o;
    o.seed = 3;
    o.per_tensor = 24;
    EXPECT_LT(model_gradient_check(c, o).max_rel_error, 1e-4) << to_string(v);
  }
}

TEST(Forward, CorruptedGradientIsDetected) {
  ModelCheckOptions o;
  o.per_tensor = 2;
  o.corrupt_gradient = true;
  EXPECT_GT(model_gradient_check(small_config(), o).max_rel_error, 1e-4);
}

TEST(Argmax, TiesGoToLowestIndex) {
  const std::vector<double> v{0.5, 2.0, 2.0, -1.0};
  EXPECT_EQ(argmax<double>(v), 1u);
  const std::vector<double> flat(4, 0.0);
  EXPECT_EQ(argmax<double>(flat), 0u);
}

TEST(FrameAttention, SingleFrameIsOne) {
  Rng rng(14);
  ModelConfig c = small_config();
  c.frames = 1;
  auto p = ModelParams<double>::init(c, 14);
  const auto w = frame_attention_weights(p, c, random_clip(c, rng));
  ASSERT_EQ(w.numel(), 1u);
  EXPECT_DOUBLE_EQ(w[0], 1.0);
}

TEST(FrameAttention, SumsToOne) {
  Rng rng(15);
  const ModelConfig c = small_config();
  auto p = ModelParams<double>::init(c, 15);
  for (auto* t : p.tensors())
    for (auto& v : t->data()) v += rng.normal(0.0, 0.5);
  const auto w = frame_attention_weights(p, c, random_clip(c, rng));
  double s = 0;
  for (double v : w.data()) s += v;
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(FrameAttention, OtherVariantsAreUnsupported) {
  Rng rng(16);
  ModelConfig c = small_config();
  c.variant = Variant::mean_pool;
  auto p = ModelParams<double>::init(c, 16);
  EXPECT_THROW(frame_attention_weights(p, c, random_clip(c, rng)), UnsupportedVariantError);
}
