#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "stam/bench.hpp"

using namespace stam;

TEST(AttentionFlops, FullScaleOperatingPointRatio) {
  const FlopReport r = attention_flops(FlopConfig{16, 196, 768, 12, 12, 6, 4});
  EXPECT_EQ(r.simplified_joint, 9834496u);
  EXPECT_EQ(r.simplified_factorized, 614912u);
  EXPECT_NEAR(r.simplified_ratio(), 9834496.0 / 614912.0, 1e-12);
  EXPECT_NEAR(r.simplified_ratio(), 15.99, 0.01);
}

TEST(AttentionFlops, SingleFrameSpatialEqualsJointScores) {
  FlopConfig c{1, 16, 64, 4, 2, 0, 4};
  const FlopReport r = attention_flops(c);
  EXPECT_EQ(r.factorized, r.joint);
}

TEST(AttentionFlops, HandCountedBlock) {
  // S=3 queries, K=2 keys, D=4, A=2, D_mlp=8.
  const StageCounts b = block_counts(3, 2, 4, 2, 8);
  EXPECT_EQ(b.qkv, 3u * 3 * 4 * 4);
  EXPECT_EQ(b.score, 3u * 2 * 4);
  EXPECT_EQ(b.softmax, 4u * 2 * 3 * 2);
  EXPECT_EQ(b.combine, 3u * 2 * 4);
  EXPECT_EQ(b.out_proj, 3u * 4 * 4);
  EXPECT_EQ(b.mlp, 2u * 3 * 4 * 8);
}

TEST(AttentionFlops, ScoreTermsScaleLinearlyAndQuadraticallyInFrames) {
  for (std::size_t f : {2u, 4u, 8u}) {
    const FlopReport a = attention_flops(FlopConfig{f, 16, 32, 4, 1, 0, 4});
    const FlopReport b = attention_flops(FlopConfig{2 * f, 16, 32, 4, 1, 0, 4});
    EXPECT_EQ(b.factorized.score, 2 * a.factorized.score);
    const double joint_growth = static_cast<double>(b.joint.score) / static_cast<double>(a.joint.score);
    EXPECT_GT(joint_growth, 3.9);
    EXPECT_LT(joint_growth, 4.0);
  }
}

TEST(AttentionFlops, InvalidConfigIsConfigError) {
  EXPECT_THROW(attention_flops(FlopConfig{8, 16, 30, 4, 1, 1, 4}), ConfigError);
  EXPECT_THROW(attention_flops(FlopConfig{0, 16, 32, 4, 1, 1, 4}), ConfigError);
}

TEST(MeasuredScoreMacs, MatchesAnalyticCounts) {
  const std::size_t f = 4, n = 9, d = 16, a = 4;
  const FlopReport r = attention_flops(FlopConfig{f, n, d, a, 1, 1, 4});
  const std::uint64_t spatial = measured_score_macs<double>(f, n, d, a, AttentionKind::spatial);
  const std::uint64_t temporal = measured_score_macs<double>(f, n, d, a, AttentionKind::temporal);
  const std::uint64_t joint = measured_score_macs<double>(f, n, d, a, AttentionKind::joint);
  EXPECT_EQ(spatial + temporal, r.factorized.score);
  EXPECT_EQ(joint, r.joint.score);
}

TEST(AttentionCore, MatchesGraphAttention) {
  Rng rng(3);
  const std::size_t f = 3, n = 4, d = 8, a = 2;
  for (const KeySet& keys : {KeySet::per_frame(f, n + 1), KeySet::joint(f, n), KeySet::full(f * (n + 1))}) {
    const std::size_t s = keys.rows;
    const auto q = detail::random_matrix<double>(s, d, rng);
    const auto k = detail::random_matrix<double>(s, d, rng);
    const auto v = detail::random_matrix<double>(s, d, rng);
    std::vector<double> out(s * d), scratch;
    kernels::attention_core(q.data(), k.data(), v.data(), out.data(), keys, d, a, scratch);
    Graph<double> g;
    Var qv = g.input(Tensor<double>(Shape{s, d}, std::vector<double>(q)));
    Var kv = g.input(Tensor<double>(Shape{s, d}, std::vector<double>(k)));
    Var vv = g.input(Tensor<double>(Shape{s, d}, std::vector<double>(v)));
    const auto& ref = g.value(attention_combine(g, softmax(g, attention_scores(g, qv, kv, keys, a)), vv, keys));
    for (std::size_t i = 0; i < s * d; ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
  }
}

TEST(LoglogSlope, RecoversPowerLaw) {
  std::vector<TimingRow> rows;
  for (std::size_t f : {8u, 16u, 32u, 64u}) rows.push_back(TimingRow{"x", f, 1, 1, 0, 0, 0.5 * f * f});
  EXPECT_NEAR(loglog_slope(rows), 2.0, 1e-12);
  EXPECT_THROW(loglog_slope({rows[0]}), ContractError);
}

TEST(TimeAttention, ProducesRowsPerVariantAndFrameCount) {
  TimingConfig c;
  c.patches = 8;
  c.frames = {2, 4};
  c.dim = 16;
  c.heads = 2;
  TimingTable t;
  time_attention<float>(c, t);
  ASSERT_EQ(t.rows.size(), 4u);
  EXPECT_EQ(t.of("factorized").size(), 2u);
  EXPECT_EQ(t.of("joint").size(), 2u);
  for (const auto& r : t.rows) EXPECT_GT(r.median_ms, 0.0);
  const std::string csv = timing_csv(t);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "variant,F,N,D,score_flops,total_flops,median_ms");
}

TEST(TimeAttention, OversizedRequestKeepsCompletedRows) {
  TimingConfig c;
  c.patches = 8;
  c.frames = {2, 512};
  c.dim = 16;
  c.heads = 2;
  c.max_bytes = 1 << 20;
  TimingTable t;
  EXPECT_THROW(time_attention<float>(c, t), SizeError);
  EXPECT_EQ(t.rows.size(), 2u);
}

TEST(TimeAttention, TooFewRepsIsConfigError) {
  TimingConfig c;
  c.reps = 4;
  TimingTable t;
  EXPECT_THROW(time_attention<float>(c, t), ConfigError);
}
