#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "support.hpp"

using namespace daefuse;

namespace {

Tensor constant(Dims d, double v) { return Tensor::full(d, v); }

Tensor random_weight(int c, std::mt19937_64& rng) {
  Tensor w = oracle::random_tensor({c, c, 1, 1}, rng);
  w.set_requires_grad(false);
  return w;
}

Tensor random_map(Dims d, std::mt19937_64& rng) {
  Tensor t = oracle::random_tensor(d, rng);
  t.set_requires_grad(false);
  return t;
}

oracle::Matrix rows_of(const Tensor& t, int n, int head) {
  oracle::Matrix m(static_cast<std::size_t>(t.dim(2)), std::vector<double>(static_cast<std::size_t>(t.dim(3))));
  for (int r = 0; r < t.dim(2); ++r)
    for (int c = 0; c < t.dim(3); ++c) m[r][c] = t.at(n, head, r, c);
  return m;
}

NetworkConfig small_net(int base = 8) {
  NetworkConfig n;
  n.base_channels = base;
  n.dle_heads = 2;
  n.se_blocks = n.dhe_blocks = n.dle_blocks = 1;
  return n;
}

}  // namespace

TEST(Attention, TokenizeRoundTrip) {
  std::mt19937_64 rng(1);
  const Tensor x = random_map({2, 4, 8, 12}, rng);
  const TokenLayout layout = TokenLayout::of(x, 2, 4);
  EXPECT_EQ(layout.token_dims(), (Dims{2, 2, 6, 32}));
  const Tensor back = untokenize(tokenize(x, layout), layout);
  EXPECT_TRUE(std::equal(x.values().begin(), x.values().end(), back.values().begin()));
}

TEST(Attention, TokenOrderMatchesOracle) {
  std::mt19937_64 rng(2);
  const Tensor x = random_map({1, 3, 4, 6}, rng);
  const Tensor tokens = tokenize(x, TokenLayout::of(x, 1, 2));
  EXPECT_EQ(rows_of(tokens, 0, 0), oracle::tokens_of(x, 2));
}

TEST(Attention, TwoTokenHandExample) {
  const Tensor q({1, 1, 2, 1}, {1, 0});
  const Tensor k({1, 1, 2, 1}, {1, 0});
  const Tensor v({1, 1, 2, 1}, {2, 4});
  Tensor weights;
  const Tensor out = scaled_dot_attention(q, k, v, &weights);
  EXPECT_NEAR(weights.values()[0], 0.731, 1e-3);
  EXPECT_NEAR(weights.values()[1], 0.269, 1e-3);
  EXPECT_NEAR(out.values()[0], 2.538, 1e-3);
}

TEST(Attention, SingletonTokenReturnsProjectedValues) {
  std::mt19937_64 rng(3);
  const int c = 4, p = 4;
  const Tensor q = random_map({1, c, p, p}, rng);
  const Tensor kv = random_map({1, c, p, p}, rng);
  const CrossAttentionWeights w{random_weight(c, rng), random_weight(c, rng), random_weight(c, rng)};
  const AttentionResult r = cross_attention(q, kv, w, {.heads = 1, .token_patch = p});
  EXPECT_EQ(r.weights.values()[0], 1.0);
  const Tensor expected = conv2d(kv, w.wv, Tensor(), 1, 0, 0);
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_EQ(r.output.values()[i], expected.values()[i]);
}

TEST(Attention, SingleHeadMatchesLiteralEquation) {
  std::mt19937_64 rng(4);
  const int c = 4, p = 2;
  const Tensor query = random_map({1, c, 6, 4}, rng);
  const Tensor kv = random_map({1, c, 6, 4}, rng);
  const CrossAttentionWeights w{random_weight(c, rng), random_weight(c, rng), random_weight(c, rng)};
  const AttentionResult r = cross_attention(query, kv, w, {.heads = 1, .token_patch = p});
  const oracle::Matrix q = oracle::tokens_of(oracle::project(query, w.wq), p);
  const oracle::Matrix k = oracle::tokens_of(oracle::project(kv, w.wk), p);
  const oracle::Matrix v = oracle::tokens_of(oracle::project(kv, w.wv), p);
  const oracle::Matrix expected = oracle::attention(q, k, v);
  const oracle::Matrix got = oracle::tokens_of(r.output, p);
  for (std::size_t t = 0; t < got.size(); ++t)
    for (std::size_t f = 0; f < got[t].size(); ++f) EXPECT_NEAR(got[t][f], expected[t][f], 1e-12);
}

TEST(Attention, MultiHeadSplitsChannels) {
  std::mt19937_64 rng(5);
  const Tensor q = random_map({1, 4, 4, 4}, rng);
  const Tensor k = random_map({1, 4, 4, 4}, rng);
  const Tensor v = random_map({1, 4, 4, 4}, rng);
  const AttentionResult r = map_attention(q, k, v, 2, 2);
  for (int head = 0; head < 2; ++head) {
    const Tensor qh = slice(q, 1, 2 * head, 2), kh = slice(k, 1, 2 * head, 2), vh = slice(v, 1, 2 * head, 2);
    const oracle::Matrix expected =
        oracle::attention(oracle::tokens_of(qh, 2), oracle::tokens_of(kh, 2), oracle::tokens_of(vh, 2));
    const oracle::Matrix got = oracle::tokens_of(slice(r.output, 1, 2 * head, 2), 2);
    for (std::size_t t = 0; t < got.size(); ++t)
      for (std::size_t f = 0; f < got[t].size(); ++f) EXPECT_NEAR(got[t][f], expected[t][f], 1e-12);
  }
}

TEST(Attention, PropertyRowsSumToOne) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const double scale = 1.0 + 10.0 * trial;
    const Tensor q = random_map({2, 4, 8, 8}, rng) * scale;
    const Tensor k = random_map({2, 4, 8, 8}, rng) * scale;
    const AttentionResult r = map_attention(q, k, k, 1 + trial % 2, 2);
    const int cols = r.weights.dim(3);
    for (std::size_t row = 0; row < r.weights.size() / cols; ++row) {
      double total = 0.0;
      for (int c = 0; c < cols; ++c) total += r.weights.values()[row * cols + c];
      ASSERT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Attention, IdenticalQueriesGiveIdenticalRows) {
  std::mt19937_64 rng(7);
  const Tensor q = constant({1, 1, 4, 1}, 0.3);
  const Tensor k = constant({1, 1, 4, 1}, 0.7);
  const Tensor v = random_map({1, 1, 4, 3}, rng);
  Tensor w;
  scaled_dot_attention(q, k, v, &w);
  for (double x : w.values()) EXPECT_NEAR(x, 0.25, 1e-12);
}

TEST(Attention, PropertyKeyPermutationInvariance) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor q = random_map({1, 1, 5, 3}, rng);
    const Tensor k = random_map({1, 1, 6, 3}, rng);
    const Tensor v = random_map({1, 1, 6, 2}, rng);
    std::vector<int> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto permute = [&](const Tensor& t) {
      std::vector<double> out;
      for (int r : perm)
        for (int c = 0; c < t.dim(3); ++c) out.push_back(t.at(0, 0, r, c));
      return Tensor(t.dims(), out);
    };
    const Tensor a = scaled_dot_attention(q, k, v);
    const Tensor b = scaled_dot_attention(q, permute(k), permute(v));
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a.values()[i], b.values()[i], 1e-12);
  }
}

TEST(Attention, ShapeErrors) {
  std::mt19937_64 rng(9);
  const CrossAttentionWeights w{random_weight(4, rng), random_weight(4, rng), random_weight(4, rng)};
  EXPECT_ERROR_KIND(cross_attention(constant({1, 4, 8, 8}, 0), constant({1, 4, 8, 4}, 0), w, {.token_patch = 4}),
                    ErrorKind::ShapeError);
  EXPECT_ERROR_KIND(cross_attention(constant({1, 4, 6, 6}, 0), constant({1, 4, 6, 6}, 0), w, {.token_patch = 4}),
                    ErrorKind::ShapeError);
}

TEST(Attention, ResidualFlagAddsKeyValueEmbedding) {
  std::mt19937_64 rng(10);
  const Tensor q = random_map({1, 4, 4, 4}, rng);
  const Tensor kv = random_map({1, 4, 4, 4}, rng);
  const CrossAttentionWeights w{random_weight(4, rng), random_weight(4, rng), random_weight(4, rng)};
  const Tensor plain = cross_attention(q, kv, w, {.token_patch = 2}).output;
  const Tensor residual = cross_attention(q, kv, w, {.token_patch = 2, .residual = true}).output;
  for (std::size_t i = 0; i < plain.size(); ++i)
    EXPECT_NEAR(residual.values()[i], plain.values()[i] + kv.values()[i], 1e-12);
}

TEST(Fusion, OutputShapeAndRange) {
  const ModelParameters m = init_model(small_net(8));
  std::mt19937_64 rng(11);
  const Tensor a = to_tensor(oracle::random_image(32, 32, rng));
  const Tensor b = to_tensor(oracle::random_image(32, 32, rng));
  const Tensor f = fuse_images(m, a, b);
  EXPECT_EQ(f.dims(), (Dims{1, 1, 32, 32}));
  for (double v : f.values()) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
}

TEST(Fusion, SwapInvariantWithTiedDirections) {
  ModelParameters m = init_model(small_net(8));
  init_fusion_stem_from_reconstruction(m);
  for (const char* p : {"/wq/w", "/wk/w", "/wv/w"}) {
    const auto src = m.store.get(std::string("xattn/a2b") + p).values();
    auto dst = m.store.get(std::string("xattn/b2a") + p).mutable_values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  std::mt19937_64 rng(12);
  const FeatureEmbedding e1 = encode(m, to_tensor(oracle::random_image(16, 16, rng)));
  const FeatureEmbedding e2 = encode(m, to_tensor(oracle::random_image(16, 16, rng)));
  const Tensor f12 = fuse(m, e1, e2);
  const Tensor f21 = fuse(m, e2, e1);
  for (std::size_t i = 0; i < f12.size(); ++i) EXPECT_NEAR(f12.values()[i], f21.values()[i], 1e-12);
}

TEST(Fusion, WarmStartedStemMatchesReconstructionOnSelfFusion) {
  ModelParameters m = init_model(small_net(8));
  init_fusion_stem_from_reconstruction(m);
  std::mt19937_64 rng(13);
  const Tensor e = encode(m, to_tensor(oracle::random_image(16, 16, rng))).combined;
  const Tensor recon = decode(m, e);
  const Tensor fused = decode(m, concat({e, e}, 1));
  for (std::size_t i = 0; i < recon.size(); ++i) EXPECT_NEAR(recon.values()[i], fused.values()[i], 1e-12);
}

TEST(Fusion, GradientReachesQueryAndValueProjections) {
  ModelParameters m = init_model(small_net(8));
  m.store.set_requires_grad("", false);
  m.store.set_requires_grad("xattn/", true);
  std::mt19937_64 rng(14);
  const Tensor a = to_tensor(oracle::random_image(16, 16, rng));
  const Tensor b = to_tensor(oracle::random_image(16, 16, rng));
  mean_all(square(fuse_images(m, a, b) - a)).backward();
  for (const char* name : {"xattn/a2b/wq/w", "xattn/a2b/wv/w", "xattn/b2a/wq/w", "xattn/b2a/wv/w"}) {
    const Tensor& t = m.store.get(name);
    ASSERT_TRUE(t.has_grad()) << name;
    double norm = 0.0;
    for (double g : t.grad()) norm += g * g;
    EXPECT_GT(norm, 0.0) << name;
  }
}

TEST(Fusion, ConcatenationModeReadsNoAttentionWeights) {
  const ModelParameters m = init_model(small_net(8));
  const Tensor a = Tensor::full({1, 1, 16, 16}, 0.3);
  ForwardStats with, without;
  fuse_images(m, a, a, {}, &with);
  fuse_images(m, a, a, {.cross_attention = false}, &without);
  EXPECT_EQ(with.attention_weight_reads, 6u);
  EXPECT_EQ(without.attention_weight_reads, 0u);
}
