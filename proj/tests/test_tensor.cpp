#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"

using namespace daefuse;

namespace {

constexpr double kGradTol = 1e-5;

Tensor weighted_sum(const Tensor& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor w = oracle::random_tensor(x.dims(), rng);
  w.set_requires_grad(false);
  return sum_all(x * w);
}

}  // namespace

TEST(Tensor, ShapeMismatchOnConstruction) {
  EXPECT_THROW(Tensor({1, 1, 2, 2}, {1.0, 2.0}), Error);
}

TEST(Tensor, BroadcastAddMatchesManual) {
  const Tensor a({1, 2, 1, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b({1, 1, 2, 1}, {10, 20});
  const Tensor c = a + b;
  ASSERT_EQ(c.dims(), (Dims{1, 2, 2, 3}));
  EXPECT_DOUBLE_EQ(c.at(0, 1, 1, 2), 26.0);
  EXPECT_DOUBLE_EQ(c.at(0, 0, 0, 0), 11.0);
}

TEST(Tensor, ElementwiseGradients) {
  std::mt19937_64 rng(1);
  const Tensor x = oracle::random_tensor({2, 2, 3, 3}, rng, 0.2, 1.0);
  const Tensor y = oracle::random_tensor({2, 2, 3, 3}, rng, 0.2, 1.0);
  auto f = [](const std::vector<Tensor>& in) {
    const Tensor& a = in[0];
    const Tensor& b = in[1];
    return weighted_sum(gelu(a) * sigmoid(b) + sqrt(a) / b + log(a) * exp(b) + square(a - b) + leaky_relu(a - b, 0.2),
                        3);
  };
  EXPECT_LT(oracle::gradient_check(f, {x, y}), kGradTol);
}

TEST(Tensor, BroadcastGradients) {
  std::mt19937_64 rng(2);
  const Tensor x = oracle::random_tensor({2, 3, 4, 4}, rng);
  const Tensor s = oracle::random_tensor({1, 3, 1, 1}, rng);
  auto f = [](const std::vector<Tensor>& in) { return weighted_sum(in[0] * in[1] + in[1], 5); };
  EXPECT_LT(oracle::gradient_check(f, {x, s}), kGradTol);
}

TEST(Tensor, ReductionGradients) {
  std::mt19937_64 rng(3);
  const Tensor x = oracle::random_tensor({2, 3, 4, 5}, rng);
  auto f = [](const std::vector<Tensor>& in) {
    return weighted_sum(mean(in[0], {2, 3}), 1) + weighted_sum(sum(in[0], {1}), 2) + mean_all(square(in[0]));
  };
  EXPECT_LT(oracle::gradient_check(f, {x}), kGradTol);
}

TEST(Tensor, IndexingGradients) {
  std::mt19937_64 rng(4);
  const Tensor x = oracle::random_tensor({1, 2, 5, 6}, rng);
  const Tensor y = oracle::random_tensor({1, 1, 5, 6}, rng);
  auto f = [](const std::vector<Tensor>& in) {
    const Tensor padded = pad_reflect(in[0], 2, 1, 1, 2);
    const Tensor cropped = crop(padded, 1, 1, 5, 6);
    const Tensor joined = concat({cropped, in[1]}, 1);
    const Tensor part = slice(joined, 1, 1, 2);
    return weighted_sum(reshape(part, {1, 1, 6, 10}), 7) + weighted_sum(transpose_last(in[0]), 8);
  };
  EXPECT_LT(oracle::gradient_check(f, {x, y}), kGradTol);
}

TEST(Tensor, MatmulAndSoftmaxGradients) {
  std::mt19937_64 rng(5);
  const Tensor a = oracle::random_tensor({2, 2, 3, 4}, rng);
  const Tensor b = oracle::random_tensor({2, 2, 4, 5}, rng);
  auto f = [](const std::vector<Tensor>& in) { return weighted_sum(softmax_last(matmul(in[0], in[1])), 9); };
  EXPECT_LT(oracle::gradient_check(f, {a, b}), kGradTol);
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(6);
  const Tensor s = softmax_last(oracle::random_tensor({2, 3, 4, 7}, rng, -20, 20));
  for (std::size_t r = 0; r < s.size() / 7; ++r) {
    double total = 0.0;
    for (int c = 0; c < 7; ++c) total += s.values()[r * 7 + c];
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Tensor, ConvMatchesDirectLoops) {
  std::mt19937_64 rng(7);
  struct Case {
    Dims x, w;
    int stride, pad_h, pad_w;
  };
  for (const Case& c : {Case{{2, 3, 7, 6}, {4, 3, 3, 3}, 1, 1, 1}, Case{{1, 2, 9, 9}, {3, 2, 3, 3}, 2, 1, 1},
                        Case{{2, 4, 5, 5}, {6, 4, 1, 1}, 1, 0, 0}, Case{{1, 1, 6, 8}, {1, 1, 1, 5}, 1, 0, 2}}) {
    const Tensor x = oracle::random_tensor(c.x, rng);
    const Tensor w = oracle::random_tensor(c.w, rng);
    const Tensor b = oracle::random_tensor({1, 1, 1, c.w[0]}, rng);
    const Tensor got = conv2d(x, w, b, c.stride, c.pad_h, c.pad_w);
    const Tensor want = oracle::conv2d(x, w, b, c.stride, c.pad_h, c.pad_w);
    ASSERT_EQ(got.dims(), want.dims());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got.values()[i], want.values()[i], 1e-12);
  }
}

TEST(Tensor, ConvGradients) {
  std::mt19937_64 rng(8);
  const Tensor x = oracle::random_tensor({2, 2, 5, 5}, rng);
  const Tensor w = oracle::random_tensor({3, 2, 3, 3}, rng);
  const Tensor b = oracle::random_tensor({1, 1, 1, 3}, rng);
  auto strided = [](const std::vector<Tensor>& in) { return weighted_sum(conv2d(in[0], in[1], in[2], 2, 1, 1), 10); };
  auto same = [](const std::vector<Tensor>& in) { return weighted_sum(conv2d(in[0], in[1], in[2], 1, 1, 1), 11); };
  EXPECT_LT(oracle::gradient_check(strided, {x, w, b}), kGradTol);
  EXPECT_LT(oracle::gradient_check(same, {x, w, b}), kGradTol);
}

TEST(Tensor, NoGradGuardBuildsNoGraph) {
  const Tensor x = Tensor::full({1, 1, 2, 2}, 1.0, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = square(x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(square(x).requires_grad());
}

TEST(Tensor, GradientsAccumulateAcrossBackwardCalls) {
  const Tensor x = Tensor::full({1, 1, 1, 2}, 3.0, true);
  sum_all(square(x)).backward();
  sum_all(square(x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Tensor, RequireFiniteRejectsNan) {
  const Tensor t({1, 1, 1, 2}, {1.0, std::nan("")});
  try {
    require_finite(t, "probe");
    FAIL() << "expected NumericalError";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NumericalError);
  }
}
