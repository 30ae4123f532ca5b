#include "mmbert/tensor.hpp"

#include "test_util.hpp"

using namespace mmbert;
using testutil::DT;
using testutil::max_grad_error;
using testutil::random_tensor;

namespace {

std::mt19937_64 rng_for(int seed) { return std::mt19937_64(std::uint64_t(seed) * 7919 + 1); }

}  // namespace

TEST(Softmax, HandComputedValues) {
  DT x({3}, {1, 2, 3});
  auto y = softmax(x, 0);
  EXPECT_NEAR(y.at(0), 0.09003, 1e-5);
  EXPECT_NEAR(y.at(1), 0.24473, 1e-5);
  EXPECT_NEAR(y.at(2), 0.66524, 1e-5);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  for (int seed = 0; seed < 10; ++seed) {
    auto rng = rng_for(seed);
    auto x = random_tensor({4, 7}, rng, 5.0, false);
    auto y = softmax(x, 1);
    auto shifted = softmax(add(x, DT::full({7}, 100.0)), 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 7; ++c) {
        s += y.at(r, c);
        EXPECT_NEAR(y.at(r, c), shifted.at(r, c), 1e-12);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Gelu, TanhApproximationValues) {
  DT x({3}, {0.0, 1.0, -1.0});
  auto y = gelu(x);
  EXPECT_NEAR(y.at(0), 0.0, 1e-12);
  // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
  EXPECT_NEAR(y.at(1), 0.8411919906, 1e-9);
  EXPECT_NEAR(y.at(2), -0.1588080094, 1e-9);
}

TEST(LayerNorm, NormalizesRows) {
  for (int seed = 0; seed < 10; ++seed) {
    auto rng = rng_for(seed);
    auto x = random_tensor({3, 16}, rng, 3.0, false);
    auto y = layer_norm(x, DT::ones({16}), DT::zeros({16}), 1e-12);
    for (std::size_t r = 0; r < 3; ++r) {
      double m = 0, v = 0;
      for (std::size_t c = 0; c < 16; ++c) m += y.at(r, c);
      m /= 16;
      for (std::size_t c = 0; c < 16; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m);
      EXPECT_NEAR(m, 0.0, 1e-9);
      EXPECT_NEAR(v / 16, 1.0, 1e-6);
    }
  }
}

TEST(LayerNorm, EpsilonRules) {
  DT x({1, 4}, {2, 2, 2, 2});
  DT gamma({4}, {1, 1, 1, 1}), beta({4}, {0.5, -0.5, 1, 0});
  EXPECT_THROW(layer_norm(x, gamma, beta, -1e-5), ConfigError);
  auto y = layer_norm(x, gamma, beta, 0.0);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(y.at(0, c), beta.at(c));
}

TEST(Matmul, KnownProduct) {
  DT a({2, 3}, {1, 2, 3, 4, 5, 6});
  DT b({3, 2}, {7, 8, 9, 10, 11, 12});
  auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_DOUBLE_EQ(c.at(0, 0), 58);
  EXPECT_DOUBLE_EQ(c.at(0, 1), 64);
  EXPECT_DOUBLE_EQ(c.at(1, 0), 139);
  EXPECT_DOUBLE_EQ(c.at(1, 1), 154);
}

TEST(Matmul, WideRowsMatchNaiveProduct) {
  // exercises the blocked path (more than 64 output columns)
  auto rng = rng_for(3);
  auto a = random_tensor({5, 9}, rng, 1.0, false);
  auto b = random_tensor({9, 150}, rng, 1.0, false);
  auto c = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 150; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 9; ++k) s += a.at(i, k) * b.at(k, j);
      EXPECT_NEAR(c.at(i, j), s, 1e-12);
    }
}

TEST(Errors, ShapeAndIndexChecks) {
  DT a({2, 3}, std::vector<double>(6, 1.0));
  DT b({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_THROW(matmul(a, b), DimensionError);
  EXPECT_THROW(add(a, DT({2}, {1, 2})), DimensionError);
  EXPECT_THROW(DT({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_THROW(embedding(a, std::vector<int>{0, 5}), VocabError);
  EXPECT_THROW(cross_entropy(DT({3}, {1, 2, 3}), 3), ArgumentError);
  EXPECT_THROW(slice(a, 1, 2, 5), DimensionError);
  EXPECT_THROW(reshape(a, Shape{4}), DimensionError);
}

TEST(CrossEntropy, MatchesLogSoftmax) {
  DT logits({2, 3}, {1, 2, 3, 0.5, 0.5, -1});
  std::vector<int> labels{2, 0};
  const double l0 = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  const double l1 = -std::log(std::exp(0.5) / (2 * std::exp(0.5) + std::exp(-1.0)));
  EXPECT_NEAR(cross_entropy(logits, std::span<const int>(labels)).item(), (l0 + l1) / 2, 1e-12);
}

// Finite-difference checks of every differentiable op.

TEST(Gradients, Elementwise) {
  for (int seed = 0; seed < 10; ++seed) {
    auto rng = rng_for(seed);
    auto a = random_tensor({3, 4}, rng), b = random_tensor({4}, rng), c = random_tensor({3, 4}, rng);
    EXPECT_LT(max_grad_error([&] { return sum(mul(add(a, b), sub(c, b))); }, {a, b, c}), 1e-6);
    EXPECT_LT(max_grad_error([&] { return sum(mul(tanh(a), scale(gelu(c), 1.7))); }, {a, c}), 1e-6);
    auto s = random_tensor({3}, rng);
    EXPECT_LT(max_grad_error([&] { return sum(mul(mul_rows(a, s), c)); }, {a, s, c}), 1e-6);
  }
}

TEST(Gradients, MatmulTransposeReshape) {
  for (int seed = 0; seed < 10; ++seed) {
    auto rng = rng_for(seed);
    auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({4, 5}, rng), bb = random_tensor({2, 4, 3}, rng);
    auto w = random_tensor({2, 3, 5}, rng, 1.0, false);
    EXPECT_LT(max_grad_error([&] { return sum(mul(matmul(a, b), w)); }, {a, b}), 1e-6);
    EXPECT_LT(max_grad_error([&] { return sum(mul(transpose(matmul(a, bb)), transpose(matmul(a, bb)))); }, {a, bb}),
              1e-6);
    EXPECT_LT(max_grad_error([&] { return sum(mul(reshape(a, Shape{6, 4}), reshape(a, Shape{6, 4}))); }, {a}), 1e-6);
  }
}

TEST(Gradients, SliceConcatEmbedding) {
  for (int seed = 0; seed < 10; ++seed) {
    auto rng = rng_for(seed);
    auto a = random_tensor({4, 6}, rng), b = random_tensor({2, 6}, rng), table = random_tensor({5, 6}, rng);
    auto w = random_tensor({6, 3}, rng, 1.0, false);
    std::vector<int> ids{4, 1, 1, 0};
    EXPECT_LT(max_grad_error(
                  [&] {
                    auto x = concat(std::vector<DT>{slice(a, 0, 1, 3), b, embedding(table, std::span<const int>(ids))}, 0);
                    return sum(tanh(matmul(concat(std::vector<DT>{slice(x, 1, 0, 2), slice(x, 1, 4, 6)}, 1), slice(w, 0, 0, 4))));
                  },
                  {a, b, table}),
              1e-6);
  }
}

TEST(Gradients, ReductionsSoftmaxNormLosses) {
  for (int seed = 0; seed < 10; ++seed) {
    auto rng = rng_for(seed);
    auto x = random_tensor({3, 5}, rng), y = random_tensor({3, 5}, rng), g = random_tensor({5}, rng),
         be = random_tensor({5}, rng), x3 = random_tensor({2, 3, 4}, rng);
    auto w = random_tensor({3, 5}, rng, 1.0, false);
    std::vector<int> labels{1, 4, 0};
    EXPECT_LT(max_grad_error([&] { return sum(mul(softmax(x, 1), w)); }, {x}), 1e-6);
    EXPECT_LT(max_grad_error([&] { return sum(mul(softmax(x, 0), w)); }, {x}), 1e-6);
    EXPECT_LT(max_grad_error([&] { return sum(mul(layer_norm(x, g, be, 1e-5), w)); }, {x, g, be}), 1e-5);
    EXPECT_LT(max_grad_error([&] { return cross_entropy(x, std::span<const int>(labels)); }, {x}), 1e-6);
    EXPECT_LT(max_grad_error([&] { return cross_entropy(slice(reshape(x, Shape{15}), 0, 0, 5), 2); }, {x}), 1e-6);
    EXPECT_LT(max_grad_error([&] { return mse(x, y); }, {x, y}), 1e-6);
    EXPECT_LT(max_grad_error([&] { return sum(tanh(mean(x3, 1))); }, {x3}), 1e-6);
    EXPECT_LT(max_grad_error([&] { return mean(tanh(x3)); }, {x3}), 1e-6);
  }
}

TEST(Tape, LeafGradientsAccumulateAcrossBackwardCalls) {
  DT w({2}, {1.0, -2.0}, true);
  for (int i = 0; i < 2; ++i) {
    BasicTape<double> tape;
    BasicTapeScope<double> scope(tape);
    auto y = sum(mul(w, w));
    tape.backward(y);
  }
  EXPECT_DOUBLE_EQ(w.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], -8.0);
  w.zero_grad();
  EXPECT_FALSE(w.has_grad());
}

TEST(Tape, RecordsOnlyWhenActiveAndNeeded) {
  DT w({2}, {1.0, 2.0}, true), c({2}, {3.0, 4.0});
  auto y0 = add(w, c);
  EXPECT_TRUE(y0.is_leaf());
  BasicTape<double> tape;
  BasicTapeScope<double> scope(tape);
  auto y1 = add(c, c);
  EXPECT_EQ(tape.size(), 0u);
  auto y2 = sum(add(w, c));
  EXPECT_EQ(tape.size(), 2u);
  {
    NoGradScope<double> off;
    auto y3 = add(w, c);
    EXPECT_EQ(tape.size(), 2u);
  }
  EXPECT_THROW(tape.backward(add(w, c)), ArgumentError);
  BasicTape<double> other;
  EXPECT_THROW(other.backward(y2), ArgumentError);
  tape.backward(y2);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Dropout, IdentityAtZeroAndInvertedScaling) {
  std::mt19937_64 rng(5);
  DT x = DT::ones({10000});
  auto same = dropout(x, 0.0, rng);
  EXPECT_EQ(same.vec(), x.vec());
  auto y = dropout(x, 0.25, rng);
  double s = 0;
  std::size_t zeros = 0;
  for (double v : y.values()) {
    s += v;
    if (v == 0) ++zeros;
    else EXPECT_NEAR(v, 1.0 / 0.75, 1e-12);
  }
  EXPECT_NEAR(s / 10000, 1.0, 0.05);
  EXPECT_NEAR(double(zeros) / 10000, 0.25, 0.02);
}
