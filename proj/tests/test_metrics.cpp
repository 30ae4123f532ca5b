#include <gtest/gtest.h>

#include <random>

#include "mmbert/metrics.hpp"

using namespace mmbert;

namespace {

// Straightforward per-class recomputation from raw label lists.
double reference_macro_f1(const std::vector<int>& pred, const std::vector<int>& gold) {
  double total = 0;
  for (int c : {0, 1}) {
    double tp = 0, pp = 0, ap = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      tp += pred[i] == c && gold[i] == c;
      pp += pred[i] == c;
      ap += gold[i] == c;
    }
    const double p = pp ? tp / pp : 0, r = ap ? tp / ap : 0;
    total += p + r > 0 ? 2 * p * r / (p + r) : 0;
  }
  return total / 2;
}

}  // namespace

TEST(Metrics, HandComputedConfusion) {
  auto m = metrics_from_confusion({40, 10, 20, 30});
  EXPECT_NEAR(m.accuracy, 0.70, 1e-12);
  EXPECT_NEAR(m.precision[1], 0.8, 1e-12);
  EXPECT_NEAR(m.recall[1], 40.0 / 60, 1e-12);
  EXPECT_NEAR(m.precision[0], 0.6, 1e-12);
  EXPECT_NEAR(m.recall[0], 0.75, 1e-12);
  EXPECT_NEAR(m.macro_f1, 0.6970, 1e-4);
  EXPECT_NEAR(m.macro_f1, (16.0 / 22 + 2.0 / 3) / 2, 1e-12);
}

TEST(Metrics, DegenerateCases) {
  std::vector<int> y{1, 0, 1, 1, 0};
  auto perfect = compute_metrics(y, y);
  EXPECT_DOUBLE_EQ(perfect.macro_f1, 1.0);
  EXPECT_DOUBLE_EQ(perfect.accuracy, 1.0);
  std::vector<int> gold{1, 1, 0, 0}, ones(4, 1);
  auto one_class = compute_metrics(ones, gold);
  EXPECT_NEAR(one_class.macro_f1, 1.0 / 3, 1e-12);
  EXPECT_DOUBLE_EQ(one_class.f1[0], 0.0);
  std::vector<int> empty;
  EXPECT_THROW(compute_metrics(empty, empty), ArgumentError);
  std::vector<int> shorter{1};
  EXPECT_THROW(compute_metrics(shorter, gold), ArgumentError);
}

TEST(Metrics, AgreesWithReferenceOnRandomSets) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 200;
    std::vector<int> pred(n), gold(n);
    const double bias = std::uniform_real_distribution<double>(0.05, 0.95)(rng);
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = std::bernoulli_distribution(bias)(rng);
      gold[i] = std::bernoulli_distribution(0.5)(rng);
    }
    auto m = compute_metrics(pred, gold);
    EXPECT_NEAR(m.macro_f1, reference_macro_f1(pred, gold), 1e-12);
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += pred[i] == gold[i];
    EXPECT_NEAR(m.accuracy, acc / double(n), 1e-12);
    EXPECT_EQ(m.confusion.total(), n);
  }
}
