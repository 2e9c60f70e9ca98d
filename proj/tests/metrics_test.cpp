// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "sum/error.hpp"
#include "sum/metrics.hpp"

using namespace sum;

TEST(NormalizedEntropy, ConstantEmpiricalRateIsOne) {
  std::mt19937_64 rng(3);
  std::bernoulli_distribution coin(0.13);
  std::vector<std::uint8_t> y(5000);
  for (auto& v : y) v = coin(rng);
  double pos = 0;
  for (auto v : y) pos += v;
  const std::vector<double> p(y.size(), pos / double(y.size()));
  EXPECT_NEAR(normalized_entropy(p, y), 1.0, 1e-9);
}

TEST(NormalizedEntropy, HandCase) {
  // log loss -ln(0.9), background ln 2.
  const std::vector<double> p = {0.9, 0.1};
  const std::vector<std::uint8_t> y = {1, 0};
  EXPECT_NEAR(normalized_entropy(p, y), -std::log(0.9) / std::log(2.0), 1e-12);
  EXPECT_NEAR(normalized_entropy(p, y), 0.1520, 1e-4);
}

TEST(NormalizedEntropy, PerfectPredictorNearZero) {
  const std::vector<double> p = {1.0, 0.0, 1.0, 0.0};
  const std::vector<std::uint8_t> y = {1, 0, 1, 0};
  EXPECT_LT(normalized_entropy(p, y), 1e-6);
}

TEST(NormalizedEntropy, SingleClassIsDegenerate) {
  const std::vector<double> p = {0.3, 0.4};
  EXPECT_THROW(normalized_entropy(p, std::vector<std::uint8_t>{1, 1}), DegenerateError);
  EXPECT_THROW(normalized_entropy(p, std::vector<std::uint8_t>{0, 0}), DegenerateError);
  EXPECT_THROW(normalized_entropy({}, {}), DegenerateError);
}

TEST(NormalizedEntropy, RejectsBadInput) {
  const std::vector<double> p = {0.3, 0.4};
  EXPECT_THROW(normalized_entropy(p, std::vector<std::uint8_t>{1}), DimensionError);
  EXPECT_THROW(normalized_entropy(p, std::vector<std::uint8_t>{1, 2}), Error);
}

TEST(NormalizedEntropy, OrderAndDuplicationInvariant) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  std::vector<double> p(300);
  std::vector<std::uint8_t> y(300);
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = u(rng);
    y[i] = u(rng) < p[i];
  }
  const double ne = normalized_entropy(p, y);
  std::vector<std::size_t> idx(p.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<double> p2, p3;
  std::vector<std::uint8_t> y2, y3;
  for (auto i : idx) {
    p2.push_back(p[i]);
    y2.push_back(y[i]);
  }
  for (int k = 0; k < 3; ++k) {
    p3.insert(p3.end(), p.begin(), p.end());
    y3.insert(y3.end(), y.begin(), y.end());
  }
  EXPECT_NEAR(normalized_entropy(p2, y2), ne, 1e-12);
  EXPECT_NEAR(normalized_entropy(p3, y3), ne, 1e-12);
}

TEST(NormalizedEntropy, ClampsExtremePredictions) {
  const std::vector<double> p = {0.0, 0.5};
  const std::vector<std::uint8_t> y = {1, 0};
  const double expect = (-std::log(1e-7) + std::log(2.0)) / 2.0 / std::log(2.0);
  EXPECT_NEAR(normalized_entropy(p, y), expect, 1e-9);
}

TEST(NeAccumulator, MatchesBatchForm) {
  NeAccumulator a;
  const std::vector<double> p = {0.2, 0.7, 0.4, 0.9};
  const std::vector<std::uint8_t> y = {0, 1, 0, 1};
  for (std::size_t i = 0; i < p.size(); ++i) a.add(p[i], y[i]);
  EXPECT_EQ(a.count(), 4u);
  EXPECT_DOUBLE_EQ(a.positive_rate(), 0.5);
  EXPECT_NEAR(a.value(), normalized_entropy(p, y), 1e-15);
}
