// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace sum {

inline constexpr double kNeClamp = 1e-7;

/// Normalized entropy: mean log loss divided by the log loss of predicting
/// the empirical positive rate. Predictions are clamped to
/// [1e-7, 1 - 1e-7]. Throws DegenerateError when labels are single-class.
double normalized_entropy(std::span<const double> predictions, std::span<const std::uint8_t> labels);

// Streaming form of the same quantity.
class NeAccumulator {
 public:
  void add(double prediction, bool label);
  std::size_t count() const noexcept { return n_; }
  double positive_rate() const;
  double log_loss() const;
  double value() const;

 private:
  double loss_sum_ = 0.0;
  std::size_t n_ = 0, positives_ = 0;
};

}  // namespace sum
