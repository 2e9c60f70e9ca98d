// SPDX-License-Identifier: Apache-2.0
#include "sum/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "sum/error.hpp"

namespace sum {

void NeAccumulator::add(double p, bool y) {
  p = std::clamp(p, kNeClamp, 1.0 - kNeClamp);
  loss_sum_ -= y ? std::log(p) : std::log1p(-p);
  ++n_;
  positives_ += y;
}

double NeAccumulator::positive_rate() const {
  if (n_ == 0) throw DegenerateError("normalized entropy: no examples");
  return static_cast<double>(positives_) / static_cast<double>(n_);
}

double NeAccumulator::log_loss() const {
  if (n_ == 0) throw DegenerateError("normalized entropy: no examples");
  return loss_sum_ / static_cast<double>(n_);
}

double NeAccumulator::value() const {
  const double p = positive_rate();
  if (positives_ == 0 || positives_ == n_)
    throw DegenerateError("normalized entropy: labels are all one class, background entropy is zero");
  const double background = -(p * std::log(p) + (1.0 - p) * std::log1p(-p));
  return log_loss() / background;
}

double normalized_entropy(std::span<const double> predictions, std::span<const std::uint8_t> labels) {
  if (predictions.size() != labels.size())
    throw DimensionError("normalized_entropy: " + std::to_string(predictions.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
  NeAccumulator acc;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] > 1) throw Error("normalized_entropy: label is not binary");
    acc.add(predictions[i], labels[i] != 0);
  }
  return acc.value();
}

}  // namespace sum
