// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "sum/error.hpp"
#include "sum/eval_harness.hpp"
#include "sum/metrics.hpp"

namespace sum {

void Dataset::add_row(std::span<const float> values, bool label) {
  if (values.size() != cols)
    throw DimensionError("dataset: row has " + std::to_string(values.size()) + " values, expected " +
                         std::to_string(cols));
  x.insert(x.end(), values.begin(), values.end());
  y.push_back(label ? 1 : 0);
}

void DownstreamConfig::validate() const {
  if (!(ridge > 0.0)) throw ConfigError("downstream: ridge must be > 0");
  if (max_iterations < 1) throw ConfigError("downstream: max_iterations must be >= 1");
  if (!(tolerance > 0.0)) throw ConfigError("downstream: tolerance must be > 0");
}

double LogisticModel::logit(const float* row) const {
  double z = bias;
  for (std::size_t j = 0; j < weights.size(); ++j) z += weights[j] * ((double(row[j]) - mean[j]) / scale[j]);
  return z;
}

std::vector<double> LogisticModel::predict(const Dataset& d) const {
  std::vector<double> p(d.rows());
  for (std::size_t i = 0; i < d.rows(); ++i) p[i] = 1.0 / (1.0 + std::exp(-logit(d.row(i))));
  return p;
}

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Penalised negative log-likelihood.
double objective(const Dataset& d, const LogisticModel& m, double lambda) {
  double loss = 0.0;
  for (std::size_t i = 0; i < d.rows(); ++i) {
    const double z = m.logit(d.row(i));
    // log(1 + e^z) - y z, computed stably.
    loss += (z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z))) - (d.y[i] ? z : 0.0);
  }
  double reg = 0.0;
  for (double w : m.weights) reg += w * w;
  return loss + 0.5 * lambda * reg;
}

// Solves A x = b for symmetric positive definite A (n x n, row-major) in place.
bool cholesky_solve(std::vector<double>& a, std::vector<double>& b, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (!(d > 0.0)) return false;
    d = std::sqrt(d);
    a[j * n + j] = d;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / d;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= a[i * n + k] * b[k];
    b[i] = s / a[i * n + i];
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[k * n + i] * b[k];
    b[i] = s / a[i * n + i];
  }
  return true;
}

}  // namespace

LogisticModel fit_logistic(const Dataset& d, const DownstreamConfig& cfg) {
  cfg.validate();
  const std::size_t n = d.rows(), c = d.cols;
  if (n == 0) throw Error("fit_logistic: empty dataset");
  double pos = 0;
  for (auto v : d.y) pos += v;
  if (pos == 0 || pos == double(n)) throw DegenerateError("fit_logistic: labels are all one class");

  LogisticModel m;
  m.mean.assign(c, 0.0);
  m.scale.assign(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) m.mean[j] += d.row(i)[j];
  for (auto& v : m.mean) v /= double(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double t = d.row(i)[j] - m.mean[j];
      m.scale[j] += t * t;
    }
  for (auto& v : m.scale) {
    v = std::sqrt(v / double(n));
    if (!(v > 1e-12)) v = 1.0;
  }
  m.weights.assign(c, 0.0);
  const double rate = pos / double(n);
  m.bias = std::log(rate / (1.0 - rate));

  const double lambda = cfg.ridge * double(n);
  const std::size_t p = c + 1;
  std::vector<double> z(p), h(p * p), g(p);
  double current = objective(d, m, lambda);
  for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
    std::fill(h.begin(), h.end(), 0.0);
    std::fill(g.begin(), g.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const float* row = d.row(i);
      for (std::size_t j = 0; j < c; ++j) z[j] = (double(row[j]) - m.mean[j]) / m.scale[j];
      z[c] = 1.0;
      double s = m.bias;
      for (std::size_t j = 0; j < c; ++j) s += m.weights[j] * z[j];
      const double pr = sigmoid(s), r = pr - d.y[i], wgt = pr * (1.0 - pr);
      for (std::size_t a = 0; a < p; ++a) {
        g[a] += r * z[a];
        const double wa = wgt * z[a];
        for (std::size_t b = 0; b <= a; ++b) h[a * p + b] += wa * z[b];
      }
    }
    for (std::size_t a = 0; a < c; ++a) {
      g[a] += lambda * m.weights[a];
      h[a * p + a] += lambda;
    }
    for (std::size_t a = 0; a < p; ++a)
      for (std::size_t b = a + 1; b < p; ++b) h[a * p + b] = h[b * p + a];
    if (!cholesky_solve(h, g, p)) throw NumericError("fit_logistic: Hessian is not positive definite");

    // Damped step: halve until the objective does not increase.
    LogisticModel next = m;
    double step = 1.0, value = current;
    for (int tries = 0; tries < 20; ++tries, step *= 0.5) {
      for (std::size_t j = 0; j < c; ++j) next.weights[j] = m.weights[j] - step * g[j];
      next.bias = m.bias - step * g[c];
      value = objective(d, next, lambda);
      if (value <= current + 1e-12 * std::abs(current)) break;
    }
    double largest = 0.0;
    for (double v : g) largest = std::max(largest, std::abs(step * v));
    m = std::move(next);
    current = value;
    if (largest < cfg.tolerance) break;
  }
  return m;
}

double dataset_ne(const LogisticModel& m, const Dataset& d) {
  NeAccumulator acc;
  for (std::size_t i = 0; i < d.rows(); ++i) acc.add(sigmoid(m.logit(d.row(i))), d.y[i] != 0);
  return acc.value();
}

std::vector<Importance> feature_importance(const LogisticModel& m, const Dataset& d, std::size_t repeats,
                                           std::uint64_t seed) {
  if (d.rows() == 0) throw Error("feature_importance: empty slice");
  if (repeats < 1) throw ConfigError("feature_importance: repeats must be >= 1");
  const double base = dataset_ne(m, d);
  std::vector<Importance> out;
  std::vector<float> buf(d.cols);
  std::vector<std::size_t> perm(d.rows());
  for (std::size_t gi = 0; gi < d.groups.size(); ++gi) {
    const auto& grp = d.groups[gi];
    std::vector<double> deltas;
    for (std::size_t r = 0; r < repeats; ++r) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * (gi * 131 + r + 1)));
      std::shuffle(perm.begin(), perm.end(), rng);
      NeAccumulator acc;
      for (std::size_t i = 0; i < d.rows(); ++i) {
        std::copy(d.row(i), d.row(i) + d.cols, buf.begin());
        std::copy(d.row(perm[i]) + grp.begin, d.row(perm[i]) + grp.end, buf.begin() + grp.begin);
        acc.add(sigmoid(m.logit(buf.data())), d.y[i] != 0);
      }
      deltas.push_back(acc.value() - base);
    }
    Importance imp{grp.name, 0.0, 0.0};
    for (double v : deltas) imp.mean += v;
    imp.mean /= double(deltas.size());
    for (double v : deltas) imp.stddev += (v - imp.mean) * (v - imp.mean);
    imp.stddev = deltas.size() > 1 ? std::sqrt(imp.stddev / double(deltas.size() - 1)) : 0.0;
    out.push_back(imp);
  }
  std::stable_sort(out.begin(), out.end(), [](const Importance& a, const Importance& b) { return a.mean > b.mean; });
  return out;
}

std::vector<ShiftStats> embedding_shift(const std::vector<std::vector<Tensorf>>& sequences, std::size_t pool) {
  if (pool < 1) throw ConfigError("embedding_shift: pool must be >= 1");
  std::size_t k_slots = 0, dim = 0;
  for (const auto& s : sequences)
    if (!s.empty()) {
      k_slots = s[0].rows();
      dim = s[0].cols();
      break;
    }
  if (std::none_of(sequences.begin(), sequences.end(), [](const auto& s) { return s.size() >= 2; }))
    throw Error("embedding_shift: need at least two versions for some user");
  std::vector<ShiftStats> out(k_slots);
  std::vector<double> cos_sum(k_slots, 0.0), l2_sum(k_slots, 0.0);
  for (std::size_t k = 0; k < k_slots; ++k) out[k].slot = k;

  for (const auto& seq : sequences) {
    if (seq.size() < 2) continue;
    // Pooled sequence: mean over the element and up to pool - 1 predecessors.
    std::vector<std::vector<double>> pooled(seq.size(), std::vector<double>(k_slots * dim, 0.0));
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq[i].rows() != k_slots || seq[i].cols() != dim)
        throw DimensionError("embedding_shift: sequences disagree on shape");
      const std::size_t first = i + 1 >= pool ? i + 1 - pool : 0;
      for (std::size_t j = first; j <= i; ++j)
        for (std::size_t e = 0; e < k_slots * dim; ++e) pooled[i][e] += seq[j][e];
      for (auto& v : pooled[i]) v /= double(i - first + 1);
    }
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      for (std::size_t k = 0; k < k_slots; ++k) {
        const double* a = pooled[i].data() + k * dim;
        const double* b = pooled[i + 1].data() + k * dim;
        double ab = 0, aa = 0, bb = 0;
        for (std::size_t e = 0; e < dim; ++e) {
          ab += a[e] * b[e];
          aa += a[e] * a[e];
          bb += b[e] * b[e];
        }
        if (aa == 0.0 || bb == 0.0) {
          ++out[k].excluded_zero_norm;
          continue;
        }
        const double na = std::sqrt(aa), nb = std::sqrt(bb);
        cos_sum[k] += ab / (na * nb);
        l2_sum[k] += std::abs(nb - na) / na * 100.0;
        ++out[k].pairs;
      }
    }
  }
  for (std::size_t k = 0; k < k_slots; ++k) {
    if (out[k].pairs == 0) continue;
    out[k].mean_cosine = cos_sum[k] / double(out[k].pairs);
    out[k].mean_l2_change_pct = l2_sum[k] / double(out[k].pairs);
  }
  return out;
}

}  // namespace sum
