#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "selpred/matrix.hpp"

namespace selpred {

/// Logits with their ground-truth labels; the unit of calibration and
/// selective evaluation.
struct LogitsSet {
  Matrix logits;            // N x K
  std::vector<int> labels;  // values in [0, K)
  int n_classes = 0;

  std::size_t size() const { return logits.rows; }

  void validate() const {
    if (n_classes < 2) throw ValidationError("LogitsSet: needs at least 2 classes");
    if (logits.cols != static_cast<std::size_t>(n_classes))
      throw ValidationError("LogitsSet: logits column count differs from n_classes");
    if (labels.size() != logits.rows)
      throw ValidationError("LogitsSet: label count differs from logits rows");
    if (!logits.all_finite()) throw ValidationError("LogitsSet: non-finite logits");
    for (int y : labels)
      if (y < 0 || y >= n_classes)
        throw ValidationError("LogitsSet: label out of range");
  }
};

/// Result of a temperature fit.
struct TemperatureFit {
  double temperature = 1.0;
  double nll = 0.0;
  bool clamped = false;  // the optimum sat on a search bound
};

/// Row-wise softmax of logits/T with max subtraction. Rows sum to 1.
inline Matrix softmax_probs(const Matrix& logits, double temperature) {
  if (!(temperature > 0)) throw UsageError("softmax_probs: temperature must be positive");
  Matrix probs(logits.rows, logits.cols);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < logits.cols; ++j) mx = std::max(mx, logits(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < logits.cols; ++j) {
      const double e = std::exp((logits(i, j) - mx) / temperature);
      probs(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < logits.cols; ++j) probs(i, j) /= sum;
  }
  return probs;
}

/// Mean negative log-likelihood of the true class at temperature T.
///
/// Computed through log-sum-exp, and accumulated over a sorted copy of the
/// per-sample values so the result is bit-identical under row permutation.
inline double nll(const LogitsSet& ls, double temperature) {
  if (!(temperature > 0)) throw UsageError("nll: temperature must be positive");
  if (ls.size() == 0) throw UsageError("nll: empty logits set");
  std::vector<double> per_sample(ls.size());
  for (std::size_t i = 0; i < ls.size(); ++i) {
    double mx = ls.logits(i, 0);
    for (std::size_t j = 1; j < ls.logits.cols; ++j)
      mx = std::max(mx, ls.logits(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < ls.logits.cols; ++j)
      sum += std::exp((ls.logits(i, j) - mx) / temperature);
    const double ly = (ls.logits(i, static_cast<std::size_t>(ls.labels[i])) - mx) /
                      temperature;
    per_sample[i] = std::log(sum) - ly;
  }
  std::sort(per_sample.begin(), per_sample.end());
  const double total = std::accumulate(per_sample.begin(), per_sample.end(), 0.0);
  return total / static_cast<double>(ls.size());
}

/// Minimize nll over log T by golden-section search on [t_min, t_max].
///
/// The winner is picked among {T=1, interior optimum, T_min, T_max} with ties
/// resolved in that order, so a flat objective (e.g. all-uniform logits)
/// returns T=1 and a monotone objective returns the bound with clamped=true.
inline TemperatureFit fit_temperature(const LogitsSet& ls, double t_min = 0.05,
                                      double t_max = 10.0, double tol = 1e-4) {
  if (!(t_min > 0) || !(t_min < t_max))
    throw UsageError("fit_temperature: need 0 < T_min < T_max");
  if (!(tol > 0)) throw UsageError("fit_temperature: tol must be positive");
  if (ls.size() == 0) throw UsageError("fit_temperature: empty logits set");

  const auto objective = [&](double log_t) { return nll(ls, std::exp(log_t)); };
  double a = std::log(t_min), b = std::log(t_max);
  constexpr double kInvPhi = 0.6180339887498949;
  double x1 = b - kInvPhi * (b - a);
  double x2 = a + kInvPhi * (b - a);
  double f1 = objective(x1), f2 = objective(x2);
  while (b - a > tol) {
    if (f1 <= f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - kInvPhi * (b - a);
      f1 = objective(x1);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + kInvPhi * (b - a);
      f2 = objective(x2);
    }
  }
  const double t_interior = std::exp(0.5 * (a + b));

  struct Candidate {
    double t;
    bool clamp;
  };
  std::vector<Candidate> candidates;
  if (t_min <= 1.0 && 1.0 <= t_max) candidates.push_back({1.0, false});
  candidates.push_back({t_interior, false});
  candidates.push_back({t_min, true});
  candidates.push_back({t_max, true});

  TemperatureFit fit;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& c : candidates) {
    const double v = nll(ls, c.t);
    if (v < best) {
      best = v;
      fit.temperature = c.t;
      fit.clamped = c.clamp;
    }
  }
  fit.nll = best;
  return fit;
}

/// Expected calibration error over equal-width confidence bins on p_max.
inline double ece(const Matrix& probs, const std::vector<int>& labels,
                  int n_bins = 15) {
  if (n_bins < 1) throw UsageError("ece: n_bins must be >= 1");
  if (probs.rows == 0 || probs.rows != labels.size())
    throw ValidationError("ece: probs/labels size mismatch");
  std::vector<double> conf(n_bins, 0.0), correct(n_bins, 0.0);
  std::vector<std::size_t> count(n_bins, 0);
  for (std::size_t i = 0; i < probs.rows; ++i) {
    const std::size_t pred = argmax_row(probs, i);
    const double p = probs(i, pred);
    const int bin = std::min(static_cast<int>(p * n_bins), n_bins - 1);
    conf[bin] += p;
    correct[bin] += (static_cast<int>(pred) == labels[i]) ? 1.0 : 0.0;
    ++count[bin];
  }
  double acc = 0.0;
  const double n = static_cast<double>(probs.rows);
  for (int b = 0; b < n_bins; ++b) {
    if (count[b] == 0) continue;
    const double cnt = static_cast<double>(count[b]);
    acc += (cnt / n) * std::abs(correct[b] / cnt - conf[b] / cnt);
  }
  return acc;
}

}  // namespace selpred
