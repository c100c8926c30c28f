#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "selpred/calibration.hpp"
#include "selpred/matrix.hpp"

namespace selpred {

/// Outcome of applying a confidence threshold: per-sample argmax prediction,
/// confidence, and whether the sample is retained (p_max >= tau).
struct AbstainDecision {
  std::vector<int> predictions;
  std::vector<double> p_max;
  std::vector<bool> retained;
  double threshold = 0.0;

  std::size_t n_retained() const {
    return static_cast<std::size_t>(
        std::count(retained.begin(), retained.end(), true));
  }
};

/// One point on a risk-coverage curve. Metrics are absent when nothing is
/// retained at this threshold.
struct RiskCoveragePoint {
  double threshold = 0.0;
  double coverage = 0.0;
  std::size_t n_retained = 0;
  std::optional<double> sel_accuracy;
  std::optional<double> sel_macro_f1;
  std::optional<double> sel_qwk;
};

/// The curve point picked at a target coverage.
struct OperatingPoint {
  RiskCoveragePoint point;
  double target_coverage = 0.0;
};

/// Per-class retention statistics under a decision.
struct ClasswiseAcceptance {
  struct ClassStats {
    std::size_t n_total = 0;
    std::size_t n_retained = 0;
    std::optional<double> acceptance_rate;  // absent when the class is empty
    std::optional<double> retained_recall;  // absent when nothing retained
  };
  std::vector<ClassStats> per_class;
  std::size_t n_retained_total = 0;
};

/// Policy for classes that abstention has emptied out of the retained set.
/// ExcludeAbsent drops classes with no true and no predicted retained sample
/// from the macro average; IncludeAbsentAsZero scores them 0.
enum class MacroF1Policy { ExcludeAbsent, IncludeAbsentAsZero };

/// Threshold rule: predict argmax when p_max >= tau, abstain otherwise.
/// Argmax ties go to the lowest class index.
inline AbstainDecision decide(const Matrix& probs, double tau) {
  if (!(tau >= 0.0) || !(tau <= 1.0))
    throw UsageError("decide: threshold must be in [0, 1]");
  AbstainDecision d;
  d.threshold = tau;
  d.predictions.resize(probs.rows);
  d.p_max.resize(probs.rows);
  d.retained.resize(probs.rows);
  for (std::size_t i = 0; i < probs.rows; ++i) {
    const std::size_t k = argmax_row(probs, i);
    d.predictions[i] = static_cast<int>(k);
    d.p_max[i] = probs(i, k);
    d.retained[i] = probs(i, k) >= tau;
  }
  return d;
}

/// Fraction correct among retained samples; absent if none retained.
inline std::optional<double> accuracy(const std::vector<int>& preds,
                                      const std::vector<int>& labels,
                                      const std::vector<bool>& mask) {
  std::size_t n = 0, correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!mask[i]) continue;
    ++n;
    if (preds[i] == labels[i]) ++correct;
  }
  if (n == 0) return std::nullopt;
  return static_cast<double>(correct) / static_cast<double>(n);
}

/// Macro-averaged F1 over retained samples. Per-class F1 = 2TP/(2TP+FP+FN);
/// classes with no retained presence are handled per the policy.
inline std::optional<double> macro_f1(
    const std::vector<int>& preds, const std::vector<int>& labels, int n_classes,
    const std::vector<bool>& mask,
    MacroF1Policy policy = MacroF1Policy::ExcludeAbsent) {
  std::vector<std::size_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
  std::size_t n = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!mask[i]) continue;
    ++n;
    if (preds[i] == labels[i]) {
      ++tp[labels[i]];
    } else {
      ++fp[preds[i]];
      ++fn[labels[i]];
    }
  }
  if (n == 0) return std::nullopt;
  double sum = 0.0;
  int counted = 0;
  for (int k = 0; k < n_classes; ++k) {
    const std::size_t support = 2 * tp[k] + fp[k] + fn[k];
    if (support == 0) {
      if (policy == MacroF1Policy::IncludeAbsentAsZero) ++counted;
      continue;
    }
    sum += 2.0 * static_cast<double>(tp[k]) / static_cast<double>(support);
    ++counted;
  }
  return sum / static_cast<double>(counted);
}

/// Quadratic weighted kappa over retained samples:
///   kappa = 1 - sum(w o O) / sum(w o E),  w_ij = (i-j)^2 / (K-1)^2,
/// with O the retained confusion counts and E the outer product of O's
/// marginals divided by n_retained. The (K-1)^2 factor cancels in the ratio,
/// so both sums are accumulated as exact integers.
///
/// When sum(w o E) = 0 (all mass on one identical class): 1.0 if O is
/// diagonal, otherwise the metric is undefined.
inline std::optional<double> qwk(const std::vector<int>& preds,
                                 const std::vector<int>& labels, int n_classes,
                                 const std::vector<bool>& mask) {
  if (n_classes < 2) throw UsageError("qwk: needs at least 2 classes");
  std::vector<std::int64_t> true_marginal(n_classes, 0),
      pred_marginal(n_classes, 0);
  std::int64_t n = 0, observed = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!mask[i]) continue;
    ++n;
    ++true_marginal[labels[i]];
    ++pred_marginal[preds[i]];
    const std::int64_t d = labels[i] - preds[i];
    observed += d * d;
  }
  if (n == 0) return std::nullopt;
  std::int64_t expected = 0;
  for (int i = 0; i < n_classes; ++i) {
    if (true_marginal[i] == 0) continue;
    for (int j = 0; j < n_classes; ++j) {
      const std::int64_t d = i - j;
      expected += d * d * true_marginal[i] * pred_marginal[j];
    }
  }
  if (expected == 0)
    return observed == 0 ? std::optional<double>(1.0) : std::nullopt;
  return 1.0 - static_cast<double>(observed) * static_cast<double>(n) /
                   static_cast<double>(expected);
}

/// Evaluate every grid threshold. Grid must be ascending within [0, 1];
/// coverage is then non-increasing along the result.
inline std::vector<RiskCoveragePoint> threshold_sweep(
    const Matrix& probs, const std::vector<int>& labels, int n_classes,
    const std::vector<double>& grid,
    MacroF1Policy policy = MacroF1Policy::ExcludeAbsent) {
  if (grid.empty()) throw UsageError("threshold_sweep: empty grid");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid[i] < 0.0 || grid[i] > 1.0)
      throw UsageError("threshold_sweep: grid values must lie in [0, 1]");
    if (i > 0 && grid[i] < grid[i - 1])
      throw UsageError("threshold_sweep: grid must be sorted ascending");
  }
  // One decide() pass; only the retained mask changes along the grid.
  const AbstainDecision base = decide(probs, 0.0);
  std::vector<RiskCoveragePoint> out;
  out.reserve(grid.size());
  const double n = static_cast<double>(probs.rows);
  for (double tau : grid) {
    std::vector<bool> mask(probs.rows);
    std::size_t kept = 0;
    for (std::size_t i = 0; i < probs.rows; ++i) {
      mask[i] = base.p_max[i] >= tau;
      if (mask[i]) ++kept;
    }
    RiskCoveragePoint pt;
    pt.threshold = tau;
    pt.n_retained = kept;
    pt.coverage = static_cast<double>(kept) / n;
    pt.sel_accuracy = accuracy(base.predictions, labels, mask);
    pt.sel_macro_f1 = macro_f1(base.predictions, labels, n_classes, mask, policy);
    pt.sel_qwk = qwk(base.predictions, labels, n_classes, mask);
    out.push_back(std::move(pt));
  }
  return out;
}

/// Uniform threshold grid {0, step, 2*step, ..., 1}.
inline std::vector<double> make_threshold_grid(double step) {
  if (!(step > 0) || step > 1.0)
    throw UsageError("threshold grid step must lie in (0, 1]");
  const auto denom = static_cast<std::int64_t>(std::llround(1.0 / step));
  std::vector<double> grid;
  if (denom >= 1 && std::abs(denom * step - 1.0) < 1e-9) {
    grid.reserve(static_cast<std::size_t>(denom) + 1);
    for (std::int64_t i = 0; i <= denom; ++i)
      grid.push_back(static_cast<double>(i) / static_cast<double>(denom));
  } else {
    for (double t = 0.0; t < 1.0 - 1e-12; t += step) grid.push_back(t);
    grid.push_back(1.0);
  }
  return grid;
}

/// Pick the curve point whose coverage is closest to the target. Ties go to
/// higher coverage, then to lower threshold.
inline OperatingPoint select_operating_point(
    const std::vector<RiskCoveragePoint>& curve, double target) {
  if (curve.empty()) throw UsageError("select_operating_point: empty curve");
  const RiskCoveragePoint* best = &curve.front();
  for (const auto& pt : curve) {
    const double d = std::abs(pt.coverage - target);
    const double db = std::abs(best->coverage - target);
    if (d < db ||
        (d == db && (pt.coverage > best->coverage ||
                     (pt.coverage == best->coverage &&
                      pt.threshold < best->threshold)))) {
      best = &pt;
    }
  }
  return {*best, target};
}

/// Per-class totals, retention counts/rates, and retained-set recall.
inline ClasswiseAcceptance classwise_acceptance(const std::vector<int>& labels,
                                                const AbstainDecision& decision,
                                                int n_classes) {
  if (labels.size() != decision.retained.size())
    throw ValidationError("classwise_acceptance: labels/decision size mismatch");
  ClasswiseAcceptance out;
  out.per_class.resize(n_classes);
  std::vector<std::size_t> correct(n_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& cs = out.per_class[labels[i]];
    ++cs.n_total;
    if (decision.retained[i]) {
      ++cs.n_retained;
      ++out.n_retained_total;
      if (decision.predictions[i] == labels[i]) ++correct[labels[i]];
    }
  }
  for (int k = 0; k < n_classes; ++k) {
    auto& cs = out.per_class[k];
    if (cs.n_total > 0)
      cs.acceptance_rate =
          static_cast<double>(cs.n_retained) / static_cast<double>(cs.n_total);
    if (cs.n_retained > 0)
      cs.retained_recall =
          static_cast<double>(correct[k]) / static_cast<double>(cs.n_retained);
  }
  return out;
}

/// One checkpoint's calibration and evaluation data, ready for ranking.
struct CheckpointEval {
  std::string checkpoint_id;
  std::size_t pretrain_epoch = 0;
  LogitsSet calibration;
  LogitsSet evaluation;
};

/// A ranked checkpoint: its temperature fit, full curve, and operating point.
struct RankedCheckpoint {
  std::string checkpoint_id;
  std::size_t pretrain_epoch = 0;
  TemperatureFit fit;
  std::vector<RiskCoveragePoint> curve;
  OperatingPoint operating_point;
};

struct RankingResult {
  std::vector<RankedCheckpoint> ranking;  // best first
  std::vector<std::string> excluded;      // ids with undefined selective metrics
};

/// Calibrate a checkpoint on its own calibration split, sweep the threshold
/// grid on its evaluation split, and pick the operating point nearest the
/// target coverage.
inline RankedCheckpoint evaluate_checkpoint(
    const CheckpointEval& rec, double target_coverage,
    const std::vector<double>& grid = make_threshold_grid(0.01),
    MacroF1Policy policy = MacroF1Policy::ExcludeAbsent) {
  rec.calibration.validate();
  rec.evaluation.validate();
  RankedCheckpoint rc;
  rc.checkpoint_id = rec.checkpoint_id;
  rc.pretrain_epoch = rec.pretrain_epoch;
  rc.fit = fit_temperature(rec.calibration);
  const Matrix probs = softmax_probs(rec.evaluation.logits, rc.fit.temperature);
  rc.curve = threshold_sweep(probs, rec.evaluation.labels,
                             rec.evaluation.n_classes, grid, policy);
  rc.operating_point = select_operating_point(rc.curve, target_coverage);
  return rc;
}

/// Order evaluated checkpoints by selective macro-F1 (desc), then selective
/// accuracy (desc), then earlier pretrain epoch. Checkpoints whose operating
/// point has undefined metrics are excluded and reported.
inline RankingResult rank_evaluated(std::vector<RankedCheckpoint> evaluated) {
  RankingResult result;
  for (auto& rc : evaluated) {
    const auto& pt = rc.operating_point.point;
    if (!pt.sel_macro_f1 || !pt.sel_accuracy) {
      result.excluded.push_back(rc.checkpoint_id);
      continue;
    }
    result.ranking.push_back(std::move(rc));
  }
  std::sort(result.ranking.begin(), result.ranking.end(),
            [](const RankedCheckpoint& a, const RankedCheckpoint& b) {
              const auto& pa = a.operating_point.point;
              const auto& pb = b.operating_point.point;
              if (*pa.sel_macro_f1 != *pb.sel_macro_f1)
                return *pa.sel_macro_f1 > *pb.sel_macro_f1;
              if (*pa.sel_accuracy != *pb.sel_accuracy)
                return *pa.sel_accuracy > *pb.sel_accuracy;
              if (a.pretrain_epoch != b.pretrain_epoch)
                return a.pretrain_epoch < b.pretrain_epoch;
              return a.checkpoint_id < b.checkpoint_id;
            });
  return result;
}

/// Rank checkpoint records, calibrating each on its own calibration split.
inline RankingResult rank_checkpoints(
    const std::vector<CheckpointEval>& records, double target_coverage,
    const std::vector<double>& grid = make_threshold_grid(0.01),
    MacroF1Policy policy = MacroF1Policy::ExcludeAbsent) {
  std::vector<RankedCheckpoint> evaluated;
  evaluated.reserve(records.size());
  for (const auto& rec : records)
    evaluated.push_back(evaluate_checkpoint(rec, target_coverage, grid, policy));
  return rank_evaluated(std::move(evaluated));
}

}  // namespace selpred
