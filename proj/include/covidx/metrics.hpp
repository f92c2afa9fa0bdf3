#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "covidx/data.hpp"
#include "covidx/trainer.hpp"

namespace covidx {

/// Counts with covid19 as the positive class.
struct ConfusionMatrix {
  std::size_t tp = 0, fn = 0, fp = 0, tn = 0;

  std::size_t total() const { return tp + fn + fp + tn; }
  // Same outcomes with the normal class treated as positive.
  ConfusionMatrix swapped() const { return {tn, fp, fn, tp}; }
  bool operator==(const ConfusionMatrix&) const = default;
};

inline ConfusionMatrix confusion(const std::vector<Prediction>& predictions) {
  ConfusionMatrix cm;
  for (const auto& p : predictions) {
    if (p.truth > 1 || p.predicted > 1) fail(ErrorKind::data, "confusion: label index out of range");
    const bool truth = p.truth == kPositiveClass, pred = p.predicted == kPositiveClass;
    if (truth && pred) ++cm.tp;
    else if (truth) ++cm.fn;
    else if (pred) ++cm.fp;
    else ++cm.tn;
  }
  return cm;
}

/// Percent of correct predictions.
inline double accuracy(const ConfusionMatrix& cm) {
  if (cm.total() == 0) fail(ErrorKind::data, "accuracy of an empty confusion matrix");
  return 100.0 * static_cast<double>(cm.tp + cm.tn) / static_cast<double>(cm.total());
}

inline double ratio_or_zero(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

inline double precision(const ConfusionMatrix& cm) { return ratio_or_zero(cm.tp, cm.tp + cm.fp); }
inline double recall(const ConfusionMatrix& cm) { return ratio_or_zero(cm.tp, cm.tp + cm.fn); }

inline double f1(double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }

struct ClassReport {
  std::size_t label = 0;
  double precision = 0, recall = 0, f1 = 0;
};

inline ClassReport class_report(const ConfusionMatrix& cm, std::size_t label) {
  const ConfusionMatrix m = label == kPositiveClass ? cm : cm.swapped();
  const double p = precision(m), r = recall(m);
  return {label, p, r, f1(p, r)};
}

/// covid19 row first, then normal.
inline std::array<ClassReport, 2> per_class_report(const ConfusionMatrix& cm) {
  return {class_report(cm, kPositiveClass), class_report(cm, kNormal)};
}

inline std::array<ClassReport, 2> per_class_report(const std::vector<Prediction>& predictions) {
  return per_class_report(confusion(predictions));
}

/// Two-decimal display text. printf rounding: exact binary ties go to the
/// even digit (0.625 -> "0.62"), everything else to the nearest.
inline std::string display2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

struct RocPoint {
  double threshold = 0;  // scores >= threshold count as positive
  std::size_t tp = 0, fp = 0;
  double tpr = 0, fpr = 0;
};

struct RocCurve {
  std::vector<RocPoint> points;
  double auc = 0;
};

/// Thresholds are +inf followed by every distinct score in descending order.
/// AUC is the trapezoid sum, evaluated on integer counts.
inline RocCurve roc(const std::vector<Prediction>& predictions) {
  std::size_t positives = 0;
  for (const auto& p : predictions) positives += p.truth == kPositiveClass;
  const std::size_t negatives = predictions.size() - positives;
  if (positives == 0 || negatives == 0) {
    fail(ErrorKind::data, "ROC is undefined when only one class is present (" +
                              std::to_string(positives) + " positive, " + std::to_string(negatives) +
                              " negative)");
  }
  std::vector<const Prediction*> order;
  for (const auto& p : predictions) order.push_back(&p);
  std::stable_sort(order.begin(), order.end(),
                   [](const Prediction* a, const Prediction* b) { return a->score > b->score; });
  RocCurve c;
  c.points.push_back({std::numeric_limits<double>::infinity(), 0, 0, 0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  std::uint64_t twice_area = 0;  // sum of dfp * (tp_prev + tp)
  for (std::size_t i = 0; i < order.size();) {
    const double t = order[i]->score;
    const std::size_t tp_prev = tp, fp_prev = fp;
    for (; i < order.size() && order[i]->score == t; ++i) {
      (order[i]->truth == kPositiveClass ? tp : fp)++;
    }
    twice_area += (fp - fp_prev) * (tp + tp_prev);
    c.points.push_back({t, tp, fp, static_cast<double>(tp) / static_cast<double>(positives),
                        static_cast<double>(fp) / static_cast<double>(negatives)});
  }
  c.auc = static_cast<double>(twice_area) / (2.0 * static_cast<double>(positives * negatives));
  return c;
}

struct MetricSummary {
  ConfusionMatrix cm;
  double accuracy_pct = 0;
  std::array<ClassReport, 2> classes{};
  bool has_auc = false;
  double auc = 0;
};

inline MetricSummary summarize(const std::vector<Prediction>& predictions) {
  MetricSummary s;
  s.cm = confusion(predictions);
  s.accuracy_pct = accuracy(s.cm);
  s.classes = per_class_report(s.cm);
  std::size_t positives = 0;
  for (const auto& p : predictions) positives += p.truth == kPositiveClass;
  if (positives > 0 && positives < predictions.size()) {
    s.has_auc = true;
    s.auc = roc(predictions).auc;
  }
  return s;
}

}  // namespace covidx
