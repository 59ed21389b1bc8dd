#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "segxfer/tensor.hpp"

namespace segxfer {

/// 2|P ∩ T| / (|P| + |T|) for label k. Two empty masks score 1.
inline double dice(const LabelMap& pred, const LabelMap& truth, int label) {
  if (pred.shape() != truth.shape()) {
    throw ShapeError("dice: " + shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
  }
  std::size_t both = 0, np = 0, nt = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == label, t = truth[i] == label;
    both += p && t;
    np += p;
    nt += t;
  }
  if (np + nt == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(np + nt);
}

/// Overlap counts for one label, for pooling Dice over many images.
struct DiceCounts {
  std::size_t intersection = 0;
  std::size_t predicted = 0;
  std::size_t truth = 0;

  void add(const LabelMap& pred, const LabelMap& gt, int label) {
    if (pred.shape() != gt.shape()) throw ShapeError("dice: label maps differ in shape");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool p = pred[i] == label, t = gt[i] == label;
      intersection += p && t;
      predicted += p;
      truth += t;
    }
  }
  double value() const {
    if (predicted + truth == 0) return 1.0;
    return 2.0 * static_cast<double>(intersection) / static_cast<double>(predicted + truth);
  }
};

/// Binary confusion counts; positive means diseased.
struct ConfusionMatrix2 {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::size_t total() const { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionMatrix2&, const ConfusionMatrix2&) = default;
};

inline ConfusionMatrix2 confusion(std::span<const int> predictions, std::span<const int> truths) {
  if (predictions.size() != truths.size()) throw ConfigError("confusion: prediction and truth counts differ");
  if (predictions.empty()) throw ConfigError("confusion: no samples");
  ConfusionMatrix2 cm;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const bool p = predictions[i] != 0, t = truths[i] != 0;
    if (p && t) ++cm.tp;
    else if (p) ++cm.fp;
    else if (t) ++cm.fn;
    else ++cm.tn;
  }
  return cm;
}

/// NaN when the matrix holds no positives.
inline double tpr(const ConfusionMatrix2& cm) {
  const std::size_t d = cm.tp + cm.fn;
  return d ? static_cast<double>(cm.tp) / static_cast<double>(d) : std::nan("");
}

/// NaN when the matrix holds no negatives.
inline double tnr(const ConfusionMatrix2& cm) {
  const std::size_t d = cm.tn + cm.fp;
  return d ? static_cast<double>(cm.tn) / static_cast<double>(d) : std::nan("");
}

/// Chance-corrected agreement. With p_e = 1 the value is 1 for perfect
/// agreement and 0 otherwise. Evaluated as one division of exact integers,
/// (n (tp + tn) - S) / (n^2 - S) with S = n^2 p_e, so the result is correctly
/// rounded.
inline double cohens_kappa(const ConfusionMatrix2& cm) {
  const std::uint64_t n = cm.total();
  if (n == 0) throw ConfigError("cohens_kappa: empty confusion matrix");
  if (n > (std::uint64_t{1} << 26)) throw ConfigError("cohens_kappa: too many samples for exact evaluation");
  const std::uint64_t agree = cm.tp + cm.tn;
  const std::uint64_t chance = (cm.tp + cm.fp) * (cm.tp + cm.fn) + (cm.fn + cm.tn) * (cm.fp + cm.tn);
  const std::uint64_t n2 = n * n;
  if (chance == n2) return agree == n ? 1.0 : 0.0;
  const auto num = static_cast<std::int64_t>(n * agree) - static_cast<std::int64_t>(chance);
  return static_cast<double>(num) / static_cast<double>(n2 - chance);
}

struct MetricsRecord {
  std::string disease;
  std::string mode;
  int n_pos_train = 0;
  int repetition = 0;
  double tpr = 0.0;
  double tnr = 0.0;
  double kappa = 0.0;
  std::vector<double> dice;  // optional, per label

  static MetricsRecord from(const ConfusionMatrix2& cm) {
    MetricsRecord r;
    r.tpr = segxfer::tpr(cm);
    r.tnr = segxfer::tnr(cm);
    r.kappa = cohens_kappa(cm);
    return r;
  }
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

/// Mean and sample (n-1) standard deviation; a single value has std 0.
inline MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw ConfigError("mean_std: no values");
  MeanStd m;
  m.count = values.size();
  double s = 0.0;
  for (double v : values) s += v;
  m.mean = s / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - m.mean) * (v - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return m;
}

struct GroupKey {
  std::string disease;
  std::string mode;
  int n_pos_train = 0;

  friend auto operator<=>(const GroupKey&, const GroupKey&) = default;
};

struct GroupSummary {
  MeanStd tpr, tnr, kappa;
};

/// Groups by (disease, mode, n_pos_train). Values are sorted before summing
/// so the result does not depend on record order.
inline std::map<GroupKey, GroupSummary> aggregate(std::span<const MetricsRecord> records) {
  if (records.empty()) throw ConfigError("aggregate: no records");
  std::map<GroupKey, std::array<std::vector<double>, 3>> buckets;
  for (const auto& r : records) {
    auto& b = buckets[GroupKey{r.disease, r.mode, r.n_pos_train}];
    b[0].push_back(r.tpr);
    b[1].push_back(r.tnr);
    b[2].push_back(r.kappa);
  }
  std::map<GroupKey, GroupSummary> out;
  for (auto& [key, b] : buckets) {
    for (auto& v : b) std::sort(v.begin(), v.end());
    out[key] = GroupSummary{mean_std(b[0]), mean_std(b[1]), mean_std(b[2])};
  }
  return out;
}

}  // namespace segxfer
