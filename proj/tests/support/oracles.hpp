#pragma once

// Independent reference computations for the loss, weight and metric
// formulas. Shared by the unit tests and the acceptance runner.

#include <boost/multiprecision/cpp_dec_float.hpp>
#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>
#include <string>
#include <vector>

#include "segxfer/metrics.hpp"
#include "segxfer/ops.hpp"
#include "segxfer/rng.hpp"
#include "segxfer/training.hpp"

namespace segxfer::testing {

struct OracleReport {
  std::size_t cases = 0;
  std::size_t failures = 0;
  double worst = 0.0;  // largest deviation seen
  std::string first_failure;

  bool ok() const { return failures == 0 && cases > 0; }
  void fail(std::string what) {
    if (failures++ == 0) first_failure = std::move(what);
  }
};

/// w_l = 1 - (f_l / sum f)^e evaluated with 50 significant digits.
inline double precise_class_weight(const std::vector<double>& f, std::size_t l, double exponent) {
  using Big = boost::multiprecision::cpp_dec_float_50;
  Big total = 0;
  for (double v : f) total += Big(v);
  const Big ratio = Big(f[l]) / total;
  if (ratio == 0) return 1.0;
  return Big(1 - boost::multiprecision::pow(ratio, Big(exponent))).convert_to<double>();
}

inline OracleReport check_class_weights(std::size_t trials, std::uint64_t seed, double tolerance = 1e-12) {
  OracleReport r;
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t k = 2 + rng.index(6);
    std::vector<double> f(k);
    for (auto& v : f) v = static_cast<double>(rng.index(1000000));
    f[rng.index(k)] += 1;
    for (double e : {kSegWeightExponent, kClsWeightExponent}) {
      const auto w = class_weights(f, e);
      ++r.cases;
      for (std::size_t l = 0; l < k; ++l) {
        const double d = std::abs(w[l] - precise_class_weight(f, l, e));
        r.worst = std::max(r.worst, d);
        if (d > tolerance) r.fail("trial " + std::to_string(t) + " label " + std::to_string(l));
      }
    }
  }
  return r;
}

/// Segmentation loss against a plain per-pixel loop over probabilities
/// computed independently in long double.
inline OracleReport check_seg_loss(std::size_t trials, std::uint64_t seed, double tolerance = 1e-6) {
  OracleReport r;
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t n = 2 + rng.index(5), h = 1 + rng.index(12), w = 1 + rng.index(12);
    Tensor<double> logits({n, h, w});
    for (auto& v : logits.data()) v = 4.0 * rng.normal();
    LabelMap labels({h, w});
    for (auto& v : labels.data()) v = static_cast<std::uint8_t>(rng.index(n));
    std::vector<double> wt(n);
    for (auto& v : wt) v = rng.uniform();
    long double oracle = 0;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        long double z = 0;
        for (std::size_t k = 0; k < n; ++k) z += std::exp(static_cast<long double>(logits.at(k, y, x)));
        const std::size_t l = labels.at(y, x);
        const long double p = std::exp(static_cast<long double>(logits.at(l, y, x))) / z;
        oracle -= wt[l] * std::log(p);
      }
    }
    Graph<double> g;
    const Var<double> z = g.constant(logits);
    const double via_prob = weighted_cross_entropy_seg(softmax_channels(z), labels, wt).value()[0];
    const double via_logits = weighted_cross_entropy_seg_logits(z, labels, wt).value()[0];
    for (double got : {via_prob, via_logits}) {
      ++r.cases;
      const double d = std::abs(got - static_cast<double>(oracle)) / std::max(1.0, std::abs(static_cast<double>(oracle)));
      r.worst = std::max(r.worst, d);
      if (d > tolerance) r.fail("trial " + std::to_string(t));
    }
  }
  return r;
}

/// Dice, TPR, TNR and kappa against exact rational recounts from raw data.
inline OracleReport check_metrics(std::size_t trials, std::uint64_t seed) {
  using Q = boost::multiprecision::cpp_rational;
  // Both parts stay far below 2^53, so one division rounds correctly.
  auto to_double = [](const Q& q) {
    return static_cast<double>(boost::multiprecision::numerator(q)) /
           static_cast<double>(boost::multiprecision::denominator(q));
  };
  OracleReport r;
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    // Dice on random label maps.
    const std::size_t h = 1 + rng.index(16), w = 1 + rng.index(16);
    const int labels = 2 + static_cast<int>(rng.index(4));
    LabelMap a({h, w}), b({h, w});
    for (auto& v : a.data()) v = static_cast<std::uint8_t>(rng.index(static_cast<std::size_t>(labels)));
    for (auto& v : b.data()) v = static_cast<std::uint8_t>(rng.index(static_cast<std::size_t>(labels)));
    for (int k = 0; k < labels; ++k) {
      long both = 0, in_a = 0, in_b = 0;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const bool pa = a.at(y, x) == k, pb = b.at(y, x) == k;
          if (pa && pb) ++both;
          if (pa) ++in_a;
          if (pb) ++in_b;
        }
      }
      const double expect = in_a + in_b == 0 ? 1.0 : to_double(Q(2 * both, in_a + in_b));
      ++r.cases;
      if (dice(a, b, k) != expect) r.fail("dice trial " + std::to_string(t));
    }

    // Binary predictions.
    const std::size_t n = 1 + rng.index(120);
    std::vector<int> pred(n), truth(n);
    const double bias = rng.uniform();
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = rng.uniform() < bias ? 1 : 0;
      pred[i] = rng.uniform() < 0.8 ? truth[i] : 1 - truth[i];
    }
    long agree = 0, pred_pos = 0, truth_pos = 0, tp = 0, tn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      agree += pred[i] == truth[i];
      pred_pos += pred[i];
      truth_pos += truth[i];
      tp += pred[i] && truth[i];
      tn += !pred[i] && !truth[i];
    }
    const long nn = static_cast<long>(n);
    const Q po(agree, nn);
    const Q pe = Q(pred_pos * truth_pos + (nn - pred_pos) * (nn - truth_pos), nn * nn);
    const double kappa = pe == 1 ? (po == 1 ? 1.0 : 0.0) : to_double((po - pe) / (1 - pe));
    const ConfusionMatrix2 cm = confusion(pred, truth);
    ++r.cases;
    if (cohens_kappa(cm) != kappa) r.fail("kappa trial " + std::to_string(t));
    if (truth_pos > 0 && tpr(cm) != to_double(Q(tp, truth_pos))) r.fail("tpr trial " + std::to_string(t));
    if (truth_pos < nn && tnr(cm) != to_double(Q(tn, nn - truth_pos))) r.fail("tnr trial " + std::to_string(t));
  }
  return r;
}

}  // namespace segxfer::testing
