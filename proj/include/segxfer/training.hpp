#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "segxfer/architectures.hpp"
#include "segxfer/autodiff.hpp"
#include "segxfer/dataset.hpp"
#include "segxfer/ops.hpp"
#include "segxfer/parameters.hpp"
#include "segxfer/rng.hpp"

namespace segxfer {

inline constexpr double kLogClamp = 1e-12;

// ---------------------------------------------------------------------------
// Class weights

/// Pixel counts per label over a set of label maps.
inline std::vector<double> pixel_label_frequencies(std::span<const LabelMap* const> maps, int labels) {
  if (maps.empty()) throw ConfigError("label frequencies of an empty dataset");
  std::vector<double> f(static_cast<std::size_t>(labels), 0.0);
  for (const LabelMap* m : maps) {
    for (std::uint8_t l : m->data()) {
      if (l >= labels) throw std::out_of_range("label " + std::to_string(l) + " out of range");
      f[l] += 1.0;
    }
  }
  return f;
}

/// Sample counts per class (0 = normal, 1 = diseased).
inline std::vector<double> sample_label_frequencies(std::span<const int> labels, int classes = 2) {
  if (labels.empty()) throw ConfigError("label frequencies of an empty dataset");
  std::vector<double> f(static_cast<std::size_t>(classes), 0.0);
  for (int l : labels) {
    if (l < 0 || l >= classes) throw std::out_of_range("class label " + std::to_string(l) + " out of range");
    f[static_cast<std::size_t>(l)] += 1.0;
  }
  return f;
}

inline constexpr double kSegWeightExponent = 1.0;
inline constexpr double kClsWeightExponent = 0.25;

/// w_l = 1 - (f_l / sum_k f_k)^exponent. Frequent labels get small weights;
/// the weights do not sum to one.
inline std::vector<double> class_weights(std::span<const double> f, double exponent) {
  double total = 0.0;
  for (double v : f) {
    if (v < 0) throw ConfigError("negative label frequency");
    total += v;
  }
  if (!(total > 0)) throw ConfigError("class weights need at least one labelled element");
  std::vector<double> w(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) w[i] = 1.0 - std::pow(f[i] / total, exponent);
  return w;
}

// ---------------------------------------------------------------------------
// Weighted cross entropy

/// L = -sum_x w_{l(x)} log p_{l(x)}(x), natural log, summed over pixels.
template <typename T>
Var<T> weighted_cross_entropy_seg(Var<T> prob_map, const LabelMap& labels, std::span<const double> weights) {
  const Tensor<T>& p = prob_map.value();
  kernels::require_rank(p.shape(), 3, "weighted_cross_entropy_seg");
  if (labels.rank() != 2 || labels.dim(0) != p.dim(1) || labels.dim(1) != p.dim(2)) {
    throw ShapeError("label map " + shape_str(labels.shape()) + " does not match " + shape_str(p.shape()));
  }
  const std::size_t n = p.dim(0);
  if (weights.size() != n) throw ShapeError("one weight per label required");
  for (std::uint8_t l : labels.data()) {
    if (l >= n) throw std::out_of_range("label " + std::to_string(l) + " >= " + std::to_string(n));
  }
  std::vector<double> w(weights.begin(), weights.end());
  const LabelMap lab = labels;
  auto evaluate = [w, lab](const Tensor<T>& prob) {
    const std::size_t hw = lab.size();
    double loss = 0.0;
    for (std::size_t x = 0; x < hw; ++x) {
      const std::size_t l = lab[x];
      loss -= w[l] * std::log(std::max(static_cast<double>(prob[l * hw + x]), kLogClamp));
    }
    return Tensor<T>({1}, std::vector<T>{static_cast<T>(loss)});
  };
  auto forward = [prob_map, evaluate](const Graph<T>& g) { return evaluate(g.value(prob_map)); };
  auto backward = [prob_map, w, lab](Graph<T>& g, const Tensor<T>& dy, const Tensor<T>&) {
    const Tensor<T>& prob = g.value(prob_map);
    Tensor<T>& dp = g.grad_buffer(prob_map);
    const std::size_t hw = lab.size();
    for (std::size_t x = 0; x < hw; ++x) {
      const std::size_t l = lab[x];
      const T pv = prob[l * hw + x];
      if (static_cast<double>(pv) > kLogClamp) dp[l * hw + x] -= dy[0] * static_cast<T>(w[l]) / pv;
    }
  };
  return prob_map.graph()->record("weighted_cross_entropy_seg", {prob_map}, evaluate(p), forward, backward);
}

/// L = -w_l log p_l for a single two-class prediction.
template <typename T>
Var<T> weighted_cross_entropy_cls(Var<T> prob, int label, std::span<const double> weights) {
  const Tensor<T>& p = prob.value();
  kernels::require_rank(p.shape(), 1, "weighted_cross_entropy_cls");
  if (label < 0 || static_cast<std::size_t>(label) >= p.size()) {
    throw std::out_of_range("class label " + std::to_string(label) + " out of range");
  }
  if (weights.size() != p.size()) throw ShapeError("one weight per class required");
  const auto l = static_cast<std::size_t>(label);
  const double wl = weights[l];
  auto evaluate = [l, wl](const Tensor<T>& pv) {
    const double loss = -wl * std::log(std::max(static_cast<double>(pv[l]), kLogClamp));
    return Tensor<T>({1}, std::vector<T>{static_cast<T>(loss)});
  };
  auto forward = [prob, evaluate](const Graph<T>& g) { return evaluate(g.value(prob)); };
  auto backward = [prob, l, wl](Graph<T>& g, const Tensor<T>& dy, const Tensor<T>&) {
    const T pv = g.value(prob)[l];
    if (static_cast<double>(pv) > kLogClamp) g.grad_buffer(prob)[l] -= dy[0] * static_cast<T>(wl) / pv;
  };
  return prob.graph()->record("weighted_cross_entropy_cls", {prob}, evaluate(p), forward, backward);
}

namespace detail {

/// Per-position log-softmax cross entropy over `c` channels laid out with
/// stride `hw`. Adds dL/dz into `dz` when given.
template <typename T>
double log_softmax_ce(const T* z, std::size_t c, std::size_t hw, std::size_t x, std::size_t label, double w,
                      T* dz, double dy) {
  double peak = static_cast<double>(z[x]);
  for (std::size_t k = 1; k < c; ++k) peak = std::max(peak, static_cast<double>(z[k * hw + x]));
  double total = 0.0;
  for (std::size_t k = 0; k < c; ++k) total += std::exp(static_cast<double>(z[k * hw + x]) - peak);
  const double log_norm = peak + std::log(total);
  if (dz) {
    for (std::size_t k = 0; k < c; ++k) {
      const double p = std::exp(static_cast<double>(z[k * hw + x]) - log_norm);
      dz[k * hw + x] += static_cast<T>(dy * w * (p - (k == label ? 1.0 : 0.0)));
    }
  }
  return -w * (static_cast<double>(z[label * hw + x]) - log_norm);
}

}  // namespace detail

/// Same loss as weighted_cross_entropy_seg, evaluated from the logits in log
/// space. Pixels whose true-label probability underflows keep their gradient.
template <typename T>
Var<T> weighted_cross_entropy_seg_logits(Var<T> logits, const LabelMap& labels, std::span<const double> weights) {
  const Tensor<T>& z = logits.value();
  kernels::require_rank(z.shape(), 3, "weighted_cross_entropy_seg_logits");
  if (labels.rank() != 2 || labels.dim(0) != z.dim(1) || labels.dim(1) != z.dim(2)) {
    throw ShapeError("label map " + shape_str(labels.shape()) + " does not match " + shape_str(z.shape()));
  }
  const std::size_t n = z.dim(0);
  if (weights.size() != n) throw ShapeError("one weight per label required");
  for (std::uint8_t l : labels.data()) {
    if (l >= n) throw std::out_of_range("label " + std::to_string(l) + " >= " + std::to_string(n));
  }
  std::vector<double> w(weights.begin(), weights.end());
  const LabelMap lab = labels;
  auto evaluate = [w, lab](const Tensor<T>& zv) {
    const std::size_t hw = lab.size(), c = zv.dim(0);
    double loss = 0.0;
    for (std::size_t x = 0; x < hw; ++x) {
      loss += detail::log_softmax_ce<T>(zv.data().data(), c, hw, x, lab[x], w[lab[x]], nullptr, 0.0);
    }
    return Tensor<T>({1}, std::vector<T>{static_cast<T>(loss)});
  };
  auto forward = [logits, evaluate](const Graph<T>& g) { return evaluate(g.value(logits)); };
  auto backward = [logits, w, lab](Graph<T>& g, const Tensor<T>& dy, const Tensor<T>&) {
    const Tensor<T>& zv = g.value(logits);
    T* dz = g.grad_buffer(logits).data().data();
    const std::size_t hw = lab.size(), c = zv.dim(0);
    for (std::size_t x = 0; x < hw; ++x) {
      detail::log_softmax_ce<T>(zv.data().data(), c, hw, x, lab[x], w[lab[x]], dz, static_cast<double>(dy[0]));
    }
  };
  return logits.graph()->record("weighted_cross_entropy_seg_logits", {logits}, evaluate(z), forward, backward);
}

/// Classifier counterpart of weighted_cross_entropy_seg_logits.
template <typename T>
Var<T> weighted_cross_entropy_cls_logits(Var<T> logits, int label, std::span<const double> weights) {
  const Tensor<T>& z = logits.value();
  kernels::require_rank(z.shape(), 1, "weighted_cross_entropy_cls_logits");
  if (label < 0 || static_cast<std::size_t>(label) >= z.size()) {
    throw std::out_of_range("class label " + std::to_string(label) + " out of range");
  }
  if (weights.size() != z.size()) throw ShapeError("one weight per class required");
  const auto l = static_cast<std::size_t>(label);
  const double wl = weights[l];
  auto evaluate = [l, wl](const Tensor<T>& zv) {
    const double loss = detail::log_softmax_ce<T>(zv.data().data(), zv.size(), 1, 0, l, wl, nullptr, 0.0);
    return Tensor<T>({1}, std::vector<T>{static_cast<T>(loss)});
  };
  auto forward = [logits, evaluate](const Graph<T>& g) { return evaluate(g.value(logits)); };
  auto backward = [logits, l, wl](Graph<T>& g, const Tensor<T>& dy, const Tensor<T>&) {
    const Tensor<T>& zv = g.value(logits);
    detail::log_softmax_ce<T>(zv.data().data(), zv.size(), 1, 0, l, wl, g.grad_buffer(logits).data().data(),
                              static_cast<double>(dy[0]));
  };
  return logits.graph()->record("weighted_cross_entropy_cls_logits", {logits}, evaluate(z), forward, backward);
}

// ---------------------------------------------------------------------------
// Adam

inline constexpr double kSegLearningRate = 3e-4;
inline constexpr double kClsLearningRate = 1e-4;

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamHyper hyper;
  NamedTensors<T> m;
  NamedTensors<T> v;
  std::int64_t t = 0;
};

template <typename T>
void adam_step(NamedTensors<T>& params, const NamedTensors<T>& grads, AdamState<T>& state) {
  if (state.m.size() == 0) {
    for (const auto& [name, p] : params) {
      state.m.add(name, Tensor<T>::zeros_like(p));
      state.v.add(name, Tensor<T>::zeros_like(p));
    }
  }
  const AdamHyper& h = state.hyper;
  ++state.t;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  for (auto& [name, p] : params) {
    const Tensor<T>& g = grads.get(name);
    Tensor<T>& m = state.m.get(name);
    Tensor<T>& v = state.v.get(name);
    if (g.shape() != p.shape() || m.shape() != p.shape()) throw ShapeError("adam_step: shape mismatch for " + name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
      const double vi = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / c1;
      const double vhat = vi / c2;
      p[i] = static_cast<T>(p[i] - h.lr * mhat / (std::sqrt(vhat) + h.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Training loops

struct TrainConfig {
  int batch_size = 10;
  int batches_per_epoch = 100;
  int epochs = 20;
  std::uint64_t seed = 0;
  AdamHyper adam;

  int steps() const { return batches_per_epoch * epochs; }

  /// Segmentation: batch 10, 100 batches per epoch, 20 epochs. Adam at lr
  /// 1e-3 diverges late in segnet training on the phantom, so 3e-4 here.
  static TrainConfig segmentation() { return {10, 100, 20, 0, {kSegLearningRate}}; }
  /// Classification: batch 10, 10 batches per epoch, 20 epochs. At lr 1e-3
  /// the classifier swings between constant outputs and never fits the split.
  static TrainConfig classification() { return {10, 10, 20, 0, {kClsLearningRate}}; }
};

inline void validate(const TrainConfig& c) {
  if (c.batch_size < 1 || c.batches_per_epoch < 1 || c.epochs < 1) {
    throw ConfigError("batch size, batches per epoch and epochs must be positive");
  }
}

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> epoch_loss;     // mean batch loss per epoch
  std::vector<double> class_weights;  // weights used by the loss
};

/// Called after every optimizer step with (step, batch loss).
using StepCallback = std::function<void(int, double)>;

namespace detail {

/// Runs `steps` Adam updates. `sample_loss` records the loss of one training
/// example into the graph; batch members are drawn uniformly with replacement
/// and the batch loss is their mean.
template <typename SampleLoss>
std::vector<double> run_adam(const TrainConfig& config, NamedTensors<float>& params, std::size_t dataset_size,
                             SampleLoss&& sample_loss, const StepCallback& on_step) {
  AdamState<float> state;
  state.hyper = config.adam;
  Rng rng(derive_seed({config.seed, 0x62617463ULL}));
  std::vector<double> history;
  NamedTensors<float> grads;
  for (const auto& [name, p] : params) grads.add(name, Tensor<float>::zeros_like(p));
  const float scale = 1.0f / static_cast<float>(config.batch_size);
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_total = 0.0;
    for (int b = 0; b < config.batches_per_epoch; ++b) {
      for (auto& [_, g] : grads) g.fill(0.0f);
      double batch_loss = 0.0;
      for (int k = 0; k < config.batch_size; ++k) {
        const std::size_t idx = rng.index(dataset_size);
        Graph<float> g;
        BoundParameters<float> bound(g, params, true);
        Var<float> loss = sample_loss(g, bound, idx);
        g.backward(loss);
        batch_loss += loss.value()[0];
        for (const auto& [name, var] : bound.all()) {
          Tensor<float>& acc = grads.get(name);
          const Tensor<float>& gv = g.grad(var);
          for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gv[i] * scale;
        }
      }
      batch_loss /= config.batch_size;
      if (!std::isfinite(batch_loss)) throw std::runtime_error("training diverged: non-finite loss");
      adam_step(params, grads, state);
      epoch_total += batch_loss;
      if (on_step) on_step(step, batch_loss);
      ++step;
    }
    history.push_back(epoch_total / config.batches_per_epoch);
  }
  return history;
}

}  // namespace detail

/// Trains a segnet from scratch on normal samples with label maps. Pixel
/// class weights use exponent 1.
inline TrainResult train_segnet(const TrainConfig& config, NetworkSpec spec, std::span<const LabeledSample> samples,
                                const StepCallback& on_step = {}) {
  validate(config);
  if (samples.empty()) throw ConfigError("train_segnet: no samples");
  spec.arch = Architecture::segnet;
  spec.seed = config.seed;
  validate(spec);
  std::vector<const LabelMap*> maps;
  for (const auto& s : samples) {
    if (!s.label_map) throw ConfigError("train_segnet: sample " + s.id + " has no label map");
    const Shape expect{static_cast<std::size_t>(spec.in_channels), static_cast<std::size_t>(spec.height),
                       static_cast<std::size_t>(spec.width)};
    if (s.image.shape() != expect) {
      throw ShapeError("train_segnet: sample " + s.id + " is " + shape_str(s.image.shape()) + ", network expects " +
                       shape_str(expect));
    }
    maps.push_back(&*s.label_map);
  }
  const std::vector<double> weights = class_weights(pixel_label_frequencies(maps, spec.labels), kSegWeightExponent);
  TrainResult result{{spec, init_parameters(spec)}, {}, weights};
  result.epoch_loss = detail::run_adam(
      config, result.checkpoint.params, samples.size(),
      [&](Graph<float>& g, const BoundParameters<float>& p, std::size_t idx) {
        auto out = segnet_forward(spec, p, g.constant(samples[idx].image));
        return weighted_cross_entropy_seg_logits(out.logits, *samples[idx].label_map, weights);
      },
      on_step);
  return result;
}

/// Trains a classifier on already assembled feature tensors. Class weights
/// come from the sample counts with exponent 1/4.
inline TrainResult train_clsnet_on_features(const TrainConfig& config, const ClsnetProfile& profile,
                                            std::span<const Tensor<float>> features, std::span<const int> labels,
                                            const StepCallback& on_step = {}) {
  validate(config);
  if (features.empty() || features.size() != labels.size()) {
    throw ConfigError("train_clsnet: need one label per feature tensor");
  }
  const auto f = sample_label_frequencies(labels);
  if (f[0] == 0 || f[1] == 0) throw ConfigError("train_clsnet: both positive and negative samples are required");
  const Shape& shape = features.front().shape();
  if (shape.size() != 3) throw ShapeError("classifier features must be (C, H, W)");
  for (const auto& t : features) {
    if (t.shape() != shape) throw ShapeError("classifier features differ in shape");
  }
  Checkpoint ckpt = build_clsnet(static_cast<int>(shape[0]), profile, static_cast<int>(shape[1]),
                                 static_cast<int>(shape[2]), config.seed);
  const std::vector<double> weights = class_weights(f, kClsWeightExponent);
  TrainResult result{std::move(ckpt), {}, weights};
  const NetworkSpec spec = result.checkpoint.spec;
  result.epoch_loss = detail::run_adam(
      config, result.checkpoint.params, features.size(),
      [&](Graph<float>& g, const BoundParameters<float>& p, std::size_t idx) {
        auto out = clsnet_forward(spec, p, g.constant(features[idx]));
        return weighted_cross_entropy_cls_logits(out.logits, labels[idx], weights);
      },
      on_step);
  return result;
}

/// Segnet outputs for every sample, computed once with frozen weights.
inline std::vector<SegnetOutputs<Tensor<float>>> segnet_outputs(const Checkpoint& seg,
                                                                std::span<const LabeledSample> samples) {
  std::vector<SegnetOutputs<Tensor<float>>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(segnet_infer(seg, s.image));
  return out;
}

inline std::vector<Tensor<float>> assemble_all(FeatureMode mode, std::span<const LabeledSample> samples,
                                               const std::vector<SegnetOutputs<Tensor<float>>>* seg) {
  std::vector<Tensor<float>> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.push_back(assemble_features(mode, samples[i].image, seg ? &(*seg)[i] : nullptr));
  }
  return out;
}

/// Trains a classifier for `mode`. The segnet, when needed, is only read.
inline TrainResult train_clsnet(const TrainConfig& config, const ClsnetProfile& profile, FeatureMode mode,
                                const Checkpoint* seg, std::span<const LabeledSample> samples,
                                const StepCallback& on_step = {}) {
  if (needs_segnet(mode) && !seg) {
    throw ConfigError(std::string("feature mode ") + std::string(to_string(mode)) + " needs a segnet checkpoint");
  }
  std::vector<SegnetOutputs<Tensor<float>>> seg_out;
  if (needs_segnet(mode)) seg_out = segnet_outputs(*seg, samples);
  const auto features = assemble_all(mode, samples, needs_segnet(mode) ? &seg_out : nullptr);
  std::vector<int> labels;
  for (const auto& s : samples) labels.push_back(s.disease_label());
  return train_clsnet_on_features(config, profile, features, labels, on_step);
}

/// Probability of the diseased class.
inline double positive_probability(const Checkpoint& cls, const Tensor<float>& features) {
  return clsnet_infer(cls, features).prob[1];
}

inline void write_loss_history(const std::filesystem::path& path, std::span<const double> epoch_loss) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "epoch,mean_batch_loss\n";
  char buf[64];
  for (std::size_t i = 0; i < epoch_loss.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i + 1, epoch_loss[i]);
    os << buf;
  }
}

}  // namespace segxfer
