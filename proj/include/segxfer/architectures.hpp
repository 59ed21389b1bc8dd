#pragma once

// Network builders:
//  * segnet: encoder-decoder segmentation network. Each contracting level is
//    two 3x3 conv + ELU followed by 2x2 max pooling, with channels doubling per
//    level. Each expanding stage upsamples by repetition, concatenates the
//    matching encoder output and applies two 3x3 conv + ELU that halve the
//    channel count. A final 1x1 conv maps n channels to N label logits.
//  * clsnet: VGG-style two-class classifier, 13 3x3 convs in blocks of
//    {2,2,3,3,3}, each block followed by max pooling, then three dense layers.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "segxfer/autodiff.hpp"
#include "segxfer/ops.hpp"
#include "segxfer/parameters.hpp"
#include "segxfer/rng.hpp"
#include "segxfer/tensor.hpp"

namespace segxfer {

enum class Architecture { segnet, clsnet };

inline constexpr std::array<int, 5> kClsnetBlocks{2, 2, 3, 3, 3};

struct NetworkSpec {
  Architecture arch = Architecture::segnet;
  int n = 16;       // segnet: channels of the first convolution
  int labels = 6;   // segnet: number of semantic labels
  int levels = 4;   // number of pooling stages
  std::vector<int> widths;  // clsnet: channels per conv block
  std::vector<int> dense;   // clsnet: dense layer sizes, last one is 2
  int in_channels = 1;
  int height = 256;
  int width = 256;
  std::string init = "fan_in_uniform";
  std::uint64_t seed = 0;
  /// Free-form provenance (e.g. which cross-validation fold trained it).
  std::map<std::string, std::string> extra;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

enum class LayerKind { conv, dense };

struct LayerInfo {
  std::string name;
  LayerKind kind = LayerKind::conv;
  int in = 0;
  int out = 0;
  int kernel = 3;
  std::string stage;     // enc, bottleneck, dec, head, block, fc
  int level = -1;
  int skip_level = -1;   // dec stages: encoder level whose output is concatenated
  int skip_channels = 0;
};

inline int segnet_width(const NetworkSpec& s, int level) { return s.n << level; }

inline void validate(const NetworkSpec& spec) {
  if (spec.in_channels < 1) throw ConfigError("input channels must be >= 1");
  if (spec.height < 1 || spec.width < 1) throw ConfigError("input size must be positive");
  const int div = 1 << spec.levels;
  if (spec.height % div || spec.width % div) {
    throw ConfigError("input size " + std::to_string(spec.height) + "x" + std::to_string(spec.width) +
                      " is not divisible by 2^" + std::to_string(spec.levels));
  }
  if (spec.arch == Architecture::segnet) {
    if (spec.n < 1) throw ConfigError("segnet n must be >= 1");
    if (spec.labels < 2) throw ConfigError("segnet needs at least 2 labels");
    if (spec.levels < 1) throw ConfigError("segnet needs at least one pooling level");
  } else {
    if (spec.levels != static_cast<int>(kClsnetBlocks.size())) throw ConfigError("clsnet uses exactly 5 pooling blocks");
    if (spec.widths.size() != kClsnetBlocks.size()) throw ConfigError("clsnet needs 5 block widths");
    if (spec.dense.size() != 3) throw ConfigError("clsnet needs 3 dense layer sizes");
    if (spec.dense.back() != 2) throw ConfigError("clsnet final dense layer must have 2 outputs");
    for (int w : spec.widths) if (w < 1) throw ConfigError("clsnet widths must be positive");
    for (int d : spec.dense) if (d < 1) throw ConfigError("clsnet dense sizes must be positive");
  }
}

/// Weight layers in evaluation order.
inline std::vector<LayerInfo> layers(const NetworkSpec& spec) {
  validate(spec);
  std::vector<LayerInfo> out;
  if (spec.arch == Architecture::segnet) {
    int prev = spec.in_channels;
    for (int i = 0; i < spec.levels; ++i) {
      const int w = segnet_width(spec, i);
      out.push_back({"enc" + std::to_string(i) + ".conv1", LayerKind::conv, prev, w, 3, "enc", i});
      out.push_back({"enc" + std::to_string(i) + ".conv2", LayerKind::conv, w, w, 3, "enc", i});
      prev = w;
    }
    const int bw = segnet_width(spec, spec.levels);
    out.push_back({"bottleneck.conv1", LayerKind::conv, prev, bw, 3, "bottleneck", spec.levels});
    out.push_back({"bottleneck.conv2", LayerKind::conv, bw, bw, 3, "bottleneck", spec.levels});
    prev = bw;
    for (int i = spec.levels - 1; i >= 0; --i) {
      const int w = segnet_width(spec, i);
      const std::string base = "dec" + std::to_string(i);
      out.push_back({base + ".conv1", LayerKind::conv, prev + w, w, 3, "dec", i, i, w});
      out.push_back({base + ".conv2", LayerKind::conv, w, w, 3, "dec", i});
      prev = w;
    }
    out.push_back({"head", LayerKind::conv, prev, spec.labels, 1, "head", 0});
  } else {
    int prev = spec.in_channels;
    for (std::size_t b = 0; b < kClsnetBlocks.size(); ++b) {
      for (int j = 0; j < kClsnetBlocks[b]; ++j) {
        out.push_back({"block" + std::to_string(b) + ".conv" + std::to_string(j + 1), LayerKind::conv, prev,
                       spec.widths[b], 3, "block", static_cast<int>(b)});
        prev = spec.widths[b];
      }
    }
    int features = prev * (spec.height >> spec.levels) * (spec.width >> spec.levels);
    for (std::size_t k = 0; k < spec.dense.size(); ++k) {
      out.push_back({"fc" + std::to_string(k + 1), LayerKind::dense, features, spec.dense[k], 1, "fc",
                     static_cast<int>(k)});
      features = spec.dense[k];
    }
  }
  return out;
}

inline std::size_t weight_layer_count(const NetworkSpec& spec) { return layers(spec).size(); }

inline std::size_t parameter_count(const NetworkSpec& spec) {
  std::size_t total = 0;
  for (const auto& l : layers(spec)) {
    const std::size_t k = l.kind == LayerKind::conv ? static_cast<std::size_t>(l.kernel * l.kernel) : 1;
    total += static_cast<std::size_t>(l.out) * static_cast<std::size_t>(l.in) * k + static_cast<std::size_t>(l.out);
  }
  return total;
}

/// Architecture descriptor plus trained (or fresh) weights.
struct Checkpoint {
  NetworkSpec spec;
  NamedTensors<float> params;
};

/// Fan-in scaled uniform weights (bound sqrt(6 / fan_in)), zero biases.
inline NamedTensors<float> init_parameters(const NetworkSpec& spec) {
  NamedTensors<float> params;
  Rng rng(derive_seed({spec.seed, 0x696e6974ULL}));
  for (const auto& l : layers(spec)) {
    Shape wshape = l.kind == LayerKind::conv
                       ? Shape{static_cast<std::size_t>(l.out), static_cast<std::size_t>(l.in),
                               static_cast<std::size_t>(l.kernel), static_cast<std::size_t>(l.kernel)}
                       : Shape{static_cast<std::size_t>(l.out), static_cast<std::size_t>(l.in)};
    Tensor<float> w(wshape);
    const double fan_in = static_cast<double>(w.size()) / l.out;
    const double bound = std::sqrt(6.0 / fan_in);
    for (auto& v : w.data()) v = static_cast<float>(rng.uniform(-bound, bound));
    params.add(l.name + ".w", std::move(w));
    params.add(l.name + ".b", Tensor<float>({static_cast<std::size_t>(l.out)}));
  }
  return params;
}

inline Checkpoint build_segnet(int n, int labels, int levels, int height, int width, std::uint64_t seed = 0,
                               int in_channels = 1) {
  NetworkSpec spec;
  spec.arch = Architecture::segnet;
  spec.n = n;
  spec.labels = labels;
  spec.levels = levels;
  spec.height = height;
  spec.width = width;
  spec.in_channels = in_channels;
  spec.seed = seed;
  validate(spec);
  return {spec, init_parameters(spec)};
}

struct ClsnetProfile {
  std::vector<int> widths;
  std::vector<int> dense;

  static ClsnetProfile paper() { return {{64, 128, 256, 512, 512}, {4096, 4096, 2}}; }
  static ClsnetProfile desk() { return {{8, 16, 32, 32, 32}, {64, 64, 2}}; }
};

inline Checkpoint build_clsnet(int in_channels, const ClsnetProfile& profile, int height, int width,
                               std::uint64_t seed = 0) {
  NetworkSpec spec;
  spec.arch = Architecture::clsnet;
  spec.levels = static_cast<int>(kClsnetBlocks.size());
  spec.widths = profile.widths;
  spec.dense = profile.dense;
  spec.in_channels = in_channels;
  spec.height = height;
  spec.width = width;
  spec.seed = seed;
  spec.n = 0;
  spec.labels = 2;
  validate(spec);
  return {spec, init_parameters(spec)};
}

template <typename V>
struct SegnetOutputs {
  V logits;           // (N, H, W), final 1x1 conv output
  V prob_map;         // softmax of logits over labels
  V seg_features;     // same tensor as logits
  V concat_features;  // (3n, H, W), topmost upsample + concatenation
};

namespace detail {

template <typename T>
Var<T> conv_elu(const BoundParameters<T>& p, const std::string& name, Var<T> x) {
  return elu(conv2d_same(x, p[name + ".w"], p[name + ".b"]));
}

inline void check_input(const NetworkSpec& spec, const Shape& shape) {
  if (shape.size() != 3 || static_cast<int>(shape[0]) != spec.in_channels) {
    throw ShapeError("network expects " + std::to_string(spec.in_channels) + " input channels, got " +
                     shape_str(shape));
  }
  const std::size_t div = std::size_t{1} << spec.levels;
  if (shape[1] % div || shape[2] % div) {
    throw ShapeError("input " + shape_str(shape) + " is not divisible by 2^" + std::to_string(spec.levels));
  }
}

}  // namespace detail

template <typename T>
SegnetOutputs<Var<T>> segnet_forward(const NetworkSpec& spec, const BoundParameters<T>& p, Var<T> image) {
  if (spec.arch != Architecture::segnet) throw ConfigError("checkpoint is not a segnet");
  detail::check_input(spec, image.shape());
  std::vector<Var<T>> skips;
  Var<T> x = image;
  for (int i = 0; i < spec.levels; ++i) {
    const std::string base = "enc" + std::to_string(i);
    x = detail::conv_elu(p, base + ".conv1", x);
    x = detail::conv_elu(p, base + ".conv2", x);
    skips.push_back(x);
    x = maxpool2(x);
  }
  x = detail::conv_elu(p, "bottleneck.conv1", x);
  x = detail::conv_elu(p, "bottleneck.conv2", x);
  Var<T> concat;
  for (int i = spec.levels - 1; i >= 0; --i) {
    const std::string base = "dec" + std::to_string(i);
    x = concat_channels(upsample2(x), skips[static_cast<std::size_t>(i)]);
    if (i == 0) concat = x;
    x = detail::conv_elu(p, base + ".conv1", x);
    x = detail::conv_elu(p, base + ".conv2", x);
  }
  Var<T> logits = conv2d_same(x, p["head.w"], p["head.b"]);
  return {logits, softmax_channels(logits), logits, concat};
}

template <typename V>
struct ClsnetOutputs {
  V logits;  // length-2 vector
  V prob;
};

template <typename T>
ClsnetOutputs<Var<T>> clsnet_forward(const NetworkSpec& spec, const BoundParameters<T>& p, Var<T> input) {
  if (spec.arch != Architecture::clsnet) throw ConfigError("checkpoint is not a clsnet");
  detail::check_input(spec, input.shape());
  if (static_cast<int>(input.shape()[1]) != spec.height || static_cast<int>(input.shape()[2]) != spec.width) {
    throw ShapeError("clsnet built for " + std::to_string(spec.height) + "x" + std::to_string(spec.width) +
                     ", got " + shape_str(input.shape()));
  }
  Var<T> x = input;
  for (std::size_t b = 0; b < kClsnetBlocks.size(); ++b) {
    for (int j = 0; j < kClsnetBlocks[b]; ++j) {
      x = detail::conv_elu(p, "block" + std::to_string(b) + ".conv" + std::to_string(j + 1), x);
    }
    x = maxpool2(x);
  }
  x = flatten(x);
  x = elu(dense(x, p["fc1.w"], p["fc1.b"]));
  x = elu(dense(x, p["fc2.w"], p["fc2.b"]));
  Var<T> logits = dense(x, p["fc3.w"], p["fc3.b"]);
  return {logits, softmax_channels(logits)};
}

/// Inference without gradient bookkeeping.
inline SegnetOutputs<Tensor<float>> segnet_infer(const Checkpoint& ckpt, const Tensor<float>& image) {
  Graph<float> g;
  BoundParameters<float> p(g, ckpt.params, false);
  auto out = segnet_forward(ckpt.spec, p, g.constant(image));
  return {out.logits.value(), out.prob_map.value(), out.seg_features.value(), out.concat_features.value()};
}

inline ClsnetOutputs<Tensor<float>> clsnet_infer(const Checkpoint& ckpt, const Tensor<float>& input) {
  Graph<float> g;
  BoundParameters<float> p(g, ckpt.params, false);
  auto out = clsnet_forward(ckpt.spec, p, g.constant(input));
  return {out.logits.value(), out.prob.value()};
}

/// Per-pixel argmax of a (N, H, W) probability map.
inline LabelMap argmax_labels(const Tensor<float>& prob) {
  const std::size_t c = prob.dim(0), h = prob.dim(1), w = prob.dim(2), hw = h * w;
  LabelMap out({h, w});
  for (std::size_t p = 0; p < hw; ++p) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (prob[k * hw + p] > prob[best * hw + p]) best = k;
    }
    out[p] = static_cast<std::uint8_t>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature combinations fed to the classifier.

enum class FeatureMode { img, seg, img_seg, concat, img_concat };

inline constexpr std::array<FeatureMode, 5> kAllFeatureModes{FeatureMode::img, FeatureMode::seg, FeatureMode::img_seg,
                                                             FeatureMode::concat, FeatureMode::img_concat};

inline std::string_view to_string(FeatureMode m) {
  switch (m) {
    case FeatureMode::img: return "IMG";
    case FeatureMode::seg: return "SEG";
    case FeatureMode::img_seg: return "IMG+SEG";
    case FeatureMode::concat: return "CONCAT";
    case FeatureMode::img_concat: return "IMG+CONCAT";
  }
  return "?";
}

inline FeatureMode parse_feature_mode(std::string_view s) {
  for (auto m : kAllFeatureModes) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown feature mode '" + std::string(s) + "'");
}

inline bool uses_image(FeatureMode m) {
  return m == FeatureMode::img || m == FeatureMode::img_seg || m == FeatureMode::img_concat;
}
inline bool needs_segnet(FeatureMode m) { return m != FeatureMode::img; }

/// Classifier input channels: {IMG:1, SEG:N, IMG+SEG:N+1, CONCAT:3n, IMG+CONCAT:3n+1}.
inline int feature_channels(FeatureMode m, int n, int labels) {
  switch (m) {
    case FeatureMode::img: return 1;
    case FeatureMode::seg: return labels;
    case FeatureMode::img_seg: return labels + 1;
    case FeatureMode::concat: return 3 * n;
    case FeatureMode::img_concat: return 3 * n + 1;
  }
  return 0;
}

/// Stacks the classifier input for `mode`, image channel first. The segnet
/// outputs are plain tensors here, so nothing downstream can update them.
inline Tensor<float> assemble_features(FeatureMode mode, const Tensor<float>& image,
                                       const SegnetOutputs<Tensor<float>>* seg) {
  if (image.rank() != 3 || image.dim(0) != 1) throw ShapeError("image must be (1, H, W)");
  if (mode == FeatureMode::img) return image;
  if (!seg) throw UsageError(std::string("feature mode ") + std::string(to_string(mode)) + " needs segnet outputs");
  for (const Tensor<float>* t : {&seg->seg_features, &seg->concat_features}) {
    if (t->rank() != 3 || t->dim(1) != image.dim(1) || t->dim(2) != image.dim(2)) {
      throw ShapeError("segnet outputs do not match the image size");
    }
  }
  switch (mode) {
    case FeatureMode::seg: return seg->seg_features;
    case FeatureMode::img_seg: return kernels::concat_channels(image, seg->seg_features);
    case FeatureMode::concat: return seg->concat_features;
    case FeatureMode::img_concat: return kernels::concat_channels(image, seg->concat_features);
    default: break;
  }
  return image;
}

}  // namespace segxfer
