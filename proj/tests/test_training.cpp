#include <gtest/gtest.h>

#include <boost/multiprecision/cpp_dec_float.hpp>
#include <cmath>
#include <sstream>

#include "segxfer/checkpoint.hpp"
#include "segxfer/phantom.hpp"
#include "segxfer/training.hpp"

using namespace segxfer;
using Big = boost::multiprecision::cpp_dec_float_50;

namespace {

double big_weight(const std::vector<double>& f, std::size_t l, double exponent) {
  Big total = 0;
  for (double v : f) total += Big(v);
  const Big ratio = Big(f[l]) / total;
  const Big w = 1 - (ratio == 0 ? Big(0) : boost::multiprecision::pow(ratio, Big(exponent)));
  return w.convert_to<double>();
}

}  // namespace

TEST(ClassWeights, Examples) {
  const std::vector<double> uniform(6, 7.0);
  for (double w : class_weights(uniform, 1.0)) EXPECT_DOUBLE_EQ(w, 5.0 / 6.0);

  const std::vector<double> f{50, 10, 10, 10, 10, 10};
  const auto w = class_weights(f, 1.0);
  EXPECT_NEAR(w[0], 0.5, 1e-15);
  for (int i = 1; i < 6; ++i) EXPECT_NEAR(w[i], 0.9, 1e-15);

  const std::vector<double> cls{53, 3};
  const auto wc = class_weights(cls, 0.25);
  EXPECT_NEAR(wc[0], 0.01367, 1e-5);
  EXPECT_NEAR(wc[1], 0.51890, 1e-5);

  const std::vector<double> with_zero{4, 0};
  EXPECT_EQ(class_weights(with_zero, 1.0)[1], 1.0);
  const std::vector<double> zeros{0, 0};
  EXPECT_THROW(class_weights(zeros, 1.0), ConfigError);
}

TEST(ClassWeights, MatchHighPrecisionOracle) {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = 2 + rng.index(5);
    std::vector<double> f(k);
    for (auto& v : f) v = static_cast<double>(rng.index(100000));
    f[rng.index(k)] += 1;  // keep the total positive
    for (double e : {kSegWeightExponent, kClsWeightExponent}) {
      const auto w = class_weights(f, e);
      for (std::size_t l = 0; l < k; ++l) ASSERT_NEAR(w[l], big_weight(f, l, e), 1e-12);
    }
  }
}

TEST(ClassWeights, QuarterExponentSoftensImbalance) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const double neg = 2 + static_cast<double>(rng.index(200));
    const double pos = 1 + static_cast<double>(rng.index(static_cast<std::size_t>(neg - 1)));
    const std::vector<double> f{neg, pos};
    const auto w1 = class_weights(f, 1.0);
    const auto wq = class_weights(f, 0.25);
    EXPECT_GT(w1[1], w1[0]);
    EXPECT_GT(wq[1], wq[0]);
    EXPECT_LT(wq[0] / wq[1], w1[0] / w1[1]);
    for (double w : {w1[0], w1[1], wq[0], wq[1]}) {
      EXPECT_GE(w, 0.0);
      EXPECT_LT(w, 1.0);
    }
  }
}

TEST(LabelFrequencies, Counting) {
  LabelMap m({2, 2});
  const LabelMap* maps[] = {&m};
  EXPECT_EQ(pixel_label_frequencies(maps, 2), (std::vector<double>{4, 0}));
  std::vector<int> labels(53, 0);
  labels.insert(labels.end(), 3, 1);
  EXPECT_EQ(sample_label_frequencies(labels), (std::vector<double>{53, 3}));
  std::reverse(labels.begin(), labels.end());
  EXPECT_EQ(sample_label_frequencies(labels), (std::vector<double>{53, 3}));
  EXPECT_THROW(sample_label_frequencies(std::vector<int>{}), ConfigError);
}

TEST(Loss, SegmentationExamples) {
  Graph<double> g;
  auto p = g.constant(Tensor<double>({2, 1, 1}, {0.5, 0.5}));
  LabelMap l({1, 1});
  const std::vector<double> w{1.0, 1.0};
  EXPECT_NEAR(weighted_cross_entropy_seg(p, l, w).value()[0], std::log(2.0), 1e-12);

  auto one_hot = g.constant(Tensor<double>({2, 1, 2}, {1, 0, 0, 1}));
  LabelMap l2({1, 2}, {0, 1});
  EXPECT_NEAR(weighted_cross_entropy_seg(one_hot, l2, w).value()[0], 0.0, 1e-12);

  LabelMap bad({1, 1}, {2});
  EXPECT_THROW(weighted_cross_entropy_seg(p, bad, w), std::out_of_range);
}

TEST(Loss, SegmentationMatchesPerPixelOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.index(5), h = 1 + rng.index(8), w = 1 + rng.index(8), hw = h * w;
    Tensor<double> logits({n, h, w});
    for (auto& v : logits.data()) v = 3.0 * rng.normal();
    const Tensor<double> prob = kernels::softmax_channels(logits);
    LabelMap labels({h, w});
    for (auto& v : labels.data()) v = static_cast<std::uint8_t>(rng.index(n));
    std::vector<double> wt(n);
    for (auto& v : wt) v = rng.uniform();
    double oracle = 0;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t lab = labels.at(y, x);
        oracle += -wt[lab] * std::log(prob.at(lab, y, x));
      }
    }
    Graph<double> g;
    const double got = weighted_cross_entropy_seg(g.constant(prob), labels, wt).value()[0];
    ASSERT_NEAR(got, oracle, 1e-6 * std::max(1.0, std::abs(oracle)));
    const double from_logits = weighted_cross_entropy_seg_logits(g.constant(logits), labels, wt).value()[0];
    ASSERT_NEAR(from_logits, oracle, 1e-6 * std::max(1.0, std::abs(oracle)));
    (void)hw;
  }
}

TEST(Loss, LinearInWeights) {
  Graph<double> g;
  auto p = g.constant(Tensor<double>({3, 1, 2}, {0.2, 0.5, 0.3, 0.1, 0.5, 0.4}));
  LabelMap l({1, 2}, {0, 2});
  const std::vector<double> w{0.3, 0.6, 0.9}, w2{0.6, 1.2, 1.8};
  EXPECT_NEAR(weighted_cross_entropy_seg(p, l, w2).value()[0], 2.0 * weighted_cross_entropy_seg(p, l, w).value()[0],
              1e-12);
}

TEST(Loss, ClassificationExamples) {
  Graph<double> g;
  const std::vector<double> w{0.5, 0.5};
  EXPECT_NEAR(weighted_cross_entropy_cls(g.constant(Tensor<double>({2}, {0.0, 1.0})), 1, w).value()[0], 0.0, 1e-15);
  EXPECT_NEAR(weighted_cross_entropy_cls(g.constant(Tensor<double>({2}, {0.75, 0.25})), 1, w).value()[0],
              std::log(2.0), 1e-12);
  EXPECT_THROW(weighted_cross_entropy_cls(g.constant(Tensor<double>({2}, {0.5, 0.5})), 2, w), std::out_of_range);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  NamedTensors<float> params, grads;
  params.add("a", Tensor<float>({3}, {1, -2, 3}));
  grads.add("a", Tensor<float>({3}));
  AdamState<float> s;
  for (int i = 0; i < 10; ++i) adam_step(params, grads, s);
  EXPECT_EQ(params.get("a"), Tensor<float>({3}, {1, -2, 3}));
  EXPECT_EQ(s.t, 10);
}

TEST(Adam, FirstStepIsSignLike) {
  for (float scale : {1e-3f, 1.0f, 1e3f}) {
    NamedTensors<double> params, grads;
    params.add("a", Tensor<double>({2}, {0.0, 0.0}));
    grads.add("a", Tensor<double>({2}, {2.0 * scale, -5.0 * scale}));
    AdamState<double> s;
    adam_step(params, grads, s);
    // eps shifts the step by at most lr * eps / |g|.
    EXPECT_NEAR(params.get("a")[0], -1e-3, 1e-8);
    EXPECT_NEAR(params.get("a")[1], 1e-3, 1e-8);
  }
}

TEST(Adam, MinimizesQuadratic) {
  NamedTensors<double> params, grads;
  params.add("t", Tensor<double>({1}, {1.0}));
  grads.add("t", Tensor<double>({1}));
  AdamState<double> s;
  s.hyper.lr = 1e-2;
  for (int i = 0; i < 500; ++i) {
    grads.get("t")[0] = 2.0 * params.get("t")[0];
    adam_step(params, grads, s);
  }
  EXPECT_LT(std::abs(params.get("t")[0]), 1e-2);
}

TEST(Adam, RejectsShapeMismatch) {
  NamedTensors<float> params, grads;
  params.add("a", Tensor<float>({3}));
  grads.add("a", Tensor<float>({2}));
  AdamState<float> s;
  EXPECT_THROW(adam_step(params, grads, s), ShapeError);
}

TEST(TrainConfig, DefaultHyperparameters) {
  const auto seg = TrainConfig::segmentation();
  EXPECT_EQ(seg.batch_size, 10);
  EXPECT_EQ(seg.batches_per_epoch, 100);
  EXPECT_EQ(seg.epochs, 20);
  const auto cls = TrainConfig::classification();
  EXPECT_EQ(cls.batch_size, 10);
  EXPECT_EQ(cls.batches_per_epoch, 10);
  EXPECT_EQ(cls.epochs, 20);
  EXPECT_EQ(seg.adam.lr, 3e-4);
  EXPECT_EQ(cls.adam.lr, 1e-4);
  EXPECT_EQ(cls.adam.beta2, 0.999);
  TrainConfig bad = seg;
  bad.epochs = 0;
  EXPECT_THROW(validate(bad), ConfigError);
}

namespace {

std::vector<LabeledSample> one_patient(int slices, int size = 32) {
  CorpusConfig c = CorpusConfig::desk();
  c.size = size;
  return generate_patient(11, c, slices, "p000");
}

std::string checkpoint_bytes(const Checkpoint& ck) {
  std::ostringstream os;
  write_checkpoint(os, ck);
  return os.str();
}

}  // namespace

TEST(TrainSegnet, OverfitsSingleSlice) {
  auto samples = one_patient(1, 64);
  TrainConfig c{1, 200, 1, 3, {}};
  NetworkSpec spec = build_segnet(8, 6, 4, 64, 64).spec;
  auto r = train_segnet(c, spec, samples);
  const LabelMap pred = argmax_labels(segnet_infer(r.checkpoint, samples[0].image).prob_map);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == (*samples[0].label_map)[i];
  EXPECT_GT(static_cast<double>(hit) / static_cast<double>(pred.size()), 0.99);
  ASSERT_EQ(r.epoch_loss.size(), 1u);
  EXPECT_TRUE(std::isfinite(r.epoch_loss[0]));
}

TEST(TrainSegnet, DeterministicAndLossFalls) {
  auto samples = one_patient(4);
  TrainConfig c{2, 10, 3, 5, {}};
  NetworkSpec spec = build_segnet(4, 6, 2, 32, 32).spec;
  auto a = train_segnet(c, spec, samples);
  auto b = train_segnet(c, spec, samples);
  EXPECT_EQ(checkpoint_bytes(a.checkpoint), checkpoint_bytes(b.checkpoint));
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  EXPECT_LT(a.epoch_loss.back(), a.epoch_loss.front());
  c.seed = 6;
  auto other = train_segnet(c, spec, samples);
  EXPECT_NE(checkpoint_bytes(a.checkpoint), checkpoint_bytes(other.checkpoint));
}

TEST(TrainSegnet, WeightsUseExponentOne) {
  auto samples = one_patient(2);
  TrainConfig c{1, 1, 1, 0, {}};
  auto r = train_segnet(c, build_segnet(2, 6, 2, 32, 32).spec, samples);
  std::vector<const LabelMap*> maps{&*samples[0].label_map, &*samples[1].label_map};
  EXPECT_EQ(r.class_weights, class_weights(pixel_label_frequencies(maps, 6), 1.0));
}

TEST(TrainSegnet, RejectsMismatchedSamples) {
  auto samples = one_patient(1);
  TrainConfig c{1, 1, 1, 0, {}};
  EXPECT_THROW(train_segnet(c, build_segnet(2, 6, 2, 64, 64).spec, samples), ShapeError);
  samples[0].label_map.reset();
  EXPECT_THROW(train_segnet(c, build_segnet(2, 6, 2, 32, 32).spec, samples), ConfigError);
  EXPECT_THROW(train_segnet(c, build_segnet(2, 6, 2, 32, 32).spec, {}), ConfigError);
}

TEST(TrainClsnet, ExtremeImbalanceStaysFinite) {
  Rng rng(3);
  std::vector<Tensor<float>> features;
  std::vector<int> labels;
  for (int i = 0; i < 51; ++i) {
    Tensor<float> t({1, 32, 32});
    for (auto& v : t.data()) v = static_cast<float>(rng.uniform());
    if (i == 0) {
      for (std::size_t k = 0; k < 64; ++k) t[k] = 1.0f;
    }
    features.push_back(std::move(t));
    labels.push_back(i == 0 ? 1 : 0);
  }
  TrainConfig c = TrainConfig::classification();
  auto r = train_clsnet_on_features(c, ClsnetProfile::desk(), features, labels);
  for (double l : r.epoch_loss) EXPECT_TRUE(std::isfinite(l));
  const std::vector<double> f{50, 1};
  EXPECT_EQ(r.class_weights, class_weights(f, 0.25));
  for (const auto& [_, p] : r.checkpoint.params) EXPECT_TRUE(p.all_finite());
}

TEST(TrainClsnet, NeedsBothClasses) {
  std::vector<Tensor<float>> features(3, Tensor<float>({1, 32, 32}));
  std::vector<int> labels{0, 0, 0};
  EXPECT_THROW(train_clsnet_on_features(TrainConfig::classification(), ClsnetProfile::desk(), features, labels),
               ConfigError);
}
