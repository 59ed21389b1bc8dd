#pragma once

// Segmentation cross-validation and the unbalanced classification sweep.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "segxfer/architectures.hpp"
#include "segxfer/metrics.hpp"
#include "segxfer/phantom.hpp"
#include "segxfer/training.hpp"

namespace segxfer {

namespace seed_tag {
inline constexpr std::uint64_t folds = 0x666f6c64ULL;
inline constexpr std::uint64_t seg = 0x736567ULL;
inline constexpr std::uint64_t negatives = 0x6e6567ULL;
inline constexpr std::uint64_t positives = 0x706f73ULL;
inline constexpr std::uint64_t cls = 0x636c73ULL;
}  // namespace seed_tag

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int folds = 4;
  int fold = 0;  // seg fold whose test patients supply the classifier negatives
  int n = 8;
  std::vector<SampleKind> diseases{SampleKind::effusion, SampleKind::septal};
  std::vector<FeatureMode> modes{kAllFeatureModes.begin(), kAllFeatureModes.end()};
  std::vector<int> n_pos{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  int repetitions = 10;
  int pos_train_pool = 10;
  int pos_test = 20;
  TrainConfig seg_train = TrainConfig::segmentation();
  TrainConfig cls_train = TrainConfig::classification();
  ClsnetProfile cls_profile = ClsnetProfile::desk();
  int jobs = 1;
};

inline void validate(const ExperimentConfig& c) {
  if (c.folds < 2) throw ConfigError("need at least 2 folds");
  if (c.fold < 0 || c.fold >= c.folds) throw ConfigError("fold index out of range");
  if (c.n < 1) throw ConfigError("n must be positive");
  if (c.repetitions < 1) throw ConfigError("repetitions must be positive");
  if (c.modes.empty() || c.diseases.empty() || c.n_pos.empty()) throw ConfigError("empty sweep axis");
  for (int k : c.n_pos) {
    if (k < 1 || k > c.pos_train_pool) throw ConfigError("n_pos must lie in 1..pos_train_pool");
  }
  for (auto d : c.diseases) {
    if (d == SampleKind::normal) throw ConfigError("'normal' is not a disease");
  }
  if (c.jobs < 1) throw ConfigError("jobs must be positive");
  validate(c.seg_train);
  validate(c.cls_train);
}

// ---------------------------------------------------------------------------
// Folds

/// Patient ids per fold: a seeded shuffle of the sorted ids dealt round-robin.
inline std::vector<std::vector<std::string>> fold_partition(std::vector<std::string> patients, int folds,
                                                            std::uint64_t seed) {
  if (folds < 1) throw ConfigError("fold count must be positive");
  if (static_cast<int>(patients.size()) < folds) {
    throw ConfigError("need at least " + std::to_string(folds) + " patients, got " + std::to_string(patients.size()));
  }
  std::sort(patients.begin(), patients.end());
  Rng rng(derive_seed({seed, seed_tag::folds}));
  rng.shuffle(patients.begin(), patients.end());
  std::vector<std::vector<std::string>> out(static_cast<std::size_t>(folds));
  for (std::size_t i = 0; i < patients.size(); ++i) out[i % out.size()].push_back(patients[i]);
  for (auto& f : out) std::sort(f.begin(), f.end());
  return out;
}

struct FoldSamples {
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> test;
};

inline FoldSamples fold_samples(const Corpus& corpus, const std::vector<std::string>& test_patients) {
  const std::set<std::string> test(test_patients.begin(), test_patients.end());
  FoldSamples out;
  for (const auto& s : corpus.normals) (test.count(s.patient_id) ? out.test : out.train).push_back(s);
  return out;
}

inline std::uint64_t seg_seed(std::uint64_t master, int fold, int n) {
  return derive_seed({master, seed_tag::seg, static_cast<std::uint64_t>(fold), static_cast<std::uint64_t>(n)});
}

/// Pooled per-label Dice of a segnet over a sample set.
inline std::vector<double> evaluate_dice(const Checkpoint& seg, std::span<const LabeledSample> samples) {
  std::vector<DiceCounts> counts(static_cast<std::size_t>(seg.spec.labels));
  for (const auto& s : samples) {
    if (!s.label_map) throw ConfigError("sample " + s.id + " has no label map");
    const LabelMap pred = argmax_labels(segnet_infer(seg, s.image).prob_map);
    for (int k = 0; k < seg.spec.labels; ++k) counts[static_cast<std::size_t>(k)].add(pred, *s.label_map, k);
  }
  std::vector<double> out;
  for (const auto& c : counts) out.push_back(c.value());
  return out;
}

struct DiceRow {
  int fold = 0;
  int n = 0;
  int label = 0;
  double dice = 0.0;
};

using FoldCallback = std::function<void(int fold, int n, const TrainResult&)>;

/// Trains one segnet per (fold, n) on the other folds' patients and scores
/// it on the fold's own patients.
inline std::vector<DiceRow> seg_cross_validation(const Corpus& corpus, const ExperimentConfig& config,
                                                 const std::vector<int>& ns, const FoldCallback& on_fold = {},
                                                 const std::vector<int>& only_folds = {}) {
  const auto partition = fold_partition(corpus.patient_ids(), config.folds, config.seed);
  if (corpus.normals.empty()) throw ConfigError("corpus has no normal samples");
  const auto& first = corpus.normals.front().image;
  std::vector<DiceRow> rows;
  for (int f = 0; f < config.folds; ++f) {
    if (!only_folds.empty() && std::find(only_folds.begin(), only_folds.end(), f) == only_folds.end()) continue;
    const FoldSamples split = fold_samples(corpus, partition[static_cast<std::size_t>(f)]);
    for (int n : ns) {
      TrainConfig tc = config.seg_train;
      tc.seed = seg_seed(config.seed, f, n);
      const NetworkSpec spec =
          build_segnet(n, kNumLabels, 4, static_cast<int>(first.dim(1)), static_cast<int>(first.dim(2))).spec;
      TrainResult result = train_segnet(tc, spec, split.train);
      const auto d = evaluate_dice(result.checkpoint, split.test);
      for (int k = 0; k < kNumLabels; ++k) rows.push_back({f, n, k, d[static_cast<std::size_t>(k)]});
      if (on_fold) on_fold(f, n, result);
    }
  }
  return rows;
}

struct DiceSummaryKey {
  int n = 0;
  int label = 0;
  friend auto operator<=>(const DiceSummaryKey&, const DiceSummaryKey&) = default;
};

/// Mean and std of Dice across folds per (n, label).
inline std::map<DiceSummaryKey, MeanStd> summarize_dice(std::span<const DiceRow> rows) {
  std::map<DiceSummaryKey, std::vector<double>> b;
  for (const auto& r : rows) b[{r.n, r.label}].push_back(r.dice);
  std::map<DiceSummaryKey, MeanStd> out;
  for (auto& [k, v] : b) out[k] = mean_std(v);
  return out;
}

/// Mean over foreground labels of each fold's Dice, per (fold, n).
inline std::map<std::pair<int, int>, double> foreground_dice(std::span<const DiceRow> rows) {
  std::map<std::pair<int, int>, std::pair<double, int>> acc;
  for (const auto& r : rows) {
    if (r.label == 0) continue;
    auto& a = acc[{r.fold, r.n}];
    a.first += r.dice;
    a.second += 1;
  }
  std::map<std::pair<int, int>, double> out;
  for (const auto& [k, a] : acc) out[k] = a.first / a.second;
  return out;
}

// ---------------------------------------------------------------------------
// Split plans

struct SplitPlan {
  SampleKind disease = SampleKind::effusion;
  int repetition = 0;
  std::vector<std::string> seg_train_patients;
  std::vector<std::string> cls_patients;
  std::vector<std::string> neg_train_patients;
  std::vector<std::string> neg_test_patients;
  std::vector<std::size_t> neg_train;  // indices into corpus.normals
  std::vector<std::size_t> neg_test;
  std::vector<std::size_t> pos_train_pool;  // indices into corpus.positives(disease); first k train point k
  std::vector<std::size_t> pos_test;

  std::vector<std::size_t> pos_train(int k) const {
    return {pos_train_pool.begin(), pos_train_pool.begin() + k};
  }
};

/// Negatives: the seg fold's test patients, shuffled per repetition and dealt
/// to whichever half currently holds fewer slices. Positives: a shuffled
/// train pool and a disjoint test set.
inline SplitPlan make_split_plan(const Corpus& corpus, const ExperimentConfig& config, SampleKind disease,
                                 int repetition) {
  validate(config);
  const auto partition = fold_partition(corpus.patient_ids(), config.folds, config.seed);
  SplitPlan plan;
  plan.disease = disease;
  plan.repetition = repetition;
  plan.cls_patients = partition[static_cast<std::size_t>(config.fold)];
  for (int f = 0; f < config.folds; ++f) {
    if (f == config.fold) continue;
    for (const auto& p : partition[static_cast<std::size_t>(f)]) plan.seg_train_patients.push_back(p);
  }
  std::sort(plan.seg_train_patients.begin(), plan.seg_train_patients.end());
  if (plan.cls_patients.size() < 2) throw ConfigError("classification needs at least 2 patients");

  std::map<std::string, std::vector<std::size_t>> by_patient;
  for (std::size_t i = 0; i < corpus.normals.size(); ++i) by_patient[corpus.normals[i].patient_id].push_back(i);

  std::vector<std::string> order = plan.cls_patients;
  Rng nrng(derive_seed({config.seed, seed_tag::negatives, static_cast<std::uint64_t>(repetition)}));
  nrng.shuffle(order.begin(), order.end());
  for (const auto& p : order) {
    const auto& slices = by_patient[p];
    const bool to_train = plan.neg_train.size() <= plan.neg_test.size();
    auto& dst = to_train ? plan.neg_train : plan.neg_test;
    (to_train ? plan.neg_train_patients : plan.neg_test_patients).push_back(p);
    dst.insert(dst.end(), slices.begin(), slices.end());
  }
  if (plan.neg_train.empty() || plan.neg_test.empty()) throw ConfigError("not enough negative slices to split");

  const auto& pos = corpus.positives(disease);
  const std::size_t need = static_cast<std::size_t>(config.pos_train_pool + config.pos_test);
  if (pos.size() < need) {
    throw ConfigError("need " + std::to_string(need) + " " + std::string(to_string(disease)) + " positives, have " +
                      std::to_string(pos.size()));
  }
  std::vector<std::size_t> idx(pos.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::uint64_t dk = disease == SampleKind::effusion ? 1 : 2;
  Rng prng(derive_seed({config.seed, seed_tag::positives, dk, static_cast<std::uint64_t>(repetition)}));
  prng.shuffle(idx.begin(), idx.end());
  plan.pos_train_pool.assign(idx.begin(), idx.begin() + config.pos_train_pool);
  plan.pos_test.assign(idx.begin() + config.pos_train_pool, idx.begin() + static_cast<std::ptrdiff_t>(need));
  return plan;
}

// ---------------------------------------------------------------------------
// Sweep

struct Prediction {
  std::string sample_id;
  int truth = 0;
  int predicted = 0;
  double prob_positive = 0.0;
};

struct SweepKey {
  SampleKind disease = SampleKind::effusion;
  FeatureMode mode = FeatureMode::img;
  int n_pos = 1;
  int repetition = 0;

  std::string str() const {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s_%s_n%02d_r%02d", std::string(to_string(disease)).c_str(),
                  std::string(to_string(mode)).c_str(), n_pos, repetition);
    return buf;
  }
};

struct SweepResult {
  SweepKey key;
  MetricsRecord record;
  std::vector<Prediction> predictions;
};

/// Jobs in the order disease, mode, n_pos, repetition as listed in the config.
inline std::vector<SweepKey> sweep_keys(const ExperimentConfig& config) {
  std::vector<SweepKey> keys;
  for (auto d : config.diseases) {
    for (auto m : config.modes) {
      for (int k : config.n_pos) {
        for (int r = 0; r < config.repetitions; ++r) keys.push_back({d, m, k, r});
      }
    }
  }
  return keys;
}

/// Frozen segnet outputs for every sample the sweep can touch, computed once.
class FeatureCache {
 public:
  FeatureCache(const Corpus& corpus, const Checkpoint* seg) : corpus_(corpus), seg_(seg) {}

  const Tensor<float>& features(FeatureMode mode, SampleKind kind, std::size_t index) {
    std::lock_guard lock(mutex_);
    const auto key = std::make_tuple(static_cast<int>(mode), static_cast<int>(kind), index);
    auto it = features_.find(key);
    if (it != features_.end()) return it->second;
    const LabeledSample& s = sample(kind, index);
    const SegnetOutputs<Tensor<float>>* out = nullptr;
    if (needs_segnet(mode)) {
      if (!seg_) throw ConfigError(std::string("feature mode ") + std::string(to_string(mode)) + " needs a segnet checkpoint");
      const auto sk = std::make_pair(static_cast<int>(kind), index);
      auto so = seg_out_.find(sk);
      if (so == seg_out_.end()) so = seg_out_.emplace(sk, segnet_infer(*seg_, s.image)).first;
      out = &so->second;
    }
    return features_.emplace(key, assemble_features(mode, s.image, out)).first->second;
  }

  const LabeledSample& sample(SampleKind kind, std::size_t index) const {
    return kind == SampleKind::normal ? corpus_.normals.at(index) : corpus_.positives(kind).at(index);
  }

 private:
  const Corpus& corpus_;
  const Checkpoint* seg_;
  std::mutex mutex_;
  std::map<std::pair<int, std::size_t>, SegnetOutputs<Tensor<float>>> seg_out_;
  std::map<std::tuple<int, int, std::size_t>, Tensor<float>> features_;
};

inline std::uint64_t cls_seed(std::uint64_t master, const SweepKey& k) {
  return derive_seed({master, seed_tag::cls, static_cast<std::uint64_t>(k.disease), static_cast<std::uint64_t>(k.n_pos),
                      static_cast<std::uint64_t>(k.repetition)});
}

/// Trains and evaluates the classifier of one sweep point.
inline SweepResult run_sweep_job(const ExperimentConfig& config, const SplitPlan& plan,
                                 const SweepKey& key, FeatureCache& cache) {
  std::vector<Tensor<float>> features;
  std::vector<int> labels;
  for (std::size_t i : plan.neg_train) {
    features.push_back(cache.features(key.mode, SampleKind::normal, i));
    labels.push_back(0);
  }
  for (std::size_t i : plan.pos_train(key.n_pos)) {
    features.push_back(cache.features(key.mode, key.disease, i));
    labels.push_back(1);
  }
  TrainConfig tc = config.cls_train;
  tc.seed = cls_seed(config.seed, key);
  const TrainResult trained = train_clsnet_on_features(tc, config.cls_profile, features, labels);

  SweepResult out;
  out.key = key;
  std::vector<int> preds, truths;
  auto eval = [&](SampleKind kind, std::size_t i, int truth) {
    const double p = positive_probability(trained.checkpoint, cache.features(key.mode, kind, i));
    const int pred = p > 0.5 ? 1 : 0;
    out.predictions.push_back({cache.sample(kind, i).id, truth, pred, p});
    preds.push_back(pred);
    truths.push_back(truth);
  };
  for (std::size_t i : plan.neg_test) eval(SampleKind::normal, i, 0);
  for (std::size_t i : plan.pos_test) eval(key.disease, i, 1);
  out.record = MetricsRecord::from(confusion(preds, truths));
  out.record.disease = std::string(to_string(key.disease));
  out.record.mode = std::string(to_string(key.mode));
  out.record.n_pos_train = key.n_pos;
  out.record.repetition = key.repetition;
  return out;
}

using SweepCallback = std::function<void(const SweepResult&)>;

/// Runs every sweep point not listed in `skip`. Results come back in key
/// order whatever the job count; `on_result` is called as jobs finish, under
/// a lock.
inline std::vector<SweepResult> run_sweep(const Corpus& corpus, const ExperimentConfig& config, const Checkpoint* seg,
                                          const std::set<std::string>& skip = {},
                                          const SweepCallback& on_result = {}) {
  validate(config);
  for (auto m : config.modes) {
    if (needs_segnet(m) && !seg) {
      throw ConfigError(std::string("feature mode ") + std::string(to_string(m)) + " needs a segnet checkpoint");
    }
  }
  std::vector<SweepKey> todo;
  for (const auto& k : sweep_keys(config)) {
    if (!skip.count(k.str())) todo.push_back(k);
  }
  std::map<std::pair<int, int>, SplitPlan> plans;
  for (const auto& k : todo) {
    const auto pk = std::make_pair(static_cast<int>(k.disease), k.repetition);
    if (!plans.count(pk)) plans.emplace(pk, make_split_plan(corpus, config, k.disease, k.repetition));
  }

  FeatureCache cache(corpus, seg);
  std::vector<std::optional<SweepResult>> results(todo.size());
  std::atomic<std::size_t> next{0};
  std::mutex done_mutex;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= todo.size()) return;
      try {
        const auto& k = todo[i];
        results[i] = run_sweep_job(config, plans.at({static_cast<int>(k.disease), k.repetition}), k, cache);
        std::lock_guard lock(done_mutex);
        if (on_result) on_result(*results[i]);
      } catch (...) {
        std::lock_guard lock(done_mutex);
        if (!failure) failure = std::current_exception();
        next = todo.size();
        return;
      }
    }
  };
  const int threads = std::min<int>(config.jobs, static_cast<int>(std::max<std::size_t>(todo.size(), 1)));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  std::vector<SweepResult> out;
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

// ---------------------------------------------------------------------------
// Mode comparison

struct ModeStanding {
  std::string mode;
  double mean_kappa = 0.0;
  double mean_tpr = 0.0;
  double mean_tnr = 0.0;
};

struct ModeComparison {
  std::string disease;
  int n_pos = 0;
  std::vector<ModeStanding> ranking;  // best mean kappa first
  std::optional<bool> concat_seg_img_ordered;  // kappa CONCAT >= SEG >= IMG, when all three ran
};

/// Ranks modes by mean kappa per (disease, n_pos). Ties keep the order of
/// `mode_order`; modes missing from it follow alphabetically.
inline std::vector<ModeComparison> compare_modes(std::span<const MetricsRecord> records,
                                                 const std::vector<std::string>& mode_order = {}) {
  std::vector<ModeComparison> out;
  if (records.empty()) return out;
  const auto groups = aggregate(records);
  auto rank_of = [&](const std::string& m) {
    auto it = std::find(mode_order.begin(), mode_order.end(), m);
    return it == mode_order.end() ? mode_order.size() : static_cast<std::size_t>(it - mode_order.begin());
  };
  std::map<std::pair<std::string, int>, std::vector<ModeStanding>> by_point;
  for (const auto& [key, g] : groups) {
    by_point[{key.disease, key.n_pos_train}].push_back({key.mode, g.kappa.mean, g.tpr.mean, g.tnr.mean});
  }
  for (auto& [point, modes] : by_point) {
    std::stable_sort(modes.begin(), modes.end(), [&](const ModeStanding& a, const ModeStanding& b) {
      const auto ra = rank_of(a.mode), rb = rank_of(b.mode);
      return ra != rb ? ra < rb : a.mode < b.mode;
    });
    std::stable_sort(modes.begin(), modes.end(),
                     [](const ModeStanding& a, const ModeStanding& b) { return a.mean_kappa > b.mean_kappa; });
    ModeComparison c{point.first, point.second, modes, std::nullopt};
    auto find = [&](const char* m) -> const ModeStanding* {
      for (const auto& s : modes) {
        if (s.mode == m) return &s;
      }
      return nullptr;
    };
    const auto *concat = find("CONCAT"), *seg = find("SEG"), *img = find("IMG");
    if (concat && seg && img) {
      c.concat_seg_img_ordered = concat->mean_kappa >= seg->mean_kappa && seg->mean_kappa >= img->mean_kappa;
    }
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace segxfer
