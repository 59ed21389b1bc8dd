#pragma once

// Command-line front end. run_cli() is separate from main() so tests can
// drive commands in-process.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "segxfer/checkpoint.hpp"
#include "segxfer/experiments.hpp"
#include "segxfer/phantom.hpp"
#include "segxfer/report.hpp"
#include "segxfer/results_io.hpp"

namespace segxfer::cli {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode { kOk = 0, kFailure = 1, kBadFlags = 2, kIoFailure = 3, kConfigFailure = 4 };

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto dots = item.find("..");
    try {
      if (dots == std::string::npos) {
        out.push_back(std::stoi(item));
      } else {
        const int lo = std::stoi(item.substr(0, dots)), hi = std::stoi(item.substr(dots + 2));
        if (hi < lo) throw ConfigError("empty range '" + item + "'");
        for (int k = lo; k <= hi; ++k) out.push_back(k);
      }
    } catch (const std::logic_error& e) {
      if (dynamic_cast<const ConfigError*>(&e)) throw;
      throw ConfigError("bad integer list '" + text + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty integer list");
  return out;
}

inline std::vector<std::string> parse_name_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::vector<SampleKind> parse_diseases(const std::string& text) {
  std::vector<SampleKind> out;
  for (const auto& d : parse_name_list(text)) {
    const SampleKind k = parse_sample_kind(d);
    if (k == SampleKind::normal) throw ConfigError("'normal' is not a disease");
    out.push_back(k);
  }
  if (out.empty()) throw ConfigError("no disease given");
  return out;
}

inline std::vector<FeatureMode> parse_modes(const std::string& text) {
  std::vector<FeatureMode> out;
  for (const auto& m : parse_name_list(text)) out.push_back(parse_feature_mode(m));
  if (out.empty()) throw ConfigError("no feature mode given");
  return out;
}

/// Collects everything a run manifest records.
class Manifest {
 public:
  explicit Manifest(std::string command) : start_(std::chrono::steady_clock::now()) {
    doc_["command"] = std::move(command);
    doc_["tool_version"] = kToolVersion;
    doc_["config"] = json::object();
    doc_["artifacts"] = json::array();
  }
  template <typename V>
  void set(const std::string& key, const V& value) {
    doc_["config"][key] = value;
  }
  void seed(std::uint64_t s) { doc_["seed"] = s; }
  void artifact(const fs::path& p) { doc_["artifacts"].push_back(p.generic_string()); }

  void write(const fs::path& dir) {
    doc_["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    write_file_atomic(dir / "run.json", doc_.dump(2) + "\n");
  }

 private:
  json doc_;
  std::chrono::steady_clock::time_point start_;
};

struct TrainFlags {
  int batch_size = 0;
  int batches = 0;
  int epochs = 0;
  double lr = 0.0;

  void add_to(CLI::App* app) {
    app->add_option("--batch-size", batch_size, "Override the batch size")->check(CLI::PositiveNumber);
    app->add_option("--batches", batches, "Override batches per epoch")->check(CLI::PositiveNumber);
    app->add_option("--epochs", epochs, "Override the epoch count")->check(CLI::PositiveNumber);
    app->add_option("--lr", lr, "Override the Adam learning rate")->check(CLI::PositiveNumber);
  }
  TrainConfig apply(TrainConfig c) const {
    if (batch_size) c.batch_size = batch_size;
    if (batches) c.batches_per_epoch = batches;
    if (epochs) c.epochs = epochs;
    if (lr > 0) c.adam.lr = lr;
    return c;
  }
  void record(Manifest& m, const TrainConfig& c, const std::string& prefix) const {
    m.set(prefix + "batch_size", c.batch_size);
    m.set(prefix + "batches_per_epoch", c.batches_per_epoch);
    m.set(prefix + "epochs", c.epochs);
    m.set(prefix + "lr", c.adam.lr);
  }
};

inline void check_segnet_provenance(const Checkpoint& seg, const ExperimentConfig& config) {
  if (seg.spec.arch != Architecture::segnet) throw ConfigError("--seg-ckpt is not a segnet checkpoint");
  auto expect = [&](const char* key, const std::string& value) {
    auto it = seg.spec.extra.find(key);
    if (it != seg.spec.extra.end() && it->second != value) {
      throw ConfigError(std::string("segnet was trained with ") + key + "=" + it->second + ", this run uses " + value);
    }
  };
  expect("fold", std::to_string(config.fold));
  expect("folds", std::to_string(config.folds));
  expect("split_seed", std::to_string(config.seed));
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Segmentation-feature transfer for unbalanced disease detection", "segxfer"};
  app.require_subcommand(1);
  app.set_config("--config", "", "INI file with one [subcommand] section per command; flags override it");
  app.set_version_flag("--version", kToolVersion);

  std::uint64_t seed = 0;
  std::string out_dir;
  std::string data_dir;

  // phantom-gen
  auto* gen = app.add_subcommand("phantom-gen", "Generate the synthetic phantom corpus");
  std::string profile = "desk";
  gen->add_option("--profile", profile, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  gen->add_option("--seed", seed, "Master seed");
  gen->add_option("--out", out_dir, "Output directory")->required();

  // seg-train
  auto* seg_train = app.add_subcommand("seg-train", "Train a segnet on one cross-validation fold");
  int n = 16, folds = 4, fold = 0;
  TrainFlags seg_flags;
  seg_train->add_option("--data", data_dir, "Corpus directory")->envname("SEGXFER_DATA")->required();
  seg_train->add_option("--n", n, "Base channel count")->check(CLI::PositiveNumber);
  seg_train->add_option("--folds", folds, "Number of folds")->check(CLI::Range(2, 1000));
  seg_train->add_option("--fold", fold, "Fold held out for testing")->check(CLI::NonNegativeNumber);
  seg_train->add_option("--seed", seed, "Master seed");
  seg_train->add_option("--out", out_dir, "Output directory")->required();
  seg_flags.add_to(seg_train);

  // seg-eval
  auto* seg_eval = app.add_subcommand("seg-eval", "Cross-validate segnets or score a checkpoint");
  std::string n_list = "16";
  std::string fold_list;
  std::string ckpt_path;
  seg_eval->add_option("--data", data_dir, "Corpus directory")->envname("SEGXFER_DATA")->required();
  seg_eval->add_option("--n", n_list, "Base channel counts, e.g. 8,16,32,64");
  seg_eval->add_option("--folds", folds, "Number of folds")->check(CLI::Range(2, 1000));
  seg_eval->add_option("--fold", fold_list, "Folds to run (default all)");
  seg_eval->add_option("--ckpt", ckpt_path, "Score this checkpoint on its fold instead of training");
  seg_eval->add_option("--seed", seed, "Master seed");
  seg_eval->add_option("--out", out_dir, "Output directory")->required();
  seg_flags.add_to(seg_eval);

  // cls-train
  auto* cls_train = app.add_subcommand("cls-train", "Train and evaluate one classifier");
  std::string seg_ckpt;
  std::string disease = "effusion";
  std::string mode = "CONCAT";
  int npos = 1, rep = 0;
  TrainFlags cls_flags;
  cls_train->add_option("--data", data_dir, "Corpus directory")->envname("SEGXFER_DATA")->required();
  cls_train->add_option("--seg-ckpt", seg_ckpt, "Frozen segnet checkpoint");
  cls_train->add_option("--disease", disease, "effusion or septal");
  cls_train->add_option("--mode", mode, "Feature mode");
  cls_train->add_option("--npos", npos, "Positive training samples")->check(CLI::PositiveNumber);
  cls_train->add_option("--rep", rep, "Repetition index")->check(CLI::NonNegativeNumber);
  cls_train->add_option("--folds", folds, "Number of folds")->check(CLI::Range(2, 1000));
  cls_train->add_option("--fold", fold, "Segmentation fold supplying the classifier patients")
      ->check(CLI::NonNegativeNumber);
  cls_train->add_option("--seed", seed, "Master seed");
  cls_train->add_option("--out", out_dir, "Output directory")->required();
  cls_flags.add_to(cls_train);

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Run the unbalanced classification sweep");
  std::string diseases = "effusion,septal";
  std::string modes = "IMG,SEG,IMG+SEG,CONCAT,IMG+CONCAT";
  std::string npos_list = "1..10";
  int reps = 10, jobs = 1;
  sweep->add_option("--data", data_dir, "Corpus directory")->envname("SEGXFER_DATA")->required();
  sweep->add_option("--seg-ckpt", seg_ckpt, "Frozen segnet checkpoint");
  sweep->add_option("--disease", diseases, "Comma-separated diseases");
  sweep->add_option("--modes", modes, "Comma-separated feature modes");
  sweep->add_option("--npos", npos_list, "Positive counts, e.g. 1..5 or 1,3,5");
  sweep->add_option("--reps", reps, "Repetitions")->check(CLI::PositiveNumber);
  sweep->add_option("--jobs", jobs, "Parallel training jobs")->check(CLI::PositiveNumber);
  sweep->add_option("--folds", folds, "Number of folds")->check(CLI::Range(2, 1000));
  sweep->add_option("--fold", fold, "Segmentation fold supplying the classifier patients")
      ->check(CLI::NonNegativeNumber);
  sweep->add_option("--seed", seed, "Master seed");
  sweep->add_option("--out", out_dir, "Output directory")->required();
  cls_flags.add_to(sweep);

  // report
  auto* report = app.add_subcommand("report", "Plot a sweep as SVG and rank the modes");
  std::string in_csv;
  std::string mode_filter;
  report->add_option("--in", in_csv, "sweep.csv")->required();
  report->add_option("--modes", mode_filter, "Only plot these modes");
  report->add_option("--out", out_dir, "Output directory")->required();

  try {
    std::vector<std::string> argv(args.rbegin(), args.rend());
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kBadFlags;
  }

  try {
    const fs::path out_path(out_dir);
    auto experiment = [&] {
      ExperimentConfig c;
      c.seed = seed;
      c.folds = folds;
      c.fold = fold;
      c.n = n;
      return c;
    };

    if (*gen) {
      CorpusConfig cfg = corpus_config(parse_profile(profile));
      cfg.seed = seed;
      Manifest m("phantom-gen");
      m.seed(seed);
      m.set("profile", profile);
      m.set("size", cfg.size);
      m.set("patients", cfg.patients);
      m.set("slices", std::to_string(cfg.min_slices) + ".." + std::to_string(cfg.max_slices));
      m.set("positives_per_disease", cfg.positives_per_disease);
      m.set("noise_sigma", cfg.noise_sigma);
      const Corpus corpus = generate_corpus(cfg);
      write_corpus(corpus, out_path);
      m.artifact("manifest.tsv");
      m.write(out_path);
      out << "patients " << corpus.patient_ids().size() << ", normal slices " << corpus.normals.size()
          << ", effusion " << corpus.effusion.size() << ", septal " << corpus.septal.size() << "\n";
      return kOk;
    }

    if (*report) {
      const auto records = read_sweep_csv(in_csv);
      std::set<std::string> filter;
      for (const auto& m : parse_name_list(mode_filter)) filter.insert(m);
      std::vector<std::string> order;
      for (auto m : kAllFeatureModes) order.emplace_back(to_string(m));
      std::set<std::string> disease_names;
      for (const auto& r : records) disease_names.insert(r.disease);
      Manifest m("report");
      m.set("in", in_csv);
      m.set("modes", mode_filter);
      for (const auto& d : disease_names) {
        for (auto metric : {SweepMetric::tpr, SweepMetric::tnr, SweepMetric::kappa}) {
          const std::string name = d + "_" + metric_name(metric) + ".svg";
          write_file_atomic(out_path / name,
                            sweep_chart(records, d, metric, order, mode_filter.empty() ? nullptr : &filter));
          m.artifact(name);
        }
      }
      std::vector<MetricsRecord> kept;
      for (const auto& r : records) {
        if (mode_filter.empty() || filter.count(r.mode)) kept.push_back(r);
      }
      const std::string summary = ranking_text(kept, order);
      write_file_atomic(out_path / "summary.txt", summary);
      m.artifact("summary.txt");
      m.write(out_path);
      out << summary;
      return kOk;
    }

    const Corpus corpus = read_corpus(data_dir);
    if (corpus.normals.empty()) throw ConfigError("corpus under " + data_dir + " has no normal slices");
    const auto& first = corpus.normals.front().image;
    const int height = static_cast<int>(first.dim(1)), width = static_cast<int>(first.dim(2));

    if (*seg_train) {
      ExperimentConfig c = experiment();
      c.seg_train = seg_flags.apply(c.seg_train);
      validate(c);
      const auto partition = fold_partition(corpus.patient_ids(), c.folds, c.seed);
      const FoldSamples split = fold_samples(corpus, partition[static_cast<std::size_t>(c.fold)]);
      TrainConfig tc = c.seg_train;
      tc.seed = seg_seed(c.seed, c.fold, c.n);
      NetworkSpec spec = build_segnet(c.n, kNumLabels, 4, height, width).spec;
      spec.extra = {{"fold", std::to_string(c.fold)}, {"folds", std::to_string(c.folds)},
                    {"split_seed", std::to_string(c.seed)}};
      TrainResult result = train_segnet(tc, spec, split.train, [&](int step, double loss) {
        if ((step + 1) % tc.batches_per_epoch == 0) {
          out << "epoch " << (step + 1) / tc.batches_per_epoch << " batch loss " << loss << "\n" << std::flush;
        }
      });
      result.checkpoint.spec.extra = spec.extra;
      fs::create_directories(out_path);
      save_checkpoint(out_path / "segnet.ckpt", result.checkpoint);
      write_loss_history(out_path / "loss.csv", result.epoch_loss);
      const auto d = evaluate_dice(result.checkpoint, split.test);
      std::vector<DiceRow> rows;
      for (int k = 0; k < kNumLabels; ++k) rows.push_back({c.fold, c.n, k, d[static_cast<std::size_t>(k)]});
      write_file_atomic(out_path / "dice.csv", dice_csv(rows));
      Manifest m("seg-train");
      m.seed(seed);
      m.set("data", data_dir);
      m.set("n", c.n);
      m.set("folds", c.folds);
      m.set("fold", c.fold);
      seg_flags.record(m, tc, "");
      for (const char* a : {"segnet.ckpt", "loss.csv", "dice.csv"}) m.artifact(a);
      m.write(out_path);
      for (int k = 0; k < kNumLabels; ++k) out << kLabelNames[k] << " " << format_double(d[static_cast<std::size_t>(k)]) << "\n";
      return kOk;
    }

    if (*seg_eval) {
      ExperimentConfig c = experiment();
      c.seg_train = seg_flags.apply(c.seg_train);
      Manifest m("seg-eval");
      m.seed(seed);
      m.set("data", data_dir);
      m.set("folds", c.folds);
      std::vector<DiceRow> rows;
      if (!ckpt_path.empty()) {
        const Checkpoint ck = load_checkpoint(ckpt_path);
        if (ck.spec.arch != Architecture::segnet) throw ConfigError("--ckpt is not a segnet checkpoint");
        auto it = ck.spec.extra.find("fold");
        c.fold = fold_list.empty() ? (it == ck.spec.extra.end() ? 0 : std::stoi(it->second))
                                   : parse_int_list(fold_list).front();
        validate(c);
        const auto partition = fold_partition(corpus.patient_ids(), c.folds, c.seed);
        const FoldSamples split = fold_samples(corpus, partition[static_cast<std::size_t>(c.fold)]);
        const auto d = evaluate_dice(ck, split.test);
        for (int k = 0; k < kNumLabels; ++k) rows.push_back({c.fold, ck.spec.n, k, d[static_cast<std::size_t>(k)]});
        m.set("ckpt", ckpt_path);
        m.set("fold", c.fold);
      } else {
        validate(c);
        const auto ns = parse_int_list(n_list);
        std::vector<int> only = fold_list.empty() ? std::vector<int>{} : parse_int_list(fold_list);
        for (int f : only) {
          if (f < 0 || f >= c.folds) throw ConfigError("fold " + std::to_string(f) + " out of range");
        }
        rows = seg_cross_validation(
            corpus, c, ns,
            [&](int f, int nn, const TrainResult& r) {
              Checkpoint ck = r.checkpoint;
              ck.spec.extra = {{"fold", std::to_string(f)}, {"folds", std::to_string(c.folds)},
                               {"split_seed", std::to_string(c.seed)}};
              const std::string name = "segnet_n" + std::to_string(nn) + "_fold" + std::to_string(f) + ".ckpt";
              fs::create_directories(out_path);
              save_checkpoint(out_path / name, ck);
              m.artifact(name);
              out << "fold " << f << " n " << nn << " trained\n" << std::flush;
            },
            only);
        m.set("n", n_list);
        m.set("fold", fold_list.empty() ? std::string("all") : fold_list);
        seg_flags.record(m, c.seg_train, "");
      }
      write_file_atomic(out_path / "dice.csv", dice_csv(rows));
      m.artifact("dice.csv");
      m.write(out_path);
      out << "n    label  dice mean+-std\n";
      for (const auto& [key, s] : summarize_dice(rows)) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "%-4d %-5s  %.1f+-%.1f%%\n", key.n, kLabelNames[key.label], 100 * s.mean,
                      100 * s.std);
        out << buf;
      }
      return kOk;
    }

    // cls-train and sweep share the experiment setup.
    ExperimentConfig c = experiment();
    c.cls_train = cls_flags.apply(c.cls_train);
    c.jobs = jobs;
    if (*cls_train) {
      c.diseases = parse_diseases(disease);
      c.modes = parse_modes(mode);
      c.n_pos = {npos};
      c.repetitions = rep + 1;
    } else {
      c.diseases = parse_diseases(diseases);
      c.modes = parse_modes(modes);
      c.n_pos = parse_int_list(npos_list);
      c.repetitions = reps;
    }
    validate(c);
    std::optional<Checkpoint> seg;
    if (!seg_ckpt.empty()) {
      seg = load_checkpoint(seg_ckpt);
      check_segnet_provenance(*seg, c);
      const auto& image = corpus.normals.front().image;
      if (seg->spec.height != static_cast<int>(image.dim(1)) || seg->spec.width != static_cast<int>(image.dim(2))) {
        throw ConfigError("segnet was built for " + std::to_string(seg->spec.height) + "x" +
                          std::to_string(seg->spec.width) + " images, data is " + shape_str(image.shape()));
      }
    }
    for (auto md : c.modes) {
      if (needs_segnet(md) && !seg) {
        throw ConfigError("feature mode " + std::string(to_string(md)) + " needs --seg-ckpt");
      }
    }

    Manifest m(*cls_train ? "cls-train" : "sweep");
    m.seed(seed);
    m.set("data", data_dir);
    m.set("seg_ckpt", seg_ckpt);
    m.set("folds", c.folds);
    m.set("fold", c.fold);
    cls_flags.record(m, c.cls_train, "");
    fs::create_directories(out_path);

    if (*cls_train) {
      const SweepKey key{c.diseases.front(), c.modes.front(), npos, rep};
      const SplitPlan plan = make_split_plan(corpus, c, key.disease, rep);
      FeatureCache cache(corpus, seg ? &*seg : nullptr);
      const SweepResult r = run_sweep_job(c, plan, key, cache);
      write_file_atomic(out_path / "predictions.tsv", predictions_tsv(r.predictions));
      write_file_atomic(out_path / "metrics.csv", sweep_csv({r.record}));
      m.set("disease", disease);
      m.set("mode", mode);
      m.set("npos", npos);
      m.set("rep", rep);
      m.artifact("predictions.tsv");
      m.artifact("metrics.csv");
      m.write(out_path);
      out << key.str() << " TPR " << format_double(r.record.tpr) << " TNR " << format_double(r.record.tnr)
          << " kappa " << format_double(r.record.kappa) << "\n";
      return kOk;
    }

    // sweep: resume by skipping keys already in sweep.csv.
    const fs::path csv_path = out_path / "sweep.csv";
    std::vector<MetricsRecord> records;
    std::set<std::string> done;
    if (fs::exists(csv_path)) {
      records = read_sweep_csv(csv_path);
      for (const auto& r : records) done.insert(record_key(r));
    }
    std::set<std::string> wanted;
    for (const auto& k : sweep_keys(c)) wanted.insert(k.str());
    std::size_t skipped = 0;
    for (const auto& k : done) skipped += wanted.count(k);
    out << "sweep: " << wanted.size() << " trainings, " << skipped << " already done\n" << std::flush;
    run_sweep(corpus, c, seg ? &*seg : nullptr, done, [&](const SweepResult& r) {
      write_file_atomic(out_path / "predictions" / (r.key.str() + ".tsv"), predictions_tsv(r.predictions));
      records.push_back(r.record);
      write_file_atomic(csv_path, sweep_csv(records));
      out << r.key.str() << " kappa " << format_double(r.record.kappa) << "\n" << std::flush;
    });
    write_file_atomic(csv_path, sweep_csv(records));
    std::vector<std::string> order;
    for (auto md : c.modes) order.emplace_back(to_string(md));
    const std::string ranking = ranking_text(records, order);
    write_file_atomic(out_path / "ranking.txt", ranking);
    m.set("diseases", diseases);
    m.set("modes", modes);
    m.set("npos", npos_list);
    m.set("reps", reps);
    m.set("jobs", jobs);
    m.artifact("sweep.csv");
    m.artifact("predictions/");
    m.artifact("ranking.txt");
    m.write(out_path);
    out << ranking;
    return kOk;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kIoFailure;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kIoFailure;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigFailure;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace segxfer::cli
