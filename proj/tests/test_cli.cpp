#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "cli.hpp"

namespace fs = std::filesystem;
using namespace segxfer;

namespace {

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) { return read_file(p); }

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "segxfer_cli_test";
    fs::remove_all(root_);
    const CliRun r = invoke({"phantom-gen", "--profile", "desk", "--seed", "3", "--out", data().string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }
  static fs::path data() { return root_ / "data"; }
  static fs::path dir(const std::string& name) { return root_ / name; }

  static inline fs::path root_;
};

}  // namespace

TEST_F(CliTest, PhantomGenWritesManifestDeterministically) {
  EXPECT_TRUE(fs::exists(data() / "manifest.tsv"));
  EXPECT_TRUE(fs::exists(data() / "run.json"));
  const auto doc = nlohmann::json::parse(slurp(data() / "run.json"));
  EXPECT_EQ(doc["command"], "phantom-gen");
  EXPECT_EQ(doc["seed"], 3);
  EXPECT_EQ(doc["config"]["patients"], 20);
  const CliRun again = invoke({"phantom-gen", "--seed", "3", "--out", dir("data2").string()});
  ASSERT_EQ(again.code, 0);
  EXPECT_NE(again.out.find("patients 20"), std::string::npos);
  EXPECT_EQ(slurp(data() / "manifest.tsv"), slurp(dir("data2") / "manifest.tsv"));
}

TEST_F(CliTest, FlagErrorsExitTwo) {
  EXPECT_EQ(invoke({"phantom-gen", "--profile", "desk"}).code, 2);
  EXPECT_EQ(invoke({"phantom-gen", "--profile", "huge", "--out", "x"}).code, 2);
  EXPECT_EQ(invoke({}).code, 2);
  EXPECT_EQ(invoke({"no-such-command"}).code, 2);
  EXPECT_EQ(invoke({"sweep", "--data", data().string(), "--out", "x", "--reps", "0"}).code, 2);
  EXPECT_EQ(invoke({"--help"}).code, 0);
}

TEST_F(CliTest, MissingInputsExitThree) {
  EXPECT_EQ(invoke({"seg-train", "--data", (root_ / "nowhere").string(), "--out", dir("o").string()}).code, 3);
  fs::create_directories(root_);
  write_file_atomic(root_ / "bad.csv", "not,a,sweep\n1,2\n");
  EXPECT_EQ(invoke({"report", "--in", (root_ / "bad.csv").string(), "--out", dir("rep").string()}).code, 3);
  EXPECT_EQ(invoke({"report", "--in", (root_ / "missing.csv").string(), "--out", dir("rep").string()}).code, 3);
}

TEST_F(CliTest, ConfigErrorsExitFour) {
  const std::string d = data().string();
  EXPECT_EQ(invoke({"seg-train", "--data", d, "--fold", "4", "--out", dir("o").string()}).code, 4);
  EXPECT_EQ(invoke({"cls-train", "--data", d, "--mode", "CONCAT", "--out", dir("o").string()}).code, 4);
  EXPECT_EQ(invoke({"cls-train", "--data", d, "--mode", "BOGUS", "--out", dir("o").string()}).code, 4);
  EXPECT_EQ(invoke({"sweep", "--data", d, "--npos", "5..2", "--out", dir("o").string()}).code, 4);
  // A segnet trained at a different image size.
  save_checkpoint(root_ / "small.ckpt", build_segnet(2, 6, 2, 16, 16));
  EXPECT_EQ(invoke({"cls-train", "--data", d, "--mode", "SEG", "--seg-ckpt", (root_ / "small.ckpt").string(),
                    "--out", dir("o").string()})
                .code,
            4);
}

TEST_F(CliTest, SegTrainThenEvalReproducesDice) {
  const std::string d = data().string();
  const CliRun t = invoke({"seg-train", "--data", d, "--n", "2", "--batch-size", "1", "--batches", "3", "--epochs", "2",
                     "--out", dir("seg").string()});
  ASSERT_EQ(t.code, 0) << t.err;
  for (const char* f : {"segnet.ckpt", "loss.csv", "dice.csv", "run.json"}) EXPECT_TRUE(fs::exists(dir("seg") / f)) << f;
  const Checkpoint ck = load_checkpoint(dir("seg") / "segnet.ckpt");
  EXPECT_EQ(ck.spec.extra.at("fold"), "0");
  EXPECT_EQ(ck.spec.n, 2);

  const CliRun e = invoke({"seg-eval", "--data", d, "--ckpt", (dir("seg") / "segnet.ckpt").string(), "--out",
                     dir("eval").string()});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_EQ(slurp(dir("seg") / "dice.csv"), slurp(dir("eval") / "dice.csv"));
  EXPECT_NE(e.out.find("Myo"), std::string::npos);

  // The classifier refuses a segnet whose fold differs from the requested one.
  EXPECT_EQ(invoke({"cls-train", "--data", d, "--seg-ckpt", (dir("seg") / "segnet.ckpt").string(), "--fold", "1",
                 "--out", dir("o").string()})
                .code,
            4);
  const CliRun c = invoke({"cls-train", "--data", d, "--seg-ckpt", (dir("seg") / "segnet.ckpt").string(), "--mode",
                     "IMG+SEG", "--npos", "2", "--batches", "2", "--epochs", "1", "--out", dir("cls").string()});
  ASSERT_EQ(c.code, 0) << c.err;
  const auto preds = parse_predictions_tsv(slurp(dir("cls") / "predictions.tsv"));
  const auto metrics = parse_sweep_csv(slurp(dir("cls") / "metrics.csv"));
  ASSERT_EQ(metrics.size(), 1u);
  std::vector<int> p, tr;
  for (const auto& x : preds) p.push_back(x.predicted), tr.push_back(x.truth);
  EXPECT_EQ(format_double(cohens_kappa(confusion(p, tr))), format_double(metrics[0].kappa));
}

TEST_F(CliTest, SweepIsDeterministicAndResumes) {
  const std::string d = data().string();
  std::vector<std::string> base{"sweep", "--data", d, "--disease", "effusion", "--modes", "IMG", "--reps", "2",
                                "--batches", "1", "--epochs", "1", "--batch-size", "2"};
  auto with = [&](std::vector<std::string> extra) {
    auto a = base;
    a.insert(a.end(), extra.begin(), extra.end());
    return invoke(a);
  };
  ASSERT_EQ(with({"--npos", "1..2", "--out", dir("s1").string()}).code, 0);
  ASSERT_EQ(with({"--npos", "1..2", "--jobs", "2", "--out", dir("s2").string()}).code, 0);
  const std::string csv = slurp(dir("s1") / "sweep.csv");
  EXPECT_EQ(csv, slurp(dir("s2") / "sweep.csv"));
  EXPECT_EQ(parse_sweep_csv(csv).size(), 4u);
  EXPECT_TRUE(fs::exists(dir("s1") / "predictions" / "effusion_IMG_n01_r00.tsv"));
  EXPECT_TRUE(fs::exists(dir("s1") / "ranking.txt"));

  const CliRun resumed = with({"--npos", "1..3", "--out", dir("s1").string()});
  ASSERT_EQ(resumed.code, 0) << resumed.err;
  EXPECT_NE(resumed.out.find("6 trainings, 4 already done"), std::string::npos) << resumed.out;
  const auto rows = parse_sweep_csv(slurp(dir("s1") / "sweep.csv"));
  EXPECT_EQ(rows.size(), 6u);
  ASSERT_EQ(with({"--npos", "1..3", "--out", dir("s3").string()}).code, 0);
  EXPECT_EQ(slurp(dir("s1") / "sweep.csv"), slurp(dir("s3") / "sweep.csv"));

  const CliRun rep = invoke({"report", "--in", (dir("s1") / "sweep.csv").string(), "--out", dir("rep").string()});
  ASSERT_EQ(rep.code, 0) << rep.err;
  for (const char* f : {"effusion_TPR.svg", "effusion_TNR.svg", "effusion_kappa.svg", "summary.txt"}) {
    EXPECT_TRUE(fs::exists(dir("rep") / f)) << f;
  }
  const std::string svg = slurp(dir("rep") / "effusion_kappa.svg");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  ASSERT_EQ(invoke({"report", "--in", (dir("s1") / "sweep.csv").string(), "--out", dir("rep2").string()}).code, 0);
  EXPECT_EQ(svg, slurp(dir("rep2") / "effusion_kappa.svg"));

  const CliRun none = invoke({"report", "--in", (dir("s1") / "sweep.csv").string(), "--modes", "CONCAT", "--out",
                        dir("rep3").string()});
  ASSERT_EQ(none.code, 0);
  EXPECT_EQ(slurp(dir("rep3") / "effusion_TPR.svg").find("<polyline"), std::string::npos);
}

TEST_F(CliTest, ConfigFileSuppliesDefaults) {
  write_file_atomic(root_ / "gen.ini", "[phantom-gen]\nseed=3\nprofile=desk\n");
  const CliRun r =
      invoke({"--config", (root_ / "gen.ini").string(), "phantom-gen", "--out", dir("data3").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(data() / "manifest.tsv"), slurp(dir("data3") / "manifest.tsv"));
}

TEST(CliParsing, IntegerLists) {
  EXPECT_EQ(cli::parse_int_list("1..3"), (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(cli::parse_int_list("1,4..5"), (std::vector<int>{1, 4, 5}));
  EXPECT_THROW(cli::parse_int_list("x"), ConfigError);
  EXPECT_THROW(cli::parse_int_list("3..1"), ConfigError);
  EXPECT_EQ(cli::parse_modes("IMG,CONCAT").size(), 2u);
  EXPECT_THROW(cli::parse_diseases("normal"), ConfigError);
}
