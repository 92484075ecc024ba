#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "dgn/image.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kNarrow =
    " --set model.dims=[8,16,32,64] --set model.heads=[1,2,2,4] --set model.depths=[1,1,1,1]"
    " --set model.adapter_bottleneck=4 --set model.mask_dim=8 --set train.input_size=32"
    " --set train.epochs=2 --set train.warmup_epochs=1 --set train.batch_size=2";

struct CliResult {
  int status = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

/// Shared scratch area: a small corpus and one trained checkpoint.
class CliTest : public ::testing::Test {
 protected:
  static fs::path root;

  static CliResult dgn(const std::string& args) {
    const fs::path o = root / "stdout.txt", e = root / "stderr.txt";
    const std::string cmd = std::string(DGN_CLI_PATH) + " " + args + " >" + o.string() + " 2>" + e.string();
    const int raw = std::system(cmd.c_str());
    return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(o), slurp(e)};
  }

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / ("dgn_cli_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
    const CliResult g = dgn("gen-data --out " + (root / "data").string() +
                      " --set data.train_count=4 --set data.eval_count=2 --set data.height=32 --set data.width=32");
    ASSERT_EQ(g.status, 0) << g.err;
    const CliResult t = dgn("train --data " + (root / "data/manifest.yaml").string() + " --out " +
                      (root / "run").string() + kNarrow);
    ASSERT_EQ(t.status, 0) << t.err;
  }

  static void TearDownTestSuite() { fs::remove_all(root); }

  static std::string manifest() { return (root / "data/manifest.yaml").string(); }
  static std::string checkpoint() { return (root / "run/checkpoint.ckpt").string(); }
};

fs::path CliTest::root;

}  // namespace

TEST_F(CliTest, GenDataIsIdempotent) {
  const fs::path again = root / "data2";
  ASSERT_EQ(dgn("gen-data --out " + again.string() +
                " --set data.train_count=4 --set data.eval_count=2 --set data.height=32 --set data.width=32")
                .status,
            0);
  for (const auto& entry : fs::recursive_directory_iterator(root / "data")) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), root / "data");
    EXPECT_EQ(slurp(entry.path()), slurp(again / rel)) << rel;
  }
  EXPECT_TRUE(fs::exists(again / "resolved_config.yaml"));
}

TEST_F(CliTest, TrainWritesArtifactsAndRerunsByteIdentically) {
  for (const char* f : {"checkpoint.ckpt", "train_log.csv", "train_eval.csv", "resolved_config.yaml"}) {
    EXPECT_TRUE(fs::exists(root / "run" / f)) << f;
  }
  const CliResult t = dgn("train --data " + manifest() + " --out " + (root / "run_b").string() + kNarrow);
  ASSERT_EQ(t.status, 0) << t.err;
  for (const char* f : {"checkpoint.ckpt", "train_eval.csv", "resolved_config.yaml"}) {
    EXPECT_EQ(slurp(root / "run" / f), slurp(root / "run_b" / f)) << f;
  }
}

TEST_F(CliTest, ResumeEqualsUninterruptedRun) {
  const fs::path half = root / "half";
  ASSERT_EQ(dgn("train --data " + manifest() + " --out " + half.string() + " --stop-at 2" + kNarrow).status, 0);
  const CliResult r = dgn("train --resume " + (half / "checkpoint.ckpt").string() + " --out " + half.string());
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(slurp(half / "checkpoint.ckpt"), slurp(root / "run/checkpoint.ckpt"));
  // Mixing --resume with overrides is a validation error.
  EXPECT_EQ(dgn("train --resume " + checkpoint() + " --out " + half.string() + " --set train.lr=1").status, 1);
}

TEST_F(CliTest, EvalOfGroundTruthAgainstItselfIsPerfect) {
  const std::string masks = (root / "data/mask").string();
  const CliResult e = dgn("eval --pred " + masks + " --gt " + masks + " --out " + (root / "self").string());
  ASSERT_EQ(e.status, 0) << e.err;
  const std::string csv = slurp(root / "self/eval.csv");
  EXPECT_NE(csv.find("\nmean,0.000000,1.000000"), std::string::npos) << csv;
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "name,mae,fbeta_max,s_measure,e_measure");
  EXPECT_TRUE(fs::exists(root / "self/curves.csv"));
}

TEST_F(CliTest, EvalWithMissingCounterpartExitsTwo) {
  const fs::path gt = root / "gt_extra";
  fs::create_directories(gt);
  for (const auto& entry : fs::directory_iterator(root / "data/mask")) fs::copy(entry.path(), gt / entry.path().filename());
  dgn::write_png((gt / "orphan.png").string(), dgn::Image8(32, 32, 1));
  const CliResult e = dgn("eval --pred " + (root / "data/mask").string() + " --gt " + gt.string() + " --out " +
                    (root / "miss").string());
  EXPECT_EQ(e.status, 2);
  EXPECT_NE(e.err.find("orphan"), std::string::npos) << e.err;
}

TEST_F(CliTest, EvalFromCheckpointOnEvalSplit) {
  const CliResult e = dgn("eval --checkpoint " + checkpoint() + " --out " + (root / "ev").string() +
                    " --set eval.split=eval");
  ASSERT_EQ(e.status, 0) << e.err;
  EXPECT_NE(slurp(root / "ev/eval.csv").find("\nmean,"), std::string::npos);
  EXPECT_EQ(dgn("eval --checkpoint " + checkpoint() + " --out " + (root / "ev").string() + " --set train.lr=1").status,
            1);
}

TEST_F(CliTest, InferWritesOneMapPerInputAtInputSize) {
  const fs::path out = root / "inf";
  const CliResult r = dgn("infer --checkpoint " + checkpoint() + " --input " + (root / "data/image").string() + " --out " +
                    out.string());
  ASSERT_EQ(r.status, 0) << r.err;
  std::size_t n = 0;
  for (const auto& entry : fs::directory_iterator(root / "data/image")) {
    const dgn::Image8 p = dgn::read_png((out / entry.path().filename()).string());
    EXPECT_EQ(p.width, 32u);
    EXPECT_EQ(p.channels, 1u);
    ++n;
  }
  EXPECT_EQ(n, 6u);
}

TEST_F(CliTest, VizAttnRowsSumToOne) {
  const fs::path out = root / "viz";
  const CliResult r = dgn("viz-attn --checkpoint " + checkpoint() + " --out " + out.string() + " --set data.manifest=" +
                    manifest());
  ASSERT_EQ(r.status, 0) << r.err;
  for (int stage = 1; stage <= 4; ++stage) {
    std::ifstream f(out / ("mgqm_stage" + std::to_string(stage) + "_attention.csv"));
    ASSERT_TRUE(f) << stage;
    std::string line;
    std::getline(f, line);
    std::size_t rows = 0;
    while (std::getline(f, line)) {
      std::stringstream ss(line);
      std::string cell;
      double sum = 0;
      for (int col = 0; std::getline(ss, cell, ','); ++col) {
        if (col >= 2) sum += std::stod(cell);
      }
      EXPECT_NEAR(sum, 1.0, 1e-9);
      ++rows;
    }
    EXPECT_GT(rows, 0u);
    EXPECT_TRUE(fs::exists(out / ("features_stage" + std::to_string(stage) + "_difference.png")));
  }
}

TEST_F(CliTest, AblateHasOneRowPerVariantAndEvalHeader) {
  const fs::path out = root / "abl";
  const CliResult r = dgn("ablate --data " + manifest() + " --out " + out.string() + kNarrow +
                    " --set train.epochs=1 --set train.warmup_epochs=0");
  ASSERT_EQ(r.status, 0) << r.err;
  std::ifstream f(out / "ablation.csv");
  std::string line;
  std::getline(f, line);
  EXPECT_EQ(line, "name,mae,fbeta_max,s_measure,e_measure");
  std::vector<std::string> names;
  while (std::getline(f, line)) names.push_back(line.substr(0, line.find(',')));
  EXPECT_EQ(names, (std::vector<std::string>{"baseline", "k10", "k100", "prune_f4", "single_F3", "single_F4",
                                             "full_finetune"}));
  EXPECT_TRUE(fs::exists(out / "ablation_complexity.csv"));
}

TEST_F(CliTest, CountParamsShrinksWhenPruned) {
  auto total = [&](const std::string& extra) {
    const fs::path out = root / "cnt";
    EXPECT_EQ(dgn("count-params --out " + out.string() + extra).status, 0);
    const std::string csv = slurp(out / "complexity.csv");
    const auto at = csv.find("total_params,") + 13;
    return std::stoull(csv.substr(at, csv.find('\n', at) - at));
  };
  EXPECT_LT(total(" --set model.prune_f4=true"), total(""));
}

TEST_F(CliTest, ValidationAndIoErrorsMapToExitCodes) {
  CliResult r = dgn("count-params --out " + (root / "x").string() + " --set model.bogus=1");
  EXPECT_EQ(r.status, 1);
  EXPECT_EQ(r.err.rfind("error[validation]:", 0), 0u) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
  EXPECT_EQ(dgn("count-params --config /nonexistent.yaml").status, 2);
  EXPECT_EQ(dgn("train --out " + (root / "x").string() + kNarrow).status, 1);  // no manifest
  EXPECT_EQ(dgn("no-such-command").status, 1);
  EXPECT_EQ(dgn("infer --checkpoint /nonexistent.ckpt --input x.png").status, 2);
}
