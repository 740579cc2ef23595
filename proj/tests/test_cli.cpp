#include <gtest/gtest.h>
#include <sys/wait.h>

#include <filesystem>
#include <fstream>

#include "fedlora/checkpoint.hpp"
#include "fedlora/pipeline.hpp"

using namespace fedlora;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "fedlora_cli";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct Result {
  int status;
  std::string out, err;
};

Result fedsim(const std::string& args) {
  const fs::path out = kRoot / "stdout.txt", err = kRoot / "stderr.txt";
  const std::string cmd = std::string(FEDSIM_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int raw = std::system(cmd.c_str());
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(out), slurp(err)};
}

// Small, fast variant of the desk configuration.
const std::string kQuick = std::string("--config ") + DEFAULT_CONFIG +
                           " --set model.embed_dim=16 --set model.depth=1 --set model.ffn_dim=32"
                           " --set data.per_class=8 --set federation.rounds=2 --set federation.clients=2"
                           " --set teacher.enabled=false";

const std::string kGoldenOverlay = "b86360ea898c7550c43d5c84ec5a42e222011d894f748835fdd5844b3844e0f8";

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    const auto r = fedsim("train " + kQuick + " --seed 7 --out " + (kRoot / "run").string());
    ASSERT_EQ(r.status, 0) << r.err;
    ASSERT_EQ(fedsim("synth --out " + (kRoot / "synth").string() + " --classes 7 --per-class 2").status, 0);
  }
  static void TearDownTestSuite() { fs::remove_all(kRoot); }

  static fs::path run(const std::string& f) { return kRoot / "run" / f; }
  static std::string sample_image() { return (kRoot / "synth" / "class_3" / "0.png").string(); }
};

}  // namespace

TEST_F(Cli, TrainWritesArtifacts) {
  for (const char* f : {"checkpoint.flra", "history.jsonl", "metrics.json", "test_metrics.json", "roc.csv",
                        "manifest.json", "config.toml"})
    EXPECT_TRUE(fs::exists(run(f))) << f;
  EXPECT_EQ(RunConfig::load(run("config.toml")).seed, 7u);
}

TEST_F(Cli, SameSeedSameHistory) {
  const auto r = fedsim("train " + kQuick + " --seed 7 --out " + (kRoot / "again").string());
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(slurp(run("history.jsonl")), slurp(kRoot / "again" / "history.jsonl"));
  EXPECT_EQ(slurp(run("checkpoint.flra")), slurp(kRoot / "again" / "checkpoint.flra"));
}

TEST_F(Cli, EvalReproducesTrainingReport) {
  const auto r = fedsim("eval " + kQuick + " --seed 7 --checkpoint " + run("checkpoint.flra").string() +
                        " --split val --out " + (kRoot / "eval.json").string());
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(slurp(kRoot / "eval.json"), slurp(run("metrics.json")));
}

TEST_F(Cli, MissingDatasetPathIsUsageError) {
  const auto r = fedsim("train " + kQuick + " --set data.synthetic=false");
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.err.find("data.path"), std::string::npos) << r.err;
}

TEST_F(Cli, UnknownFieldAndSubcommandAreUsageErrors) {
  EXPECT_EQ(fedsim("train " + kQuick + " --set model.width=3").status, 2);
  EXPECT_EQ(fedsim("frobnicate").status, 2);
  EXPECT_EQ(fedsim("").status, 2);
  EXPECT_EQ(fedsim("train --config /nonexistent.toml").status, 2);
}

TEST_F(Cli, BadMagicIsCheckpointError) {
  auto bytes = slurp(run("checkpoint.flra"));
  bytes[0] = 'X';
  std::ofstream(kRoot / "bad.flra", std::ios::binary) << bytes;
  const auto r = fedsim("eval " + kQuick + " --checkpoint " + (kRoot / "bad.flra").string());
  EXPECT_EQ(r.status, 3);
  EXPECT_NE(r.err.find("bad magic"), std::string::npos) << r.err;
  EXPECT_EQ(fedsim("inspect-checkpoint " + (kRoot / "bad.flra").string()).status, 3);
}

TEST_F(Cli, FingerprintMismatchIsCheckpointError) {
  // a different seed draws a different frozen base
  const auto r = fedsim("eval " + kQuick + " --seed 8 --checkpoint " + run("checkpoint.flra").string());
  EXPECT_EQ(r.status, 3);
  EXPECT_NE(r.err.find("fingerprint"), std::string::npos) << r.err;
}

TEST_F(Cli, InspectListsAdapters) {
  const auto r = fedsim("inspect-checkpoint " + run("checkpoint.flra").string());
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.out.find("FLRA v1"), std::string::npos);
  EXPECT_NE(r.out.find(std::to_string(LoraStateDict::load(run("checkpoint.flra")).numel())), std::string::npos);
}

TEST_F(Cli, SynthWritesClassFolders) {
  std::size_t pngs = 0;
  for (const auto& e : fs::recursive_directory_iterator(kRoot / "synth")) pngs += e.path().extension() == ".png";
  EXPECT_EQ(pngs, 14u);
  EXPECT_TRUE(fs::exists(kRoot / "synth" / "manifest.json"));
}

TEST_F(Cli, GradcamWritesDeterministicOverlay) {
  const std::string base = "gradcam " + kQuick + " --seed 7 --checkpoint " + run("checkpoint.flra").string() +
                           " --image " + sample_image() + " --class 3 --out ";
  ASSERT_EQ(fedsim(base + (kRoot / "a.png").string()).status, 0);
  ASSERT_EQ(fedsim(base + (kRoot / "b.png").string()).status, 0);
  EXPECT_EQ(slurp(kRoot / "a.png"), slurp(kRoot / "b.png"));
  // golden digest, generated once from this seed, checkpoint and image
  EXPECT_EQ(to_hex(sha256(slurp(kRoot / "a.png"))), kGoldenOverlay);
  EXPECT_EQ(load_image(kRoot / "a.png").shape(), (Shape{3, 32, 32}));
  EXPECT_EQ(fedsim(base + (kRoot / "lwa.png").string() + " --layer -1").status, 0);
}

TEST_F(Cli, GradcamRejectsBadClass) {
  const auto r = fedsim("gradcam " + kQuick + " --seed 7 --checkpoint " + run("checkpoint.flra").string() +
                        " --image " + sample_image() + " --class 7 --out " + (kRoot / "c.png").string());
  EXPECT_EQ(r.status, 2);
  EXPECT_FALSE(fs::exists(kRoot / "c.png"));
}
