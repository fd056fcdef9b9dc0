#include "muse/checkpoint.hpp"
#include "muse/png_io.hpp"
#include "muse/run_config.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace muse {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(RunConfig, RoundTripsThroughJson) {
  RunConfig c;
  c.seed = 42;
  c.guidance.eta = -std::numeric_limits<double>::infinity();
  c.guidance.lr_schedule = LrSchedule::timestep;
  c.train.denoiser.loss_ceiling = 0.05;
  c.eval.eta_grid = {-std::numeric_limits<double>::infinity(), 1.5, std::numeric_limits<double>::infinity()};
  const auto back = RunConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_TRUE(std::isinf(back.guidance.eta) && back.guidance.eta < 0);
  EXPECT_EQ(back.train.denoiser.loss_ceiling, 0.05);
  EXPECT_NE(RunConfig{}.hash(), c.hash());
}

TEST(RunConfig, PartialFilesTakeDefaults) {
  const auto c = RunConfig::from_json({{"version", 1}, {"guidance", {{"omega", 2.0}}}});
  EXPECT_EQ(c.guidance.omega, 2.0);
  EXPECT_EQ(c.guidance.lambda1, 0.0005);
  EXPECT_FALSE(c.train.denoiser.loss_ceiling.has_value());
}

TEST(RunConfig, RejectsUnknownKeysAndVersions) {
  EXPECT_THROW(RunConfig::from_json({{"version", 1}, {"gudance", {{"omega", 2.0}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"version", 1}, {"guidance", {{"omegaa", 2.0}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"version", 2}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"seed", 1}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"version", 1}, {"image_size", 64}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"version", 1}, {"guidance", {{"max_inner", 101}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"version", 1}, {"guidance", {{"eta", "big"}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"version", 1}, {"guidance", {{"omega", "2"}}}}), ConfigError);
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "muse_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_ / "models");
    DenoiserConfig d;
    d.channels0 = 4;
    d.channels1 = 6;
    d.channels2 = 8;
    d.token_dim = 8;
    d.attn_dim = 4;
    d.time_dim = 16;
    save_denoiser(dir_ / "models/denoiser.ckpt", Denoiser<float>::init(d, 1), {});
    save_classifier(dir_ / "models/classifier_guide.ckpt", EmotionClassifier<float>::init(ClassifierArch::guide, 2), {});
    save_classifier(dir_ / "models/classifier_agnostic.ckpt",
                    EmotionClassifier<float>::init(ClassifierArch::agnostic, 3), {});
    EmbedderConfig e;
    e.embed_dim = 8;
    e.word_dim = 8;
    save_embedder(dir_ / "models/embedder.ckpt", JointEmbedder<float>::init(e, 4), {});
    std::ofstream(dir_ / "fast.json") << R"({"version": 1, "guidance": {"steps": 4, "rollout_stride": 2, "max_inner": 2},
      "eval": {"prompts": 2, "seeds": 1, "ablation_seeds": 1}})";
  }

  static int muse(const std::string& args, const std::string& tag = "run") {
    const auto err = dir_ / (tag + ".stderr");
    const std::string cmd = std::string(MUSE_CLI) + " " + args + " > " + (dir_ / (tag + ".stdout")).string() + " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  static std::string common() { return "--models " + (dir_ / "models").string() + " --config " + (dir_ / "fast.json").string(); }

  static inline fs::path dir_;
};

TEST_F(Cli, UsageErrorsExitOneWithJsonLine) {
  EXPECT_EQ(muse("", "none"), 1);
  EXPECT_EQ(muse("gen " + common() + " --emotion joy --emotion-only --out " + (dir_ / "x.png").string(), "emo"), 1);
  EXPECT_NE(slurp(dir_ / "emo.stderr").find(R"({"error":"usage")"), std::string::npos);
  EXPECT_EQ(muse("gen " + common() + " --emotion fear --out " + (dir_ / "x.png").string(), "noprompt"), 1);
  EXPECT_EQ(muse("gen " + common() + " --emotion fear --prompt \"a zebra\" --out " + (dir_ / "x.png").string(), "oov"), 1);
  std::ofstream(dir_ / "bad.json") << R"({"version": 1, "typo": 3})";
  EXPECT_EQ(muse("gen --config " + (dir_ / "bad.json").string() + " --emotion fear --emotion-only --out x.png", "cfg"), 1);
  EXPECT_NE(slurp(dir_ / "cfg.stderr").find("typo"), std::string::npos);
}

TEST_F(Cli, RuntimeFailureExitsTwo) {
  EXPECT_EQ(muse("gen --models " + (dir_ / "missing").string() + " --emotion fear --emotion-only --out " +
                     (dir_ / "x.png").string(),
                 "missing"),
            2);
  EXPECT_NE(slurp(dir_ / "missing.stderr").find(R"({"error":"runtime")"), std::string::npos);
}

TEST_F(Cli, GenIsDeterministicAndWritesResolvedConfig) {
  const auto a = dir_ / "gen/a.png", b = dir_ / "gen/b.png";
  ASSERT_EQ(muse("gen " + common() + " --emotion-only --emotion fear --seed 7 --eta -inf --out " + a.string()), 0);
  ASSERT_EQ(muse("gen " + common() + " --emotion-only --emotion fear --seed 7 --eta -inf --out " + b.string()), 0);
  EXPECT_TRUE(slurp(a) == slurp(b));
  EXPECT_TRUE(slurp(dir_ / "gen/a.trace.jsonl") == slurp(dir_ / "gen/b.trace.jsonl"));
  const auto resolved = RunConfig::load(dir_ / "gen/a.config.json");
  EXPECT_EQ(resolved.seed, 7u);
  EXPECT_EQ(resolved.guidance.steps, 4);
  EXPECT_TRUE(std::isinf(resolved.guidance.eta));
}

TEST_F(Cli, ClosedGateMatchesVanillaSampler) {
  const auto g = dir_ / "closed/muse.png", v = dir_ / "closed/vanilla.png";
  ASSERT_EQ(muse("gen " + common() + " --prompt \"a star on dark background\" --emotion awe --eta inf --seed 3 --out " +
                 g.string()),
            0);
  ASSERT_EQ(muse("gen " + common() + " --prompt \"a star on dark background\" --emotion awe --sampler vanilla --seed 3 --out " +
                 v.string()),
            0);
  EXPECT_TRUE(slurp(g) == slurp(v));
}

TEST_F(Cli, DataGenSetAndEval) {
  const auto data = dir_ / "data";
  ASSERT_EQ(muse("data gen --n 16 --rho 0.8 --seed 5 --out " + data.string()), 0);
  EXPECT_EQ(load_dataset(data).samples.size(), 16u);
  ASSERT_EQ(muse("gen-set " + common() + " --condition vanilla --n 2 --out " + (dir_ / "vanilla").string()), 0);
  ASSERT_EQ(muse("eval " + common() + " --set " + (dir_ / "vanilla").string() + " --ref " + data.string() + " --out " +
                 (dir_ / "eval.csv").string()),
            0);
  std::ifstream in(dir_ / "eval.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(row.rfind("vanilla,16,", 0), 0u) << row;
  EXPECT_TRUE(fs::exists(dir_ / "eval.config.json"));
}

TEST_F(Cli, EditWritesImageAndTrace) {
  const auto data = generate_dataset(8, 0.8, 6);
  const auto src = dir_ / "edit/src.png";
  fs::create_directories(src.parent_path());
  write_png(src, data.samples[0].image, kImageSize, kImageSize);
  ASSERT_EQ(muse("edit " + common() + " --image " + src.string() + " --prompt \"" + data.samples[0].prompt +
                 "\" --emotion fear --out " + (dir_ / "edit/out.png").string()),
            0);
  EXPECT_TRUE(fs::exists(dir_ / "edit/out.png"));
  EXPECT_FALSE(SynthesisTrace::read_jsonl(dir_ / "edit/out.trace.jsonl").steps.empty());
}

}  // namespace
}  // namespace muse
