#include "muse/checkpoint.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

namespace muse {
namespace {

std::filesystem::path temp(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

DenoiserConfig small_denoiser() {
  DenoiserConfig c;
  c.channels0 = 4;
  c.channels1 = 6;
  c.channels2 = 8;
  c.token_dim = 8;
  c.attn_dim = 4;
  c.time_dim = 16;
  return c;
}

TrainReport report() {
  TrainReport r;
  r.epoch_loss = {0.5, 0.25};
  r.heldout_metric = 0.125;
  r.dataset_hash = 42;
  r.seed = 7;
  return r;
}

TEST(Checkpoint, DenoiserRoundTripIsExact) {
  const auto path = temp("muse_ckpt_den.bin");
  const auto m = Denoiser<float>::init(small_denoiser(), 3);
  save_denoiser(path, m, report());
  const auto back = load_denoiser(path);
  EXPECT_EQ(back.config, m.config);
  ASSERT_EQ(back.params.size(), m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    EXPECT_EQ(back.params.name(i), m.params.name(i));
    EXPECT_EQ(back.params.value(i), m.params.value(i));
  }
  const auto meta = read_checkpoint(path).meta;
  EXPECT_EQ(meta.at("kind"), "denoiser");
  EXPECT_EQ(meta.at("train").at("dataset_hash"), 42u);
  EXPECT_EQ(meta.at("train").at("seed"), 7u);
  EXPECT_DOUBLE_EQ(meta.at("schedule").at("beta_end").get<double>(), 0.02);
  std::filesystem::remove(path);
}

TEST(Checkpoint, ClassifierAndEmbedderRoundTrip) {
  const auto cpath = temp("muse_ckpt_cls.bin");
  const auto epath = temp("muse_ckpt_emb.bin");
  const auto c = EmotionClassifier<float>::init(ClassifierArch::agnostic, 4);
  save_classifier(cpath, c, report());
  const auto cb = load_classifier(cpath);
  EXPECT_EQ(cb.arch, ClassifierArch::agnostic);
  const MatF x = MatF::Random(kImagePixels, 3);
  EXPECT_EQ(cb.probabilities(x), c.probabilities(x));

  const auto e = JointEmbedder<float>::init({}, 5);
  save_embedder(epath, e, report());
  const auto eb = load_embedder(epath);
  EXPECT_EQ(eb.embed_image(x), e.embed_image(x));
  EXPECT_THROW(load_classifier(epath), CheckpointError);
  std::filesystem::remove(cpath);
  std::filesystem::remove(epath);
}

TEST(Checkpoint, RejectsUnknownVersionAndGarbage) {
  const auto path = temp("muse_ckpt_bad.bin");
  save_classifier(path, EmotionClassifier<float>::init(ClassifierArch::guide, 1), report());
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    const std::uint32_t v = kCheckpointVersion + 1;
    f.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  EXPECT_THROW(read_checkpoint(path), CheckpointError);
  std::ofstream(path, std::ios::binary) << "not a checkpoint";
  EXPECT_THROW(read_checkpoint(path), CheckpointError);
  EXPECT_THROW(read_checkpoint(temp("muse_ckpt_missing.bin")), CheckpointError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncationIsDetected) {
  const auto path = temp("muse_ckpt_trunc.bin");
  save_classifier(path, EmotionClassifier<float>::init(ClassifierArch::guide, 1), report());
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 10);
  EXPECT_THROW(read_checkpoint(path), CheckpointError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, BytesAreDeterministic) {
  const auto a = temp("muse_ckpt_a.bin"), b = temp("muse_ckpt_b.bin");
  save_denoiser(a, Denoiser<float>::init(small_denoiser(), 9), report());
  save_denoiser(b, Denoiser<float>::init(small_denoiser(), 9), report());
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  EXPECT_EQ(sa, sb);
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

}  // namespace
}  // namespace muse
