#include "muse/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

namespace muse {

namespace {

constexpr std::array<char, 8> kMagic = {'M', 'U', 'S', 'E', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError("truncated checkpoint " + path.string());
  return v;
}

std::string get_string(std::istream& is, std::size_t n, const std::filesystem::path& path) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) {
    throw CheckpointError("truncated checkpoint " + path.string());
  }
  return s;
}

// Copies every tensor of `src` into `dst`, which must have the same names and
// shapes (i.e. come from the same architecture).
void restore(ParamStore<float>& dst, const ParamStore<float>& src, const std::filesystem::path& path) {
  if (dst.size() != src.size()) {
    throw CheckpointError(path.string() + ": expected " + std::to_string(dst.size()) + " tensors, found " +
                          std::to_string(src.size()));
  }
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (!dst.contains(src.name(i))) throw CheckpointError(path.string() + ": unexpected tensor " + src.name(i));
    auto& v = dst.get(src.name(i));
    if (v.rows() != src.value(i).rows() || v.cols() != src.value(i).cols()) {
      throw CheckpointError(path.string() + ": shape mismatch for " + src.name(i));
    }
    v = src.value(i);
  }
}

Checkpoint read_kind(const std::filesystem::path& path, const std::string& kind) {
  Checkpoint c = read_checkpoint(path);
  if (c.meta.value("kind", "") != kind) {
    throw CheckpointError(path.string() + " holds a " + c.meta.value("kind", "?") + ", not a " + kind);
  }
  return c;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write " + path.string());
  os.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(os, kCheckpointVersion);
  const std::string header = ckpt.meta.dump();
  put<std::uint64_t>(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.params.size()));
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    const auto& name = ckpt.params.name(i);
    const auto& v = ckpt.params.value(i);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(v.rows()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(v.cols()));
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  }
  if (!os) throw CheckpointError("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) {
    throw CheckpointError(path.string() + " is not a checkpoint");
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  const auto header_len = get<std::uint64_t>(is, path);
  if (header_len > (1u << 24)) throw CheckpointError(path.string() + ": header too large");
  c.meta = nlohmann::json::parse(get_string(is, header_len, path));
  const auto count = get<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = get_string(is, get<std::uint32_t>(is, path), path);
    const auto rows = get<std::uint32_t>(is, path);
    const auto cols = get<std::uint32_t>(is, path);
    MatF v(rows, cols);
    if (v.size() && !is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)))) {
      throw CheckpointError("truncated checkpoint " + path.string());
    }
    c.params.add(name, std::move(v));
  }
  return c;
}

nlohmann::json report_json(const TrainReport& r) {
  return {{"epoch_loss", r.epoch_loss},
          {"heldout_metric", r.heldout_metric},
          {"dataset_hash", r.dataset_hash},
          {"seed", r.seed}};
}

void save_denoiser(const std::filesystem::path& path, const Denoiser<float>& m, const TrainReport& report) {
  const auto& c = m.config;
  nlohmann::json meta = {{"kind", "denoiser"},
                         {"arch_id", "unet"},
                         {"config",
                          {{"channels0", c.channels0},
                           {"channels1", c.channels1},
                           {"channels2", c.channels2},
                           {"token_dim", c.token_dim},
                           {"attn_dim", c.attn_dim},
                           {"time_dim", c.time_dim},
                           {"prompt_len", c.prompt_len},
                           {"emotion_tokens", c.emotion_tokens}}},
                         {"schedule",
                          {{"train_steps", c.train_steps}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}}},
                         {"train", report_json(report)}};
  write_checkpoint(path, {meta, m.params});
}

void save_classifier(const std::filesystem::path& path, const EmotionClassifier<float>& m,
                     const TrainReport& report) {
  nlohmann::json meta = {{"kind", "classifier"}, {"arch_id", arch_name(m.arch)}, {"train", report_json(report)}};
  write_checkpoint(path, {meta, m.params});
}

void save_embedder(const std::filesystem::path& path, const JointEmbedder<float>& m, const TrainReport& report) {
  nlohmann::json meta = {{"kind", "embedder"},
                         {"arch_id", "joint"},
                         {"config",
                          {{"embed_dim", m.config.embed_dim},
                           {"word_dim", m.config.word_dim},
                           {"temperature", m.config.temperature}}},
                         {"train", report_json(report)}};
  write_checkpoint(path, {meta, m.params});
}

Denoiser<float> load_denoiser(const std::filesystem::path& path) {
  const Checkpoint c = read_kind(path, "denoiser");
  DenoiserConfig cfg;
  const auto& j = c.meta.at("config");
  cfg.channels0 = j.at("channels0");
  cfg.channels1 = j.at("channels1");
  cfg.channels2 = j.at("channels2");
  cfg.token_dim = j.at("token_dim");
  cfg.attn_dim = j.at("attn_dim");
  cfg.time_dim = j.at("time_dim");
  cfg.prompt_len = j.at("prompt_len");
  cfg.emotion_tokens = j.at("emotion_tokens");
  const auto& s = c.meta.at("schedule");
  cfg.train_steps = s.at("train_steps");
  cfg.beta_start = s.at("beta_start");
  cfg.beta_end = s.at("beta_end");
  auto m = Denoiser<float>::init(cfg, 0);
  restore(m.params, c.params, path);
  return m;
}

EmotionClassifier<float> load_classifier(const std::filesystem::path& path) {
  const Checkpoint c = read_kind(path, "classifier");
  auto m = EmotionClassifier<float>::init(arch_from_name(c.meta.at("arch_id")), 0);
  restore(m.params, c.params, path);
  return m;
}

JointEmbedder<float> load_embedder(const std::filesystem::path& path) {
  const Checkpoint c = read_kind(path, "embedder");
  EmbedderConfig cfg;
  const auto& j = c.meta.at("config");
  cfg.embed_dim = j.at("embed_dim");
  cfg.word_dim = j.at("word_dim");
  cfg.temperature = j.at("temperature");
  auto m = JointEmbedder<float>::init(cfg, 0);
  restore(m.params, c.params, path);
  return m;
}

}  // namespace muse
