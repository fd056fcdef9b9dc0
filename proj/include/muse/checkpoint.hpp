#pragma once

// Single-file model archives: magic, format version, a JSON metadata header,
// then named float tensors.

#include "muse/models.hpp"

#include "json.hpp"

#include <filesystem>

namespace muse {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  using Error::Error;
};

struct Checkpoint {
  nlohmann::json meta;  // always carries "kind"
  ParamStore<float> params;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

nlohmann::json report_json(const TrainReport& report);

void save_denoiser(const std::filesystem::path& path, const Denoiser<float>& model, const TrainReport& report);
void save_classifier(const std::filesystem::path& path, const EmotionClassifier<float>& model,
                     const TrainReport& report);
void save_embedder(const std::filesystem::path& path, const JointEmbedder<float>& model, const TrainReport& report);

Denoiser<float> load_denoiser(const std::filesystem::path& path);
EmotionClassifier<float> load_classifier(const std::filesystem::path& path);
JointEmbedder<float> load_embedder(const std::filesystem::path& path);

}  // namespace muse
