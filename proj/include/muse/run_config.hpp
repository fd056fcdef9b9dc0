#pragma once

// The run configuration shared by every CLI subcommand: guidance settings,
// model and data paths, training and evaluation sizes. Stored as JSON with a
// version field; unknown keys are rejected.

#include "muse/models.hpp"
#include "muse/synthesis.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace muse {

inline constexpr int kRunConfigVersion = 1;

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct ModelPaths {
  std::string denoiser = "models/denoiser.ckpt";
  std::string classifier = "models/classifier_guide.ckpt";
  std::string agnostic = "models/classifier_agnostic.ckpt";
  std::string reduced = "models/classifier_reduced.ckpt";  // empty: not used
  std::string embedder = "models/embedder.ckpt";
  std::string wheel;  // empty: built-in ordering
};

struct TrainSettings {
  int heldout = 512;  // trailing samples of the dataset kept for validation
  double classifier_fraction = 1.0;  // leading share of the training split used
  ClassifierArch classifier_arch = ClassifierArch::guide;
  DenoiserTrainConfig denoiser;
  ClassifierTrainConfig classifier;
  EmbedderTrainConfig embedder;
};

struct EvalSettings {
  int seeds = 25;                  // per target emotion
  std::uint64_t base_seed = 1000;  // generation seeds are base_seed + i
  int prompts = 32;                // neutral prompts drawn from the held-out split
  double eta_percentile = 60;
  std::vector<double> eta_grid;    // empty: derived from calibration percentiles
  int ablation_seeds = 25;
  int edit_images = 50;
  double cg_scale = 1.0;
};

struct RunConfig {
  int version = kRunConfigVersion;
  std::uint64_t seed = 0;
  int image_size = kImageSize;
  std::string data = "data/train";
  std::string out = "out";
  ModelPaths models;
  GuidanceConfig guidance;
  DenoiserConfig denoiser;
  EmbedderConfig embedder;
  TrainSettings train;
  EvalSettings eval;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  void validate() const;
  // FNV-1a of the canonical JSON text.
  std::string hash() const;
};

// Infinite thresholds travel as the strings "inf" and "-inf".
nlohmann::json real_to_json(double v);
double real_from_json(const nlohmann::json& j);

}  // namespace muse
