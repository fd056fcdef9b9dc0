#pragma once

// Metrics over generated sets, the eta sweep and the loss-term ablation, plus
// CSV and PNG report writers.

#include "muse/synthesis.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace muse {

// Images are pixel-space (1024 x 3 in [0, 1]) throughout this module.

double emotion_accuracy(const std::vector<MatF>& images, const std::vector<Emotion>& targets,
                        const EmotionClassifier<float>& classifier);

std::vector<int> classify_all(const std::vector<MatF>& images, const EmotionClassifier<float>& classifier);

// One row per image.
MatD image_features(const std::vector<MatF>& images, const JointEmbedder<float>& embedder);

struct FrechetOptions {
  // Covariances are shrunk toward (tr C / d) I by this weight when a set has
  // no more samples than dimensions; with allow_shrinkage off that case throws.
  bool allow_shrinkage = true;
  double shrinkage = 0.1;
};

// ||mu_a - mu_b||^2 + tr(Ca + Cb - 2 (Ca^1/2 Cb Ca^1/2)^1/2); rows are samples.
double frechet_distance(const MatD& a, const MatD& b, const FrechetOptions& options = {});

// Mean cosine between each image and its prompt (no temperature).
double semantic_score(const std::vector<MatF>& images, const std::vector<PromptTokens>& prompts,
                      const JointEmbedder<float>& embedder);

// Mean over classes of the mean squared distance of unit features to the class
// centroid.
double intra_class_variance(const std::vector<MatF>& images, const std::vector<Emotion>& labels,
                            const JointEmbedder<float>& embedder);

// Spearman rank correlation with average ranks for ties; 0 when either side is
// constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct EvalModels {
  GuidanceModels guidance;
  const EmotionClassifier<float>* agnostic = nullptr;
  const EmotionClassifier<float>* reduced = nullptr;  // optional
};

struct EvalRow {
  std::string condition;
  int n = 0;
  double acc_guide = 0, acc_agnostic = 0, acc_reduced = -1;  // -1: no reduced classifier
  double fd = 0;
  double semantic = 0;
  double intra_class_var = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::string config_hash;

  void write_csv(const std::filesystem::path& path) const;
};

// Metrics of one set of outputs against a reference feature set.
EvalRow evaluate_set(const std::string& condition, const std::vector<MatF>& images,
                     const std::vector<Emotion>& targets, const std::vector<PromptTokens>& prompts,
                     const MatD& reference_features, const EvalModels& models);

struct GenerationJob {
  std::optional<PromptTokens> prompt;  // nullopt: emotion-only template
  Emotion target = Emotion::amusement;
  std::uint64_t seed = 0;

  PromptTokens resolved_prompt() const { return prompt ? *prompt : template_prompt(target); }
};

// Emotion-free prompts of n fresh glyph draws (n rounded up to a multiple of
// eight for the draw, then truncated).
std::vector<PromptTokens> neutral_prompts(int n, std::uint64_t seed);

// Neutral-prompt jobs: every (prompt, seed) pair is run for all eight targets.
std::vector<GenerationJob> all_target_jobs(const std::vector<PromptTokens>& prompts, int seeds,
                                           std::uint64_t base_seed);

struct GuidedOutputs {
  std::vector<MatF> images;
  std::vector<SynthesisTrace> traces;
};

GuidedOutputs run_guided(const std::vector<GenerationJob>& jobs, const GuidanceModels& models,
                         const GuidanceConfig& config);
std::vector<MatF> run_vanilla(const std::vector<GenerationJob>& jobs, const Denoiser<float>& denoiser,
                              const GuidanceConfig& config);

std::vector<Emotion> job_targets(const std::vector<GenerationJob>& jobs);
std::vector<PromptTokens> job_prompts(const std::vector<GenerationJob>& jobs);

struct EtaSweep {
  std::vector<double> etas;
  EvalReport report;  // one row per eta, in grid order
  double rho_accuracy = 0;
  double rho_semantic = 0;

  void write_csv(const std::filesystem::path& path) const;
};

// Accuracy for the trend statistic uses the agnostic classifier.
EtaSweep sweep_eta(const std::vector<double>& etas, const std::vector<GenerationJob>& jobs,
                   const MatD& reference_features, const EvalModels& models, const GuidanceConfig& config,
                   const std::string& config_hash);

struct AblationRow {
  std::string name;
  int n = 0;
  double acc_guide = 0, acc_agnostic = 0;
  // Fraction of outputs classified as a wheel neighbour of the target.
  double confusion_rate = 0;
  // Among runs whose captured inherent emotion differs from the target, the
  // fraction classified as that inherent emotion.
  double inherent_capture_rate = 0;
  int inherent_runs = 0;
};

struct AblationReport {
  std::vector<AblationRow> rows;  // target-only, +L_sim, +L_inh, full
  std::string config_hash;

  const AblationRow& row(const std::string& name) const;
  void write_csv(const std::filesystem::path& path) const;
};

// Rates are measured with the agnostic classifier; the guide accuracy is
// reported alongside.
AblationReport ablate_losses(const std::vector<GenerationJob>& jobs, const EvalModels& models,
                             const GuidanceConfig& config, const std::string& config_hash);

AblationRow ablation_row(const std::string& name, const GuidedOutputs& out, const std::vector<GenerationJob>& jobs,
                         const EvalModels& models);

// Class probabilities over cumulative inner iterations.
void plot_inner_probabilities(const SynthesisTrace& trace, const std::filesystem::path& path);
// Accuracy (agnostic, guide) and normalized semantic score against grid index.
void plot_eta_sweep(const EtaSweep& sweep, const std::filesystem::path& path);

}  // namespace muse
