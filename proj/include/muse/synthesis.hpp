#pragma once

// The guidance loop: semantic gating decides when emotional tokens enter the
// condition, the inner loop optimizes them against a frozen classifier, and
// the multi-emotion loss decides which emotions are pushed and suppressed.

#include "muse/diffusion.hpp"
#include "muse/emotion.hpp"
#include "muse/models.hpp"

#include "json.hpp"

#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <vector>

namespace muse {

// Which counter drives lr = lr0 * (1 - t/100): the inner iteration or the
// outer (strided) diffusion step.
enum class LrSchedule { inner, timestep };

struct GuidanceConfig {
  double eta = std::numeric_limits<double>::infinity();
  double omega = 3.0;
  double lambda1 = 0.0005;
  double lambda2 = 0.0015;
  double loss_stop = 1e-4;
  int max_inner = 100;
  double lr0 = 0.01;
  double tau = 0.07;
  int rollout_stride = 10;
  int steps = 50;
  bool reoptimize_each_step = true;
  LrSchedule lr_schedule = LrSchedule::inner;

  void validate() const;
};

struct GuidanceModels {
  const Denoiser<float>* denoiser = nullptr;
  const EmotionClassifier<float>* classifier = nullptr;  // guidance classifier
  const JointEmbedder<float>* embedder = nullptr;
  const EmotionWheel* wheel = nullptr;
};

struct EmotionalTokens {
  MatF S;  // k x D
  MatF m, v;
  int iteration = 0;

  static EmotionalTokens init(int k, int dim, double stddev, std::mt19937_64& rng);
  void adam_step(const MatF& grad, double lr);
};

struct EmoLoss {
  double emo = 0, target = 0, inh = 0, sim = 0;
};

inline constexpr double kProbabilityFloor = 1e-6;

// Multi-emotion loss on an 8-way probability vector. `inherent` is nullopt
// when the term is disabled.
EmoLoss emo_loss(const Eigen::Ref<const Eigen::VectorXd>& probs, Emotion target, std::optional<Emotion> inherent,
                 const std::vector<Emotion>& similar, double lambda1, double lambda2);

// Suppression targets for a run, after the conflict rule.
struct EmoTerms {
  Emotion target = Emotion::amusement;
  std::optional<Emotion> inherent;
  std::vector<Emotion> similar;
  double lambda1 = 0, lambda2 = 0;

  static EmoTerms resolve(Emotion target, std::optional<Emotion> inherent, const EmotionWheel& wheel,
                          double lambda1, double lambda2);
};

// Learning rate at counter i, floored at zero.
double inner_lr(double lr0, int i);

// L_emo(S) for one outer state: S -> predict_noise -> predict_clean ->
// classifier -> loss. Templated so the gradient can be checked in double.
template <typename Scalar>
struct TokenObjective {
  const Denoiser<Scalar>* denoiser = nullptr;
  const EmotionClassifier<Scalar>* classifier = nullptr;
  Mat<Scalar> prompt;  // prompt_len x D
  Mat<Scalar> z;
  int model_t = 1;
  double alpha_bar = 1.0;
  EmoTerms terms;

  struct Result {
    EmoLoss loss;
    Eigen::VectorXd probs;
    Mat<Scalar> grad;  // dL_emo/dS, empty unless requested
  };

  Result operator()(const Mat<Scalar>& S, bool with_grad) const;
};

struct InnerRecord {
  EmoLoss loss;
  std::vector<double> probs;
};

struct StepRecord {
  int step = 0;     // outer index, 0-based
  int t = 0;        // strided timestep
  int model_t = 0;  // training timestep
  double s_clip = 0;
  bool gate = false;
  int inner_iterations = 0;
  EmoLoss loss;
  std::vector<double> probs;  // guidance classifier on the step's clean estimate
  std::vector<InnerRecord> inner;
  std::optional<Emotion> y_inh;
};

struct SynthesisTrace {
  std::vector<StepRecord> steps;
  std::optional<Emotion> y_inh;
  int inherent_captures = 0;

  nlohmann::json step_json(const StepRecord& r) const;
  void write_jsonl(const std::filesystem::path& path) const;
  static SynthesisTrace read_jsonl(const std::filesystem::path& path);
};

// A run that failed part-way; carries the trace up to the failing step.
class SynthesisAborted : public Error {
 public:
  SynthesisAborted(const std::string& what, SynthesisTrace partial) : Error(what), partial(std::move(partial)) {}
  SynthesisTrace partial;
};

struct SynthesisResult {
  MatF image;  // pixel space, 1024 x 3 in [0, 1]
  MatF z0;     // final latent (model space)
  SynthesisTrace trace;
};

NoiseSchedule inference_schedule(const Denoiser<float>& denoiser, int steps);

MatF gaussian_latent(std::mt19937_64& rng);

// cos(E_I(D(rollout(z_t))), E_T(P)) / tau with the rollout strided by
// `stride` among the remaining steps under the given condition tail.
double semantic_similarity(const MatF& z, int t, const MatF& prompt_tokens, const MatF& tail,
                           const PromptTokens& prompt, const GuidanceModels& models, const NoiseSchedule& sched,
                           const GuidanceConfig& config);

// Gate rule: latches once s_clip >= eta.
bool gate(double s_clip, double eta, bool already_open);

// argmax of the classifier on the clean estimate of z_prev.
Emotion capture_inherent(SynthesisTrace& trace, const EmotionClassifier<float>& classifier, const MatF& z_prev,
                         const MatF& eps_prev, int t_prev, const NoiseSchedule& sched);

struct InnerOutcome {
  int iterations = 0;
  EmoLoss loss;
  std::vector<double> probs;
  std::vector<InnerRecord> history;
};

InnerOutcome optimize_tokens(EmotionalTokens& tokens, const TokenObjective<float>& objective,
                             const GuidanceConfig& config, int outer_t);

// CFG noise estimate: eps_c under prompt+tail, eps_u under null+void, batched.
MatF guided_eps(const Denoiser<float>& denoiser, const MatF& z, int model_t, const MatF& prompt_tokens,
                const MatF& tail, double omega);

SynthesisResult synthesize(const MatF& z_T, const PromptTokens& prompt, Emotion target, const GuidanceModels& models,
                           const GuidanceConfig& config, std::mt19937_64& rng);

// Gaussian z_T; without a prompt the "an image of <emotion>" template is used.
SynthesisResult generate(const std::optional<PromptTokens>& prompt, Emotion target, const GuidanceModels& models,
                         const GuidanceConfig& config, std::uint64_t seed);

MatF invert(const MatF& image, const PromptTokens& prompt, const Denoiser<float>& denoiser, int steps);

SynthesisResult edit(const MatF& image, const PromptTokens& prompt, Emotion target, const GuidanceModels& models,
                     const GuidanceConfig& config, std::uint64_t seed);

// Plain CFG DDIM sampling; the reference for gate-closed equivalence.
MatF sample_vanilla(const MatF& z_T, const PromptTokens& prompt, const Denoiser<float>& denoiser,
                    const GuidanceConfig& config);
MatF generate_vanilla(const std::optional<PromptTokens>& prompt, Emotion target, const Denoiser<float>& denoiser,
                      const GuidanceConfig& config, std::uint64_t seed);

// Classifier-guidance baseline on top of CFG.
MatF sample_classifier_guidance(const MatF& z_T, const PromptTokens& prompt, Emotion target,
                                const Denoiser<float>& denoiser, const EmotionClassifier<float>& classifier,
                                const GuidanceConfig& config, double cg_scale);

// s_clip values along vanilla trajectories.
std::vector<double> vanilla_similarity_trajectory(const MatF& z_T, const PromptTokens& prompt,
                                                  const GuidanceModels& models, const GuidanceConfig& config);

double percentile(std::vector<double> values, double pct);

// eta at the given percentile of s_clip over vanilla runs for the prompts.
double calibrate_eta(const std::vector<PromptTokens>& prompts, const GuidanceModels& models,
                     const GuidanceConfig& config, double pct, std::uint64_t seed);

PromptTokens template_prompt(Emotion e);

}  // namespace muse
