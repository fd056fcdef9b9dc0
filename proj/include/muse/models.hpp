#pragma once

// Desk-scale trainable networks: the conditional noise predictor, the two
// emotion classifier architectures, and the joint image/prompt embedder that
// stands in for CLIP. All are templated on the scalar; training runs in float
// and the double instantiation exists for gradient checks.

#include "muse/diffusion.hpp"
#include "muse/glyph.hpp"
#include "muse/nn.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace muse {

// ---------------------------------------------------------------------------
// Conditioning.

enum class TokenOrigin { prompt, emotional, placeholder };

// Token sequence fed to the denoiser: prompt-derived rows followed by exactly
// one trailing block that is either the learned void placeholder or the
// emotional tokens S.
template <typename Scalar>
struct ConditionEmbedding {
  Mat<Scalar> prompt;  // prompt_len x D
  Mat<Scalar> tail;    // k x D
  bool tail_is_emotional = false;

  Eigen::Index length() const { return prompt.rows() + tail.rows(); }
  Mat<Scalar> tokens() const {
    Mat<Scalar> out(length(), prompt.cols());
    out << prompt, tail;
    return out;
  }
  std::vector<TokenOrigin> origins() const {
    std::vector<TokenOrigin> o(static_cast<std::size_t>(prompt.rows()), TokenOrigin::prompt);
    o.insert(o.end(), static_cast<std::size_t>(tail.rows()),
             tail_is_emotional ? TokenOrigin::emotional : TokenOrigin::placeholder);
    return o;
  }
};

// ---------------------------------------------------------------------------
// Denoiser.

struct DenoiserConfig {
  int channels0 = 16;
  int channels1 = 32;
  int channels2 = 64;
  int token_dim = 64;
  int attn_dim = 32;
  int time_dim = 128;
  int prompt_len = 10;
  int emotion_tokens = 4;  // k
  int train_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  bool operator==(const DenoiserConfig&) const = default;
};

template <typename Scalar>
class Denoiser {
 public:
  using M = Mat<Scalar>;

  DenoiserConfig config;
  ParamStore<Scalar> params;

  static Denoiser init(const DenoiserConfig& config, std::uint64_t seed);

  template <typename To>
  Denoiser<To> cast() const {
    Denoiser<To> out;
    out.config = config;
    out.params = params.template cast<To>();
    return out;
  }

  NoiseSchedule schedule() const {
    return make_linear_schedule(config.train_steps, config.beta_start, config.beta_end);
  }

  // Pads/validates prompt ids to prompt_len.
  std::vector<int> padded_ids(const PromptTokens& tokens) const;

  M encode_prompt(const PromptTokens& tokens) const;
  // Null condition: every prompt slot holds the null token.
  M encode_null() const;
  M void_block() const { return params.get("void"); }

  ConditionEmbedding<Scalar> condition(const PromptTokens& tokens) const {
    return {encode_prompt(tokens), void_block(), false};
  }
  ConditionEmbedding<Scalar> null_condition() const { return {encode_null(), void_block(), false}; }

  // Graph construction. x is (B*1024) x 3, cond is (B*L) x D.
  ad::Var forward(Binder<Scalar>& p, ad::Var x, const std::vector<int>& model_timesteps, ad::Var cond) const;
  // Prompt encoder as a graph (used in training so embeddings learn).
  ad::Var encode_graph(Binder<Scalar>& p, const std::vector<int>& padded_ids_batch) const;

  // No-grad batched prediction.
  M predict(const M& z, const std::vector<int>& model_timesteps, const M& cond_tokens) const;
  M predict(const M& z, int model_timestep, const ConditionEmbedding<Scalar>& cond) const {
    return predict(z, std::vector<int>{model_timestep}, cond.tokens());
  }

  Eigen::Index parameter_count() const { return params.parameter_count(); }
};

// ---------------------------------------------------------------------------
// Emotion classifier.

enum class ClassifierArch { guide, agnostic };

std::string arch_name(ClassifierArch a);
ClassifierArch arch_from_name(const std::string& s);

template <typename Scalar>
class EmotionClassifier {
 public:
  using M = Mat<Scalar>;

  ClassifierArch arch = ClassifierArch::guide;
  ParamStore<Scalar> params;

  static EmotionClassifier init(ClassifierArch arch, std::uint64_t seed);

  template <typename To>
  EmotionClassifier<To> cast() const {
    EmotionClassifier<To> out;
    out.arch = arch;
    out.params = params.template cast<To>();
    return out;
  }

  // x: (B*1024) x 3 in model space; returns B x 8 logits.
  ad::Var logits(Binder<Scalar>& p, ad::Var x) const;
  // B x 8 probabilities.
  M probabilities(const M& x) const;
  int predict(const M& image) const;

  Eigen::Index parameter_count() const { return params.parameter_count(); }
};

// ---------------------------------------------------------------------------
// Joint embedder.

struct EmbedderConfig {
  int embed_dim = 64;
  int word_dim = 32;
  double temperature = 0.07;
};

template <typename Scalar>
class JointEmbedder {
 public:
  using M = Mat<Scalar>;

  EmbedderConfig config;
  ParamStore<Scalar> params;

  static JointEmbedder init(const EmbedderConfig& config, std::uint64_t seed);

  // (B*1024) x 3 -> B x D unit rows.
  ad::Var image_graph(Binder<Scalar>& p, ad::Var x) const;
  ad::Var text_graph(Binder<Scalar>& p, const std::vector<PromptTokens>& prompts) const;

  M embed_images(const M& x) const;
  M embed_texts(const std::vector<PromptTokens>& prompts) const;
  Vec<Scalar> embed_image(const M& image) const { return embed_images(image).row(0).transpose(); }
  Vec<Scalar> embed_text(const PromptTokens& prompt) const {
    return embed_texts({prompt}).row(0).transpose();
  }
};

// ---------------------------------------------------------------------------
// Training (float only).

struct DenoiserTrainConfig {
  int epochs = 30;
  int batch = 32;
  double lr = 1e-3;
  double dropout = 0.1;
  double ema_decay = 0.999;
  int heldout_samples = 256;
  std::optional<double> loss_ceiling;  // held-out MSE must fall below this
  bool verbose = false;
};

struct ClassifierTrainConfig {
  int epochs = 6;
  int batch = 64;
  double lr = 2e-3;
  double noise_augment = 0.1;
  double accuracy_floor = 0.9;
  bool verbose = false;
};

struct EmbedderTrainConfig {
  int epochs = 8;
  int batch = 64;
  double lr = 2e-3;
  double retrieval_floor = 0.8;
  bool verbose = false;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  double heldout_metric = 0.0;  // MSE, accuracy or retrieval depending on model
  std::uint64_t dataset_hash = 0;
  std::uint64_t seed = 0;
};

template <typename Model>
struct Trained {
  Model model;
  TrainReport report;
};

// Held-out epsilon-prediction MSE on a deterministic (x0, t, eps) draw.
double denoiser_heldout_mse(const Denoiser<float>& model, const GlyphDataset& heldout, int samples,
                            std::uint64_t seed);

Trained<Denoiser<float>> train_denoiser(const GlyphDataset& train, const GlyphDataset& heldout,
                                        const DenoiserConfig& arch, const DenoiserTrainConfig& config,
                                        std::uint64_t seed);

double classifier_accuracy(const EmotionClassifier<float>& model, const GlyphDataset& data);

Trained<EmotionClassifier<float>> train_classifier(const GlyphDataset& train, const GlyphDataset& heldout,
                                                   ClassifierArch arch, const ClassifierTrainConfig& config,
                                                   std::uint64_t seed);

// Top-1 prompt retrieval over consecutive batches of `batch` held-out pairs; a
// retrieval counts as correct when the retrieved prompt text equals the
// image's own prompt.
double embedder_retrieval(const JointEmbedder<float>& model, const GlyphDataset& data, int batch = 64);

Trained<JointEmbedder<float>> train_embedder(const GlyphDataset& train, const GlyphDataset& heldout,
                                             const EmbedderConfig& arch, const EmbedderTrainConfig& config,
                                             std::uint64_t seed);

// Stacks model-space images into one (B*1024) x 3 batch.
MatF stack_images(const std::vector<const MatF*>& images);

// Sinusoidal timestep features, B x dim.
template <typename Scalar>
Mat<Scalar> timestep_features(const std::vector<int>& timesteps, int dim, int max_t);

}  // namespace muse
