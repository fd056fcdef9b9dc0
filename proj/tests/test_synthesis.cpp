#include "muse/synthesis.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

namespace muse {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Eigen::VectorXd probs(std::initializer_list<double> v) {
  Eigen::VectorXd p(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) p(i++) = x;
  return p;
}

Eigen::VectorXd one_hot(Emotion e) {
  Eigen::VectorXd p = Eigen::VectorXd::Zero(kNumEmotions);
  p(emotion_id(e)) = 1.0;
  return p;
}

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

// Untrained miniature stack; enough to exercise every code path.
struct Stack {
  Denoiser<float> denoiser = Denoiser<float>::init(small_denoiser(), 1);
  EmotionClassifier<float> classifier = EmotionClassifier<float>::init(ClassifierArch::guide, 2);
  JointEmbedder<float> embedder = JointEmbedder<float>::init({}, 3);
  EmotionWheel wheel;

  GuidanceModels models() const { return {&denoiser, &classifier, &embedder, &wheel}; }
};

GuidanceConfig fast_config() {
  GuidanceConfig c;
  c.steps = 6;
  c.rollout_stride = 3;
  c.max_inner = 4;
  return c;
}

const PromptTokens& prompt() {
  static const PromptTokens p = tokenize("a star on dark background at center");
  return p;
}

TEST(EmoLoss, OneHotTargetSaturatesSuppressionTerms) {
  const auto l = emo_loss(one_hot(Emotion::fear), Emotion::fear, Emotion::contentment,
                          {Emotion::disgust, Emotion::sadness}, 0.0005, 0.0015);
  const double clamp = -std::log(1e-6);
  EXPECT_NEAR(l.target, 0.0, 1e-12);
  EXPECT_NEAR(l.inh, clamp, 1e-9);
  EXPECT_NEAR(l.sim, clamp, 1e-9);
  EXPECT_NEAR(l.inh, 13.8155, 1e-4);
  EXPECT_NEAR(l.emo, -0.0005 * clamp - 0.0015 * clamp, 1e-9);
  EXPECT_NEAR(l.emo, -0.02763, 1e-5);
}

TEST(EmoLoss, UniformProbabilities) {
  const Eigen::VectorXd p = Eigen::VectorXd::Constant(kNumEmotions, 1.0 / 8.0);
  const auto l = emo_loss(p, Emotion::awe, Emotion::anger, {Emotion::amusement, Emotion::contentment}, 0.0005, 0.0015);
  EXPECT_NEAR(l.target, std::log(8.0), 1e-12);
  EXPECT_NEAR(l.inh, std::log(8.0), 1e-12);
  EXPECT_NEAR(l.sim, std::log(8.0), 1e-12);
  EXPECT_NEAR(l.emo, 2.0753, 1e-4);
}

TEST(EmoLoss, TargetOnlyAndLinearity) {
  const auto p = probs({0.05, 0.3, 0.1, 0.05, 0.2, 0.1, 0.15, 0.05});
  const std::vector<Emotion> sim = {Emotion::amusement, Emotion::contentment};
  const auto base = emo_loss(p, Emotion::awe, Emotion::anger, sim, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(base.emo, base.target);
  EXPECT_NEAR(base.target, -std::log(0.3), 1e-12);
  EXPECT_NEAR(base.sim, 0.5 * (-std::log(0.05) - std::log(0.1)), 1e-12);
  const auto a = emo_loss(p, Emotion::awe, Emotion::anger, sim, 0.1, 0.2);
  const auto b = emo_loss(p, Emotion::awe, Emotion::anger, sim, 0.2, 0.4);
  EXPECT_NEAR(b.emo - a.emo, a.emo - base.emo, 1e-12);
  const auto none = emo_loss(p, Emotion::awe, std::nullopt, sim, 0.1, 0.2);
  EXPECT_EQ(none.inh, 0.0);
}

TEST(EmoLoss, ClampBoundsZeroProbabilities) {
  auto p = one_hot(Emotion::awe);
  const auto l = emo_loss(p, Emotion::fear, std::nullopt, {}, 0.0, 0.0);
  EXPECT_NEAR(l.target, -std::log(1e-6), 1e-9);
  EXPECT_TRUE(std::isfinite(l.emo));
}

TEST(EmoLoss, RejectsInvalidInput) {
  EXPECT_THROW(emo_loss(probs({0.5, 0.5}), Emotion::awe, std::nullopt, {}, 0, 0), std::invalid_argument);
  EXPECT_THROW(emo_loss(Eigen::VectorXd::Constant(8, 0.5), Emotion::awe, std::nullopt, {}, 0, 0),
               std::invalid_argument);
  EXPECT_THROW(emo_loss(one_hot(Emotion::awe), Emotion::awe, std::nullopt, {Emotion::awe}, 0, 0),
               std::invalid_argument);
}

TEST(EmoTerms, ConflictRuleAndWheelNeighbours) {
  EmotionWheel wheel;
  const auto t = EmoTerms::resolve(Emotion::sadness, Emotion::sadness, wheel, 0.0005, 0.0015);
  EXPECT_FALSE(t.inherent.has_value());
  EXPECT_EQ(t.similar, wheel.similar(Emotion::sadness));
  const auto u = EmoTerms::resolve(Emotion::sadness, Emotion::awe, wheel, 0.0005, 0.0015);
  EXPECT_EQ(u.inherent, Emotion::awe);
}

TEST(InnerLr, LinearDecayFlooredAtZero) {
  EXPECT_DOUBLE_EQ(inner_lr(0.01, 0), 0.01);
  EXPECT_DOUBLE_EQ(inner_lr(0.01, 50), 0.005);
  EXPECT_DOUBLE_EQ(inner_lr(0.01, 100), 0.0);
  EXPECT_DOUBLE_EQ(inner_lr(0.01, 130), 0.0);
}

TEST(Gate, ThresholdIsInclusiveAndLatches) {
  EXPECT_TRUE(gate(18.0, 18.0, false));
  EXPECT_FALSE(gate(17.9, 18.0, false));
  EXPECT_TRUE(gate(-5.0, 18.0, true));
  EXPECT_FALSE(gate(1e300, kInf, false));
  EXPECT_TRUE(gate(-1e300, -kInf, false));
}

TEST(EmotionalTokens, FirstAdamStepMovesByLearningRate) {
  std::mt19937_64 rng(1);
  auto tok = EmotionalTokens::init(4, 8, 0.5, rng);
  const MatF before = tok.S;
  MatF g = MatF::Random(4, 8);
  tok.adam_step(g, 0.01);
  // Bias-corrected first step: m_hat = g, v_hat = g^2.
  const MatF expected = before.array() - 0.01f * g.array() / (g.array().abs() + 1e-8f);
  EXPECT_LT((tok.S - expected).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_EQ(tok.iteration, 1);
}

TEST(TokenObjective, GradientMatchesFiniteDifferences) {
  Stack s;
  const auto den = s.denoiser.cast<double>();
  const auto cls = s.classifier.cast<double>();
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  MatD z(kImagePixels, 3);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = n(rng);
  const auto sched = make_strided_schedule(den.schedule(), 50);
  TokenObjective<double> obj{&den, &cls, den.encode_prompt(prompt()), z, sched.model_t(30), sched.alpha_bar_at(30),
                             EmoTerms::resolve(Emotion::fear, Emotion::awe, s.wheel, 0.0005, 0.0015)};
  MatD S(4, 8);
  for (Eigen::Index i = 0; i < S.size(); ++i) S.data()[i] = n(rng);
  const auto r = obj(S, true);
  ASSERT_EQ(r.grad.rows(), 4);
  double worst = 0;
  for (Eigen::Index i = 0; i < S.size(); ++i) {
    const double h = 1e-5;
    MatD sp = S, sm = S;
    sp.data()[i] += h;
    sm.data()[i] -= h;
    const double fd = (obj(sp, false).loss.emo - obj(sm, false).loss.emo) / (2 * h);
    const double an = r.grad.data()[i];
    worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Synthesis, GateClosedIsBitIdenticalToVanilla) {
  Stack s;
  auto cfg = fast_config();
  cfg.eta = kInf;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto g = generate(prompt(), Emotion::fear, s.models(), cfg, seed);
    const auto v = generate_vanilla(prompt(), Emotion::fear, s.denoiser, cfg, seed);
    EXPECT_EQ(g.image, v);
    for (const auto& rec : g.trace.steps) EXPECT_FALSE(rec.gate);
    EXPECT_FALSE(g.trace.y_inh.has_value());
  }
}

TEST(Synthesis, AlwaysOpenTraceInvariants) {
  Stack s;
  auto cfg = fast_config();
  cfg.eta = -kInf;
  const auto r = generate(prompt(), Emotion::anger, s.models(), cfg, 4);
  ASSERT_EQ(static_cast<int>(r.trace.steps.size()), cfg.steps);
  EXPECT_EQ(r.trace.inherent_captures, 1);
  ASSERT_TRUE(r.trace.y_inh.has_value());
  for (std::size_t k = 0; k < r.trace.steps.size(); ++k) {
    const auto& rec = r.trace.steps[k];
    EXPECT_TRUE(rec.gate);
    EXPECT_EQ(rec.t, cfg.steps - static_cast<int>(k));
    EXPECT_LE(rec.inner_iterations, cfg.max_inner);
    if (rec.inner_iterations < cfg.max_inner) EXPECT_LT(rec.loss.emo, cfg.loss_stop);
    EXPECT_EQ(rec.y_inh, r.trace.y_inh);
    double sum = 0;
    for (double p : rec.probs) {
      EXPECT_GE(p, 0.0);
      sum += p;
    }
    EXPECT_NEAR(sum, 1.0, 1e-5);
    EXPECT_LE(std::abs(rec.s_clip), 1.0 / cfg.tau + 1e-6);
  }
  EXPECT_EQ(r.image.rows(), kImagePixels);
  EXPECT_GE(r.image.minCoeff(), 0.0f);
  EXPECT_LE(r.image.maxCoeff(), 1.0f);
}

TEST(Synthesis, GateLatchesAtCalibratedThreshold) {
  Stack s;
  auto cfg = fast_config();
  std::mt19937_64 rng(6);
  const auto traj = vanilla_similarity_trajectory(gaussian_latent(rng), prompt(), s.models(), cfg);
  ASSERT_EQ(traj.size(), 6u);
  cfg.eta = percentile(traj, 50);
  const auto r = generate(prompt(), Emotion::awe, s.models(), cfg, 6);
  bool seen_open = false;
  int first_open = -1;
  for (const auto& rec : r.trace.steps) {
    if (seen_open) EXPECT_TRUE(rec.gate);
    if (rec.gate && !seen_open) first_open = rec.step;
    seen_open = seen_open || rec.gate;
  }
  // Up to the first opening the run follows the vanilla path, so s_clip agrees.
  ASSERT_GE(first_open, 0);
  for (int k = 0; k <= first_open; ++k) EXPECT_DOUBLE_EQ(r.trace.steps[static_cast<std::size_t>(k)].s_clip, traj[static_cast<std::size_t>(k)]);
  EXPECT_GE(r.trace.steps[static_cast<std::size_t>(first_open)].s_clip, cfg.eta);
  EXPECT_EQ(r.trace.inherent_captures, 1);
}

TEST(Synthesis, Deterministic) {
  Stack s;
  auto cfg = fast_config();
  cfg.eta = -kInf;
  const auto a = generate(std::nullopt, Emotion::fear, s.models(), cfg, 11);
  const auto b = generate(std::nullopt, Emotion::fear, s.models(), cfg, 11);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.trace.steps.back().probs, b.trace.steps.back().probs);
}

TEST(Synthesis, TemplatePromptWhenNoneGiven) {
  EXPECT_EQ(template_prompt(Emotion::fear), tokenize("an image of fear", true));
}

TEST(Synthesis, InnerLoopRespectsIterationCap) {
  Stack s;
  auto cfg = fast_config();
  cfg.eta = -kInf;
  cfg.max_inner = 2;
  cfg.loss_stop = 1e-12;
  const auto r = generate(prompt(), Emotion::sadness, s.models(), cfg, 12);
  for (const auto& rec : r.trace.steps) {
    EXPECT_EQ(rec.inner_iterations, 2);
    EXPECT_EQ(rec.inner.size(), 3u);  // two updates plus the final evaluation
  }
}

TEST(Synthesis, CaptureInherentTwiceIsAContractViolation) {
  Stack s;
  SynthesisTrace trace;
  const auto sched = inference_schedule(s.denoiser, 6);
  const MatF z = MatF::Random(kImagePixels, 3);
  capture_inherent(trace, s.classifier, z, z, 3, sched);
  EXPECT_THROW(capture_inherent(trace, s.classifier, z, z, 3, sched), ContractViolation);
}

TEST(Synthesis, NonFiniteGradientAbortsWithPartialTrace) {
  Stack s;
  auto& head = s.classifier.params.get("head.w");
  head(0, 0) = std::numeric_limits<float>::quiet_NaN();
  auto cfg = fast_config();
  cfg.eta = -kInf;
  try {
    generate(prompt(), Emotion::fear, s.models(), cfg, 1);
    FAIL() << "expected SynthesisAborted";
  } catch (const SynthesisAborted& e) {
    EXPECT_TRUE(e.partial.y_inh.has_value());
    EXPECT_LT(static_cast<int>(e.partial.steps.size()), cfg.steps);
  }
}

TEST(Synthesis, TraceJsonlRoundTrip) {
  Stack s;
  auto cfg = fast_config();
  cfg.eta = -kInf;
  const auto r = generate(prompt(), Emotion::awe, s.models(), cfg, 13);
  const auto path = std::filesystem::temp_directory_path() / "muse_trace_test.jsonl";
  r.trace.write_jsonl(path);
  const auto back = SynthesisTrace::read_jsonl(path);
  ASSERT_EQ(back.steps.size(), r.trace.steps.size());
  EXPECT_EQ(back.y_inh, r.trace.y_inh);
  for (std::size_t i = 0; i < back.steps.size(); ++i) {
    EXPECT_EQ(back.steps[i].t, r.trace.steps[i].t);
    EXPECT_EQ(back.steps[i].gate, r.trace.steps[i].gate);
    EXPECT_EQ(back.steps[i].probs, r.trace.steps[i].probs);
    EXPECT_EQ(back.steps[i].loss.emo, r.trace.steps[i].loss.emo);
    EXPECT_EQ(back.steps[i].inner.size(), r.trace.steps[i].inner.size());
  }
  std::filesystem::remove(path);
}

TEST(Synthesis, SimilarityScalesWithTemperature) {
  Stack s;
  auto cfg = fast_config();
  const auto sched = inference_schedule(s.denoiser, cfg.steps);
  const MatF pt = s.denoiser.encode_prompt(prompt());
  const MatF z = MatF::Random(kImagePixels, 3);
  const double a = semantic_similarity(z, 4, pt, s.denoiser.void_block(), prompt(), s.models(), sched, cfg);
  cfg.tau = 0.14;
  const double b = semantic_similarity(z, 4, pt, s.denoiser.void_block(), prompt(), s.models(), sched, cfg);
  EXPECT_NEAR(a * 0.07, b * 0.14, 1e-9);
  EXPECT_LE(std::abs(a), 1.0 / 0.07 + 1e-6);
}

TEST(Synthesis, EditAndClassifierGuidanceRun) {
  Stack s;
  auto cfg = fast_config();
  const MatF img = render_glyph({});
  const MatF zT = invert(img, prompt(), s.denoiser, cfg.steps);
  EXPECT_TRUE(zT.allFinite());
  cfg.eta = kInf;
  const auto e = edit(img, prompt(), Emotion::fear, s.models(), cfg, 3);
  EXPECT_EQ(e.image, sample_vanilla(zT, prompt(), s.denoiser, cfg));
  const MatF cg = sample_classifier_guidance(zT, prompt(), Emotion::fear, s.denoiser, s.classifier, cfg, 1.0);
  EXPECT_TRUE(cg.allFinite());
  EXPECT_THROW(invert(MatF::Zero(10, 3), prompt(), s.denoiser, 6), ShapeError);
}

TEST(GuidanceConfig, ValidateRejectsBadValues) {
  GuidanceConfig c;
  EXPECT_NO_THROW(c.validate());
  c.lambda1 = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.loss_stop = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.max_inner = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.max_inner = 101;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Percentile, LinearInterpolation) {
  EXPECT_DOUBLE_EQ(percentile({3, 1, 2, 4}, 0), 1.0);
  EXPECT_DOUBLE_EQ(percentile({3, 1, 2, 4}, 100), 4.0);
  EXPECT_DOUBLE_EQ(percentile({3, 1, 2, 4}, 50), 2.5);
  EXPECT_DOUBLE_EQ(percentile({10, 20, 30, 40, 50, 60}, 60), 40.0);
  EXPECT_THROW(percentile({}, 50), std::invalid_argument);
}

}  // namespace
}  // namespace muse
