#include "muse/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace muse {

void GuidanceConfig::validate() const {
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw std::invalid_argument("lambda1 and lambda2 must be >= 0");
  if (!(loss_stop > 0.0)) throw std::invalid_argument("loss_stop must be > 0");
  if (max_inner < 1 || max_inner > 100) throw std::invalid_argument("max_inner must lie in [1, 100]");
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be > 0");
  if (rollout_stride < 1) throw std::invalid_argument("rollout_stride must be >= 1");
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  if (std::isnan(eta) || !std::isfinite(omega) || !std::isfinite(lr0)) {
    throw std::invalid_argument("eta, omega and lr0 must be numbers");
  }
}

EmotionalTokens EmotionalTokens::init(int k, int dim, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  EmotionalTokens tok;
  tok.S.resize(k, dim);
  for (Eigen::Index i = 0; i < tok.S.size(); ++i) tok.S.data()[i] = static_cast<float>(normal(rng));
  tok.m = MatF::Zero(k, dim);
  tok.v = MatF::Zero(k, dim);
  return tok;
}

void EmotionalTokens::adam_step(const MatF& grad, double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++iteration;
  m = static_cast<float>(b1) * m + static_cast<float>(1 - b1) * grad;
  v = static_cast<float>(b2) * v + static_cast<float>(1 - b2) * grad.cwiseAbs2();
  const float step = static_cast<float>(lr / (1.0 - std::pow(b1, iteration)));
  const float inv_c2 = static_cast<float>(1.0 / (1.0 - std::pow(b2, iteration)));
  S.array() -= step * m.array() / ((v.array() * inv_c2).sqrt() + static_cast<float>(eps));
}

namespace {

// -log max(p, floor) for a log-probability.
double clamped_ce(double log_p) { return std::min(-log_p, -std::log(kProbabilityFloor)); }

EmoLoss combine(double target, double inh, double sim, double lambda1, double lambda2) {
  EmoLoss l;
  l.target = std::max(0.0, target);
  l.inh = inh;
  l.sim = sim;
  l.emo = l.target - lambda1 * l.inh - lambda2 * l.sim;
  return l;
}

EmoLoss loss_from_log_probs(const Eigen::VectorXd& lp, const EmoTerms& terms) {
  const double target = clamped_ce(lp(emotion_id(terms.target)));
  const double inh = terms.inherent ? clamped_ce(lp(emotion_id(*terms.inherent))) : 0.0;
  double sim = 0.0;
  for (Emotion e : terms.similar) sim += clamped_ce(lp(emotion_id(e)));
  if (!terms.similar.empty()) sim /= static_cast<double>(terms.similar.size());
  return combine(target, inh, sim, terms.lambda1, terms.lambda2);
}

// Per-class weights w so that L_emo = sum_y w_y * CE_y.
Eigen::VectorXd loss_weights(const EmoTerms& terms) {
  Eigen::VectorXd w = Eigen::VectorXd::Zero(kNumEmotions);
  w(emotion_id(terms.target)) += 1.0;
  if (terms.inherent) w(emotion_id(*terms.inherent)) -= terms.lambda1;
  for (Emotion e : terms.similar) w(emotion_id(e)) -= terms.lambda2 / static_cast<double>(terms.similar.size());
  return w;
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

MatF stack2(const MatF& a, const MatF& b) {
  MatF out(a.rows() + b.rows(), a.cols());
  out << a, b;
  return out;
}

}  // namespace

EmoLoss emo_loss(const Eigen::Ref<const Eigen::VectorXd>& probs, Emotion target, std::optional<Emotion> inherent,
                 const std::vector<Emotion>& similar, double lambda1, double lambda2) {
  if (probs.size() != kNumEmotions) throw std::invalid_argument("emo_loss: expected 8 probabilities");
  if (!probs.allFinite() || probs.minCoeff() < -1e-6 || probs.maxCoeff() > 1.0 + 1e-6 ||
      std::abs(probs.sum() - 1.0) > 1e-4) {
    throw std::invalid_argument("emo_loss: input is not a probability vector");
  }
  for (Emotion e : similar) {
    if (e == target) throw std::invalid_argument("emo_loss: similar set contains the target");
  }
  const Eigen::VectorXd lp = probs.cwiseMax(kProbabilityFloor).array().log().matrix();
  EmoTerms terms{target, inherent, similar, lambda1, lambda2};
  return loss_from_log_probs(lp, terms);
}

EmoTerms EmoTerms::resolve(Emotion target, std::optional<Emotion> inherent, const EmotionWheel& wheel,
                           double lambda1, double lambda2) {
  EmoTerms t;
  t.target = target;
  if (inherent && *inherent != target) t.inherent = inherent;
  for (Emotion e : wheel.similar(target)) {
    if (e != target) t.similar.push_back(e);
  }
  t.lambda1 = lambda1;
  t.lambda2 = lambda2;
  return t;
}

double inner_lr(double lr0, int i) { return std::max(0.0, lr0 * (1.0 - i / 100.0)); }

template <typename Scalar>
typename TokenObjective<Scalar>::Result TokenObjective<Scalar>::operator()(const Mat<Scalar>& S,
                                                                          bool with_grad) const {
  using M = Mat<Scalar>;
  ad::Tape<Scalar> tape;
  Binder<Scalar> dp(tape, denoiser->params, false);
  Binder<Scalar> cp(tape, classifier->params, false);
  ad::Var s = with_grad ? tape.leaf_ref(S) : tape.constant_ref(S);
  ad::Var cond = ad::concat_rows(tape, tape.constant_ref(prompt), s);
  ad::Var zv = tape.constant_ref(z);
  ad::Var eps = denoiser->forward(dp, zv, {model_t}, cond);
  detail::require_positive_alpha_bar(alpha_bar);
  const auto inv_a = static_cast<Scalar>(1.0 / std::sqrt(alpha_bar));
  const auto coef = static_cast<Scalar>(-std::sqrt(1.0 - alpha_bar) / std::sqrt(alpha_bar));
  ad::Var z0 = ad::axpby(tape, zv, inv_a, eps, coef);
  ad::Var lp = ad::log_softmax(tape, classifier->logits(cp, z0));

  const Eigen::VectorXd lpd = tape.value(lp).row(0).transpose().template cast<double>();
  Result r;
  r.loss = loss_from_log_probs(lpd, terms);
  r.probs = lpd.array().exp().matrix();
  if (with_grad) {
    // dCE_y/dlog p_y = -1 unless the probability clamp is active.
    const Eigen::VectorXd w = loss_weights(terms);
    M seed = M::Zero(1, kNumEmotions);
    for (int y = 0; y < kNumEmotions; ++y) {
      if (lpd(y) > std::log(kProbabilityFloor)) seed(0, y) = static_cast<Scalar>(-w(y));
    }
    tape.backward(lp, seed);
    r.grad = tape.grad(s);
  }
  return r;
}

template struct TokenObjective<float>;
template struct TokenObjective<double>;

nlohmann::json SynthesisTrace::step_json(const StepRecord& r) const {
  nlohmann::json inner = nlohmann::json::array();
  for (const auto& i : r.inner) {
    inner.push_back({{"L_emo", i.loss.emo},
                     {"L_target", i.loss.target},
                     {"L_inh", i.loss.inh},
                     {"L_sim", i.loss.sim},
                     {"probs", i.probs}});
  }
  return {{"step", r.step},
          {"t", r.t},
          {"model_t", r.model_t},
          {"s_clip", r.s_clip},
          {"gate", r.gate},
          {"inner_iterations", r.inner_iterations},
          {"L_target", r.loss.target},
          {"L_inh", r.loss.inh},
          {"L_sim", r.loss.sim},
          {"L_emo", r.loss.emo},
          {"probs", r.probs},
          {"y_inh", r.y_inh ? nlohmann::json(std::string(emotion_name(*r.y_inh))) : nlohmann::json(nullptr)},
          {"inner", inner}};
}

void SynthesisTrace::write_jsonl(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  for (const auto& r : steps) os << step_json(r).dump() << '\n';
}

SynthesisTrace SynthesisTrace::read_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path.string());
  SynthesisTrace trace;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    StepRecord r;
    r.step = j.at("step");
    r.t = j.at("t");
    r.model_t = j.at("model_t");
    r.s_clip = j.at("s_clip");
    r.gate = j.at("gate");
    r.inner_iterations = j.at("inner_iterations");
    r.loss = {j.at("L_emo"), j.at("L_target"), j.at("L_inh"), j.at("L_sim")};
    r.probs = j.at("probs").get<std::vector<double>>();
    if (!j.at("y_inh").is_null()) {
      r.y_inh = emotion_from_name(j.at("y_inh").get<std::string>()).value();
      trace.y_inh = r.y_inh;
    }
    for (const auto& i : j.at("inner")) {
      r.inner.push_back({{i.at("L_emo"), i.at("L_target"), i.at("L_inh"), i.at("L_sim")},
                         i.at("probs").get<std::vector<double>>()});
    }
    trace.steps.push_back(std::move(r));
  }
  return trace;
}

NoiseSchedule inference_schedule(const Denoiser<float>& denoiser, int steps) {
  return make_strided_schedule(denoiser.schedule(), steps);
}

MatF gaussian_latent(std::mt19937_64& rng) {
  std::normal_distribution<float> normal;
  MatF z(kImagePixels, kImageChannels);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = normal(rng);
  return z;
}

MatF guided_eps(const Denoiser<float>& denoiser, const MatF& z, int model_t, const MatF& prompt_tokens,
                const MatF& tail, double omega) {
  MatF cond(2 * (prompt_tokens.rows() + tail.rows()), prompt_tokens.cols());
  cond << prompt_tokens, tail, denoiser.encode_null(), denoiser.void_block();
  MatF zz(2 * z.rows(), z.cols());
  zz << z, z;
  const MatF eps = denoiser.predict(zz, {model_t, model_t}, cond);
  return cfg_combine(eps.topRows(z.rows()), eps.bottomRows(z.rows()), omega);
}

double semantic_similarity(const MatF& z, int t, const MatF& prompt_tokens, const MatF& tail,
                           const PromptTokens& prompt, const GuidanceModels& models, const NoiseSchedule& sched,
                           const GuidanceConfig& config) {
  MatF x = z;
  for (int j = t; j > 0;) {
    const int next = std::max(0, j - config.rollout_stride);
    const MatF eps = guided_eps(*models.denoiser, x, sched.model_t(j), prompt_tokens, tail, config.omega);
    const auto [cz, ce] = ddim_coefficients(sched.alpha_bar_at(j), sched.alpha_bar_at(next));
    x = static_cast<float>(cz) * x + static_cast<float>(ce) * eps;
    j = next;
  }
  const MatF decoded = to_model_space(to_pixel_space(x));
  const Eigen::VectorXf ie = models.embedder->embed_image(decoded);
  const Eigen::VectorXf te = models.embedder->embed_text(prompt);
  return static_cast<double>(ie.dot(te)) / config.tau;
}

bool gate(double s_clip, double eta, bool already_open) { return already_open || s_clip >= eta; }

Emotion capture_inherent(SynthesisTrace& trace, const EmotionClassifier<float>& classifier, const MatF& z_prev,
                         const MatF& eps_prev, int t_prev, const NoiseSchedule& sched) {
  if (trace.inherent_captures > 0) throw ContractViolation("capture_inherent called twice in one run");
  const MatF z0 = predict_clean(z_prev, eps_prev, t_prev, sched);
  const Emotion e = emotion_from_id(classifier.predict(z0));
  trace.y_inh = e;
  ++trace.inherent_captures;
  return e;
}

InnerOutcome optimize_tokens(EmotionalTokens& tokens, const TokenObjective<float>& objective,
                             const GuidanceConfig& config, int outer_t) {
  InnerOutcome out;
  for (int i = 0;; ++i) {
    const auto r = objective(tokens.S, true);
    if (!std::isfinite(r.loss.emo) || !r.grad.allFinite()) {
      throw NonFiniteError("non-finite loss or gradient in token optimization at t=" + std::to_string(outer_t) +
                           ", inner iteration " + std::to_string(i));
    }
    out.loss = r.loss;
    out.probs = to_std(r.probs);
    out.history.push_back({r.loss, out.probs});
    if (r.loss.emo < config.loss_stop || i == config.max_inner) break;
    const double lr =
        config.lr_schedule == LrSchedule::inner ? inner_lr(config.lr0, i) : inner_lr(config.lr0, outer_t);
    tokens.adam_step(r.grad, lr);
    out.iterations = i + 1;
  }
  return out;
}

SynthesisResult synthesize(const MatF& z_T, const PromptTokens& prompt, Emotion target, const GuidanceModels& models,
                           const GuidanceConfig& config, std::mt19937_64& rng) {
  config.validate();
  if (z_T.rows() != kImagePixels || z_T.cols() != kImageChannels) throw ShapeError("z_T must be 1024 x 3");
  const Denoiser<float>& den = *models.denoiser;
  const NoiseSchedule sched = inference_schedule(den, config.steps);
  const MatF prompt_tokens = den.encode_prompt(prompt);
  const MatF void_tail = den.void_block();

  const double token_std = std::sqrt((prompt_tokens.array() - prompt_tokens.mean()).square().mean());
  EmotionalTokens tokens =
      EmotionalTokens::init(den.config.emotion_tokens, den.config.token_dim, token_std, rng);

  SynthesisResult res;
  auto& trace = res.trace;
  MatF z = z_T;
  MatF z_prev, eps_prev;
  bool open = false;
  std::optional<EmoTerms> terms;
  for (int t = config.steps, k = 0; t >= 1; --t, ++k) try {
    StepRecord rec;
    rec.step = k;
    rec.t = t;
    rec.model_t = sched.model_t(t);
    rec.s_clip = semantic_similarity(z, t, prompt_tokens, open ? tokens.S : void_tail, prompt, models, sched,
                                     config);
    const bool was_open = open;
    open = gate(rec.s_clip, config.eta, open);
    rec.gate = open;
    if (open && !was_open) {
      // First opening: the inherent emotion comes from the previous step, or
      // from z_T itself when the gate opens immediately.
      if (k == 0) {
        const MatF eps0 = guided_eps(den, z, rec.model_t, prompt_tokens, void_tail, config.omega);
        capture_inherent(trace, *models.classifier, z, eps0, t, sched);
      } else {
        capture_inherent(trace, *models.classifier, z_prev, eps_prev, t + 1, sched);
      }
      terms = EmoTerms::resolve(target, trace.y_inh, *models.wheel, config.lambda1, config.lambda2);
    }
    if (open && (!was_open || config.reoptimize_each_step)) {
      TokenObjective<float> obj{&den, models.classifier, prompt_tokens, z, rec.model_t, sched.alpha_bar_at(t),
                                *terms};
      auto inner = optimize_tokens(tokens, obj, config, t);
      rec.inner_iterations = inner.iterations;
      rec.loss = inner.loss;
      rec.inner = std::move(inner.history);
    }
    rec.y_inh = trace.y_inh;
    const MatF eps = guided_eps(den, z, rec.model_t, prompt_tokens, open ? tokens.S : void_tail, config.omega);
    const MatF z0_hat = predict_clean(z, eps, t, sched);
    const MatF p = models.classifier->probabilities(z0_hat);
    rec.probs.assign(p.data(), p.data() + p.size());
    trace.steps.push_back(std::move(rec));
    z_prev = z;
    eps_prev = eps;
    z = ddim_step(z, eps, t, sched);
  } catch (const Error& e) {
    throw SynthesisAborted(e.what(), trace);
  }
  res.z0 = z;
  res.image = to_pixel_space(z);
  return res;
}

PromptTokens template_prompt(Emotion e) { return tokenize(emotion_only_prompt(e), true); }

SynthesisResult generate(const std::optional<PromptTokens>& prompt, Emotion target, const GuidanceModels& models,
                         const GuidanceConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const MatF z_T = gaussian_latent(rng);
  return synthesize(z_T, prompt ? *prompt : template_prompt(target), target, models, config, rng);
}

MatF invert(const MatF& image, const PromptTokens& prompt, const Denoiser<float>& denoiser, int steps) {
  if (image.rows() != kImagePixels || image.cols() != kImageChannels) throw ShapeError("image must be 1024 x 3");
  const NoiseSchedule sched = inference_schedule(denoiser, steps);
  const auto cond = denoiser.condition(prompt);
  MatF z = to_model_space(image);
  for (int t = 1; t <= steps; ++t) {
    const MatF eps = denoiser.predict(z, sched.model_t(t), cond);
    z = ddim_invert_step(z, eps, t, sched);
  }
  return z;
}

SynthesisResult edit(const MatF& image, const PromptTokens& prompt, Emotion target, const GuidanceModels& models,
                     const GuidanceConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const MatF z_T = invert(image, prompt, *models.denoiser, config.steps);
  return synthesize(z_T, prompt, target, models, config, rng);
}

MatF sample_vanilla(const MatF& z_T, const PromptTokens& prompt, const Denoiser<float>& denoiser,
                    const GuidanceConfig& config) {
  const NoiseSchedule sched = inference_schedule(denoiser, config.steps);
  const MatF prompt_tokens = denoiser.encode_prompt(prompt);
  const MatF void_tail = denoiser.void_block();
  MatF z = z_T;
  for (int t = config.steps; t >= 1; --t) {
    const MatF eps = guided_eps(denoiser, z, sched.model_t(t), prompt_tokens, void_tail, config.omega);
    z = ddim_step(z, eps, t, sched);
  }
  return to_pixel_space(z);
}

MatF generate_vanilla(const std::optional<PromptTokens>& prompt, Emotion target, const Denoiser<float>& denoiser,
                      const GuidanceConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const MatF z_T = gaussian_latent(rng);
  return sample_vanilla(z_T, prompt ? *prompt : template_prompt(target), denoiser, config);
}

MatF sample_classifier_guidance(const MatF& z_T, const PromptTokens& prompt, Emotion target,
                                const Denoiser<float>& denoiser, const EmotionClassifier<float>& classifier,
                                const GuidanceConfig& config, double cg_scale) {
  const NoiseSchedule sched = inference_schedule(denoiser, config.steps);
  const MatF prompt_tokens = denoiser.encode_prompt(prompt);
  const MatF void_tail = denoiser.void_block();
  const MatF cond = stack2(prompt_tokens, void_tail);
  MatF z = z_T;
  for (int t = config.steps; t >= 1; --t) {
    const int mt = sched.model_t(t);
    const double ab = sched.alpha_bar_at(t);
    ad::Tape<float> tape;
    Binder<float> dp(tape, denoiser.params, false);
    Binder<float> cp(tape, classifier.params, false);
    ad::Var zv = tape.leaf_ref(z);
    ad::Var eps = denoiser.forward(dp, zv, {mt}, tape.constant_ref(cond));
    ad::Var z0 = ad::axpby(tape, zv, static_cast<float>(1.0 / std::sqrt(ab)), eps,
                           static_cast<float>(-std::sqrt((1.0 - ab) / ab)));
    ad::Var lp = ad::log_softmax(tape, classifier.logits(cp, z0));
    MatF seed = MatF::Zero(1, kNumEmotions);
    seed(0, emotion_id(target)) = 1.0f;
    tape.backward(lp, seed);
    // Expressed in noise units so that adding it to eps raises log p.
    const MatF grad = static_cast<float>(-std::sqrt(1.0 - ab)) * tape.grad(zv);
    const MatF eps_cfg = guided_eps(denoiser, z, mt, prompt_tokens, void_tail, config.omega);
    z = ddim_step(z, cg_combine(eps_cfg, grad, cg_scale), t, sched);
  }
  return to_pixel_space(z);
}

std::vector<double> vanilla_similarity_trajectory(const MatF& z_T, const PromptTokens& prompt,
                                                  const GuidanceModels& models, const GuidanceConfig& config) {
  const Denoiser<float>& den = *models.denoiser;
  const NoiseSchedule sched = inference_schedule(den, config.steps);
  const MatF prompt_tokens = den.encode_prompt(prompt);
  const MatF void_tail = den.void_block();
  std::vector<double> out;
  MatF z = z_T;
  for (int t = config.steps; t >= 1; --t) {
    out.push_back(semantic_similarity(z, t, prompt_tokens, void_tail, prompt, models, sched, config));
    z = ddim_step(z, guided_eps(den, z, sched.model_t(t), prompt_tokens, void_tail, config.omega), t, sched);
  }
  return out;
}

double percentile(std::vector<double> values, double pct) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  if (!(pct >= 0.0 && pct <= 100.0)) throw std::invalid_argument("percentile must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(values.size() - 1, lo + 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double calibrate_eta(const std::vector<PromptTokens>& prompts, const GuidanceModels& models,
                     const GuidanceConfig& config, double pct, std::uint64_t seed) {
  std::vector<double> all;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    std::mt19937_64 rng(seed + i);
    const auto traj = vanilla_similarity_trajectory(gaussian_latent(rng), prompts[i], models, config);
    all.insert(all.end(), traj.begin(), traj.end());
  }
  return percentile(std::move(all), pct);
}

}  // namespace muse
