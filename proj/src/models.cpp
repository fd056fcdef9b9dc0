#include "muse/models.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>
#include <numeric>
#include <random>

namespace muse {

namespace {

constexpr int kTimeFeatures = 32;

template <typename Scalar>
Mat<Scalar> normal_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  std::normal_distribution<double> normal(0.0, stddev);
  Mat<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(normal(rng));
  return m;
}

template <typename Scalar>
void add_resblock(ParamStore<Scalar>& ps, std::mt19937_64& rng, const std::string& name, int channels,
                  int time_dim) {
  nn::add_norm(ps, name + ".n", channels);
  nn::add_conv(ps, rng, name + ".c1", 3, channels, channels);
  ps.add(name + ".f.w", Mat<Scalar>::Zero(time_dim, 2 * channels));
  ps.add(name + ".f.b", Mat<Scalar>::Zero(1, 2 * channels));
  nn::add_conv(ps, rng, name + ".c2", 3, channels, channels, 0.1);
}

template <typename Scalar>
void add_xattn(ParamStore<Scalar>& ps, std::mt19937_64& rng, const std::string& name, int channels, int token_dim,
               int attn_dim) {
  nn::add_norm(ps, name + ".n", channels);
  nn::add_linear(ps, rng, name + ".q", channels, attn_dim, 0.5);
  nn::add_linear(ps, rng, name + ".k", token_dim, attn_dim, 0.5);
  nn::add_linear(ps, rng, name + ".v", token_dim, attn_dim, 0.5);
  nn::add_linear(ps, rng, name + ".o", attn_dim, channels, 0.1);
}

template <typename Scalar>
ad::Var resblock(Binder<Scalar>& p, ad::Var h, ad::Var temb, const std::string& name, int batch, int size) {
  auto& t = p.tape();
  ad::Var r = ad::silu(t, nn::norm(p, h, name + ".n"));
  r = nn::conv(p, r, name + ".c1", nn::same3x3(batch, size));
  r = ad::film(t, r, nn::linear(p, temb, name + ".f"), size * size);
  r = ad::silu(t, r);
  r = nn::conv(p, r, name + ".c2", nn::same3x3(batch, size));
  return ad::add(t, h, r);
}

template <typename Scalar>
ad::Var xattn(Binder<Scalar>& p, ad::Var h, ad::Var cond, const std::string& name, int batch) {
  auto& t = p.tape();
  ad::Var q = nn::linear(p, nn::norm(p, h, name + ".n"), name + ".q");
  ad::Var k = nn::linear(p, cond, name + ".k");
  ad::Var v = nn::linear(p, cond, name + ".v");
  ad::Var o = ad::attention(t, q, k, v, batch);
  return ad::add(t, h, nn::linear(p, o, name + ".o"));
}

double lr_at(double base, int step, int total, int warmup) {
  if (step < warmup) return base * static_cast<double>(step + 1) / warmup;
  const double progress = static_cast<double>(step - warmup) / std::max(1, total - warmup);
  return base * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress))));
}

MatF gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  return normal_matrix<float>(rng, rows, cols, 1.0);
}

}  // namespace

template <typename Scalar>
Mat<Scalar> timestep_features(const std::vector<int>& timesteps, int dim, int max_t) {
  Mat<Scalar> out(static_cast<Eigen::Index>(timesteps.size()), dim);
  const int half = dim / 2;
  for (std::size_t b = 0; b < timesteps.size(); ++b) {
    const double t = 1000.0 * static_cast<double>(timesteps[b]) / max_t;
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      out(static_cast<Eigen::Index>(b), i) = static_cast<Scalar>(std::sin(t * freq));
      out(static_cast<Eigen::Index>(b), half + i) = static_cast<Scalar>(std::cos(t * freq));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Denoiser

template <typename Scalar>
Denoiser<Scalar> Denoiser<Scalar>::init(const DenoiserConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Denoiser d;
  d.config = config;
  auto& ps = d.params;
  const int c0 = config.channels0, c1 = config.channels1, c2 = config.channels2;
  const int vocab = Vocabulary::instance().size();
  ps.add("tok", normal_matrix<Scalar>(rng, vocab, config.token_dim, 1.0));
  ps.add("pos", normal_matrix<Scalar>(rng, config.prompt_len, config.token_dim, 0.2));
  ps.add("void", normal_matrix<Scalar>(rng, config.emotion_tokens, config.token_dim, 1.0));
  nn::add_linear(ps, rng, "t1", kTimeFeatures, config.time_dim);
  nn::add_linear(ps, rng, "t2", config.time_dim, config.time_dim);
  nn::add_conv(ps, rng, "in", 3, kImageChannels, c0);
  add_resblock(ps, rng, "r0", c0, config.time_dim);
  nn::add_conv(ps, rng, "down0", 2, c0, c1);
  add_resblock(ps, rng, "r1", c1, config.time_dim);
  add_xattn(ps, rng, "a1", c1, config.token_dim, config.attn_dim);
  nn::add_conv(ps, rng, "down1", 2, c1, c2);
  add_resblock(ps, rng, "r2", c2, config.time_dim);
  add_xattn(ps, rng, "a2", c2, config.token_dim, config.attn_dim);
  add_resblock(ps, rng, "r3", c2, config.time_dim);
  nn::add_conv(ps, rng, "up1", 1, c2 + c1, c1);
  add_resblock(ps, rng, "r4", c1, config.time_dim);
  add_xattn(ps, rng, "a4", c1, config.token_dim, config.attn_dim);
  nn::add_conv(ps, rng, "up0", 1, c1 + c0, c0);
  add_resblock(ps, rng, "r5", c0, config.time_dim);
  nn::add_norm(ps, "outn", c0);
  nn::add_conv(ps, rng, "out", 3, c0, kImageChannels, 0.1);
  return d;
}

template <typename Scalar>
std::vector<int> Denoiser<Scalar>::padded_ids(const PromptTokens& tokens) const {
  if (static_cast<int>(tokens.size()) > config.prompt_len) {
    throw ShapeError("prompt longer than " + std::to_string(config.prompt_len) + " tokens");
  }
  std::vector<int> ids(tokens.begin(), tokens.end());
  const int vocab = Vocabulary::instance().size();
  for (int id : ids) {
    if (id < 0 || id >= vocab) throw ShapeError("token id out of range");
  }
  ids.resize(static_cast<std::size_t>(config.prompt_len), Vocabulary::kPad);
  return ids;
}

template <typename Scalar>
Mat<Scalar> Denoiser<Scalar>::encode_prompt(const PromptTokens& tokens) const {
  const auto ids = padded_ids(tokens);
  const M& tok = params.get("tok");
  M out = params.get("pos");
  for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) += tok.row(ids[i]);
  return out;
}

template <typename Scalar>
Mat<Scalar> Denoiser<Scalar>::encode_null() const {
  const M& tok = params.get("tok");
  M out = params.get("pos");
  out.rowwise() += tok.row(Vocabulary::kNull);
  return out;
}

template <typename Scalar>
ad::Var Denoiser<Scalar>::encode_graph(Binder<Scalar>& p, const std::vector<int>& ids) const {
  auto& t = p.tape();
  const int batch = static_cast<int>(ids.size()) / config.prompt_len;
  return ad::add(t, ad::gather_rows(t, p("tok"), ids), ad::tile_rows(t, p("pos"), batch));
}

template <typename Scalar>
ad::Var Denoiser<Scalar>::forward(Binder<Scalar>& p, ad::Var x, const std::vector<int>& ts, ad::Var cond) const {
  auto& t = p.tape();
  const int batch = static_cast<int>(ts.size());
  const int seq = config.prompt_len + config.emotion_tokens;
  if (t.value(x).rows() != static_cast<Eigen::Index>(batch) * kImagePixels || t.value(x).cols() != kImageChannels) {
    throw ShapeError("denoiser input must be (B*1024) x 3");
  }
  if (t.value(cond).rows() != static_cast<Eigen::Index>(batch) * seq || t.value(cond).cols() != config.token_dim) {
    throw ShapeError("denoiser condition must be (B*" + std::to_string(seq) + ") x " +
                     std::to_string(config.token_dim));
  }
  const int s0 = kImageSize, s1 = kImageSize / 2, s2 = kImageSize / 4;

  ad::Var tf = t.constant(timestep_features<Scalar>(ts, kTimeFeatures, config.train_steps));
  ad::Var temb = ad::silu(t, nn::linear(p, ad::silu(t, nn::linear(p, tf, "t1")), "t2"));

  ad::Var h = nn::conv(p, x, "in", nn::same3x3(batch, s0));
  h = resblock(p, h, temb, "r0", batch, s0);
  ad::Var skip0 = h;
  h = nn::conv(p, h, "down0", nn::down2x2(batch, s0));
  h = resblock(p, h, temb, "r1", batch, s1);
  h = xattn(p, h, cond, "a1", batch);
  ad::Var skip1 = h;
  h = nn::conv(p, h, "down1", nn::down2x2(batch, s1));
  h = resblock(p, h, temb, "r2", batch, s2);
  h = xattn(p, h, cond, "a2", batch);
  h = resblock(p, h, temb, "r3", batch, s2);
  h = ad::upsample2x(t, h, batch, s2, s2);
  h = nn::conv(p, ad::concat_cols(t, h, skip1), "up1", nn::pointwise(batch, s1));
  h = resblock(p, h, temb, "r4", batch, s1);
  h = xattn(p, h, cond, "a4", batch);
  h = ad::upsample2x(t, h, batch, s1, s1);
  h = nn::conv(p, ad::concat_cols(t, h, skip0), "up0", nn::pointwise(batch, s0));
  h = resblock(p, h, temb, "r5", batch, s0);
  h = ad::silu(t, nn::norm(p, h, "outn"));
  h = nn::conv(p, h, "out", nn::same3x3(batch, s0));
  // The head predicts v; eps = sqrt(ab) v + sqrt(1 - ab) z stays accurate near
  // pure noise, where a direct eps head has to reproduce z exactly.
  const NoiseSchedule sched = schedule();
  std::vector<Scalar> wv, wz;
  for (int step : ts) {
    const double ab = sched.alpha_bar_at(step);
    wv.push_back(static_cast<Scalar>(std::sqrt(ab)));
    wz.push_back(static_cast<Scalar>(std::sqrt(1.0 - ab)));
  }
  return ad::axpby_per_sample(t, h, std::move(wv), x, std::move(wz), kImagePixels);
}

template <typename Scalar>
Mat<Scalar> Denoiser<Scalar>::predict(const M& z, const std::vector<int>& ts, const M& cond_tokens) const {
  ad::Tape<Scalar> tape;
  Binder<Scalar> p(tape, params, false);
  ad::Var out = forward(p, tape.constant_ref(z), ts, tape.constant_ref(cond_tokens));
  return tape.value(out);
}

// ---------------------------------------------------------------------------
// Classifier

std::string arch_name(ClassifierArch a) { return a == ClassifierArch::guide ? "guide" : "agnostic"; }

ClassifierArch arch_from_name(const std::string& s) {
  if (s == "guide") return ClassifierArch::guide;
  if (s == "agnostic") return ClassifierArch::agnostic;
  throw std::invalid_argument("unknown classifier architecture: " + s);
}

template <typename Scalar>
EmotionClassifier<Scalar> EmotionClassifier<Scalar>::init(ClassifierArch arch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  EmotionClassifier c;
  c.arch = arch;
  auto& ps = c.params;
  if (arch == ClassifierArch::guide) {
    nn::add_conv(ps, rng, "c0", 3, 3, 16);
    nn::add_conv(ps, rng, "d0", 2, 16, 32);
    nn::add_conv(ps, rng, "c1", 3, 32, 32);
    nn::add_conv(ps, rng, "d1", 2, 32, 64);
    nn::add_conv(ps, rng, "c2", 3, 64, 64);
    nn::add_linear(ps, rng, "head", 64, kNumEmotions);
  } else {
    nn::add_conv(ps, rng, "p0", 4, 3, 32);
    nn::add_conv(ps, rng, "c0", 3, 32, 48);
    nn::add_conv(ps, rng, "c1", 3, 48, 48);
    nn::add_conv(ps, rng, "c2", 3, 48, 48);
    nn::add_linear(ps, rng, "fc", 96, 48);
    nn::add_linear(ps, rng, "head", 48, kNumEmotions);
  }
  return c;
}

template <typename Scalar>
ad::Var EmotionClassifier<Scalar>::logits(Binder<Scalar>& p, ad::Var x) const {
  auto& t = p.tape();
  const auto rows = t.value(x).rows();
  if (rows % kImagePixels != 0 || t.value(x).cols() != kImageChannels) {
    throw ShapeError("classifier input must be (B*1024) x 3");
  }
  const int batch = static_cast<int>(rows / kImagePixels);
  if (arch == ClassifierArch::guide) {
    ad::Var h = ad::silu(t, nn::conv(p, x, "c0", nn::same3x3(batch, 32)));
    h = ad::silu(t, nn::conv(p, h, "d0", nn::down2x2(batch, 32)));
    h = ad::silu(t, nn::conv(p, h, "c1", nn::same3x3(batch, 16)));
    h = ad::silu(t, nn::conv(p, h, "d1", nn::down2x2(batch, 16)));
    h = ad::silu(t, nn::conv(p, h, "c2", nn::same3x3(batch, 8)));
    return nn::linear(p, ad::mean_pool(t, h, 64), "head");
  }
  ad::Var h = ad::silu(t, nn::conv(p, x, "p0", nn::patchify(batch, 32, 4)));
  h = ad::silu(t, nn::conv(p, h, "c0", nn::same3x3(batch, 8)));
  h = ad::silu(t, nn::conv(p, h, "c1", nn::same3x3(batch, 8)));
  h = ad::silu(t, nn::conv(p, h, "c2", nn::same3x3(batch, 8)));
  ad::Var pooled = ad::concat_cols(t, ad::mean_pool(t, h, 64), ad::max_pool(t, h, 64));
  return nn::linear(p, ad::silu(t, nn::linear(p, pooled, "fc")), "head");
}

template <typename Scalar>
Mat<Scalar> EmotionClassifier<Scalar>::probabilities(const M& x) const {
  ad::Tape<Scalar> tape;
  Binder<Scalar> p(tape, params, false);
  ad::Var lp = ad::log_softmax(tape, logits(p, tape.constant_ref(x)));
  return tape.value(lp).array().exp().matrix();
}

template <typename Scalar>
int EmotionClassifier<Scalar>::predict(const M& image) const {
  Eigen::Index best = 0;
  probabilities(image).row(0).maxCoeff(&best);
  return static_cast<int>(best);
}

// ---------------------------------------------------------------------------
// Embedder

template <typename Scalar>
JointEmbedder<Scalar> JointEmbedder<Scalar>::init(const EmbedderConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  JointEmbedder e;
  e.config = config;
  auto& ps = e.params;
  nn::add_conv(ps, rng, "i0", 4, 3, 32);
  nn::add_conv(ps, rng, "i1", 3, 32, 48);
  nn::add_conv(ps, rng, "i2", 2, 48, 64);
  nn::add_linear(ps, rng, "iproj", 16 * 64, config.embed_dim);
  ps.add("words", normal_matrix<Scalar>(rng, Vocabulary::instance().size(), config.word_dim, 1.0));
  nn::add_linear(ps, rng, "t0", config.word_dim, 64);
  nn::add_linear(ps, rng, "tproj", 64, config.embed_dim);
  return e;
}

template <typename Scalar>
ad::Var JointEmbedder<Scalar>::image_graph(Binder<Scalar>& p, ad::Var x) const {
  auto& t = p.tape();
  const int batch = static_cast<int>(t.value(x).rows() / kImagePixels);
  if (t.value(x).rows() != static_cast<Eigen::Index>(batch) * kImagePixels || t.value(x).cols() != 3) {
    throw ShapeError("embedder image input must be (B*1024) x 3");
  }
  ad::Var h = ad::silu(t, nn::conv(p, x, "i0", nn::patchify(batch, 32, 4)));
  h = ad::silu(t, nn::conv(p, h, "i1", nn::same3x3(batch, 8)));
  h = ad::silu(t, nn::conv(p, h, "i2", nn::down2x2(batch, 8)));
  h = ad::reshape(t, h, batch, 16 * 64);
  return ad::l2_normalize_rows(t, nn::linear(p, h, "iproj"));
}

template <typename Scalar>
ad::Var JointEmbedder<Scalar>::text_graph(Binder<Scalar>& p, const std::vector<PromptTokens>& prompts) const {
  auto& t = p.tape();
  std::vector<int> ids;
  M avg = M::Zero(static_cast<Eigen::Index>(prompts.size()), 0);
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (const auto& pr : prompts) {
    const std::size_t start = ids.size();
    if (pr.empty()) {
      ids.push_back(Vocabulary::kNull);
    } else {
      for (int id : pr) {
        if (id < 0 || id >= Vocabulary::instance().size()) throw ShapeError("token id out of range");
        ids.push_back(id);
      }
    }
    spans.emplace_back(start, ids.size());
  }
  avg = M::Zero(static_cast<Eigen::Index>(prompts.size()), static_cast<Eigen::Index>(ids.size()));
  for (std::size_t b = 0; b < spans.size(); ++b) {
    const auto [s, e] = spans[b];
    for (std::size_t i = s; i < e; ++i) {
      avg(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(i)) = Scalar(1) / static_cast<Scalar>(e - s);
    }
  }
  ad::Var words = ad::gather_rows(t, p("words"), ids);
  ad::Var pooled = ad::matmul(t, t.constant(std::move(avg)), words);
  ad::Var h = ad::silu(t, nn::linear(p, pooled, "t0"));
  return ad::l2_normalize_rows(t, nn::linear(p, h, "tproj"));
}

template <typename Scalar>
Mat<Scalar> JointEmbedder<Scalar>::embed_images(const M& x) const {
  ad::Tape<Scalar> tape;
  Binder<Scalar> p(tape, params, false);
  return tape.value(image_graph(p, tape.constant_ref(x)));
}

template <typename Scalar>
Mat<Scalar> JointEmbedder<Scalar>::embed_texts(const std::vector<PromptTokens>& prompts) const {
  ad::Tape<Scalar> tape;
  Binder<Scalar> p(tape, params, false);
  return tape.value(text_graph(p, prompts));
}

// ---------------------------------------------------------------------------
// Training

MatF stack_images(const std::vector<const MatF*>& images) {
  MatF out(static_cast<Eigen::Index>(images.size()) * kImagePixels, kImageChannels);
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.middleRows(static_cast<Eigen::Index>(i) * kImagePixels, kImagePixels) = *images[i];
  }
  return out;
}

double denoiser_heldout_mse(const Denoiser<float>& model, const GlyphDataset& heldout, int samples,
                            std::uint64_t seed) {
  if (heldout.samples.empty()) throw std::invalid_argument("empty held-out set");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick_t(1, model.config.train_steps);
  const auto sched = model.schedule();
  double total = 0.0;
  constexpr int kChunk = 32;
  for (int start = 0; start < samples; start += kChunk) {
    const int n = std::min(kChunk, samples - start);
    MatF z(static_cast<Eigen::Index>(n) * kImagePixels, 3), eps = gaussian(rng, z.rows(), 3);
    std::vector<int> ts;
    MatF cond(static_cast<Eigen::Index>(n) * (model.config.prompt_len + model.config.emotion_tokens),
              model.config.token_dim);
    for (int i = 0; i < n; ++i) {
      const auto& s = heldout.samples[static_cast<std::size_t>(start + i) % heldout.samples.size()];
      const int t = pick_t(rng);
      ts.push_back(model.config.train_steps >= t ? t : 1);
      z.middleRows(static_cast<Eigen::Index>(i) * kImagePixels, kImagePixels) =
          forward_diffuse(to_model_space(s.image), t, eps.middleRows(static_cast<Eigen::Index>(i) * kImagePixels, kImagePixels), sched);
      cond.middleRows(static_cast<Eigen::Index>(i) * (model.config.prompt_len + model.config.emotion_tokens),
                      model.config.prompt_len + model.config.emotion_tokens) = model.condition(s.tokens).tokens();
    }
    total += (model.predict(z, ts, cond) - eps).squaredNorm();
  }
  return total / (static_cast<double>(samples) * kImagePixels * kImageChannels);
}

Trained<Denoiser<float>> train_denoiser(const GlyphDataset& train, const GlyphDataset& heldout,
                                        const DenoiserConfig& arch, const DenoiserTrainConfig& config,
                                        std::uint64_t seed) {
  if (train.samples.empty()) throw std::invalid_argument("train_denoiser: empty dataset");
  if (!(config.dropout >= 0.0 && config.dropout <= 1.0)) throw std::invalid_argument("dropout must lie in [0, 1]");
  std::mt19937_64 rng(seed);
  Trained<Denoiser<float>> result{Denoiser<float>::init(arch, seed ^ 0x9e3779b97f4a7c15ULL), {}};
  auto& model = result.model;
  ParamStore<float> ema = model.params;
  Adam<float> opt(model.params);
  const auto sched = model.schedule();

  const int n = static_cast<int>(train.samples.size());
  const int batch = std::min(config.batch, n);
  const int steps_per_epoch = std::max(1, n / batch);
  const int total = steps_per_epoch * config.epochs;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::uniform_int_distribution<int> pick_t(1, arch.train_steps);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const int seq = arch.prompt_len + arch.emotion_tokens;
  const std::vector<int> null_ids(static_cast<std::size_t>(arch.prompt_len), Vocabulary::kNull);

  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (int s = 0; s < steps_per_epoch; ++s, ++step) {
      MatF z(static_cast<Eigen::Index>(batch) * kImagePixels, 3);
      MatF eps = gaussian(rng, z.rows(), 3);
      std::vector<int> ts, ids;
      for (int b = 0; b < batch; ++b) {
        const auto& sample = train.samples[static_cast<std::size_t>(order[static_cast<std::size_t>(s * batch + b)])];
        const int t = pick_t(rng);
        ts.push_back(t);
        z.middleRows(static_cast<Eigen::Index>(b) * kImagePixels, kImagePixels) = forward_diffuse(
            to_model_space(sample.image), t, eps.middleRows(static_cast<Eigen::Index>(b) * kImagePixels, kImagePixels),
            sched);
        const auto pid = coin(rng) < config.dropout ? null_ids : model.padded_ids(sample.tokens);
        ids.insert(ids.end(), pid.begin(), pid.end());
      }
      ad::Tape<float> tape;
      Binder<float> p(tape, model.params, true);
      ad::Var prompt = model.encode_graph(p, ids);
      ad::Var cond = ad::stack_blocks(tape, prompt, ad::tile_rows(tape, p("void"), batch), batch);
      (void)seq;
      ad::Var out = model.forward(p, tape.constant_ref(z), ts, cond);
      ad::Var loss = ad::mse(tape, out, tape.constant_ref(eps));
      tape.backward(loss);
      const double l = tape.value(loss)(0, 0);
      if (!std::isfinite(l)) throw TrainingFailure("denoiser loss diverged at step " + std::to_string(step));
      epoch_loss += l;
      opt.step(model.params, p.gradients(), lr_at(config.lr, step, total, 200));
      const float d = static_cast<float>(std::min(config.ema_decay, (1.0 + step) / (10.0 + step)));
      for (std::size_t i = 0; i < ema.size(); ++i) ema.value(i) = d * ema.value(i) + (1.0f - d) * model.params.value(i);
    }
    result.report.epoch_loss.push_back(epoch_loss / steps_per_epoch);
    if (config.verbose) {
      std::cerr << "denoiser epoch " << epoch + 1 << "/" << config.epochs << " loss " << epoch_loss / steps_per_epoch
                << '\n';
    }
  }
  model.params = std::move(ema);
  result.report.dataset_hash = train.hash();
  result.report.seed = seed;
  result.report.heldout_metric = heldout.samples.empty()
                                     ? 0.0
                                     : denoiser_heldout_mse(model, heldout, config.heldout_samples, seed + 1);
  if (config.loss_ceiling && !(result.report.heldout_metric < *config.loss_ceiling)) {
    throw TrainingFailure("denoiser held-out MSE " + std::to_string(result.report.heldout_metric) +
                          " not below ceiling " + std::to_string(*config.loss_ceiling));
  }
  return result;
}

double classifier_accuracy(const EmotionClassifier<float>& model, const GlyphDataset& data) {
  if (data.samples.empty()) throw std::invalid_argument("classifier_accuracy: empty dataset");
  int correct = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < data.samples.size(); start += kChunk) {
    const std::size_t end = std::min(data.samples.size(), start + kChunk);
    std::vector<MatF> imgs;
    for (std::size_t i = start; i < end; ++i) imgs.push_back(to_model_space(data.samples[i].image));
    std::vector<const MatF*> ptrs;
    for (const auto& m : imgs) ptrs.push_back(&m);
    const MatF probs = model.probabilities(stack_images(ptrs));
    for (std::size_t i = start; i < end; ++i) {
      Eigen::Index best = 0;
      probs.row(static_cast<Eigen::Index>(i - start)).maxCoeff(&best);
      if (static_cast<int>(best) == emotion_id(data.samples[i].spec.emotion)) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.samples.size());
}

Trained<EmotionClassifier<float>> train_classifier(const GlyphDataset& train, const GlyphDataset& heldout,
                                                   ClassifierArch arch, const ClassifierTrainConfig& config,
                                                   std::uint64_t seed) {
  if (train.samples.empty()) throw std::invalid_argument("train_classifier: empty dataset");
  std::mt19937_64 rng(seed);
  Trained<EmotionClassifier<float>> result{EmotionClassifier<float>::init(arch, seed ^ 0x51ed27a3ULL), {}};
  auto& model = result.model;
  Adam<float> opt(model.params);
  const int n = static_cast<int>(train.samples.size());
  const int batch = std::min(config.batch, n);
  const int steps_per_epoch = std::max(1, n / batch);
  const int total = steps_per_epoch * config.epochs;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (int s = 0; s < steps_per_epoch; ++s, ++step) {
      MatF x(static_cast<Eigen::Index>(batch) * kImagePixels, 3);
      std::vector<int> labels;
      for (int b = 0; b < batch; ++b) {
        const auto& sample = train.samples[static_cast<std::size_t>(order[static_cast<std::size_t>(s * batch + b)])];
        const float sigma = static_cast<float>(config.noise_augment * unit(rng));
        x.middleRows(static_cast<Eigen::Index>(b) * kImagePixels, kImagePixels) =
            to_model_space(sample.image) + sigma * gaussian(rng, kImagePixels, 3);
        labels.push_back(emotion_id(sample.spec.emotion));
      }
      ad::Tape<float> tape;
      Binder<float> p(tape, model.params, true);
      ad::Var loss = ad::nll(tape, ad::log_softmax(tape, model.logits(p, tape.constant_ref(x))), labels);
      tape.backward(loss);
      epoch_loss += tape.value(loss)(0, 0);
      opt.step(model.params, p.gradients(), lr_at(config.lr, step, total, 50));
    }
    result.report.epoch_loss.push_back(epoch_loss / steps_per_epoch);
    if (config.verbose) {
      std::cerr << arch_name(arch) << " classifier epoch " << epoch + 1 << " loss " << epoch_loss / steps_per_epoch
                << '\n';
    }
  }
  result.report.dataset_hash = train.hash();
  result.report.seed = seed;
  result.report.heldout_metric = heldout.samples.empty() ? 0.0 : classifier_accuracy(model, heldout);
  if (!heldout.samples.empty() && result.report.heldout_metric < config.accuracy_floor) {
    throw TrainingFailure(arch_name(arch) + " classifier held-out accuracy " +
                          std::to_string(result.report.heldout_metric) + " below floor " +
                          std::to_string(config.accuracy_floor));
  }
  return result;
}

double embedder_retrieval(const JointEmbedder<float>& model, const GlyphDataset& data, int batch) {
  if (data.samples.empty()) throw std::invalid_argument("embedder_retrieval: empty dataset");
  int correct = 0, count = 0;
  for (std::size_t start = 0; start + static_cast<std::size_t>(batch) <= data.samples.size() || start == 0;
       start += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(data.samples.size(), start + static_cast<std::size_t>(batch));
    std::vector<MatF> imgs;
    std::vector<PromptTokens> prompts;
    for (std::size_t i = start; i < end; ++i) {
      imgs.push_back(to_model_space(data.samples[i].image));
      prompts.push_back(data.samples[i].tokens);
    }
    std::vector<const MatF*> ptrs;
    for (const auto& m : imgs) ptrs.push_back(&m);
    const MatF ie = model.embed_images(stack_images(ptrs));
    const MatF te = model.embed_texts(prompts);
    const MatF sim = ie * te.transpose();
    for (Eigen::Index i = 0; i < sim.rows(); ++i) {
      Eigen::Index best = 0;
      sim.row(i).maxCoeff(&best);
      if (prompts[static_cast<std::size_t>(best)] == prompts[static_cast<std::size_t>(i)]) ++correct;
      ++count;
    }
    if (end == data.samples.size()) break;
  }
  return static_cast<double>(correct) / count;
}

Trained<JointEmbedder<float>> train_embedder(const GlyphDataset& train, const GlyphDataset& heldout,
                                             const EmbedderConfig& arch, const EmbedderTrainConfig& config,
                                             std::uint64_t seed) {
  if (train.samples.empty()) throw std::invalid_argument("train_embedder: empty dataset");
  std::mt19937_64 rng(seed);
  Trained<JointEmbedder<float>> result{JointEmbedder<float>::init(arch, seed ^ 0x2545f491ULL), {}};
  auto& model = result.model;
  Adam<float> opt(model.params);
  const int n = static_cast<int>(train.samples.size());
  const int batch = std::min(config.batch, n);
  const int steps_per_epoch = std::max(1, n / batch);
  const int total = steps_per_epoch * config.epochs;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const float inv_tau = static_cast<float>(1.0 / arch.temperature);
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (int s = 0; s < steps_per_epoch; ++s, ++step) {
      std::vector<MatF> imgs;
      std::vector<PromptTokens> prompts;
      for (int b = 0; b < batch; ++b) {
        const auto& sample = train.samples[static_cast<std::size_t>(order[static_cast<std::size_t>(s * batch + b)])];
        imgs.push_back(to_model_space(sample.image));
        prompts.push_back(sample.tokens);
      }
      std::vector<const MatF*> ptrs;
      for (const auto& m : imgs) ptrs.push_back(&m);
      // Duplicate prompts within a batch share the target mass.
      MatF targets = MatF::Zero(batch, batch);
      for (int i = 0; i < batch; ++i)
        for (int j = 0; j < batch; ++j)
          if (prompts[static_cast<std::size_t>(i)] == prompts[static_cast<std::size_t>(j)]) targets(i, j) = 1.0f;
      targets = (targets.array().colwise() / targets.rowwise().sum().array()).matrix();

      ad::Tape<float> tape;
      Binder<float> p(tape, model.params, true);
      ad::Var ie = model.image_graph(p, tape.constant(stack_images(ptrs)));
      ad::Var te = model.text_graph(p, prompts);
      ad::Var logits = ad::scale(tape, ad::matmul(tape, ie, ad::transpose(tape, te)), inv_tau);
      ad::Var l_img = ad::soft_cross_entropy(tape, ad::log_softmax(tape, logits), targets);
      ad::Var l_txt = ad::soft_cross_entropy(tape, ad::log_softmax(tape, ad::transpose(tape, logits)), targets);
      ad::Var loss = ad::axpby(tape, l_img, 0.5f, l_txt, 0.5f);
      tape.backward(loss);
      epoch_loss += tape.value(loss)(0, 0);
      opt.step(model.params, p.gradients(), lr_at(config.lr, step, total, 50));
    }
    result.report.epoch_loss.push_back(epoch_loss / steps_per_epoch);
    if (config.verbose) std::cerr << "embedder epoch " << epoch + 1 << " loss " << epoch_loss / steps_per_epoch << '\n';
  }
  result.report.dataset_hash = train.hash();
  result.report.seed = seed;
  result.report.heldout_metric = heldout.samples.empty() ? 0.0 : embedder_retrieval(model, heldout);
  if (!heldout.samples.empty() && result.report.heldout_metric < config.retrieval_floor) {
    throw TrainingFailure("embedder retrieval " + std::to_string(result.report.heldout_metric) + " below floor " +
                          std::to_string(config.retrieval_floor));
  }
  return result;
}

template class Denoiser<float>;
template class Denoiser<double>;
template class EmotionClassifier<float>;
template class EmotionClassifier<double>;
template class JointEmbedder<float>;
template class JointEmbedder<double>;
template Mat<float> timestep_features<float>(const std::vector<int>&, int, int);
template Mat<double> timestep_features<double>(const std::vector<int>&, int, int);

}  // namespace muse
