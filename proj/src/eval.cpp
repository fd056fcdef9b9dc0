#include "muse/eval.hpp"

#include "muse/png_io.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace muse {

namespace {

constexpr int kChunk = 32;

void require_nonempty(std::size_t n, const char* what) {
  if (n == 0) throw std::invalid_argument(std::string(what) + ": empty set");
}

void require_paired(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw std::invalid_argument(std::string(what) + ": length mismatch");
}

template <typename F>
void for_chunks(const std::vector<MatF>& images, F&& f) {
  for (std::size_t lo = 0; lo < images.size(); lo += kChunk) {
    const std::size_t hi = std::min(images.size(), lo + kChunk);
    std::vector<MatF> model(images.begin() + static_cast<std::ptrdiff_t>(lo),
                            images.begin() + static_cast<std::ptrdiff_t>(hi));
    std::vector<const MatF*> ptrs;
    for (auto& m : model) {
      m = to_model_space(m);
      ptrs.push_back(&m);
    }
    f(lo, stack_images(ptrs));
  }
}

void gaussian_stats(const MatD& x, const FrechetOptions& options, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
  const auto n = x.rows();
  const auto d = x.cols();
  if (n < 2) throw std::invalid_argument("frechet_distance: each set needs at least 2 samples");
  mu = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
  cov = centered.transpose() * centered / static_cast<double>(n - 1);
  if (n <= d) {
    if (!options.allow_shrinkage) {
      throw NumericDomainError("frechet_distance: covariance is singular (n <= d) and shrinkage is off");
    }
    const double s = options.shrinkage;
    const double avg = cov.trace() / static_cast<double>(d);
    cov = (1.0 - s) * cov + s * avg * Eigen::MatrixXd::Identity(d, d);
  }
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j);
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

std::ofstream open_csv(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os.precision(9);
  return os;
}

std::string format_eta(double eta) {
  if (std::isinf(eta)) return eta > 0 ? "inf" : "-inf";
  std::ostringstream ss;
  ss.precision(9);
  ss << eta;
  return ss.str();
}

// Minimal raster canvas for line plots.
class Canvas {
 public:
  Canvas(int w, int h) : w_(w), h_(h), px_(MatF::Ones(static_cast<Eigen::Index>(w) * h, 3)) {}

  void set(int x, int y, const std::array<float, 3>& c) {
    if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
    for (int k = 0; k < 3; ++k) px_(static_cast<Eigen::Index>(y) * w_ + x, k) = c[static_cast<std::size_t>(k)];
  }

  void line(int x0, int y0, int x1, int y1, const std::array<float, 3>& c) {
    const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    for (;;) {
      set(x0, y0, c);
      set(x0, y0 + 1, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void box(int x0, int y0, int x1, int y1, const std::array<float, 3>& c) {
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) set(x, y, c);
  }

  void save(const std::filesystem::path& path) const { write_png(path, px_, h_, w_); }
  int width() const { return w_; }
  int height() const { return h_; }

 private:
  int w_, h_;
  MatF px_;
};

constexpr std::array<std::array<float, 3>, 8> kPalette = {{{0.89f, 0.10f, 0.11f},
                                                           {0.22f, 0.49f, 0.72f},
                                                           {0.30f, 0.69f, 0.29f},
                                                           {0.60f, 0.31f, 0.64f},
                                                           {1.00f, 0.50f, 0.00f},
                                                           {0.65f, 0.34f, 0.16f},
                                                           {0.97f, 0.51f, 0.75f},
                                                           {0.40f, 0.40f, 0.40f}}};
constexpr std::array<float, 3> kBlack = {0.f, 0.f, 0.f};
constexpr std::array<float, 3> kGrid = {0.85f, 0.85f, 0.85f};

// Draws series over x in [0, n-1] and y in [0, 1] inside a framed plot area,
// with a colour key in the top margin.
void draw_series(Canvas& c, const std::vector<std::vector<double>>& series) {
  const int left = 40, right = c.width() - 16, top = 32, bottom = c.height() - 24;
  for (int i = 0; i <= 4; ++i) {
    const int y = bottom - (bottom - top) * i / 4;
    c.line(left, y, right, y, kGrid);
    c.line(left - 5, y, left, y, kBlack);
  }
  c.line(left, top, left, bottom, kBlack);
  c.line(left, bottom, right, bottom, kBlack);
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& col = kPalette[s % kPalette.size()];
    c.box(left + 14 * static_cast<int>(s), 10, left + 14 * static_cast<int>(s) + 9, 19, col);
    const auto& v = series[s];
    if (v.empty()) continue;
    const double span = std::max<std::size_t>(1, v.size() - 1);
    auto px = [&](std::size_t i) { return left + static_cast<int>(std::lround((right - left) * (i / span))); };
    auto py = [&](double y) {
      return bottom - static_cast<int>(std::lround((bottom - top) * std::clamp(y, 0.0, 1.0)));
    };
    if (v.size() == 1) c.box(px(0) - 1, py(v[0]) - 1, px(0) + 1, py(v[0]) + 1, col);
    for (std::size_t i = 1; i < v.size(); ++i) c.line(px(i - 1), py(v[i - 1]), px(i), py(v[i]), col);
  }
}

}  // namespace

std::vector<int> classify_all(const std::vector<MatF>& images, const EmotionClassifier<float>& classifier) {
  std::vector<int> out(images.size());
  for_chunks(images, [&](std::size_t lo, const MatF& batch) {
    const MatF p = classifier.probabilities(batch);
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      Eigen::Index arg = 0;
      p.row(r).maxCoeff(&arg);
      out[lo + static_cast<std::size_t>(r)] = static_cast<int>(arg);
    }
  });
  return out;
}

double emotion_accuracy(const std::vector<MatF>& images, const std::vector<Emotion>& targets,
                        const EmotionClassifier<float>& classifier) {
  require_nonempty(images.size(), "emotion_accuracy");
  require_paired(images.size(), targets.size(), "emotion_accuracy");
  const auto pred = classify_all(images, classifier);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == emotion_id(targets[i]);
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

MatD image_features(const std::vector<MatF>& images, const JointEmbedder<float>& embedder) {
  MatD out(static_cast<Eigen::Index>(images.size()), embedder.config.embed_dim);
  for_chunks(images, [&](std::size_t lo, const MatF& batch) {
    const MatF e = embedder.embed_images(batch);
    out.middleRows(static_cast<Eigen::Index>(lo), e.rows()) = e.cast<double>();
  });
  return out;
}

double frechet_distance(const MatD& a, const MatD& b, const FrechetOptions& options) {
  if (a.cols() != b.cols()) throw ShapeError("frechet_distance: feature dimensions differ");
  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd ca, cb;
  gaussian_stats(a, options, mu_a, ca);
  gaussian_stats(b, options, mu_b, cb);
  const Eigen::MatrixXd ra = psd_sqrt(ca);
  Eigen::MatrixXd inner = ra * cb * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (mu_a - mu_b).squaredNorm() + ca.trace() + cb.trace() - 2.0 * cross;
  return std::max(0.0, d);
}

double semantic_score(const std::vector<MatF>& images, const std::vector<PromptTokens>& prompts,
                      const JointEmbedder<float>& embedder) {
  require_nonempty(images.size(), "semantic_score");
  require_paired(images.size(), prompts.size(), "semantic_score");
  const MatD fi = image_features(images, embedder);
  double sum = 0;
  for (std::size_t lo = 0; lo < prompts.size(); lo += kChunk) {
    const std::size_t hi = std::min(prompts.size(), lo + kChunk);
    const std::vector<PromptTokens> chunk(prompts.begin() + static_cast<std::ptrdiff_t>(lo),
                                          prompts.begin() + static_cast<std::ptrdiff_t>(hi));
    const MatD ft = embedder.embed_texts(chunk).cast<double>();
    for (Eigen::Index r = 0; r < ft.rows(); ++r) sum += fi.row(static_cast<Eigen::Index>(lo) + r).dot(ft.row(r));
  }
  return sum / static_cast<double>(images.size());
}

double intra_class_variance(const std::vector<MatF>& images, const std::vector<Emotion>& labels,
                            const JointEmbedder<float>& embedder) {
  require_nonempty(images.size(), "intra_class_variance");
  require_paired(images.size(), labels.size(), "intra_class_variance");
  const MatD f = image_features(images, embedder);
  double total = 0;
  int classes = 0;
  for (Emotion e : kAllEmotions) {
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == e) rows.push_back(static_cast<Eigen::Index>(i));
    }
    if (rows.empty()) continue;
    if (rows.size() < 2) {
      throw std::invalid_argument("intra_class_variance: class " + std::string(emotion_name(e)) +
                                  " has a single sample");
    }
    Eigen::RowVectorXd centroid = Eigen::RowVectorXd::Zero(f.cols());
    for (auto r : rows) centroid += f.row(r);
    centroid /= static_cast<double>(rows.size());
    double v = 0;
    for (auto r : rows) v += (f.row(r) - centroid).squaredNorm();
    total += v / static_cast<double>(rows.size());
    ++classes;
  }
  return total / classes;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  require_paired(x.size(), y.size(), "spearman");
  if (x.size() < 2) throw std::invalid_argument("spearman: need at least 2 points");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const Eigen::Map<const Eigen::VectorXd> a(rx.data(), static_cast<Eigen::Index>(rx.size()));
  const Eigen::Map<const Eigen::VectorXd> b(ry.data(), static_cast<Eigen::Index>(ry.size()));
  const Eigen::VectorXd ca = a.array() - a.mean();
  const Eigen::VectorXd cb = b.array() - b.mean();
  const double den = std::sqrt(ca.squaredNorm() * cb.squaredNorm());
  return den > 0 ? ca.dot(cb) / den : 0.0;
}

void EvalReport::write_csv(const std::filesystem::path& path) const {
  auto os = open_csv(path);
  os << "condition,n,acc_guide,acc_agnostic,acc_reduced,fd_toy,semantic,intra_class_var,config_hash\n";
  for (const auto& r : rows) {
    os << r.condition << ',' << r.n << ',' << r.acc_guide << ',' << r.acc_agnostic << ',' << r.acc_reduced << ','
       << r.fd << ',' << r.semantic << ',' << r.intra_class_var << ',' << config_hash << '\n';
  }
}

EvalRow evaluate_set(const std::string& condition, const std::vector<MatF>& images,
                     const std::vector<Emotion>& targets, const std::vector<PromptTokens>& prompts,
                     const MatD& reference_features, const EvalModels& models) {
  EvalRow r;
  r.condition = condition;
  r.n = static_cast<int>(images.size());
  r.acc_guide = emotion_accuracy(images, targets, *models.guidance.classifier);
  r.acc_agnostic = emotion_accuracy(images, targets, *models.agnostic);
  if (models.reduced) r.acc_reduced = emotion_accuracy(images, targets, *models.reduced);
  r.fd = frechet_distance(image_features(images, *models.guidance.embedder), reference_features);
  r.semantic = semantic_score(images, prompts, *models.guidance.embedder);
  r.intra_class_var = intra_class_variance(images, targets, *models.guidance.embedder);
  return r;
}

std::vector<PromptTokens> neutral_prompts(int n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("neutral_prompts: n must be positive");
  const auto data = generate_dataset((n + 7) / 8 * 8, 0.0, seed);
  std::vector<PromptTokens> out;
  for (int i = 0; i < n; ++i) out.push_back(data.samples[static_cast<std::size_t>(i)].tokens);
  return out;
}

std::vector<GenerationJob> all_target_jobs(const std::vector<PromptTokens>& prompts, int seeds,
                                           std::uint64_t base_seed) {
  std::vector<GenerationJob> jobs;
  for (int s = 0; s < seeds; ++s) {
    const auto& p = prompts[static_cast<std::size_t>(s) % prompts.size()];
    for (Emotion e : kAllEmotions) jobs.push_back({p, e, base_seed + static_cast<std::uint64_t>(s)});
  }
  return jobs;
}

GuidedOutputs run_guided(const std::vector<GenerationJob>& jobs, const GuidanceModels& models,
                         const GuidanceConfig& config) {
  GuidedOutputs out;
  for (const auto& j : jobs) {
    auto r = generate(j.prompt, j.target, models, config, j.seed);
    out.images.push_back(std::move(r.image));
    out.traces.push_back(std::move(r.trace));
  }
  return out;
}

std::vector<MatF> run_vanilla(const std::vector<GenerationJob>& jobs, const Denoiser<float>& denoiser,
                              const GuidanceConfig& config) {
  std::vector<MatF> out;
  for (const auto& j : jobs) out.push_back(generate_vanilla(j.prompt, j.target, denoiser, config, j.seed));
  return out;
}

std::vector<Emotion> job_targets(const std::vector<GenerationJob>& jobs) {
  std::vector<Emotion> t;
  for (const auto& j : jobs) t.push_back(j.target);
  return t;
}

std::vector<PromptTokens> job_prompts(const std::vector<GenerationJob>& jobs) {
  std::vector<PromptTokens> p;
  for (const auto& j : jobs) p.push_back(j.resolved_prompt());
  return p;
}

void EtaSweep::write_csv(const std::filesystem::path& path) const {
  auto os = open_csv(path);
  os << "eta,n,acc_guide,acc_agnostic,acc_reduced,fd_toy,semantic,intra_class_var,config_hash\n";
  for (std::size_t i = 0; i < etas.size(); ++i) {
    const auto& r = report.rows[i];
    os << format_eta(etas[i]) << ',' << r.n << ',' << r.acc_guide << ',' << r.acc_agnostic << ',' << r.acc_reduced
       << ',' << r.fd << ',' << r.semantic << ',' << r.intra_class_var << ',' << report.config_hash << '\n';
  }
  os << "# spearman(acc_agnostic, eta)=" << rho_accuracy << " spearman(semantic, eta)=" << rho_semantic << '\n';
}

EtaSweep sweep_eta(const std::vector<double>& etas, const std::vector<GenerationJob>& jobs,
                   const MatD& reference_features, const EvalModels& models, const GuidanceConfig& config,
                   const std::string& config_hash) {
  if (etas.size() < 3) throw std::invalid_argument("sweep_eta: need at least 3 eta values");
  if (!std::is_sorted(etas.begin(), etas.end())) throw std::invalid_argument("sweep_eta: grid must be ascending");
  require_nonempty(jobs.size(), "sweep_eta");
  EtaSweep sweep;
  sweep.etas = etas;
  sweep.report.config_hash = config_hash;
  std::vector<double> acc, sem;
  for (double eta : etas) {
    GuidanceConfig c = config;
    c.eta = eta;
    const auto out = run_guided(jobs, models.guidance, c);
    auto row = evaluate_set("eta=" + format_eta(eta), out.images, job_targets(jobs), job_prompts(jobs),
                            reference_features, models);
    acc.push_back(row.acc_agnostic);
    sem.push_back(row.semantic);
    sweep.report.rows.push_back(std::move(row));
  }
  sweep.rho_accuracy = spearman(acc, etas);
  sweep.rho_semantic = spearman(sem, etas);
  return sweep;
}

const AblationRow& AblationReport::row(const std::string& name) const {
  for (const auto& r : rows) {
    if (r.name == name) return r;
  }
  throw std::out_of_range("no ablation row " + name);
}

void AblationReport::write_csv(const std::filesystem::path& path) const {
  auto os = open_csv(path);
  os << "losses,n,acc_guide,acc_agnostic,neighbor_confusion_rate,inherent_capture_rate,inherent_runs,config_hash\n";
  for (const auto& r : rows) {
    os << r.name << ',' << r.n << ',' << r.acc_guide << ',' << r.acc_agnostic << ',' << r.confusion_rate << ','
       << r.inherent_capture_rate << ',' << r.inherent_runs << ',' << config_hash << '\n';
  }
}

AblationRow ablation_row(const std::string& name, const GuidedOutputs& out, const std::vector<GenerationJob>& jobs,
                         const EvalModels& models) {
  const auto targets = job_targets(jobs);
  AblationRow r;
  r.name = name;
  r.n = static_cast<int>(jobs.size());
  r.acc_guide = emotion_accuracy(out.images, targets, *models.guidance.classifier);
  const auto pred = classify_all(out.images, *models.agnostic);
  int hits = 0, neighbours = 0, captured = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const Emotion p = emotion_from_id(pred[i]);
    hits += p == targets[i];
    const auto sim = models.guidance.wheel->similar(targets[i]);
    neighbours += std::find(sim.begin(), sim.end(), p) != sim.end();
    const auto& inh = out.traces[i].y_inh;
    if (inh && *inh != targets[i]) {
      ++r.inherent_runs;
      captured += p == *inh;
    }
  }
  r.acc_agnostic = static_cast<double>(hits) / r.n;
  r.confusion_rate = static_cast<double>(neighbours) / r.n;
  r.inherent_capture_rate = r.inherent_runs ? static_cast<double>(captured) / r.inherent_runs : 0.0;
  return r;
}

AblationReport ablate_losses(const std::vector<GenerationJob>& jobs, const EvalModels& models,
                             const GuidanceConfig& config, const std::string& config_hash) {
  require_nonempty(jobs.size(), "ablate_losses");
  struct Variant {
    const char* name;
    double l1, l2;
  };
  const std::array<Variant, 4> variants = {{{"target-only", 0.0, 0.0},
                                            {"+L_sim", 0.0, config.lambda2},
                                            {"+L_inh", config.lambda1, 0.0},
                                            {"full", config.lambda1, config.lambda2}}};
  AblationReport report;
  report.config_hash = config_hash;
  for (const auto& v : variants) {
    GuidanceConfig c = config;
    c.lambda1 = v.l1;
    c.lambda2 = v.l2;
    report.rows.push_back(ablation_row(v.name, run_guided(jobs, models.guidance, c), jobs, models));
  }
  return report;
}

void plot_inner_probabilities(const SynthesisTrace& trace, const std::filesystem::path& path) {
  std::vector<std::vector<double>> series(kNumEmotions);
  for (const auto& s : trace.steps) {
    if (s.inner.empty()) continue;
    for (const auto& rec : s.inner) {
      for (int k = 0; k < kNumEmotions; ++k) series[static_cast<std::size_t>(k)].push_back(rec.probs[static_cast<std::size_t>(k)]);
    }
  }
  if (series[0].empty()) {
    // No guidance happened; fall back to the per-step probabilities.
    for (const auto& s : trace.steps) {
      for (int k = 0; k < kNumEmotions; ++k) series[static_cast<std::size_t>(k)].push_back(s.probs[static_cast<std::size_t>(k)]);
    }
  }
  Canvas c(480, 300);
  draw_series(c, series);
  c.save(path);
}

void plot_eta_sweep(const EtaSweep& sweep, const std::filesystem::path& path) {
  std::vector<std::vector<double>> series(3);
  for (const auto& r : sweep.report.rows) {
    series[0].push_back(r.acc_agnostic);
    series[1].push_back(r.acc_guide);
    series[2].push_back(0.5 * (r.semantic + 1.0));
  }
  Canvas c(480, 300);
  draw_series(c, series);
  c.save(path);
}

}  // namespace muse
