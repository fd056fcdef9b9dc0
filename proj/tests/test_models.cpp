#include "gradcheck.hpp"
#include "muse/models.hpp"

#include <gtest/gtest.h>

namespace muse {
namespace {

using ad::Tape;
using ad::Var;
using testing::check_gradients;
using testing::random_matrix;

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

TEST(Denoiser, OutputShapeMatchesInput) {
  auto d = Denoiser<float>::init({}, 1);
  MatF z = MatF::Random(2 * kImagePixels, 3);
  MatF cond(2 * 14, 64);
  cond << d.condition(tokenize("a star on dark background")).tokens(), d.null_condition().tokens();
  const MatF eps = d.predict(z, {10, 900}, cond);
  EXPECT_EQ(eps.rows(), z.rows());
  EXPECT_EQ(eps.cols(), z.cols());
  EXPECT_TRUE(eps.allFinite());
}

TEST(Denoiser, BatchedPredictionMatchesSingle) {
  auto d = Denoiser<float>::init({}, 2);
  MatF z = MatF::Random(2 * kImagePixels, 3);
  const auto c0 = d.condition(tokenize("a ring on light background")).tokens();
  const auto c1 = d.null_condition().tokens();
  MatF cond(28, 64);
  cond << c0, c1;
  const MatF both = d.predict(z, {300, 700}, cond);
  EXPECT_TRUE(both.topRows(kImagePixels).isApprox(d.predict(z.topRows(kImagePixels), {300}, c0), 1e-5f));
  EXPECT_TRUE(both.bottomRows(kImagePixels).isApprox(d.predict(z.bottomRows(kImagePixels), {700}, c1), 1e-5f));
}

TEST(Denoiser, NullConditionIgnoresPromptContent) {
  auto d = Denoiser<float>::init({}, 3);
  const MatF a = d.null_condition().tokens();
  EXPECT_EQ(a.rows(), 14);
  MatF z = MatF::Random(kImagePixels, 3);
  EXPECT_EQ(d.predict(z, 500, d.null_condition()), d.predict(z, 500, d.null_condition()));
}

TEST(Denoiser, ConditionLayout) {
  auto d = Denoiser<float>::init({}, 4);
  auto c = d.condition(tokenize("a star on dark background"));
  EXPECT_EQ(c.length(), 14);
  const auto o = c.origins();
  EXPECT_EQ(std::count(o.begin(), o.end(), TokenOrigin::prompt), 10);
  EXPECT_EQ(std::count(o.begin(), o.end(), TokenOrigin::placeholder), 4);
  EXPECT_EQ(o.back(), TokenOrigin::placeholder);
  EXPECT_THROW(d.padded_ids(PromptTokens(11, 2)), ShapeError);
}

TEST(Denoiser, ShapeMismatchThrows) {
  auto d = Denoiser<float>::init({}, 5);
  EXPECT_THROW(d.predict(MatF::Zero(100, 3), {1}, d.null_condition().tokens()), ShapeError);
  EXPECT_THROW(d.predict(MatF::Zero(kImagePixels, 3), {1}, MatF::Zero(13, 64)), ShapeError);
}

TEST(Denoiser, GradientsMatchFiniteDifferences) {
  const auto d = Denoiser<double>::init(small_denoiser(), 6);
  std::mt19937_64 rng(7);
  MatD z = random_matrix(rng, kImagePixels, 3);
  MatD cond = random_matrix(rng, 14, 8);
  auto r = check_gradients({z, cond}, [&d](Tape<double>& t, const std::vector<Var>& v) {
    Binder<double> p(t, d.params, false);
    return d.forward(p, v[0], {417}, v[1]);
  }, 60, 8);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Denoiser, ParameterGradientsMatchFiniteDifferences) {
  auto d = Denoiser<double>::init(small_denoiser(), 9);
  std::mt19937_64 rng(10);
  // Zero-initialised tensors would hide some paths; perturb everything.
  for (std::size_t i = 0; i < d.params.size(); ++i) {
    d.params.value(i) += random_matrix(rng, d.params.value(i).rows(), d.params.value(i).cols(), 0.05);
  }
  const MatD z = random_matrix(rng, 2 * kImagePixels, 3);
  const MatD weights = random_matrix(rng, 2 * kImagePixels, 3);
  std::vector<int> ids = d.padded_ids({2, 5, 9});
  const auto null_ids = std::vector<int>(10, Vocabulary::kNull);
  ids.insert(ids.end(), null_ids.begin(), null_ids.end());

  auto objective = [&](std::vector<MatD>* grads) {
    Tape<double> t;
    Binder<double> p(t, d.params, true);
    Var cond = ad::stack_blocks(t, d.encode_graph(p, ids), ad::tile_rows(t, p("void"), 2), 2);
    Var out = d.forward(p, t.constant(z), {250, 40}, cond);
    if (grads) {
      t.backward(out, weights);
      *grads = p.gradients();
    }
    return (t.value(out).array() * weights.array()).sum();
  };
  std::vector<MatD> grads;
  objective(&grads);
  std::uniform_int_distribution<std::size_t> pick_tensor(0, d.params.size() - 1);
  double worst = 0.0;
  for (int n = 0; n < 60; ++n) {
    const std::size_t i = pick_tensor(rng);
    std::uniform_int_distribution<Eigen::Index> pick(0, d.params.value(i).size() - 1);
    const Eigen::Index j = pick(rng);
    double& w = d.params.value(i).data()[j];
    const double saved = w, h = 1e-5;
    w = saved + h;
    const double up = objective(nullptr);
    w = saved - h;
    const double down = objective(nullptr);
    w = saved;
    const double numeric = (up - down) / (2 * h), analytic = grads[i].data()[j];
    // Key biases have an exactly zero gradient (softmax shift invariance), so
    // the denominator is floored well above finite-difference roundoff.
    worst = std::max(worst, std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-4}));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Classifier, ArchitecturesDiffer) {
  auto g = EmotionClassifier<float>::init(ClassifierArch::guide, 1);
  auto a = EmotionClassifier<float>::init(ClassifierArch::agnostic, 1);
  EXPECT_NE(g.parameter_count(), a.parameter_count());
  EXPECT_EQ(arch_from_name(arch_name(ClassifierArch::agnostic)), ClassifierArch::agnostic);
  EXPECT_THROW(arch_from_name("resnet"), std::invalid_argument);
}

TEST(Classifier, ProbabilitiesFormSimplex) {
  for (auto arch : {ClassifierArch::guide, ClassifierArch::agnostic}) {
    auto c = EmotionClassifier<float>::init(arch, 2);
    MatF x = MatF::Random(3 * kImagePixels, 3) * 5.0f;
    const MatF p = c.probabilities(x);
    ASSERT_EQ(p.rows(), 3);
    ASSERT_EQ(p.cols(), 8);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(p.row(i).sum(), 1.0f, 1e-5f);
    EXPECT_GE(p.minCoeff(), 0.0f);
    EXPECT_LE(p.maxCoeff(), 1.0f);
  }
}

TEST(Classifier, InputGradientsMatchFiniteDifferences) {
  for (auto arch : {ClassifierArch::guide, ClassifierArch::agnostic}) {
    const auto c = EmotionClassifier<double>::init(arch, 3);
    std::mt19937_64 rng(4);
    MatD x = random_matrix(rng, kImagePixels, 3);
    auto r = check_gradients({x}, [&c](Tape<double>& t, const std::vector<Var>& v) {
      Binder<double> p(t, c.params, false);
      return ad::log_softmax(t, c.logits(p, v[0]));
    }, 60, 5);
    EXPECT_LT(r.max_rel_error, 1e-4) << arch_name(arch);
  }
}

TEST(Embedder, OutputsAreUnitNorm) {
  auto e = JointEmbedder<float>::init({}, 1);
  const MatF imgs = e.embed_images(MatF::Random(4 * kImagePixels, 3));
  const MatF txt = e.embed_texts({tokenize("a star on dark background"), {}, tokenize("a ring")});
  for (Eigen::Index i = 0; i < imgs.rows(); ++i) EXPECT_NEAR(imgs.row(i).norm(), 1.0f, 1e-5f);
  for (Eigen::Index i = 0; i < txt.rows(); ++i) EXPECT_NEAR(txt.row(i).norm(), 1.0f, 1e-5f);
  EXPECT_EQ(imgs.cols(), 64);
}

TEST(Embedder, IdenticalImageGivesIdenticalVector) {
  auto e = JointEmbedder<float>::init({}, 2);
  const MatF x = MatF::Random(kImagePixels, 3);
  EXPECT_EQ(e.embed_image(x), e.embed_image(x));
}

TEST(Embedder, GradientsMatchFiniteDifferences) {
  const auto e = JointEmbedder<double>::init({}, 3);
  std::mt19937_64 rng(4);
  MatD x = random_matrix(rng, 2 * kImagePixels, 3);
  auto r = check_gradients({x}, [&e](Tape<double>& t, const std::vector<Var>& v) {
    Binder<double> p(t, e.params, false);
    return e.image_graph(p, v[0]);
  }, 60, 5);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(TimestepFeatures, BoundedAndDistinct) {
  const MatD f = timestep_features<double>({1, 500, 1000}, 32, 1000);
  EXPECT_LE(f.cwiseAbs().maxCoeff(), 1.0);
  EXPECT_GT((f.row(0) - f.row(1)).norm(), 0.1);
}

}  // namespace
}  // namespace muse
