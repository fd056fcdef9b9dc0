#include "gradcheck.hpp"

#include <gtest/gtest.h>

namespace muse {
namespace {

using ad::Tape;
using ad::Var;
using testing::check_gradients;
using testing::random_matrix;

constexpr double kTol = 1e-5;

TEST(Autodiff, DenseOps) {
  std::mt19937_64 rng(1);
  auto a = random_matrix(rng, 5, 4), b = random_matrix(rng, 4, 3), c = random_matrix(rng, 5, 3);
  auto bias = random_matrix(rng, 1, 3);
  auto r = check_gradients({a, b, c, bias}, [](Tape<double>& t, const std::vector<Var>& v) {
    Var m = ad::matmul(t, v[0], v[1]);
    Var s = ad::axpby(t, ad::add(t, m, v[2]), 0.7, ad::sub(t, m, v[2]), -1.3);
    return ad::silu(t, ad::add_row(t, ad::scale(t, s, 0.5), v[3]));
  }, 200, 2);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autodiff, PerSampleAxpby) {
  std::mt19937_64 rng(12);
  auto a = random_matrix(rng, 6, 2), b = random_matrix(rng, 6, 2);
  auto r = check_gradients({a, b}, [](Tape<double>& t, const std::vector<Var>& v) {
    return ad::axpby_per_sample(t, v[0], {0.3, -1.1, 2.0}, v[1], {0.9, 0.4, -0.5}, 2);
  }, 20, 5);
  EXPECT_LT(r.max_rel_error, kTol);
  Tape<double> t;
  Var x = t.constant(a);
  EXPECT_THROW(ad::axpby_per_sample(t, x, {1.0, 1.0}, x, {1.0, 1.0}, 2), ShapeError);
}

TEST(Autodiff, Concatenation) {
  std::mt19937_64 rng(2);
  auto a = random_matrix(rng, 6, 2), b = random_matrix(rng, 6, 3), c = random_matrix(rng, 4, 5);
  auto r = check_gradients({a, b, c}, [](Tape<double>& t, const std::vector<Var>& v) {
    Var ab = ad::concat_cols(t, v[0], v[1]);
    Var stacked = ad::stack_blocks(t, ab, ad::tile_rows(t, v[2], 2), 2);
    return ad::concat_rows(t, stacked, ad::concat_rows(t, ab, v[2]));
  }, 100, 3);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autodiff, GatherScattersIntoRepeatedRows) {
  std::mt19937_64 rng(3);
  auto table = random_matrix(rng, 5, 4);
  auto r = check_gradients({table}, [](Tape<double>& t, const std::vector<Var>& v) {
    return ad::gather_rows(t, v[0], {0, 3, 3, 1, 0, 4});
  }, 20, 4);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autodiff, FilmAndLayerNorm) {
  std::mt19937_64 rng(4);
  auto x = random_matrix(rng, 12, 4), gb = random_matrix(rng, 3, 8, 0.3);
  auto gain = random_matrix(rng, 1, 4), bias = random_matrix(rng, 1, 4);
  auto r = check_gradients({x, gb, gain, bias}, [](Tape<double>& t, const std::vector<Var>& v) {
    return ad::film(t, ad::layer_norm(t, v[0], v[2], v[3]), v[1], 4);
  }, 100, 5);
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(Autodiff, ConvolutionGeometries) {
  std::mt19937_64 rng(5);
  for (auto g : {ad::ConvGeometry{2, 6, 6, 3, 1, 1}, ad::ConvGeometry{2, 6, 6, 2, 2, 0},
                 ad::ConvGeometry{1, 8, 8, 4, 4, 0}, ad::ConvGeometry{2, 4, 4, 1, 1, 0}}) {
    auto x = random_matrix(rng, g.batch * g.height * g.width, 3);
    auto w = random_matrix(rng, g.kernel * g.kernel * 3, 5, 0.5), b = random_matrix(rng, 1, 5);
    auto r = check_gradients({x, w, b}, [g](Tape<double>& t, const std::vector<Var>& v) {
      return ad::conv2d(t, v[0], v[1], v[2], g);
    }, 150, 6);
    EXPECT_LT(r.max_rel_error, kTol) << "kernel " << g.kernel << " stride " << g.stride;
  }
}

TEST(Autodiff, ConvolutionMatchesDirectSum) {
  std::mt19937_64 rng(6);
  const ad::ConvGeometry g{1, 5, 5, 3, 1, 1};
  MatD x = random_matrix(rng, 25, 2), w = random_matrix(rng, 18, 3), b = random_matrix(rng, 1, 3);
  Tape<double> t;
  const MatD out = t.value(ad::conv2d(t, t.constant(x), t.constant(w), t.constant(b), g));
  for (int y = 0; y < 5; ++y)
    for (int xx = 0; xx < 5; ++xx)
      for (int co = 0; co < 3; ++co) {
        double s = b(0, co);
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int iy = y + ky - 1, ix = xx + kx - 1;
            if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
            for (int ci = 0; ci < 2; ++ci) s += x(iy * 5 + ix, ci) * w((ky * 3 + kx) * 2 + ci, co);
          }
        EXPECT_NEAR(out(y * 5 + xx, co), s, 1e-12);
      }
}

TEST(Autodiff, PoolingAndUpsampling) {
  std::mt19937_64 rng(7);
  auto x = random_matrix(rng, 2 * 16, 3);
  auto r = check_gradients({x}, [](Tape<double>& t, const std::vector<Var>& v) {
    Var up = ad::upsample2x(t, v[0], 2, 4, 4);
    return ad::concat_cols(t, ad::mean_pool(t, up, 64), ad::max_pool(t, v[0], 16));
  }, 96, 8);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autodiff, Attention) {
  std::mt19937_64 rng(8);
  auto q = random_matrix(rng, 2 * 6, 4), k = random_matrix(rng, 2 * 3, 4), v = random_matrix(rng, 2 * 3, 5);
  auto r = check_gradients({q, k, v}, [](Tape<double>& t, const std::vector<Var>& in) {
    return ad::attention(t, in[0], in[1], in[2], 2);
  }, 120, 9);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autodiff, AttentionRowsAreConvexCombinations) {
  std::mt19937_64 rng(9);
  MatD q = random_matrix(rng, 4, 3), k = random_matrix(rng, 2, 3), v = MatD::Ones(2, 2);
  Tape<double> t;
  const MatD out = t.value(ad::attention(t, t.constant(q), t.constant(k), t.constant(v), 1));
  EXPECT_TRUE(out.isApprox(MatD::Ones(4, 2), 1e-12));
}

TEST(Autodiff, HeadsAndLosses) {
  std::mt19937_64 rng(10);
  auto logits = random_matrix(rng, 4, 8), a = random_matrix(rng, 4, 8), b = random_matrix(rng, 4, 8);
  MatD targets = MatD::Zero(4, 8);
  targets(0, 1) = 1;
  targets(1, 2) = 0.5;
  targets(1, 5) = 0.5;
  targets(2, 7) = 1;
  targets(3, 0) = 1;
  auto r = check_gradients({logits, a, b}, [targets](Tape<double>& t, const std::vector<Var>& v) {
    Var lp = ad::log_softmax(t, v[0]);
    Var n = ad::l2_normalize_rows(t, v[1]);
    Var parts = ad::concat_cols(t, ad::nll(t, lp, {1, 2, 7, 0}), ad::soft_cross_entropy(t, lp, targets));
    return ad::concat_cols(t, ad::concat_cols(t, parts, ad::mse(t, v[1], v[2])),
                           ad::transpose(t, ad::reshape(t, n, 32, 1)));
  }, 96, 11);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autodiff, ConstantsReceiveNoGradient) {
  Tape<double> t;
  Var c = t.constant(MatD::Ones(2, 2));
  Var l = t.leaf(MatD::Ones(2, 2));
  Var out = ad::mse(t, ad::matmul(t, c, l), t.constant(MatD::Zero(2, 2)));
  t.backward(out);
  EXPECT_EQ(t.grad(c).norm(), 0.0);
  EXPECT_GT(t.grad(l).norm(), 0.0);
  EXPECT_FALSE(t.requires_grad(c));
}

TEST(Autodiff, ShapeErrors) {
  Tape<double> t;
  Var a = t.constant(MatD::Ones(2, 3)), b = t.constant(MatD::Ones(2, 3));
  EXPECT_THROW(ad::matmul(t, a, b), ShapeError);
  EXPECT_THROW(ad::reshape(t, a, 4, 2), ShapeError);
  EXPECT_THROW(t.backward(a, MatD::Ones(1, 1)), ShapeError);
}

}  // namespace
}  // namespace muse
