#pragma once

// Model-agnostic diffusion arithmetic. Every noising/denoising formula here is
// written against the cumulative product alpha_bar; alpha_bar(0) is defined
// as 1 so the last DDIM step lands on the clean estimate.

#include "muse/types.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace muse {

struct NoiseSchedule {
  int steps = 0;                   // T
  std::vector<double> beta;        // beta[t-1] for t = 1..T
  std::vector<double> alpha;       // 1 - beta
  std::vector<double> alpha_bar;   // running product of alpha
  std::vector<int> model_timestep; // training timestep fed to the denoiser at step t

  double alpha_bar_at(int t) const {
    if (t == 0) return 1.0;
    check_step(t);
    return alpha_bar[static_cast<std::size_t>(t - 1)];
  }

  int model_t(int t) const {
    check_step(t);
    return model_timestep[static_cast<std::size_t>(t - 1)];
  }

  void check_step(int t) const {
    if (t < 0 || t > steps) {
      throw ShapeError("timestep " + std::to_string(t) + " outside schedule range [0, " +
                       std::to_string(steps) + "]");
    }
  }
};

// Betas linearly interpolated from beta_start to beta_end inclusive.
NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end);

// Evenly strided DDIM subsequence of `base` with `steps` entries, ending on the
// last training step. Its alpha_bar values are taken verbatim from `base`, and
// alpha/beta are re-derived so the product identity still holds.
NoiseSchedule make_strided_schedule(const NoiseSchedule& base, int steps);

namespace detail {

template <typename D1, typename D2>
void require_same_shape(const Eigen::MatrixBase<D1>& a, const Eigen::MatrixBase<D2>& b,
                        const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
  }
}

inline void require_positive_alpha_bar(double alpha_bar) {
  if (!(alpha_bar >= 1e-12)) {
    throw NumericDomainError("alpha_bar below 1e-12; clean estimate is undefined");
  }
}

}  // namespace detail

// sqrt(a) * z0 + sqrt(1 - a) * eps for an explicit alpha_bar `a`.
template <typename D1, typename D2>
typename D1::PlainObject diffuse_with(const Eigen::MatrixBase<D1>& z0,
                                      const Eigen::MatrixBase<D2>& eps, double alpha_bar) {
  detail::require_same_shape(z0, eps, "forward_diffuse");
  using Scalar = typename D1::Scalar;
  const auto a = static_cast<Scalar>(std::sqrt(alpha_bar));
  const auto b = static_cast<Scalar>(std::sqrt(1.0 - alpha_bar));
  return a * z0 + b * eps.template cast<Scalar>();
}

template <typename D1, typename D2>
typename D1::PlainObject forward_diffuse(const Eigen::MatrixBase<D1>& z0, int t,
                                         const Eigen::MatrixBase<D2>& eps,
                                         const NoiseSchedule& sched) {
  return diffuse_with(z0, eps, sched.alpha_bar_at(t));
}

template <typename D1, typename D2>
typename D1::PlainObject clean_from(const Eigen::MatrixBase<D1>& z_t,
                                    const Eigen::MatrixBase<D2>& eps_pred, double alpha_bar) {
  detail::require_same_shape(z_t, eps_pred, "predict_clean");
  detail::require_positive_alpha_bar(alpha_bar);
  using Scalar = typename D1::Scalar;
  const auto inv_a = static_cast<Scalar>(1.0 / std::sqrt(alpha_bar));
  const auto b = static_cast<Scalar>(std::sqrt(1.0 - alpha_bar) / std::sqrt(alpha_bar));
  return inv_a * z_t - b * eps_pred.template cast<Scalar>();
}

template <typename D1, typename D2>
typename D1::PlainObject predict_clean(const Eigen::MatrixBase<D1>& z_t,
                                       const Eigen::MatrixBase<D2>& eps_pred, int t,
                                       const NoiseSchedule& sched) {
  if (t < 1) throw ShapeError("predict_clean requires t >= 1");
  return clean_from(z_t, eps_pred, sched.alpha_bar_at(t));
}

// Coefficients (c_z, c_eps) such that z_{t-1} = c_z * z_t + c_eps * eps. The
// fused form keeps float roundoff small when alpha_bar is tiny.
inline std::pair<double, double> ddim_coefficients(double alpha_bar_t, double alpha_bar_prev) {
  detail::require_positive_alpha_bar(alpha_bar_t);
  const double a_t = std::sqrt(alpha_bar_t);
  const double a_p = std::sqrt(alpha_bar_prev);
  const double s_t = std::sqrt(1.0 - alpha_bar_t);
  const double s_p = std::sqrt(1.0 - alpha_bar_prev);
  return {a_p / a_t, s_p - a_p * s_t / a_t};
}

template <typename D1, typename D2>
typename D1::PlainObject ddim_step(const Eigen::MatrixBase<D1>& z_t,
                                   const Eigen::MatrixBase<D2>& eps_pred, int t,
                                   const NoiseSchedule& sched) {
  if (t < 1) throw ShapeError("ddim_step requires t >= 1");
  detail::require_same_shape(z_t, eps_pred, "ddim_step");
  using Scalar = typename D1::Scalar;
  const auto [cz, ce] = ddim_coefficients(sched.alpha_bar_at(t), sched.alpha_bar_at(t - 1));
  return static_cast<Scalar>(cz) * z_t + static_cast<Scalar>(ce) * eps_pred.template cast<Scalar>();
}

// Inverse of ddim_step under the same eps: maps z_{t-1} to z_t.
template <typename D1, typename D2>
typename D1::PlainObject ddim_invert_step(const Eigen::MatrixBase<D1>& z_prev,
                                          const Eigen::MatrixBase<D2>& eps_pred, int t,
                                          const NoiseSchedule& sched) {
  if (t < 1) throw ShapeError("ddim_invert_step requires t >= 1");
  detail::require_same_shape(z_prev, eps_pred, "ddim_invert_step");
  using Scalar = typename D1::Scalar;
  const double ab_t = sched.alpha_bar_at(t);
  const double ab_p = sched.alpha_bar_at(t - 1);
  detail::require_positive_alpha_bar(ab_t);
  const double a_t = std::sqrt(ab_t), a_p = std::sqrt(ab_p);
  const double s_t = std::sqrt(1.0 - ab_t), s_p = std::sqrt(1.0 - ab_p);
  const double cz = a_t / a_p;
  const double ce = s_t - a_t * s_p / a_p;
  return static_cast<Scalar>(cz) * z_prev + static_cast<Scalar>(ce) * eps_pred.template cast<Scalar>();
}

// Classifier-free guidance: eps_c + omega * (eps_c - eps_u).
template <typename D1, typename D2>
typename D1::PlainObject cfg_combine(const Eigen::MatrixBase<D1>& eps_cond,
                                     const Eigen::MatrixBase<D2>& eps_uncond, double omega) {
  detail::require_same_shape(eps_cond, eps_uncond, "cfg_combine");
  using Scalar = typename D1::Scalar;
  const auto w = static_cast<Scalar>(omega);
  return eps_cond + w * (eps_cond - eps_uncond.template cast<Scalar>());
}

// Classifier guidance exactly as written: eps + (omega + 1) * grad.
template <typename D1, typename D2>
typename D1::PlainObject cg_combine(const Eigen::MatrixBase<D1>& eps_pred,
                                    const Eigen::MatrixBase<D2>& classifier_grad, double omega) {
  detail::require_same_shape(eps_pred, classifier_grad, "cg_combine");
  using Scalar = typename D1::Scalar;
  return eps_pred + static_cast<Scalar>(omega + 1.0) * classifier_grad.template cast<Scalar>();
}

}  // namespace muse
