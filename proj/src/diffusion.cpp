#include "muse/diffusion.hpp"

#include <cmath>

namespace muse {

namespace {

void finish_schedule(NoiseSchedule& s) {
  s.alpha.resize(s.beta.size());
  s.alpha_bar.resize(s.beta.size());
  double prod = 1.0;
  for (std::size_t i = 0; i < s.beta.size(); ++i) {
    s.alpha[i] = 1.0 - s.beta[i];
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
  }
}

}  // namespace

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 2) throw std::invalid_argument("schedule needs at least 2 steps");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || !(beta_start <= beta_end)) {
    throw std::invalid_argument("betas must satisfy 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta.resize(static_cast<std::size_t>(steps));
  s.model_timestep.resize(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(steps - 1);
    s.beta[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * frac;
    s.model_timestep[static_cast<std::size_t>(i)] = i + 1;
  }
  finish_schedule(s);
  return s;
}

NoiseSchedule make_strided_schedule(const NoiseSchedule& base, int steps) {
  if (steps < 1 || steps > base.steps) {
    throw std::invalid_argument("strided schedule length must be in [1, base steps]");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta.resize(static_cast<std::size_t>(steps));
  s.model_timestep.resize(static_cast<std::size_t>(steps));
  double prev = 1.0;
  for (int i = 1; i <= steps; ++i) {
    const int tau = static_cast<int>(std::lround(static_cast<double>(i) * base.steps / steps));
    const double ab = base.alpha_bar_at(tau);
    s.beta[static_cast<std::size_t>(i - 1)] = 1.0 - ab / prev;
    s.model_timestep[static_cast<std::size_t>(i - 1)] = base.model_t(tau);
    prev = ab;
  }
  finish_schedule(s);
  // Keep the exact base values rather than the re-multiplied ones.
  for (int i = 1; i <= steps; ++i) {
    const int tau = static_cast<int>(std::lround(static_cast<double>(i) * base.steps / steps));
    s.alpha_bar[static_cast<std::size_t>(i - 1)] = base.alpha_bar_at(tau);
  }
  return s;
}

}  // namespace muse
