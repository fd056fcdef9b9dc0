#pragma once

#include "muse/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace muse::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  int checked = 0;
};

// Compares reverse-mode gradients of sum(f(inputs) .* W) against central
// differences on randomly sampled coordinates. `f` builds the graph from
// leaf Vars; W is a fixed random weighting so non-scalar outputs are covered.
template <typename F>
GradCheck check_gradients(std::vector<MatD> inputs, F f, int coords, std::uint64_t seed, double h = 1e-5,
                          double floor = 1e-6) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;

  auto evaluate = [&](const std::vector<MatD>& in, MatD* weights, std::vector<MatD>* grads) {
    ad::Tape<double> tape;
    std::vector<ad::Var> leaves;
    for (const auto& m : in) leaves.push_back(tape.leaf(m));
    ad::Var out = f(tape, leaves);
    const MatD& v = tape.value(out);
    if (weights->size() == 0) {
      *weights = MatD(v.rows(), v.cols());
      for (Eigen::Index i = 0; i < weights->size(); ++i) weights->data()[i] = normal(rng);
    }
    if (grads) {
      tape.backward(out, *weights);
      for (auto l : leaves) grads->push_back(tape.grad(l));
    }
    return (v.array() * weights->array()).sum();
  };

  MatD weights;
  std::vector<MatD> analytic;
  evaluate(inputs, &weights, &analytic);

  GradCheck result;
  std::vector<std::pair<std::size_t, Eigen::Index>> picks;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (Eigen::Index j = 0; j < inputs[i].size(); ++j) picks.emplace_back(i, j);
  std::shuffle(picks.begin(), picks.end(), rng);
  picks.resize(std::min<std::size_t>(picks.size(), static_cast<std::size_t>(coords)));

  for (auto [i, j] : picks) {
    auto plus = inputs, minus = inputs;
    plus[i].data()[j] += h;
    minus[i].data()[j] -= h;
    const double numeric = (evaluate(plus, &weights, nullptr) - evaluate(minus, &weights, nullptr)) / (2 * h);
    const double a = analytic[i].data()[j];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
    ++result.checked;
  }
  return result;
}

inline MatD random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  MatD m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

}  // namespace muse::testing
