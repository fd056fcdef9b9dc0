#pragma once

// Parameter storage, tape binding and the small layer vocabulary shared by the
// toy networks.

#include "muse/autodiff.hpp"

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace muse {

template <typename Scalar>
class ParamStore {
 public:
  using M = Mat<Scalar>;

  M& add(const std::string& name, M value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(value)});
    return entries_.back().value;
  }

  const M& get(const std::string& name) const { return entries_[find(name)].value; }
  M& get(const std::string& name) { return entries_[find(name)].value; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index_of(const std::string& name) const { return find(name); }

  std::size_t size() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_[i].name; }
  const M& value(std::size_t i) const { return entries_[i].value; }
  M& value(std::size_t i) { return entries_[i].value; }

  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  template <typename To>
  ParamStore<To> cast() const {
    ParamStore<To> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<To>());
    return out;
  }

 private:
  struct Entry {
    std::string name;
    M value;
  };

  std::size_t find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// Lazily places parameters on a tape, either as trainable leaves or as
// constants (frozen networks in the guidance loop).
template <typename Scalar>
class Binder {
 public:
  using M = Mat<Scalar>;

  Binder(ad::Tape<Scalar>& tape, const ParamStore<Scalar>& params, bool trainable)
      : tape_(tape), params_(params), trainable_(trainable), vars_(params.size()) {}

  ad::Var operator()(const std::string& name) {
    const std::size_t i = params_.index_of(name);
    if (!vars_[i].valid()) {
      const M& v = params_.value(i);
      vars_[i] = trainable_ ? tape_.leaf_ref(v) : tape_.constant_ref(v);
    }
    return vars_[i];
  }

  ad::Tape<Scalar>& tape() { return tape_; }
  const ParamStore<Scalar>& params() const { return params_; }

  // Gradients in store order (zeros for parameters not reached).
  std::vector<M> gradients() const {
    std::vector<M> out;
    out.reserve(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (vars_[i].valid()) {
        out.push_back(tape_.grad(vars_[i]));
      } else {
        out.push_back(M::Zero(params_.value(i).rows(), params_.value(i).cols()));
      }
    }
    return out;
  }

 private:
  ad::Tape<Scalar>& tape_;
  const ParamStore<Scalar>& params_;
  bool trainable_;
  std::vector<ad::Var> vars_;
};

// Adam with bias correction over a ParamStore.
template <typename Scalar>
class Adam {
 public:
  using M = Mat<Scalar>;

  explicit Adam(const ParamStore<Scalar>& params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_.push_back(M::Zero(params.value(i).rows(), params.value(i).cols()));
      v_.push_back(M::Zero(params.value(i).rows(), params.value(i).cols()));
    }
  }

  void step(ParamStore<Scalar>& params, const std::vector<M>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    const auto b1 = static_cast<Scalar>(beta1_), b2 = static_cast<Scalar>(beta2_);
    const auto step = static_cast<Scalar>(lr / c1);
    const auto inv_c2 = static_cast<Scalar>(1.0 / c2);
    const auto eps = static_cast<Scalar>(eps_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * grads[i];
      v_[i] = b2 * v_[i] + (Scalar(1) - b2) * grads[i].cwiseAbs2();
      params.value(i).array() -= step * m_[i].array() / ((v_[i].array() * inv_c2).sqrt() + eps);
    }
  }

 private:
  double beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<M> m_, v_;
};

namespace nn {

template <typename Scalar>
Mat<Scalar> kaiming(std::mt19937_64& rng, Eigen::Index fan_in, Eigen::Index fan_out, double gain = 1.0) {
  std::normal_distribution<double> normal(0.0, gain * std::sqrt(2.0 / static_cast<double>(fan_in)));
  Mat<Scalar> w(fan_in, fan_out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(normal(rng));
  return w;
}

template <typename Scalar>
void add_linear(ParamStore<Scalar>& ps, std::mt19937_64& rng, const std::string& name, int in, int out,
                double gain = 1.0) {
  ps.add(name + ".w", kaiming<Scalar>(rng, in, out, gain));
  ps.add(name + ".b", Mat<Scalar>::Zero(1, out));
}

template <typename Scalar>
void add_conv(ParamStore<Scalar>& ps, std::mt19937_64& rng, const std::string& name, int kernel, int in, int out,
              double gain = 1.0) {
  ps.add(name + ".w", kaiming<Scalar>(rng, kernel * kernel * in, out, gain));
  ps.add(name + ".b", Mat<Scalar>::Zero(1, out));
}

template <typename Scalar>
void add_norm(ParamStore<Scalar>& ps, const std::string& name, int channels) {
  ps.add(name + ".g", Mat<Scalar>::Ones(1, channels));
  ps.add(name + ".b", Mat<Scalar>::Zero(1, channels));
}

template <typename Scalar>
ad::Var linear(Binder<Scalar>& p, ad::Var x, const std::string& name) {
  auto& t = p.tape();
  return ad::add_row(t, ad::matmul(t, x, p(name + ".w")), p(name + ".b"));
}

template <typename Scalar>
ad::Var conv(Binder<Scalar>& p, ad::Var x, const std::string& name, const ad::ConvGeometry& g) {
  return ad::conv2d(p.tape(), x, p(name + ".w"), p(name + ".b"), g);
}

template <typename Scalar>
ad::Var norm(Binder<Scalar>& p, ad::Var x, const std::string& name) {
  return ad::layer_norm(p.tape(), x, p(name + ".g"), p(name + ".b"));
}

inline ad::ConvGeometry same3x3(int batch, int size) { return {batch, size, size, 3, 1, 1}; }
inline ad::ConvGeometry down2x2(int batch, int size) { return {batch, size, size, 2, 2, 0}; }
inline ad::ConvGeometry patchify(int batch, int size, int patch) { return {batch, size, size, patch, patch, 0}; }
inline ad::ConvGeometry pointwise(int batch, int size) { return {batch, size, size, 1, 1, 0}; }

}  // namespace nn

}  // namespace muse
