#pragma once

#include <cmath>
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace mfen {

// Learnable tensor with gradient and Adam moment buffers, all shape-locked
// to the value.
template <typename S>
struct Param {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  Tensor<S> m;
  Tensor<S> v;

  Param(std::string n, Shape s)
      : name(std::move(n)), value(s), grad(s), m(s), v(s) {}

  std::size_t numel() const { return value.numel(); }

  void zero_grad() { grad.fill(S(0)); }
};

// Ordered, name-addressed collection of Params. Iteration and registration
// order coincide, which fixes the init stream, the Adam update order and
// the checkpoint layout.
template <typename S>
class ParamStore {
 public:
  Param<S>& add(const std::string& name, Shape shape) {
    require(index_.find(name) == index_.end(), "duplicate parameter name: " + name);
    params_.emplace_back(name, shape);
    index_[name] = params_.size() - 1;
    return params_.back();
  }

  Param<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  const Param<S>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  Param<S>& at(const std::string& name) {
    Param<S>* p = find(name);
    require(p != nullptr, "unknown parameter name: " + name);
    return *p;
  }

  std::size_t size() const { return params_.size(); }
  Param<S>& operator[](std::size_t i) { return params_[i]; }
  const Param<S>& operator[](std::size_t i) const { return params_[i]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t total_elements() const {
    std::size_t t = 0;
    for (const auto& p : params_) t += p.numel();
    return t;
  }

  void zero_grads() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::deque<Param<S>> params_;  // deque keeps Param* stable across add()
  std::unordered_map<std::string, std::size_t> index_;
};

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long long t = 0;
};

// Bias-corrected Adam over every param in the store; zeroes grads afterwards.
template <typename S>
void adam_step(ParamStore<S>& store, AdamState& state) {
  require(state.beta1 > 0.0 && state.beta1 < 1.0 && state.beta2 > 0.0 && state.beta2 < 1.0,
          "adam betas must be in (0,1)");
  state.t += 1;
  const S b1 = static_cast<S>(state.beta1);
  const S b2 = static_cast<S>(state.beta2);
  const S corr1 = static_cast<S>(1.0 - std::pow(state.beta1, static_cast<double>(state.t)));
  const S corr2 = static_cast<S>(1.0 - std::pow(state.beta2, static_cast<double>(state.t)));
  const S lr = static_cast<S>(state.lr);
  const S eps = static_cast<S>(state.eps);
  for (auto& p : store) {
    S* x = p.value.data.data();
    S* g = p.grad.data.data();
    S* m = p.m.data.data();
    S* v = p.v.data.data();
    const std::ptrdiff_t count = static_cast<std::ptrdiff_t>(p.numel());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < count; ++i) {
      m[i] = b1 * m[i] + (S(1) - b1) * g[i];
      v[i] = b2 * v[i] + (S(1) - b2) * g[i] * g[i];
      const S mhat = m[i] / corr1;
      const S vhat = v[i] / corr2;
      x[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      g[i] = S(0);
    }
  }
}

// Uniform init scaled by 1/sqrt(fan_in); biases and norm shifts start at 0,
// norm scales at 1.
template <typename S>
void init_uniform_fanin(Param<S>& p, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (S& v : p.value.data) v = static_cast<S>(rng.uniform(-bound, bound));
}

}  // namespace mfen
