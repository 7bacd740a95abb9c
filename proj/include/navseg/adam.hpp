#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "navseg/autograd.hpp"
#include "navseg/error.hpp"

namespace navseg {

/// First/second moment estimates for one flat parameter vector.
template <class T>
struct AdamState {
  std::vector<T> m, v;
  std::uint64_t t = 0;
  double alpha = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_size(std::size_t n, double alpha = 1e-3, double beta1 = 0.9,
                            double beta2 = 0.999, double eps = 1e-8) {
    return {std::vector<T>(n, T(0)), std::vector<T>(n, T(0)), 0, alpha, beta1, beta2, eps};
  }
};

// Rejects the step (leaving params and state untouched) unless every gradient is finite.
template <class T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state) {
  if (params.size() != grads.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    throw ShapeError("adam_step: params (" + std::to_string(params.size()) + "), grads (" +
                     std::to_string(grads.size()) + ") and moments (" +
                     std::to_string(state.m.size()) + ") must have equal length");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      throw NumericError("adam_step: non-finite gradient at index " + std::to_string(i));
    }
  }
  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double m = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    const double v = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    const double m_hat = m / c1;
    const double v_hat = v / c2;
    params[i] = static_cast<T>(params[i] - state.alpha * m_hat / (std::sqrt(v_hat) + state.eps));
  }
}

/// Adam over a fixed list of parameter handles, one state per tensor.
///
/// A step is all-or-nothing: if any gradient is non-finite nothing is updated.
template <class T>
class Adam {
 public:
  Adam(std::vector<Var<T>> params, double alpha = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : params_(std::move(params)) {
    for (const auto& p : params_) {
      states_.push_back(AdamState<T>::for_size(p.value().size(), alpha, beta1, beta2, eps));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      if (!params_[k].has_grad()) continue;
      for (T g : params_[k].grad().data()) {
        if (!std::isfinite(g)) throw NumericError("adam: non-finite gradient in parameter " + std::to_string(k));
      }
    }
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Var<T>& p = params_[k];
      if (!p.has_grad()) {
        // Untouched parameters still advance the step counter.
        const std::vector<T> zeros(p.value().size(), T(0));
        adam_step<T>(p.mutable_value().data(), zeros, states_[k]);
        continue;
      }
      adam_step<T>(p.mutable_value().data(), p.grad().data(), states_[k]);
    }
  }

  std::uint64_t steps() const { return states_.empty() ? 0 : states_.front().t; }

 private:
  std::vector<Var<T>> params_;
  std::vector<AdamState<T>> states_;
};

}  // namespace navseg
