#pragma once

// Reverse-mode differentiation over the kernels in kernels.hpp.
//
// A Var is a shared handle to a node holding a value, an accumulated gradient
// and (when recorded) the closure that pushes its gradient to its parents.
// Recording happens only while grad mode is enabled and some input requires a
// gradient; under NoGradGuard intermediates are released as soon as they go
// out of scope.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "navseg/error.hpp"
#include "navseg/kernels.hpp"
#include "navseg/tensor.hpp"

namespace navseg {

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <class T>
class Var {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until something flows into it
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Tensor<T>& grad_buffer() {
      if (grad.empty()) grad = Tensor<T>(value.shape());
      return grad;
    }
  };

  Var() = default;

  static Var constant(Tensor<T> value) { return Var(std::move(value), false); }
  static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  // Direct weight access for optimizers and pruning; never call while a
  // recorded graph that uses this value is still awaiting backward().
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() {
    if (node_ && !node_->grad.empty()) node_->grad.fill(T(0));
  }
  bool is_leaf() const noexcept { return node_ && !node_->backward; }

  std::shared_ptr<Node> node() const { return node_; }

  // Records an op result. backward receives the result node; its grad is populated.
  static Var record(Tensor<T> value, std::vector<Var> inputs,
                    std::function<void(Node&)> backward) {
    Var out(std::move(value), false);
    if (!grad_enabled()) return out;
    bool any = false;
    for (const Var& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    for (const Var& in : inputs) out.node_->parents.push_back(in.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

 private:
  Var(Tensor<T> value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

template <class T>
void accumulate(const std::shared_ptr<typename Var<T>::Node>& node, const Tensor<T>& g) {
  if (!node->requires_grad) return;
  Tensor<T>& buf = node->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

template <class T>
void accumulate(const std::shared_ptr<typename Var<T>::Node>& node, std::span<const T> g) {
  if (!node->requires_grad) return;
  Tensor<T>& buf = node->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

}  // namespace detail

/// Back-propagates from a scalar root into every reachable node that requires a
/// gradient. Gradients accumulate into leaves until zero_grad().
template <class T>
void backward(const Var<T>& root) {
  if (!root.defined() || root.is_leaf() || !root.requires_grad()) {
    throw std::logic_error("backward: root has no recorded computation (run a forward pass first)");
  }
  if (root.value().size() != 1) {
    throw ShapeError("backward: root must be a scalar, got shape " + root.shape().str());
  }
  using NodePtr = std::shared_ptr<typename Var<T>::Node>;
  // Iterative post-order DFS; parents are visited in recorded order so the
  // resulting topological order is deterministic.
  std::vector<typename Var<T>::Node*> order;
  std::unordered_set<const void*> seen;
  std::vector<std::pair<NodePtr, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodePtr parent = node->parents[next++];
      if (parent->backward && seen.insert(parent.get()).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node.get());
      stack.pop_back();
    }
  }
  root.node()->grad_buffer().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (!node->grad.empty()) node->backward(*node);
  }
}

// ---------------------------------------------------------------------------
// Differentiable ops

/// Convolution of any kind; bias may be undefined.
template <class T>
Var<T> conv(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, ConvKind kind,
            std::size_t stride, std::size_t padding) {
  ConvWeights<T> w{kind, kernel.value(),
                   bias.defined() ? bias.value().vec() : std::vector<T>{}, stride, padding};
  Tensor<T> y = apply_conv(x.value(), w);
  std::vector<Var<T>> inputs{x, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return Var<T>::record(std::move(y), inputs,
                        [w = std::move(w), has_bias = bias.defined()](auto& self) {
                          const auto& px = self.parents[0];
                          ConvGrads<T> g = conv_backward(px->value, w, self.grad);
                          detail::accumulate<T>(px, g.input);
                          detail::accumulate<T>(self.parents[1], g.kernel);
                          if (has_bias) detail::accumulate<T>(self.parents[2], std::span<const T>(g.bias));
                        });
}

/// Batch normalization. In train mode batch statistics are used and the running
/// statistics are updated in place; in infer mode the running statistics are
/// treated as constants.
template <class T>
Var<T> batchnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                 std::vector<T>& running_mean, std::vector<T>& running_var, T eps, BnMode mode,
                 T momentum = T(0.9)) {
  const std::size_t c = x.shape().c;
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw ShapeError("batchnorm: parameter lengths must all equal C=" + std::to_string(c));
  }
  if (mode == BnMode::infer) {
    BatchNormParams<T> p{gamma.value().vec(), beta.value().vec(), running_mean, running_var, eps};
    Tensor<T> y = batchnorm_infer(x.value(), p);
    return Var<T>::record(std::move(y), {x, gamma, beta}, [p = std::move(p)](auto& self) {
      BatchNormGrads<T> g = batchnorm_infer_backward(self.grad, self.parents[0]->value, p);
      detail::accumulate<T>(self.parents[0], g.input);
      detail::accumulate<T>(self.parents[1], std::span<const T>(g.gamma));
      detail::accumulate<T>(self.parents[2], std::span<const T>(g.beta));
    });
  }
  auto stats = std::make_shared<BatchStats<T>>();
  Tensor<T> y = batchnorm_train<T>(x.value(), gamma.value().data(), beta.value().data(), eps, *stats);
  update_running_stats(running_mean, running_var, *stats, momentum);
  return Var<T>::record(std::move(y), {x, gamma, beta}, [stats](auto& self) {
    BatchNormGrads<T> g =
        batchnorm_train_backward(self.grad, *stats, std::span<const T>(self.parents[1]->value.data()));
    detail::accumulate<T>(self.parents[0], g.input);
    detail::accumulate<T>(self.parents[1], std::span<const T>(g.gamma));
    detail::accumulate<T>(self.parents[2], std::span<const T>(g.beta));
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return Var<T>::record(relu(x.value()), {x}, [](auto& self) {
    detail::accumulate<T>(self.parents[0], relu_backward(self.grad, self.value));
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return Var<T>::record(add_elementwise(a.value(), b.value()), {a, b}, [](auto& self) {
    detail::accumulate<T>(self.parents[0], self.grad);
    detail::accumulate<T>(self.parents[1], self.grad);
  });
}

template <class T>
Var<T> concat(const Var<T>& a, const Var<T>& b) {
  const std::size_t first = a.shape().c;
  return Var<T>::record(concat_channels(a.value(), b.value()), {a, b}, [first](auto& self) {
    auto [ga, gb] = split_channels(self.grad, first);
    detail::accumulate<T>(self.parents[0], ga);
    detail::accumulate<T>(self.parents[1], gb);
  });
}

template <class T>
Var<T> maxpool(const Var<T>& x) {
  PoolResult<T> r = maxpool2d_with_indices(x.value());
  auto idx = std::make_shared<std::vector<std::uint32_t>>(std::move(r.argmax));
  return Var<T>::record(std::move(r.output), {x}, [idx](auto& self) {
    const auto& px = self.parents[0];
    detail::accumulate<T>(px, maxpool2d_backward<T>(self.grad, *idx, px->value.shape()));
  });
}

template <class T>
Var<T> upsample2x(const Var<T>& x) {
  return Var<T>::record(upsample_nearest2x(x.value()), {x}, [](auto& self) {
    detail::accumulate<T>(self.parents[0], upsample_nearest2x_backward(self.grad));
  });
}

template <class T>
Var<T> remap(const Var<T>& x, std::vector<std::int32_t> map) {
  Tensor<T> y = remap_channels<T>(x.value(), map);
  return Var<T>::record(std::move(y), {x}, [map = std::move(map)](auto& self) {
    const auto& px = self.parents[0];
    detail::accumulate<T>(px, remap_channels_backward<T>(self.grad, map, px->value.shape()));
  });
}

/// Sum of every element, as a (1,1,1,1) scalar.
template <class T>
Var<T> sum(const Var<T>& x) {
  double acc = 0.0;
  for (T v : x.value().data()) acc += v;
  return Var<T>::record(Tensor<T>({1, 1, 1, 1}, static_cast<T>(acc)), {x}, [](auto& self) {
    const auto& px = self.parents[0];
    detail::accumulate<T>(px, Tensor<T>(px->value.shape(), self.grad[0]));
  });
}

/// <x, weights> as a scalar; weights is a constant of the same shape.
template <class T>
Var<T> dot(const Var<T>& x, const Tensor<T>& weights) {
  detail::require_same(x.shape(), weights.shape(), "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += static_cast<double>(x.value()[i]) * weights[i];
  return Var<T>::record(Tensor<T>({1, 1, 1, 1}, static_cast<T>(acc)), {x}, [weights](auto& self) {
    Tensor<T> g(weights.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = weights[i] * self.grad[0];
    detail::accumulate<T>(self.parents[0], g);
  });
}

template <class T>
Var<T> softmax(const Var<T>& x) {
  return Var<T>::record(softmax_channels(x.value()), {x}, [](auto& self) {
    // dx = y * (dy - sum_c dy*y) per pixel
    const Shape s = self.value.shape();
    Tensor<T> g(s);
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t i = 0; i < s.plane(); ++i) {
        T inner = T(0);
        for (std::size_t c = 0; c < s.c; ++c) inner += self.grad.plane(n, c)[i] * self.value.plane(n, c)[i];
        for (std::size_t c = 0; c < s.c; ++c) {
          g.plane(n, c)[i] = self.value.plane(n, c)[i] * (self.grad.plane(n, c)[i] - inner);
        }
      }
    }
    detail::accumulate<T>(self.parents[0], g);
  });
}

/// Mean pixel cross-entropy of logits against class labels (NHW order).
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::uint8_t> labels) {
  LossResult<T> r = cross_entropy(logits.value(), labels);
  auto grad = std::make_shared<Tensor<T>>(std::move(r.grad));
  return Var<T>::record(Tensor<T>({1, 1, 1, 1}, static_cast<T>(r.loss)), {logits},
                        [grad](auto& self) {
                          Tensor<T> g = *grad;
                          for (auto& v : g.data()) v *= self.grad[0];
                          detail::accumulate<T>(self.parents[0], g);
                        });
}

}  // namespace navseg
