#pragma once

// Cross-entropy training with Adam, and pixel metrics for the two-class task
// (class 1 = navigable ground is the positive class).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "navseg/adam.hpp"
#include "navseg/autograd.hpp"
#include "navseg/blocks.hpp"
#include "navseg/dataio.hpp"
#include "navseg/error.hpp"

namespace navseg {

struct TrainConfig {
  std::size_t steps = 500;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t log_every = 10;

  void validate() const {
    if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
    if (log_every == 0) throw std::invalid_argument("train: log_every must be positive");
    if (!(learning_rate > 0)) throw std::invalid_argument("train: learning_rate must be positive");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
      throw std::invalid_argument("train: betas must lie in [0, 1)");
    }
    if (!(eps > 0)) throw std::invalid_argument("train: eps must be positive");
  }
};

inline TrainConfig parse_train_config(const nlohmann::json& j, TrainConfig c = {}) {
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.seed = j.value("seed", c.seed);
  c.log_every = j.value("log_every", c.log_every);
  c.validate();
  return c;
}

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::uint64_t total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

struct Metrics {
  double recall = 1.0;
  double precision = 1.0;
  double accuracy = 1.0;
};

inline ConfusionCounts confusion_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label) {
  if (pred.size() != label.size()) {
    throw ShapeError("confusion_counts: " + std::to_string(pred.size()) + " predictions for " +
                     std::to_string(label.size()) + " labels");
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] > 1 || label[i] > 1) throw std::invalid_argument("confusion_counts: masks must be binary");
    if (pred[i]) {
      label[i] ? ++c.tp : ++c.fp;
    } else {
      label[i] ? ++c.fn : ++c.tn;
    }
  }
  return c;
}

/// Recall and precision are 1.0 when their denominator is zero; accuracy is
/// 1.0 on an empty count.
inline Metrics metrics_from(const ConfusionCounts& c) {
  auto ratio = [](std::uint64_t num, std::uint64_t den) {
    return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  return {ratio(c.tp, c.tp + c.fn), ratio(c.tp, c.tp + c.fp), ratio(c.tp + c.tn, c.total())};
}

/// Per-pixel channel argmax in (N, H, W) order; ties go to the lower class.
template <class T>
std::vector<std::uint8_t> argmax_mask(const Tensor<T>& logits) {
  const Shape s = logits.shape();
  std::vector<std::uint8_t> out(s.n * s.plane());
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t i = 0; i < s.plane(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < s.c; ++c) {
        if (logits.plane(n, c)[i] > logits.plane(n, best)[i]) best = c;
      }
      out[n * s.plane() + i] = static_cast<std::uint8_t>(best);
    }
  return out;
}

namespace detail {

// Stacks samples[idx...] into one (B, 3, H, W) batch with NHW labels.
inline std::pair<Tensor<float>, std::vector<std::uint8_t>> make_batch(const std::vector<Sample>& data,
                                                                      std::span<const std::size_t> idx) {
  const Shape s0 = data[idx[0]].image.shape();
  Tensor<float> x({idx.size(), s0.c, s0.h, s0.w});
  std::vector<std::uint8_t> labels;
  labels.reserve(idx.size() * s0.plane());
  const std::size_t per = s0.c * s0.plane();
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Sample& smp = data[idx[b]];
    if (smp.image.shape() != s0) throw ShapeError("batch: samples have different image shapes");
    if (smp.label.data.size() != s0.plane()) throw ShapeError("batch: label size does not match image");
    std::copy(smp.image.data().begin(), smp.image.data().end(), x.data().begin() + static_cast<std::ptrdiff_t>(b * per));
    labels.insert(labels.end(), smp.label.data.begin(), smp.label.data.end());
  }
  return {std::move(x), std::move(labels)};
}

}  // namespace detail

struct EvalResult {
  ConfusionCounts counts;
  Metrics metrics;
  double mean_loss = 0.0;  // pixel-mean cross entropy
};

/// Inference-mode metrics and loss over a dataset.
template <class T>
EvalResult evaluate(const Network<T>& net, const std::vector<Sample>& data, std::size_t batch_size = 8) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  EvalResult r;
  double loss_sum = 0.0;
  std::size_t pixels = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(start + batch_size, data.size()); ++i) idx.push_back(i);
    auto [x, labels] = detail::make_batch(data, idx);
    const Tensor<T> logits = net.forward(x.template cast<T>());
    r.counts += confusion_counts(argmax_mask(logits), labels);
    loss_sum += cross_entropy(logits, labels).loss * static_cast<double>(labels.size());
    pixels += labels.size();
  }
  r.metrics = metrics_from(r.counts);
  r.mean_loss = loss_sum / static_cast<double>(pixels);
  return r;
}

template <class T>
Metrics evaluate_metrics(const Network<T>& net, const std::vector<Sample>& data) {
  return evaluate(net, data).metrics;
}

struct HistoryRow {
  std::size_t step = 0;  // 1-based
  double loss = 0.0;
  double accuracy = 0.0;  // training-batch pixel accuracy
};

struct TrainResult {
  std::vector<HistoryRow> history;
  double final_loss = 0.0;
};

inline void write_history_csv(std::ostream& os, const std::vector<HistoryRow>& history) {
  os << "step,loss,accuracy\n";
  char buf[96];
  for (const auto& h : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", h.step, h.loss, h.accuracy);
    os << buf;
  }
}

/// Runs config.steps of minibatch Adam on pixel-mean cross entropy, updating
/// net in place. Batches are drawn by reshuffling the dataset each epoch with
/// a generator seeded from config.seed, so equal inputs give equal weights.
template <class T>
TrainResult train(Network<T>& net, const std::vector<Sample>& data, const TrainConfig& config) {
  config.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  net.check_input(data.front().image.shape());
  Adam<T> opt(net.parameters(), config.learning_rate, config.beta1, config.beta2, config.eps);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();
  const std::size_t batch = std::min(config.batch_size, data.size());
  std::vector<std::size_t> idx(batch);

  TrainResult result;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
        cursor = 0;
      }
      idx[b] = order[cursor++];
    }
    auto [x, labels] = detail::make_batch(data, idx);
    opt.zero_grad();
    Var<T> logits = net.forward(Var<T>::constant(x.template cast<T>()), BnMode::train);
    Var<T> loss = cross_entropy(logits, labels);
    const double loss_value = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(loss_value)) {
      throw NumericError("train: non-finite loss at step " + std::to_string(step));
    }
    backward(loss);
    try {
      opt.step();
    } catch (const NumericError& e) {
      throw NumericError("train: step " + std::to_string(step) + ": " + e.what());
    }
    result.final_loss = loss_value;
    if (step % config.log_every == 0 || step == config.steps) {
      const auto pred = argmax_mask(logits.value());
      std::size_t hit = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
      result.history.push_back({step, loss_value, static_cast<double>(hit) / static_cast<double>(pred.size())});
    }
  }
  return result;
}

}  // namespace navseg
