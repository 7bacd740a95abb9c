#pragma once

// Structured filter pruning by kernel L1 norm.
//
// A PrunePlan lists, per layer, the output filters (or batchnorm slots, or
// shortcut-map entries) to delete and the input channels to delete from
// consumers. apply_prune works on a deep copy and checks the resulting channel
// geometry before returning it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "navseg/blocks.hpp"
#include "navseg/error.hpp"
#include "navseg/trainer.hpp"

namespace navseg {

struct FilterRank {
  std::size_t layer_id = 0;
  std::size_t filter_index = 0;
  double l1 = 0.0;
};

namespace detail {

template <class T, bool C>
LayerHandleT<T, C> find_layer(const std::vector<LayerHandleT<T, C>>& layers, std::size_t id) {
  if (id >= layers.size()) {
    throw PlanError("unknown layer id " + std::to_string(id) + " (network has " + std::to_string(layers.size()) +
                    " layers)");
  }
  return layers[id];
}

// Sum of |w| over output filter f of a conv kernel, accumulated in double in
// storage order.
template <class T>
double filter_l1(const ConvLayer<T>& conv, std::size_t f) {
  const Tensor<T>& w = conv.weight.value();
  const std::size_t per = w.size() / w.shape().n;
  double acc = 0.0;
  for (std::size_t i = 0; i < per; ++i) acc += std::abs(static_cast<double>(w[f * per + i]));
  return acc;
}

}  // namespace detail

/// One rank per output filter of a conv layer, ascending by L1 (bias
/// excluded). Equal norms keep ascending filter order.
template <class T>
std::vector<FilterRank> filter_l1_norms(const Network<T>& net, std::size_t layer_id) {
  const auto h = detail::find_layer(net.layers(), layer_id);
  if (!h.conv) throw PlanError("layer " + h.name() + " has no filters to rank");
  std::vector<FilterRank> out;
  for (std::size_t f = 0; f < h.conv->out_ch; ++f) out.push_back({layer_id, f, detail::filter_l1(*h.conv, f)});
  std::stable_sort(out.begin(), out.end(), [](const FilterRank& a, const FilterRank& b) { return a.l1 < b.l1; });
  return out;
}

struct LayerPrune {
  std::string name;
  std::size_t out_width = 0;  // widths the plan was computed against
  std::size_t in_width = 0;
  std::vector<std::size_t> remove_filters;  // output filters / batchnorm slots / map entries
  std::vector<std::size_t> remove_inputs;   // input channels (consumer side)
};

struct PrunePlan {
  std::string policy;
  std::map<std::size_t, LayerPrune> layers;  // by layer id

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [id, l] : layers) {
      arr.push_back({{"id", id},
                     {"name", l.name},
                     {"out_width", l.out_width},
                     {"in_width", l.in_width},
                     {"remove_filters", l.remove_filters},
                     {"remove_inputs", l.remove_inputs}});
    }
    return {{"policy", policy}, {"layers", arr}};
  }

  static PrunePlan from_json(const nlohmann::json& j) {
    PrunePlan p;
    p.policy = j.at("policy").get<std::string>();
    for (const auto& l : j.at("layers")) {
      p.layers[l.at("id").get<std::size_t>()] =
          LayerPrune{l.at("name").get<std::string>(), l.at("out_width").get<std::size_t>(),
                     l.at("in_width").get<std::size_t>(), l.at("remove_filters").get<std::vector<std::size_t>>(),
                     l.at("remove_inputs").get<std::vector<std::size_t>>()};
    }
    return p;
  }
};

enum class PrunePolicy { halve_128_kernels };

inline const char* to_string(PrunePolicy) { return "halve-128-kernels"; }

inline PrunePolicy parse_prune_policy(const std::string& s) {
  if (s == "halve-128-kernels") return PrunePolicy::halve_128_kernels;
  throw std::invalid_argument("unknown prune policy '" + s + "'");
}

namespace detail {

inline std::vector<std::size_t> lowest_half(const std::vector<double>& score) {
  std::vector<std::size_t> idx(score.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  idx.resize(score.size() / 2);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <class T>
LayerPrune& entry(PrunePlan& plan, const ConstLayerHandle<T>& h) {
  auto [it, fresh] = plan.layers.try_emplace(h.id);
  if (fresh) {
    it->second.name = h.name();
    it->second.out_width = h.out_width();
    it->second.in_width = h.in_width();
  }
  return it->second;
}

}  // namespace detail

/// Halves every 128-wide layer: the residual stream of the 128-channel blocks
/// (expansion filters, batchnorm slots, downsample shortcut entries) loses the
/// 64 channels whose expansion filters have the smallest L1 summed over the
/// stream, consumers lose the matching input channels, and each of those
/// blocks' projection width is halved by projection-filter L1.
template <class T>
PrunePlan select_prune_set(const Network<T>& net, PrunePolicy policy = PrunePolicy::halve_128_kernels) {
  constexpr std::size_t wide = 128;
  const auto layers = net.layers();
  PrunePlan plan;
  plan.policy = to_string(policy);

  // Residual stream: consecutive factorized blocks emitting `wide` channels.
  std::vector<std::size_t> group;  // 0-based block indices
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    const auto* fb = std::get_if<FactorizedBlock<T>>(&net.blocks[b]);
    if (!fb || fb->expand.out_ch != wide) continue;
    if (!group.empty() && group.back() + 1 != b) {
      throw PlanError("block " + std::to_string(b + 1) + ": 128-wide blocks are not contiguous");
    }
    if (group.empty() != fb->downsample) {
      throw PlanError("block " + std::to_string(b + 1) + ": 128-wide stream must open with a Downsample block");
    }
    group.push_back(b);
  }
  if (group.empty()) throw PlanError("network has no 128-wide layers; it is already pruned");

  auto layer_of = [&](std::size_t block, LayerRole role) {
    for (const auto& h : layers) {
      if (h.block == block + 1 && h.role == role) return h;
    }
    throw PlanError("block " + std::to_string(block + 1) + " has no " + to_string(role) + " layer");
  };

  std::vector<double> score(wide, 0.0);
  for (std::size_t b : group) {
    const auto ex = layer_of(b, LayerRole::expand);
    for (std::size_t f = 0; f < wide; ++f) score[f] += detail::filter_l1(*ex.conv, f);
  }
  const std::vector<std::size_t> drop = detail::lowest_half(score);

  for (std::size_t b : group) {
    detail::entry(plan, layer_of(b, LayerRole::expand)).remove_filters = drop;
    detail::entry(plan, layer_of(b, LayerRole::batchnorm)).remove_filters = drop;
    if (b == group.front()) {
      detail::entry(plan, layer_of(b, LayerRole::shortcut_map)).remove_filters = drop;
    } else {
      detail::entry(plan, layer_of(b, LayerRole::project)).remove_inputs = drop;
    }
    const auto proj = layer_of(b, LayerRole::project);
    std::vector<double> pscore(proj.conv->out_ch);
    for (std::size_t f = 0; f < pscore.size(); ++f) pscore[f] = detail::filter_l1(*proj.conv, f);
    const std::vector<std::size_t> inner = detail::lowest_half(pscore);
    detail::entry(plan, proj).remove_filters = inner;
    auto& dw = detail::entry(plan, layer_of(b, LayerRole::depthwise));
    dw.remove_filters = inner;
    dw.remove_inputs = inner;
    detail::entry(plan, layer_of(b, LayerRole::expand)).remove_inputs = inner;
  }

  // Consumers of the stream after it ends.
  const std::size_t next = group.back() + 1;
  if (next < net.blocks.size()) {
    for (const auto& h : layers) {
      if (h.block != next + 1 || !h.conv || h.conv->in_ch != wide) continue;
      if (h.role == LayerRole::project || h.role == LayerRole::shortcut_conv || h.role == LayerRole::initial_conv ||
          h.role == LayerRole::last_conv) {
        detail::entry(plan, h).remove_inputs = drop;
      }
    }
  }
  return plan;
}

namespace detail {

inline std::vector<std::size_t> kept(std::size_t width, const std::vector<std::size_t>& removed) {
  std::vector<bool> gone(width, false);
  for (std::size_t i : removed) gone[i] = true;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < width; ++i) {
    if (!gone[i]) out.push_back(i);
  }
  return out;
}

inline void check_indices(const std::string& name, const char* what, const std::vector<std::size_t>& idx,
                          std::size_t width) {
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= width) {
      throw PlanError("layer " + name + ": " + what + " index " + std::to_string(idx[i]) + " out of range for width " +
                      std::to_string(width));
    }
    if (i > 0 && idx[i] <= idx[i - 1]) throw PlanError("layer " + name + ": " + what + " indices must be strictly ascending");
  }
  if (!idx.empty() && idx.size() >= width) throw PlanError("layer " + name + ": plan removes every channel");
}

template <class T>
Tensor<T> select(const Tensor<T>& w, const std::vector<std::size_t>& outs, const std::vector<std::size_t>& ins) {
  const Shape s = w.shape();
  Tensor<T> out({outs.size(), ins.size(), s.h, s.w});
  for (std::size_t o = 0; o < outs.size(); ++o)
    for (std::size_t i = 0; i < ins.size(); ++i)
      std::copy_n(w.plane(outs[o], ins[i]), s.plane(), out.plane(o, i));
  return out;
}

template <class T>
std::vector<T> pick(const std::vector<T>& v, const std::vector<std::size_t>& keep) {
  std::vector<T> out;
  for (std::size_t i : keep) out.push_back(v[i]);
  return out;
}

// Channel agreement inside each block and along the block chain.
template <class T>
void check_structure(const Network<T>& net) {
  for (const auto& h : net.layers()) {
    const auto fail = [&](const std::string& why) { throw PlanError("layer " + h.name() + ": " + why); };
    const auto& block = net.blocks[h.block - 1];
    if (const auto* fb = std::get_if<FactorizedBlock<T>>(&block)) {
      if (h.role == LayerRole::depthwise && (fb->depthwise.in_ch != fb->project.out_ch || fb->depthwise.out_ch != fb->project.out_ch))
        fail("depthwise width " + std::to_string(fb->depthwise.out_ch) + " does not match projection width " + std::to_string(fb->project.out_ch));
      if (h.role == LayerRole::expand && fb->expand.in_ch != fb->depthwise.out_ch)
        fail("expects " + std::to_string(fb->expand.in_ch) + " inputs but depthwise emits " + std::to_string(fb->depthwise.out_ch));
      if (h.role == LayerRole::batchnorm && fb->bn.channels != fb->expand.out_ch)
        fail("has " + std::to_string(fb->bn.channels) + " slots but expansion emits " + std::to_string(fb->expand.out_ch));
      if (h.role == LayerRole::shortcut_map && fb->shortcut.size() != fb->expand.out_ch)
        fail("has " + std::to_string(fb->shortcut.size()) + " entries but branch A emits " + std::to_string(fb->expand.out_ch));
      if (h.role == LayerRole::expand && !fb->downsample && fb->expand.out_ch != fb->project.in_ch)
        fail("residual add mismatch: branch A emits " + std::to_string(fb->expand.out_ch) + " channels, shortcut carries " + std::to_string(fb->project.in_ch));
    } else if (const auto* ub = std::get_if<UpsampleBlock<T>>(&block)) {
      if (h.role == LayerRole::upsample_conv && (ub->transposed.in_ch != ub->project.out_ch || ub->transposed.out_ch != ub->project.out_ch))
        fail("transposed conv width does not match projection width");
      if (h.role == LayerRole::expand && ub->expand.in_ch != ub->transposed.out_ch) fail("input width does not match transposed conv");
      if (h.role == LayerRole::batchnorm && ub->bn.channels != ub->expand.out_ch) fail("slot count does not match expansion");
      if (h.role == LayerRole::shortcut_conv && (ub->shortcut.out_ch != ub->expand.out_ch || ub->shortcut.in_ch != ub->project.in_ch))
        fail("shortcut geometry does not match branch A");
    }
  }
  NetworkSpec spec = net.spec;
  for (std::size_t i = 0; i < net.blocks.size(); ++i) spec.blocks[i] = block_spec<T>(net.blocks[i]);
  try {
    spec.validate();
  } catch (const ShapeError& e) {
    throw PlanError(std::string("pruned network is inconsistent: ") + e.what());
  }
}

}  // namespace detail

/// Parameters the plan deletes, from layer geometry alone.
template <class T>
std::size_t removed_param_count(const Network<T>& net, const PrunePlan& plan) {
  const auto layers = net.layers();
  std::size_t removed = 0;
  for (const auto& [id, lp] : plan.layers) {
    const auto h = detail::find_layer(layers, id);
    if (h.conv) {
      const auto& c = *h.conv;
      const std::size_t taps = c.k * c.k;
      const std::size_t out = c.out_ch - lp.remove_filters.size();
      if (c.kind == ConvKind::depthwise) {
        removed += (c.out_ch - out) * (taps + 1);
      } else {
        const std::size_t in = c.in_ch - lp.remove_inputs.size();
        removed += c.out_ch * c.in_ch * taps + c.out_ch - (out * in * taps + out);
      }
    } else if (h.bn) {
      removed += 4 * lp.remove_filters.size();
    }
  }
  return removed;
}

/// Returns a pruned deep copy. The input network is not modified; surviving
/// weights are copied bit for bit.
template <class T>
Network<T> apply_prune(const Network<T>& source, const PrunePlan& plan) {
  Network<T> net = source.clone();
  const auto layers = net.layers();
  for (const auto& [id, lp] : plan.layers) {
    const auto h = detail::find_layer(layers, id);
    const std::string name = h.name();
    if (lp.name != name) throw PlanError("layer " + std::to_string(id) + ": plan names " + lp.name + ", network has " + name);
    if (h.out_width() != lp.out_width || (h.conv && h.in_width() != lp.in_width)) {
      throw PlanError("layer " + name + ": plan computed for widths " + std::to_string(lp.out_width) + "/" +
                      std::to_string(lp.in_width) + " but layer has " + std::to_string(h.out_width()) + "/" +
                      std::to_string(h.in_width()) + " (already applied?)");
    }
    detail::check_indices(name, "filter", lp.remove_filters, h.out_width());
    if (h.conv) {
      auto& c = *h.conv;
      const std::vector<std::size_t> outs = detail::kept(c.out_ch, lp.remove_filters);
      if (c.kind == ConvKind::depthwise) {
        if (lp.remove_inputs != lp.remove_filters) {
          throw PlanError("layer " + name + ": depthwise input and output removals must match");
        }
        c.weight = Var<T>::parameter(detail::select(c.weight.value(), outs, {0}));
        c.in_ch = outs.size();
      } else {
        detail::check_indices(name, "input", lp.remove_inputs, c.in_ch);
        const std::vector<std::size_t> ins = detail::kept(c.in_ch, lp.remove_inputs);
        c.weight = Var<T>::parameter(detail::select(c.weight.value(), outs, ins));
        c.in_ch = ins.size();
      }
      c.bias = Var<T>::parameter(
          Tensor<T>({1, outs.size(), 1, 1}, detail::pick(c.bias.value().vec(), outs)));
      c.out_ch = outs.size();
    } else if (h.bn) {
      if (!lp.remove_inputs.empty()) throw PlanError("layer " + name + ": batchnorm has no separate inputs");
      auto& n = *h.bn;
      const std::vector<std::size_t> keep = detail::kept(n.channels, lp.remove_filters);
      n.gamma = Var<T>::parameter(Tensor<T>({1, keep.size(), 1, 1}, detail::pick(n.gamma.value().vec(), keep)));
      n.beta = Var<T>::parameter(Tensor<T>({1, keep.size(), 1, 1}, detail::pick(n.beta.value().vec(), keep)));
      n.running_mean = detail::pick(n.running_mean, keep);
      n.running_var = detail::pick(n.running_var, keep);
      n.channels = keep.size();
    } else {
      auto& map = *h.map;
      std::vector<std::int32_t> next = detail::pick(map, detail::kept(map.size(), lp.remove_filters));
      if (!lp.remove_inputs.empty()) {
        for (auto& m : next) {
          if (m < 0) continue;
          const auto it = std::lower_bound(lp.remove_inputs.begin(), lp.remove_inputs.end(), static_cast<std::size_t>(m));
          if (it != lp.remove_inputs.end() && *it == static_cast<std::size_t>(m)) {
            throw PlanError("layer " + name + ": surviving entry reads removed input channel " + std::to_string(m));
          }
          m -= static_cast<std::int32_t>(it - lp.remove_inputs.begin());
        }
      }
      map = std::move(next);
    }
  }
  detail::check_structure(net);
  net.refresh_spec();
  if (net.spec.blocks == table_spec(Variant::pruned).blocks) net.spec.variant = Variant::pruned;
  net.meta.prune_history.push_back(plan.policy.empty() ? "custom" : plan.policy);
  return net;
}

struct FineTuneResult {
  Network<float> net;
  EvalResult before;  // held-out evaluation before fine-tuning
  EvalResult after;
  double train_loss_before = 0.0;  // mean loss over the training set
  double train_loss_after = 0.0;
  TrainResult training;
};

/// Trains a copy of a (pruned) network from its surviving weights and reports
/// evaluation before and after.
inline FineTuneResult fine_tune(const Network<float>& pruned, const std::vector<Sample>& train_set,
                                const std::vector<Sample>& eval_set, const TrainConfig& config) {
  if (train_set.empty()) throw std::invalid_argument("fine_tune: empty training set");
  FineTuneResult r{pruned.clone(), {}, {}, 0.0, 0.0, {}};
  r.before = evaluate(r.net, eval_set);
  r.train_loss_before = evaluate(r.net, train_set).mean_loss;
  r.training = train(r.net, train_set, config);
  r.after = evaluate(r.net, eval_set);
  r.train_loss_after = evaluate(r.net, train_set).mean_loss;
  return r;
}

}  // namespace navseg
