#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "navseg/costmodel.hpp"
#include "navseg/pruner.hpp"
#include "tiny_net.hpp"

using namespace navseg;

namespace {

std::size_t layer_id(const Network<float>& net, const std::string& name) {
  for (const auto& h : net.layers()) {
    if (h.name() == name) return h.id;
  }
  throw std::runtime_error("no layer " + name);
}

// Initial 3->16 feeding LastConv 16->2: conv into conv, no batchnorm.
Network<float> bn_free_stack(std::uint64_t seed) {
  NetworkSpec s;
  s.blocks = {initial_spec(3, 16), lastconv_spec(16, 2)};
  return build_network<float>(s, seed);
}

}  // namespace

TEST(FilterL1, ExamplesAndOracle) {
  auto net = build_network<float>(fixture::tiny_spec(), 1);
  const std::size_t id = layer_id(net, "b02.project");
  auto& w = std::get<FactorizedBlock<float>>(net.blocks[1]).project.weight.mutable_value();  // (4, 8, 1, 1)
  for (std::size_t i = 0; i < 8; ++i) w(2, i, 0, 0) = 0.f;
  for (std::size_t i = 0; i < 8; ++i) w(3, i, 0, 0) = 0.f;
  w(3, 0, 0, 0) = 1.f;
  w(3, 1, 0, 0) = -2.f;
  w(3, 2, 0, 0) = 3.f;
  const auto ranks = filter_l1_norms(net, id);
  ASSERT_EQ(ranks.size(), 4u);
  EXPECT_EQ(ranks[0].filter_index, 2u);
  EXPECT_EQ(ranks[0].l1, 0.0);
  for (const auto& r : ranks) {
    double oracle = 0.0;
    for (std::size_t i = 0; i < 8; ++i) oracle += std::fabs(static_cast<double>(w(r.filter_index, i, 0, 0)));
    EXPECT_EQ(r.l1, oracle);
    if (r.filter_index == 3) EXPECT_EQ(r.l1, 6.0);
    EXPECT_EQ(r.layer_id, id);
  }
  for (std::size_t i = 1; i < ranks.size(); ++i) EXPECT_LE(ranks[i - 1].l1, ranks[i].l1);
}

TEST(FilterL1, StableOnTiesAndRejectsUnknownLayers) {
  auto net = build_network<float>(fixture::tiny_spec(), 1);
  const std::size_t id = layer_id(net, "b03.expand");
  std::get<FactorizedBlock<float>>(net.blocks[2]).expand.weight.mutable_value().fill(0.5f);
  const auto ranks = filter_l1_norms(net, id);
  for (std::size_t i = 0; i < ranks.size(); ++i) EXPECT_EQ(ranks[i].filter_index, i);
  EXPECT_THROW(filter_l1_norms(net, 999), PlanError);
  EXPECT_THROW(filter_l1_norms(net, layer_id(net, "b02.bn")), PlanError);
}

TEST(FilterL1, RandomLayersMatchAbsSumOracle) {
  const auto net = build_network<float>(Variant::full, 4);
  for (const auto& h : net.layers()) {
    if (!h.conv) continue;
    const auto ranks = filter_l1_norms(net, h.id);
    const auto& w = h.conv->weight.value();
    const std::size_t per = w.size() / w.shape().n;
    std::vector<double> oracle(w.shape().n, 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) oracle[i / per] += std::fabs(static_cast<double>(w[i]));
    for (const auto& r : ranks) EXPECT_EQ(r.l1, oracle[r.filter_index]) << h.name();
  }
}

TEST(SelectPruneSet, HalvesEveryWideLayer) {
  const auto net = build_network<float>(Variant::full, 2);
  const auto plan = select_prune_set(net);
  EXPECT_EQ(plan.policy, "halve-128-kernels");
  const auto layers = net.layers();
  std::size_t wide_layers = 0;
  for (const auto& h : layers) {
    if (h.out_width() != 128) continue;
    ++wide_layers;
    ASSERT_TRUE(plan.layers.count(h.id)) << h.name();
    EXPECT_EQ(plan.layers.at(h.id).remove_filters.size(), 64u) << h.name();
  }
  EXPECT_EQ(wide_layers, 18u * 2 + 1);  // expand + bn in blocks 7-24, block 7 shortcut map
  EXPECT_EQ(plan.layers.at(layer_id(net, "b25.project")).remove_inputs.size(), 64u);
  EXPECT_EQ(plan.layers.at(layer_id(net, "b25.shortcut")).remove_inputs.size(), 64u);
  EXPECT_EQ(plan.layers.at(layer_id(net, "b10.project")).remove_filters.size(), 16u);
}

TEST(SelectPruneSet, ZeroFiltersAreChosen) {
  auto net = build_network<float>(Variant::full, 2);
  for (std::size_t b = 7; b <= 24; ++b) {
    auto& w = std::get<FactorizedBlock<float>>(net.blocks[b - 1]).expand.weight.mutable_value();
    for (std::size_t f = 0; f < 64; ++f)
      for (std::size_t i = 0; i < w.shape().c; ++i) w(f, i, 0, 0) = 0.f;
  }
  auto& proj = std::get<FactorizedBlock<float>>(net.blocks[9]).project.weight.mutable_value();
  for (std::size_t f = 16; f < 32; ++f)
    for (std::size_t i = 0; i < 128; ++i) proj(f, i, 0, 0) = 0.f;
  const auto plan = select_prune_set(net);
  std::vector<std::size_t> first64(64), upper16(16);
  std::iota(first64.begin(), first64.end(), 0);
  std::iota(upper16.begin(), upper16.end(), 16);
  EXPECT_EQ(plan.layers.at(layer_id(net, "b12.expand")).remove_filters, first64);
  EXPECT_EQ(plan.layers.at(layer_id(net, "b07.shortcut_map")).remove_filters, first64);
  EXPECT_EQ(plan.layers.at(layer_id(net, "b10.project")).remove_filters, upper16);
}

TEST(SelectPruneSet, RejectsAlreadyPrunedNetwork) {
  EXPECT_THROW(select_prune_set(build_network<float>(Variant::pruned, 1)), PlanError);
}

TEST(ApplyPrune, ReproducesPrunedArchitecture) {
  const auto full = build_network<float>(Variant::full, 3);
  const auto plan = select_prune_set(full);
  const auto pruned = apply_prune(full, plan);
  EXPECT_EQ(pruned.spec.variant, Variant::pruned);
  EXPECT_EQ(pruned.spec.blocks, table_spec(Variant::pruned).blocks);
  const Shape in{1, 3, 256, 512};
  EXPECT_EQ(shape_trace(pruned.spec, in), shape_trace(table_spec(Variant::pruned), in));
  EXPECT_EQ(count_params(pruned), count_params(build_network<float>(Variant::pruned, 0)));
  EXPECT_EQ(count_params(pruned) + removed_param_count(full, plan), count_params(full));
  EXPECT_EQ(pruned.meta.prune_history, std::vector<std::string>{"halve-128-kernels"});
  std::mt19937_64 rng(1);
  std::vector<Shape> trace;
  const auto y = pruned.forward(random_tensor<float>({1, 3, 64, 64}, rng), &trace);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 64, 64}));
  EXPECT_TRUE(y.all_finite());
}

TEST(ApplyPrune, SurvivingWeightsUnchangedAndSourceUntouched) {
  auto full = build_network<float>(Variant::full, 5);
  auto& bn = std::get<FactorizedBlock<float>>(full.blocks[11]).bn;
  for (std::size_t c = 0; c < 128; ++c) bn.running_mean[c] = static_cast<float>(c);
  const auto snapshot = full.clone();
  const auto plan = select_prune_set(full);
  const auto pruned = apply_prune(full, plan);

  const auto src = full.parameters(), ref = snapshot.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) EXPECT_EQ(src[i].value(), ref[i].value());

  const auto keep_out = detail::kept(128, plan.layers.at(layer_id(full, "b12.expand")).remove_filters);
  const auto keep_in = detail::kept(32, plan.layers.at(layer_id(full, "b12.expand")).remove_inputs);
  const auto& old_w = std::get<FactorizedBlock<float>>(full.blocks[11]).expand.weight.value();
  const auto& new_w = std::get<FactorizedBlock<float>>(pruned.blocks[11]).expand.weight.value();
  ASSERT_EQ(new_w.shape(), (Shape{64, 16, 1, 1}));
  for (std::size_t o = 0; o < keep_out.size(); ++o)
    for (std::size_t i = 0; i < keep_in.size(); ++i) EXPECT_EQ(new_w(o, i, 0, 0), old_w(keep_out[o], keep_in[i], 0, 0));
  const auto& new_bn = std::get<FactorizedBlock<float>>(pruned.blocks[11]).bn;
  for (std::size_t o = 0; o < keep_out.size(); ++o) EXPECT_EQ(new_bn.running_mean[o], static_cast<float>(keep_out[o]));

  // b07 shortcut: surviving outputs keep pointing at their original inputs (or zero)
  const auto& map = std::get<FactorizedBlock<float>>(pruned.blocks[6]).shortcut;
  const auto keep7 = detail::kept(128, plan.layers.at(layer_id(full, "b07.shortcut_map")).remove_filters);
  for (std::size_t k = 0; k < map.size(); ++k) EXPECT_EQ(map[k], keep7[k] < 64 ? static_cast<int>(keep7[k]) : -1);
}

TEST(ApplyPrune, DoubleApplyRejectedNamingLayer) {
  const auto full = build_network<float>(Variant::full, 3);
  const auto plan = select_prune_set(full);
  const auto once = apply_prune(full, plan);
  try {
    apply_prune(once, plan);
    FAIL() << "expected PlanError";
  } catch (const PlanError& e) {
    EXPECT_NE(std::string(e.what()).find("layer b0"), std::string::npos) << e.what();
  }
}

TEST(ApplyPrune, UnclosedPlanRejected) {
  const auto full = build_network<float>(Variant::full, 3);
  auto plan = select_prune_set(full);
  plan.layers.erase(layer_id(full, "b25.shortcut"));
  try {
    apply_prune(full, plan);
    FAIL() << "expected PlanError";
  } catch (const PlanError& e) {
    EXPECT_NE(std::string(e.what()).find("b25"), std::string::npos) << e.what();
  }
  auto all = select_prune_set(full);
  auto& lp = all.layers.at(layer_id(full, "b10.project"));
  lp.remove_filters.resize(32);
  std::iota(lp.remove_filters.begin(), lp.remove_filters.end(), 0);
  EXPECT_THROW(apply_prune(full, all), PlanError);
}

TEST(ApplyPrune, ZeroFiltersInBatchnormFreeStackAreOutputInvariant) {
  auto net = bn_free_stack(7);
  auto& conv = std::get<InitialBlock<float>>(net.blocks[0]).conv;
  const std::vector<std::size_t> zeroed{0, 3, 4, 9};
  for (std::size_t f : zeroed) {
    for (std::size_t i = 0; i < 3 * 9; ++i) conv.weight.mutable_value()[f * 27 + i] = 0.f;
    conv.bias.mutable_value()[f] = 0.f;
  }
  std::mt19937_64 rng(8);
  for (auto& v : conv.bias.mutable_value().data()) {
    if (v == 0.f && &v - conv.bias.mutable_value().data().data() > 9) v = static_cast<float>(uniform(rng, -1, 1));
  }
  PrunePlan plan;
  plan.policy = "zero-filters";
  const auto layers = net.layers();
  plan.layers[0] = {layers[0].name(), 13, 3, zeroed, {}};
  plan.layers[1] = {layers[1].name(), 2, 16, {}, zeroed};
  const auto pruned = apply_prune(net, plan);
  EXPECT_EQ(count_params(pruned) + removed_param_count(net, plan), count_params(net));
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = random_tensor<float>({2, 3, 8, 12}, rng);
    const auto a = net.forward(x), b = pruned.forward(x);
    ASSERT_EQ(a.shape(), b.shape());
    EXPECT_EQ(std::memcmp(a.data().data(), b.data().data(), 4 * a.size()), 0);
  }
}

TEST(PrunePlanJson, RoundTrip) {
  const auto full = build_network<float>(Variant::full, 3);
  const auto plan = select_prune_set(full);
  const auto back = PrunePlan::from_json(nlohmann::json::parse(plan.to_json().dump()));
  EXPECT_EQ(back.to_json(), plan.to_json());
  EXPECT_EQ(apply_prune(full, back).param_count(), apply_prune(full, plan).param_count());
}

TEST(FineTune, ZeroStepsIsNoOp) {
  const auto data = synth_dataset(6, 2, 16, 16);
  const auto net = build_network<float>(fixture::tiny_spec(), 3);
  TrainConfig c;
  c.steps = 0;
  const auto r = fine_tune(net, data, data, c);
  EXPECT_EQ(r.before.counts, r.after.counts);
  EXPECT_EQ(r.before.metrics.accuracy, r.after.metrics.accuracy);
  EXPECT_EQ(r.train_loss_before, r.train_loss_after);
  const auto a = r.net.parameters(), b = net.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].value(), b[i].value());
}

TEST(FineTune, TrainsACopy) {
  const auto data = synth_dataset(8, 2, 16, 16);
  const auto net = build_network<float>(fixture::tiny_spec(), 3);
  const auto snapshot = net.clone();
  TrainConfig c;
  c.steps = 30;
  c.batch_size = 8;
  c.learning_rate = 3e-3;
  const auto r = fine_tune(net, data, data, c);
  EXPECT_LE(r.train_loss_after, r.train_loss_before);
  const auto a = net.parameters(), b = snapshot.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].value(), b[i].value());
}
