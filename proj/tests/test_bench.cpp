#include <gtest/gtest.h>

#include "navseg/bench.hpp"
#include "tiny_net.hpp"

using namespace navseg;

TEST(Bench, FrameRateArithmetic) {
  EXPECT_EQ(format_fps(fps_from_ms(36.5)), "27.4");
  EXPECT_EQ(format_fps(fps_from_ms(44.7)), "22.4");
  EXPECT_EQ(fps_from_ms(1000.0), 1.0);
  EXPECT_EQ(format_fps(fps_from_ms(1000.0)), "1.0");
  EXPECT_NEAR(fps_from_ms(36.5), 27.397260273972602, 1e-12);
}

TEST(Bench, SummaryStatistics) {
  const auto r = summarize({4.0, 1.0, 3.0, 2.0, 10.0}, 2);
  EXPECT_EQ(r.iterations, 5u);
  EXPECT_EQ(r.warmup, 2u);
  EXPECT_EQ(r.mean_ms, 4.0);
  EXPECT_EQ(r.p50_ms, 3.0);
  EXPECT_EQ(r.p95_ms, 10.0);
  EXPECT_NEAR(r.max_fps, 1000.0 / r.mean_ms, 1e-9);
  EXPECT_THROW(summarize({}, 0), std::invalid_argument);
}

TEST(Bench, RunsNetwork) {
  const auto net = build_network<float>(fixture::tiny_spec(), 1);
  const auto r = bench(net, {1, 3, 16, 16}, 5, 2);
  EXPECT_EQ(r.iterations, 5u);
  EXPECT_LE(r.p50_ms, r.p95_ms);
  EXPECT_GT(r.mean_ms, 0.0);
  EXPECT_NEAR(r.max_fps, 1000.0 / r.mean_ms, 1e-9);
  EXPECT_THROW(bench(net, {1, 3, 16, 16}, 0, 0), std::invalid_argument);
}
