#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "navseg/adam.hpp"

using namespace navseg;

TEST(Adam, FirstStepMovesByLearningRateAgainstGradientSign) {
  // With bias correction, m_hat = g and v_hat = g^2 on step 1.
  std::vector<double> p{1.0, -2.0, 0.5};
  const std::vector<double> g{0.3, -4.0, 1e-3};
  auto st = AdamState<double>::for_size(3);
  adam_step<double>(p, g, st);
  const double expect[3] = {1.0 - 1e-3 * 0.3 / (0.3 + 1e-8), -2.0 + 1e-3 * 4.0 / (4.0 + 1e-8),
                            0.5 - 1e-3 * 1e-3 / (1e-3 + 1e-8)};
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], expect[i], 1e-15);
  EXPECT_EQ(st.t, 1u);
}

TEST(Adam, MatchesReferenceRecurrenceOverSeveralSteps) {
  std::vector<double> p{0.2};
  auto st = AdamState<double>::for_size(1, 0.01, 0.8, 0.99, 1e-6);
  double m = 0, v = 0, ref = 0.2;
  const double grads[5] = {1.0, -0.5, 0.25, 2.0, -1.0};
  for (int t = 1; t <= 5; ++t) {
    const double g = grads[t - 1];
    m = 0.8 * m + 0.2 * g;
    v = 0.99 * v + 0.01 * g * g;
    ref -= 0.01 * (m / (1 - std::pow(0.8, t))) / (std::sqrt(v / (1 - std::pow(0.99, t))) + 1e-6);
    adam_step<double>(p, std::vector<double>{g}, st);
    EXPECT_NEAR(p[0], ref, 1e-15) << "step " << t;
  }
}

TEST(Adam, ZeroGradientLeavesParamsButAdvancesStep) {
  std::vector<float> p{1.f, 2.f};
  auto st = AdamState<float>::for_size(2);
  adam_step<float>(p, std::vector<float>{0.f, 0.f}, st);
  EXPECT_EQ(p, (std::vector<float>{1.f, 2.f}));
  EXPECT_EQ(st.t, 1u);
}

TEST(Adam, ConstantGradientMovesMonotonically) {
  std::vector<double> p{0.0};
  auto st = AdamState<double>::for_size(1);
  double prev = p[0];
  for (int i = 0; i < 20; ++i) {
    adam_step<double>(p, std::vector<double>{1.0}, st);
    EXPECT_LT(p[0], prev);
    prev = p[0];
  }
}

TEST(Adam, NonFiniteGradientRejectedWithoutSideEffects) {
  std::vector<float> p{1.f, 2.f};
  auto st = AdamState<float>::for_size(2);
  adam_step<float>(p, std::vector<float>{0.1f, 0.2f}, st);
  const auto p_before = p;
  const auto st_before = st;
  for (float bad : {std::numeric_limits<float>::quiet_NaN(), std::numeric_limits<float>::infinity()}) {
    EXPECT_THROW(adam_step<float>(p, std::vector<float>{0.1f, bad}, st), NumericError);
    EXPECT_EQ(p, p_before);
    EXPECT_EQ(st.m, st_before.m);
    EXPECT_EQ(st.v, st_before.v);
    EXPECT_EQ(st.t, st_before.t);
  }
}

TEST(Adam, LengthMismatchRejected) {
  std::vector<float> p{1.f, 2.f};
  auto st = AdamState<float>::for_size(2);
  EXPECT_THROW(adam_step<float>(p, std::vector<float>{0.1f}, st), ShapeError);
}

TEST(Adam, OptimizerIsAllOrNothingAcrossTensors) {
  auto a = Var<float>::parameter(Tensor<float>({1, 1, 1, 2}, 1.f));
  auto b = Var<float>::parameter(Tensor<float>({1, 1, 1, 1}, 1.f));
  Adam<float> opt({a, b});
  a.grad_buffer().fill(0.5f);
  b.grad_buffer().fill(std::numeric_limits<float>::quiet_NaN());
  EXPECT_THROW(opt.step(), NumericError);
  EXPECT_EQ(a.value()[0], 1.f);
  EXPECT_EQ(opt.steps(), 0u);
  b.grad_buffer().fill(0.5f);
  opt.step();
  EXPECT_LT(a.value()[0], 1.f);
  EXPECT_LT(b.value()[0], 1.f);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Adam, MinimizesQuadratic) {
  auto x = Var<double>::parameter(Tensor<double>({1, 1, 1, 3}, std::vector<double>{3.0, -2.0, 1.0}));
  Adam<double> opt({x}, 0.05);
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    backward(dot(x, x.value()));  // gradient x, i.e. of |x|^2 / 2
    opt.step();
  }
  for (double v : x.value().data()) EXPECT_NEAR(v, 0.0, 1e-2);
}
