#include <gtest/gtest.h>

#include <cstring>

#include "voxmot/flow.hpp"
#include "voxmot/rng.hpp"

using namespace voxmot;

namespace {

Tensor<double> randn_t(std::vector<int> shape, uint64_t seed) {
  Rng rng(seed);
  return Tensor<double>::randn(std::move(shape), rng);
}

}  // namespace

TEST(Interpolate, EndpointsAndMidpoint) {
  auto x0 = randn_t({3, 4}, 1);
  auto x1 = randn_t({3, 4}, 2);
  EXPECT_EQ(interpolate(x0, x1, 0.0).data, x0.data);
  EXPECT_EQ(interpolate(x0, x1, 1.0).data, x1.data);
  auto mid = interpolate(x0, x1, 0.5);
  for (size_t i = 0; i < mid.data.size(); ++i)
    EXPECT_DOUBLE_EQ(mid.data[i], 0.5 * x0.data[i] + 0.5 * x1.data[i]);
  EXPECT_THROW(interpolate(x0, x1, -0.1), DomainError);
  EXPECT_THROW(interpolate(x0, x1, 1.1), DomainError);
}

TEST(CfmLoss, PerfectPredictorIsZero) {
  auto x0 = randn_t({5, 8}, 3);
  auto x1 = randn_t({5, 8}, 4);
  EXPECT_EQ(cfm_loss_value(velocity_target(x0, x1), x0, x1), 0.0);
}

TEST(CfmLoss, ZeroPredictorMonteCarloGivesTwo) {
  // E ||x1 - x0||^2 / dim = Var(x1) + Var(x0) = 2 for independent N(0,1)
  Rng rng(5);
  const size_t samples = 100000;
  double acc = 0;
  for (size_t i = 0; i < samples; ++i) {
    const double d = rng.normal() - rng.normal();
    acc += d * d;
  }
  const double loss = acc / samples;
  EXPECT_NEAR(loss, 2.0, 0.04);  // within 2%
}

TEST(CfmLoss, GradientMatchesClosedFormAndFiniteDifferences) {
  auto x0 = randn_t({2, 6}, 6);
  auto x1 = randn_t({2, 6}, 7);
  auto v = randn_t({2, 6}, 8);
  Tape<double> tape;
  auto vref = tape.leaf(v, true);
  tape.backward(cfm_loss(tape, vref, x0, x1));
  const auto& g = tape.grad(vref);
  const double count = v.data.size();
  for (size_t i = 0; i < v.data.size(); ++i)
    EXPECT_NEAR(g.data[i], 2.0 * (v.data[i] - (x1.data[i] - x0.data[i])) / count, 1e-12);

  const double err = grad_check<double>(
      [&x0, &x1](Tape<double>& t, Tape<double>::Ref in) { return cfm_loss(t, in, x0, x1); }, v,
      1e-6);
  EXPECT_LT(err, 1e-7);
}

TEST(ShiftT, FixedPointsAndTableValues) {
  EXPECT_DOUBLE_EQ(shift_t(0.37, 1.0), 0.37);  // shift 1.0 means unshifted
  for (double s : {1.0, 2.0, 3.0, 8.0}) {
    EXPECT_DOUBLE_EQ(shift_t(0.0, s), 0.0);
    EXPECT_DOUBLE_EQ(shift_t(1.0, s), 1.0);
  }
  EXPECT_DOUBLE_EQ(shift_t(0.5, 3.0), 0.75);
  EXPECT_THROW(shift_t(-0.1, 1.0), DomainError);
  EXPECT_THROW(shift_t(0.5, 0.5), DomainError);
}

TEST(ShiftT, StrictlyIncreasingBijection) {
  for (double s : {1.0, 1.5, 3.0, 10.0}) {
    double prev = -1;
    for (int i = 0; i <= 1000; ++i) {
      const double t = shift_t(i / 1000.0, s);
      EXPECT_GT(t, prev);
      prev = t;
    }
    EXPECT_DOUBLE_EQ(prev, 1.0);
  }
}

TEST(Guidance, WeightEndpoints) {
  auto vc = randn_t({3, 3}, 9);
  auto vu = randn_t({3, 3}, 10);
  EXPECT_EQ(guided_velocity(vc, vu, 1.0).data, vc.data);
  EXPECT_EQ(guided_velocity(vc, vu, 0.0).data, vu.data);
}

TEST(Guidance, DropoutRateMonteCarlo) {
  GuidanceConfig cfg;
  cfg.validate();
  Rng rng = stream_rng(1234, "dropout");
  const int n = 100000;
  int dropped = 0;
  for (int i = 0; i < n; ++i) dropped += rng.bernoulli(cfg.dropout_p);
  EXPECT_NEAR(static_cast<double>(dropped) / n, 0.1, 0.005);
}

TEST(Euler, OneStepExactOnConstantField) {
  auto x0 = randn_t({4, 4}, 11);
  auto x1 = randn_t({4, 4}, 12);
  const auto target = velocity_target(x0, x1);
  auto field = [&target](const Tensor<double>&, double) { return target; };
  for (int steps : {1, 7, 40}) {
    auto got = euler_sample<double>(field, x0, steps);
    for (size_t i = 0; i < got.data.size(); ++i) EXPECT_NEAR(got.data[i], x1.data[i], 1e-12);
  }
  // K=1 is exactly x0 + (x1 - x0)
  auto one = euler_sample<double>(field, x0, 1);
  for (size_t i = 0; i < one.data.size(); ++i)
    EXPECT_EQ(one.data[i], x0.data[i] + (x1.data[i] - x0.data[i]));
}

TEST(Euler, LinearFieldMatchesClosedForm) {
  auto x0 = randn_t({8}, 13);
  auto field = [](const Tensor<double>& x, double) {
    Tensor<double> v = x;
    for (auto& e : v.data) e = -e;
    return v;
  };
  auto got = euler_sample<double>(field, x0, 1000);
  for (size_t i = 0; i < got.data.size(); ++i)
    EXPECT_NEAR(got.data[i], std::exp(-1.0) * x0.data[i], 1e-2);
}

TEST(Euler, DeterministicByConstruction) {
  auto run = [] {
    Rng rng = stream_rng(77, "noise");
    Tensor<float> x({6, 6});
    for (auto& v : x.data) v = static_cast<float>(rng.normal());
    auto field = [](const Tensor<float>& in, double t) {
      Tensor<float> v = in;
      for (auto& e : v.data) e = std::sin(e) + static_cast<float>(t);
      return v;
    };
    return euler_sample<float>(field, x, 25, 3.0);
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(0, std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)));
}
