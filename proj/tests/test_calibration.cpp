#include <cmath>

#include <gtest/gtest.h>

#include "support.hpp"

namespace vlaconf {
namespace {

using testing::expect_errc;

double mean_bce(const std::vector<double>& u, const std::vector<std::uint8_t>& y, double a, double b) {
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(a * u[i] - b));
    s -= y[i] ? std::log(p) : std::log(1.0 - p);
  }
  return s / static_cast<double>(u.size());
}

TEST(AggregatePrefix, Examples) {
  const std::vector<double> s{1, 2, 3};
  EXPECT_EQ(aggregate_prefix(s, AggregationRule::RunningMean).u, 2.0);
  EXPECT_EQ(aggregate_prefix(s, AggregationRule::PrefixMax).u, 3.0);
  EXPECT_EQ(aggregate_prefix(s, AggregationRule::First).u, 1.0);
  for (auto rule : kAllRules) {
    const auto sig = aggregate_prefix(std::vector<double>{5}, rule);
    EXPECT_EQ(sig.u, 5.0);
    EXPECT_EQ(sig.t, 1u);
  }
}

TEST(AggregatePrefix, Errors) {
  expect_errc(Errc::EmptyPrefix, [] { aggregate_prefix({}, AggregationRule::First); });
  expect_errc(Errc::NonFiniteInput, [] { aggregate_prefix(std::vector<double>{1, NAN}, AggregationRule::First); });
  expect_errc(Errc::NonFiniteInput, [] { aggregate_prefix(std::vector<double>{-1}, AggregationRule::First); });
}

TEST(AggregatePrefix, ConstantSequenceAgreesAcrossRules) {
  const std::vector<double> s(9, 4.25);
  for (auto rule : kAllRules) EXPECT_EQ(aggregate_prefix(s, rule).u, 4.25);
}

TEST(AggregatePrefix, PrefixMaxIsMonotoneInT) {
  Rng rng(1);
  std::vector<double> s;
  for (int i = 0; i < 200; ++i) s.push_back(std::abs(rng.normal()) * 10.0);
  double prev = 0.0;
  for (std::size_t t = 1; t <= s.size(); ++t) {
    const double u = aggregate_prefix(std::span<const double>(s).first(t), AggregationRule::PrefixMax).u;
    EXPECT_GE(u, prev);
    prev = u;
  }
}

TEST(CheckpointIndex, Examples) {
  EXPECT_EQ(checkpoint_index(10, 0.5), 5u);
  EXPECT_EQ(checkpoint_index(1, 0.5), 1u);
  EXPECT_EQ(checkpoint_index(7, 1.0), 7u);
  EXPECT_EQ(checkpoint_index(100, 0.29), 29u);
  EXPECT_EQ(checkpoint_index(10, 0.7), 7u);
  EXPECT_EQ(checkpoint_index(32, 0.1), 3u);
}

TEST(CheckpointIndex, Errors) {
  expect_errc(Errc::EmptyPrefix, [] { checkpoint_index(0, 0.5); });
  expect_errc(Errc::InvalidConfig, [] { checkpoint_index(5, 0.0); });
  expect_errc(Errc::InvalidConfig, [] { checkpoint_index(5, 1.5); });
}

TEST(ApplyPlatt, Examples) {
  EXPECT_EQ(apply_platt({0, 0}, 123.0), 0.5);
  EXPECT_EQ(apply_platt({1, 0}, 0.0), 0.5);
  EXPECT_LT(apply_platt({1, 0}, 20.0), 1e-8);
}

TEST(ApplyPlatt, NonIncreasingInSignal) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Calibrator cal{rng.uniform(0.0, 5.0), rng.normal(0.0, 3.0)};
    double prev = 1.0;
    for (double u = -20.0; u <= 60.0; u += 0.25) {
      const double p = apply_platt(cal, u);
      EXPECT_LE(p, prev);
      EXPECT_GE(p, 0.0);
      prev = p;
    }
  }
}

TEST(FitPlatt, RecoversGeneratingParameters) {
  Rng rng(3);
  std::vector<double> u;
  std::vector<std::uint8_t> y;
  for (int i = 0; i < 10'000; ++i) {
    u.push_back(rng.normal(0.0, 1.5));
    y.push_back(rng.uniform() < 1.0 / (1.0 + std::exp(2.0 * u.back() - 1.0)) ? 1 : 0);
  }
  const auto fit = fit_platt(u, y);
  EXPECT_NEAR(fit.cal.alpha, 2.0, 0.1);
  EXPECT_NEAR(fit.cal.beta, 1.0, 0.1);
  double rate = 0.0;
  for (auto v : y) rate += v;
  rate /= static_cast<double>(y.size());
  EXPECT_LE(mean_bce(u, y, fit.cal.alpha, fit.cal.beta), mean_bce(u, y, 0.0, std::log(rate / (1.0 - rate))));
}

TEST(FitPlatt, UninformativeSignalGivesConstantPredictor) {
  std::vector<double> u;
  std::vector<std::uint8_t> y;
  for (int g = 0; g < 100; ++g) {
    const double v = 0.37 * g;
    for (std::uint8_t label : {1, 0, 0}) {
      u.push_back(v);
      y.push_back(label);
    }
  }
  const auto fit = fit_platt(u, y);
  EXPECT_LT(fit.cal.alpha, 1e-2);
  EXPECT_NEAR(sigmoid(fit.cal.beta), 1.0 / 3.0, 0.05);
}

TEST(FitPlatt, WrongWayCorrelationStaysOnBound) {
  std::vector<double> u;
  std::vector<std::uint8_t> y;
  for (int i = 0; i < 200; ++i) {
    u.push_back(i * 0.1);
    y.push_back(i >= 100 ? 1 : 0);
  }
  const auto fit = fit_platt(u, y);
  EXPECT_EQ(fit.cal.alpha, 0.0);
  EXPECT_NEAR(sigmoid(fit.cal.beta), 0.5, 1e-3);
}

TEST(FitPlatt, SeparableAndSingleClassStayFinite) {
  std::vector<double> u{0, 1, 2, 10, 11, 12};
  std::vector<std::uint8_t> y{1, 1, 1, 0, 0, 0};
  auto fit = fit_platt(u, y);
  EXPECT_TRUE(std::isfinite(fit.cal.alpha) && std::isfinite(fit.cal.beta));
  EXPECT_GT(fit.cal.alpha, 0.0);
  EXPECT_FALSE(fit.single_class);
  fit = fit_platt(u, std::vector<std::uint8_t>(6, 1));
  EXPECT_TRUE(fit.single_class);
  EXPECT_TRUE(std::isfinite(fit.cal.beta));
}

TEST(FitPlatt, IsNoWorseThanAGridSearchOfTheSameObjective) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> u;
    std::vector<std::uint8_t> y;
    const double a = rng.uniform(-1.0, 3.0), b = rng.normal(0.0, 1.5);
    const auto n = 20 + rng.below(200);
    for (std::uint64_t i = 0; i < n; ++i) {
      u.push_back(rng.uniform(0.0, 4.0));
      y.push_back(rng.uniform() < 1.0 / (1.0 + std::exp(a * u.back() - b)) ? 1 : 0);
    }
    const auto fit = fit_platt(u, y);
    EXPECT_GE(fit.cal.alpha, 0.0);
    auto objective = [&](double aa, double bb) { return mean_bce(u, y, aa, bb) + 1e-4 * (aa * aa + bb * bb); };
    double best = objective(0.0, 0.0);
    for (double aa = 0.0; aa <= 8.0; aa += 0.05)
      for (double bb = -8.0; bb <= 8.0; bb += 0.05) best = std::min(best, objective(aa, bb));
    EXPECT_LE(objective(fit.cal.alpha, fit.cal.beta), best + 1e-9);
  }
}

TEST(FitPlatt, Errors) {
  expect_errc(Errc::LengthMismatch, [] { fit_platt(std::vector<double>{1, 2}, std::vector<std::uint8_t>{1}); });
  expect_errc(Errc::LengthMismatch, [] { fit_platt(std::vector<double>{1}, std::vector<std::uint8_t>{1}); });
  expect_errc(Errc::NonFiniteInput,
              [] { fit_platt(std::vector<double>{1, INFINITY}, std::vector<std::uint8_t>{1, 0}); });
}

TEST(CalibratorFile, JsonRoundTripAndValidation) {
  const CalibratorFile f{{1.5, -0.25}, AggregationRule::RunningMean, 0.3};
  const auto back = calibrator_from_json(to_json(f));
  EXPECT_EQ(back.cal.alpha, 1.5);
  EXPECT_EQ(back.cal.beta, -0.25);
  EXPECT_EQ(back.rule, AggregationRule::RunningMean);
  EXPECT_EQ(back.fraction, 0.3);
  auto j = to_json(f);
  j["alpha"] = -1.0;
  expect_errc(Errc::InvalidConfig, [&] { calibrator_from_json(j); });
  j = to_json(f);
  j["rule"] = "median";
  expect_errc(Errc::InvalidConfig, [&] { calibrator_from_json(j); });
  expect_errc(Errc::InvalidConfig, [] { calibrator_from_json({{"alpha", 1.0}}); });
}

TEST(StandardizedConfidence, CentredSignalMapsToHalf) {
  const std::vector<double> u{1.0, 2.0, 3.0};
  const auto p = standardized_confidence(u);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
  EXPECT_GT(p[0], p[1]);
  EXPECT_NEAR(p[0] + p[2], 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(p[0], sigmoid(std::sqrt(1.5)));
}

}  // namespace
}  // namespace vlaconf
