#include <chrono>
#include <cmath>

#include <gtest/gtest.h>

#include "support.hpp"

namespace vlaconf {
namespace {

using testing::expect_errc;
using testing::random_record;
using testing::small_config;
namespace ref = testing::ref;

// Written out again from the published splitmix64 constants.
std::uint64_t oracle_mix(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double oracle_entry(std::uint64_t seed, std::uint64_t i, std::uint64_t k, std::uint64_t j) {
  return (oracle_mix(seed ^ oracle_mix((i << 40) | (k << 20) | j)) >> 63) ? 1.0 : -1.0;
}

RolloutSet sft_set(const HeadConfig& cfg, std::uint32_t n_traces, std::uint32_t len, std::uint64_t seed) {
  Rng rng(seed);
  auto set = random_rollouts(cfg, n_traces, len, rng);
  set.role = Role::Sft;
  return set;
}

std::vector<StepSample> samples_of(const std::vector<StepRecord>& recs, std::uint32_t first_id) {
  std::vector<StepSample> out;
  for (std::size_t i = 0; i < recs.size(); ++i) out.push_back({&recs[i], first_id + static_cast<std::uint32_t>(i)});
  return out;
}

double max_abs(const HeadParams<double>& g) {
  double m = 0.0;
  HeadParams<double>::zip([&](const char*, TensorKind, const Tensor<double>& t) { m = std::max(m, t.cwiseAbs().maxCoeff()); },
                          g);
  return m;
}

TEST(CoinTarget, SplitmixFinalizerMatchesPublishedValue) {
  EXPECT_EQ(mix64(0), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(oracle_mix(0), 0xE220A8397B1DCDAFULL);
}

TEST(CoinTarget, MatchesIndependentDefinitionBitForBit) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto seed = rng.next();
    const auto i = rng.below(kMaxRolloutId);
    const auto k = rng.below(kMaxStep);
    const auto t = coin_target(seed, i, k, 16);
    for (std::uint64_t j = 0; j < 16; ++j) {
      ASSERT_TRUE(t.c[j] == 1 || t.c[j] == -1);
      ASSERT_EQ(t.c[j], oracle_entry(seed, i, k, j));
    }
  }
}

TEST(CoinTarget, Deterministic) {
  EXPECT_EQ(coin_target(9, 4, 7, 64).c, coin_target(9, 4, 7, 64).c);
  EXPECT_NE(coin_target(9, 4, 7, 64).c, coin_target(10, 4, 7, 64).c);
}

TEST(CoinTarget, MonteCarloMeanAndAdjacentCorrelation) {
  const std::uint64_t d = 100;
  double sum = 0.0, adjacent = 0.0;
  std::size_t n = 0, pairs = 0;
  for (std::uint64_t i = 0; i < 100; ++i)
    for (std::uint64_t k = 1; k <= 10; ++k) {
      const auto t = coin_target(12345, i, k, d);
      for (std::uint64_t j = 0; j < d; ++j) {
        sum += t.c[j];
        ++n;
        if (j + 1 < d) {
          adjacent += t.c[j] * t.c[j + 1];
          ++pairs;
        }
      }
    }
  ASSERT_EQ(n, 100'000u);
  EXPECT_LT(std::abs(sum / static_cast<double>(n)), 0.02);
  EXPECT_LT(std::abs(adjacent / static_cast<double>(pairs)), 0.02);
}

TEST(CoinTarget, PackOverflow) {
  expect_errc(Errc::PackOverflow, [] { coin_target(0, kMaxRolloutId, 1, 4); });
  expect_errc(Errc::PackOverflow, [] { coin_target(0, 1, kMaxStep, 4); });
  expect_errc(Errc::PackOverflow, [] { coin_target(0, 1, 1, kMaxCoord + 1); });
  EXPECT_NO_THROW(coin_target(0, kMaxRolloutId - 1, kMaxStep - 1, 4));
}

TEST(CfnLoss, ExactFitGivesZero) {
  auto cfg = small_config();
  cfg.d = 64;
  Rng rng(2);
  auto p = random_params(cfg, rng);
  const std::vector<StepRecord> recs{random_record(cfg, rng, 5)};
  const auto batch = samples_of(recs, 17);
  const auto target = coin_target(99, 17, 5, 64);
  p.coin.l2.w.setZero();
  for (std::uint32_t j = 0; j < 64; ++j) p.coin.l2.b(j, 0) = target.c[j];
  EXPECT_EQ(cfn_loss(p.cast<double>(), std::span<const StepSample>(batch), 99), 0.0);
}

TEST(CfnLoss, ZeroOutputGivesD) {
  auto cfg = small_config();
  cfg.d = 64;
  Rng rng(3);
  auto p = random_params(cfg, rng);
  p.coin.l2.w.setZero();
  p.coin.l2.b.setZero();
  std::vector<StepRecord> recs;
  for (std::uint32_t k = 1; k <= 5; ++k) recs.push_back(random_record(cfg, rng, k));
  const auto batch = samples_of(recs, 0);
  EXPECT_EQ(cfn_loss(p.cast<double>(), std::span<const StepSample>(batch), 7), 64.0);
}

TEST(CfnLoss, MatchesStraightLineRecomputation) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto cfg = random_small_config(rng, trial % 3 == 2);
    const auto p = random_params(cfg, rng);
    std::vector<StepRecord> recs;
    for (int b = 0; b < 3; ++b) recs.push_back(random_record(cfg, rng, 1 + static_cast<std::uint32_t>(rng.below(9))));
    const auto batch = samples_of(recs, 40 + static_cast<std::uint32_t>(trial));
    const std::uint64_t seed = rng.next();
    double want = 0.0;
    for (const auto& s : batch) {
      const auto v = ref::forward(p, *s.record);
      for (std::size_t j = 0; j < v.size(); ++j) {
        const double e = v[j] - oracle_entry(seed, s.rollout_id, s.record->k, j);
        want += e * e;
      }
    }
    want /= 3.0;
    EXPECT_NEAR(cfn_loss(p.cast<double>(), std::span<const StepSample>(batch), seed), want, 1e-6 * std::max(1.0, want));
  }
}

TEST(CfnLoss, EmptyBatchIsAnError) {
  const auto p = init_params(small_config()).cast<double>();
  expect_errc(Errc::EmptyDataset, [&] { cfn_loss(p, std::span<const StepSample>{}, 0); });
}

TEST(Grad, FiniteDifferenceCheckPassesWithinBudget) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = gradcheck(GradcheckOptions{});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_TRUE(res.passed) << "max relative error " << res.max_rel_error;
  EXPECT_LT(res.max_rel_error, 1e-4);
  EXPECT_EQ(res.configs.size(), 5u);
  EXPECT_LT(secs, 60.0);
  for (const auto& g : res.groups) EXPECT_GT(g.probed, 0u) << g.name;
}

TEST(Grad, UnusedEmbeddingRowsGetExactlyZero) {
  const auto cfg = small_config();
  Rng rng(5);
  const auto p = random_params(cfg, rng);
  std::vector<StepRecord> recs;
  for (std::uint32_t k : {1u, 2u, 3u, 5u, 9u, 5u}) recs.push_back(random_record(cfg, rng, k));
  const auto batch = samples_of(recs, 0);
  const auto g = grad(p, batch, 3);
  for (Eigen::Index row = 0; row < g.grad.step_emb.rows(); ++row) {
    const bool used = row == 0 || row == 1 || row == 2 || row == 4 || row == 8;
    if (used) {
      EXPECT_GT(g.grad.step_emb.row(row).cwiseAbs().maxCoeff(), 0.0) << "row " << row;
    } else {
      EXPECT_TRUE(g.grad.step_emb.row(row).isZero(0.0)) << "row " << row;
    }
  }
}

TEST(Grad, DuplicatedBatchLeavesMeanGradientUnchanged) {
  const auto cfg = small_config();
  Rng rng(6);
  const auto p = random_params(cfg, rng);
  std::vector<StepRecord> recs;
  for (std::uint32_t k = 1; k <= 3; ++k) recs.push_back(random_record(cfg, rng, k));
  auto batch = samples_of(recs, 0);
  const auto once = grad(p, batch, 11);
  batch.insert(batch.end(), batch.begin(), batch.end());
  const auto twice = grad(p, batch, 11);
  EXPECT_NEAR(once.loss, twice.loss, 1e-12 * once.loss);
  const double scale = max_abs(once.grad);
  HeadParams<double>::zip(
      [&](const char* name, TensorKind, const Tensor<double>& a, const Tensor<double>& b) {
        EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-12 * scale) << name;
      },
      once.grad, twice.grad);
}

TEST(Grad, IndependentOfThreadCount) {
  const auto cfg = small_config();
  Rng rng(7);
  const auto p = random_params(cfg, rng);
  const auto set = sft_set(cfg, 20, 15, 8);
  const auto samples = step_samples(set);
  const auto one = grad(p, samples, 5, 1);
  const auto three = grad(p, samples, 5, 3);
  EXPECT_EQ(one.loss, three.loss);
  HeadParams<double>::zip([&](const char* name, TensorKind, const Tensor<double>& a,
                              const Tensor<double>& b) { EXPECT_TRUE(a == b) << name; },
                          one.grad, three.grad);
}

TEST(Grad, SmallGradientStepsDecreaseLoss) {
  const auto cfg = small_config();
  Rng rng(8);
  auto p = random_params(cfg, rng).cast<double>();
  const auto set = sft_set(cfg, 4, 6, 9);
  const auto samples = step_samples(set);
  double prev = cfn_loss(p, std::span<const StepSample>(samples), 1);
  const double start = prev;
  for (int it = 0; it < 50; ++it) {
    const auto lg = loss_and_grad(p, std::span<const StepSample>(samples), 1);
    HeadParams<double>::zip([](const char*, TensorKind, Tensor<double>& w, const Tensor<double>& g) { w -= 1e-3 * g; },
                            p, lg.grad);
    const double now = cfn_loss(p, std::span<const StepSample>(samples), 1);
    EXPECT_LE(now, prev) << "iteration " << it;
    prev = now;
  }
  EXPECT_LT(prev, start);
}

TEST(AdamW, DecaysOnlyWeights) {
  const auto cfg = small_config();
  Rng rng(9);
  auto p = random_params(cfg, rng);
  const auto before = p;
  TrainConfig tc;
  tc.learning_rate = 0.1;
  tc.weight_decay = 0.5;
  AdamW opt(cfg, tc);
  opt.step(p, HeadParams<double>::zeros(cfg));
  HeadParams<float>::zip(
      [&](const char* name, TensorKind kind, const Tensor<float>& now, const Tensor<float>& was) {
        for (Eigen::Index i = 0; i < now.size(); ++i) {
          const float expect = kind == TensorKind::Weight
                                   ? static_cast<float>(static_cast<double>(was.data()[i]) * (1.0 - 0.1 * 0.5))
                                   : was.data()[i];
          ASSERT_EQ(now.data()[i], expect) << name;
        }
      },
      p, before);
}

TEST(Train, DeterministicAndThreadInvariant) {
  const auto cfg = small_config();
  const auto set = sft_set(cfg, 12, 10, 10);
  TrainConfig tc;
  tc.steps = 60;
  tc.batch_size = 100;
  tc.shuffle_seed = 4;
  tc.target_seed = 5;
  const auto a = train(set, cfg, tc);
  const auto b = train(set, cfg, tc);
  tc.threads = 2;
  const auto c = train(set, cfg, tc);
  EXPECT_EQ(encode_checkpoint(a.first), encode_checkpoint(b.first));
  EXPECT_EQ(encode_checkpoint(a.first), encode_checkpoint(c.first));
  EXPECT_EQ(a.second.loss_csv(), c.second.loss_csv());
  EXPECT_EQ(a.second.final_loss, b.second.final_loss);
}

TEST(Train, SingletonIsMemorised) {
  auto cfg = small_config();
  cfg.d = 64;
  cfg.proj_width = 32;
  cfg.q_hidden = 64;
  const auto set = sft_set(cfg, 1, 1, 11);
  TrainConfig tc;
  tc.steps = 2000;
  tc.batch_size = 1;
  const auto [p, report] = train(set, cfg, tc);
  EXPECT_LT(report.final_loss, 0.1 * 64);
}

TEST(Train, StoresProprioStatistics) {
  auto cfg = small_config();
  cfg.d_x = 2;
  RolloutSet set;
  set.header = {cfg.d_v, cfg.d_l, 2, kRolloutVersion};
  RolloutTrace tr;
  for (std::uint32_t k = 1; k <= 4; ++k) {
    StepRecord s;
    s.k = k;
    s.h_v.assign(cfg.d_v, 0.0f);
    s.h_l.assign(cfg.d_l, 0.0f);
    s.x = {static_cast<float>(k), 5.0f};
    tr.steps.push_back(s);
  }
  set.traces.push_back(tr);
  const auto [mean, sd] = proprio_statistics(set);
  EXPECT_DOUBLE_EQ(mean(0), 2.5);
  EXPECT_DOUBLE_EQ(mean(1), 5.0);
  EXPECT_DOUBLE_EQ(sd(0), std::sqrt(1.25));
  EXPECT_DOUBLE_EQ(sd(1), 1e-6);
  TrainConfig tc;
  tc.steps = 1;
  const auto p = train(set, cfg, tc).first;
  EXPECT_EQ(p.proprio_mean(0), 2.5f);
  EXPECT_EQ(p.proprio_std(1), 1e-6f);
}

TEST(Train, RefusesLabeledOrEmptyOrMismatchedData) {
  const auto cfg = small_config();
  TrainConfig tc;
  tc.steps = 1;
  auto labeled = sft_set(cfg, 3, 2, 12);
  labeled.role = Role::Eval;
  for (auto& t : labeled.traces) t.outcome = 1;
  expect_errc(Errc::NotSuccessOnly, [&] { train(labeled, cfg, tc); });

  RolloutSet empty;
  empty.header = {cfg.d_v, cfg.d_l, cfg.d_x, kRolloutVersion};
  expect_errc(Errc::EmptyDataset, [&] { train(empty, cfg, tc); });

  auto wide = cfg;
  wide.d_v += 1;
  expect_errc(Errc::DimensionMismatch, [&] { train(sft_set(cfg, 2, 2, 13), wide, tc); });

  tc.learning_rate = 0.0;
  expect_errc(Errc::InvalidConfig, [&] { train(sft_set(cfg, 2, 2, 13), cfg, tc); });
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig tc;
  tc.learning_rate = 3e-4;
  tc.clip_norm = 10.0;
  tc.steps = 77;
  TrainConfig back;
  update_from_json(back, nlohmann::json(tc));
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(tc));
  expect_errc(Errc::InvalidConfig, [&] { update_from_json(back, {{"lr", 1.0}}); });
}

}  // namespace
}  // namespace vlaconf
