#pragma once

// Central finite-difference verification of the analytic head gradient.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "vlaconf/training.hpp"

namespace vlaconf {

struct GradcheckOptions {
  std::uint32_t n_configs = 5;
  std::uint32_t probes_per_group = 128;
  double step = 1e-3;
  double tolerance = 1e-4;
  // Error is measured relative to the largest probed gradient magnitude in
  // the group; groups whose gradient is below this floor count as zero.
  double abs_floor = 1e-6;
  std::uint32_t batch_size = 4;
  std::uint64_t seed = 0;
};

struct GradcheckGroup {
  std::string name;
  std::uint32_t probed = 0;
  std::uint32_t kink_skips = 0;
  double max_rel_error = 0.0;
};

struct GradcheckResult {
  std::vector<HeadConfig> configs;
  std::vector<GradcheckGroup> groups;  // one per (config, tensor)
  double max_rel_error = 0.0;
  std::uint32_t total_probes = 0;
  std::uint32_t total_kink_skips = 0;
  bool passed = false;
};

/// Random small head config; step conditioning on unless `no_step`.
inline HeadConfig random_small_config(Rng& rng, bool no_step = false) {
  auto dim = [&](std::uint32_t lo, std::uint32_t hi) { return static_cast<std::uint32_t>(lo + rng.below(hi - lo + 1)); };
  HeadConfig c;
  c.d_v = dim(2, 6);
  c.d_l = dim(2, 5);
  c.d_x = dim(1, 4);
  c.ex_hidden = dim(2, 6);
  c.d_x_out = dim(2, 5);
  c.mix_hidden = dim(3, 8);
  c.d_z = dim(2, 6);
  c.proj_width = dim(6, 10);
  c.d_e = dim(2, 5);
  c.cond_hidden = dim(2, 6);
  c.d_c = dim(2, 6);
  c.q_hidden = dim(3, 8);
  c.d = dim(2, 8);
  c.horizon = dim(2, 6);
  c.step_conditioning = !no_step;
  c.seed = rng.next();
  return c;
}

/// Weights at initialisation scale U(+-1/sqrt(fan_in)), FiLM and gate
/// included; biases and norm affines N(0, 0.5^2) around their init value;
/// embedding N(0, 1). Non-zero biases keep the pre-norm variance away from
/// zero, where central differences at step 1e-3 lose accuracy.
inline HeadParams<float> random_params(const HeadConfig& cfg, Rng& rng) {
  HeadParams<float> p(cfg);
  HeadParams<float>::zip(
      [&](const char* name, TensorKind kind, Tensor<float>& t) {
        const bool gain = std::string(name).ends_with(".gain");
        for (Eigen::Index i = 0; i < t.size(); ++i) {
          double v = 0.0;
          switch (kind) {
            case TensorKind::Weight: {
              const double bound = 1.0 / std::sqrt(static_cast<double>(t.cols()));
              v = rng.uniform(-bound, bound);
              break;
            }
            case TensorKind::Embedding: v = rng.normal(); break;
            case TensorKind::Bias:
            case TensorKind::NormAffine: v = (gain ? 1.0 : 0.0) + 0.5 * rng.normal(); break;
          }
          t.data()[i] = static_cast<float>(v);
        }
      },
      p);
  for (Eigen::Index i = 0; i < p.proprio_mean.size(); ++i) {
    p.proprio_mean(i) = static_cast<float>(rng.normal());
    p.proprio_std(i) = static_cast<float>(0.5 + rng.uniform());
  }
  return p;
}

/// A labelled-free rollout set of random records with step indices that also
/// exceed the horizon, so clipping is covered.
inline RolloutSet random_rollouts(const HeadConfig& cfg, std::uint32_t n_traces, std::uint32_t len, Rng& rng) {
  RolloutSet set;
  set.header = {cfg.d_v, cfg.d_l, cfg.d_x, kRolloutVersion};
  for (std::uint32_t t = 0; t < n_traces; ++t) {
    RolloutTrace tr;
    tr.rollout_id = t;
    tr.instruction_id = "random";
    for (std::uint32_t k = 1; k <= len; ++k) {
      StepRecord s;
      s.k = k;
      s.h_v.resize(cfg.d_v);
      s.h_l.resize(cfg.d_l);
      s.x.resize(cfg.d_x);
      for (auto& f : s.h_v) f = static_cast<float>(rng.normal());
      for (auto& f : s.h_l) f = static_cast<float>(rng.normal());
      for (auto& f : s.x) f = static_cast<float>(rng.normal());
      tr.steps.push_back(std::move(s));
    }
    set.traces.push_back(std::move(tr));
  }
  return set;
}

namespace detail {

// Sign pattern of every ReLU pre-activation; a change between the two probe
// points means the difference quotient straddles a kink.
template <class T>
std::vector<bool> relu_pattern(const HeadParams<T>& p, const StepBatch<T>& b) {
  const auto fc = forward(p, b);
  std::vector<bool> out;
  for (const Tensor<T>* a : {&fc.a_state, &fc.a_mix, &fc.a_cond, &fc.a_coin}) {
    for (Eigen::Index i = 0; i < a->size(); ++i) out.push_back(a->data()[i] > T(0));
  }
  return out;
}

}  // namespace detail

inline GradcheckResult gradcheck(const GradcheckOptions& opt) {
  GradcheckResult res;
  Rng rng(opt.seed);
  for (std::uint32_t ci = 0; ci < opt.n_configs; ++ci) {
    // The last config exercises the unconditioned path.
    const HeadConfig cfg = random_small_config(rng, opt.n_configs > 1 && ci + 1 == opt.n_configs);
    res.configs.push_back(cfg);
    const HeadParams<double> p = random_params(cfg, rng).cast<double>();
    const std::uint32_t len = cfg.horizon + 2;
    const auto set = random_rollouts(cfg, std::max<std::uint32_t>(1, opt.batch_size / 2), len, rng);
    auto all = step_samples(set);
    std::vector<StepSample> batch;
    for (std::uint32_t i = 0; i < opt.batch_size; ++i) batch.push_back(all[rng.below(all.size())]);
    const std::uint64_t target_seed = rng.next();
    const auto sb = detail::batch_of<double>(batch, cfg);
    const auto analytic = loss_and_grad(p, std::span<const StepSample>(batch), target_seed);

    // Walk the tensors of a scratch copy alongside the analytic gradient.
    HeadParams<double> probe = p;
    HeadParams<double> grad_copy = analytic.grad;
    HeadParams<double>::zip(
        [&](const char* name, TensorKind, Tensor<double>& w, Tensor<double>& g) {
          GradcheckGroup grp;
          grp.name = "config" + std::to_string(ci) + "/" + name;
          const auto n = static_cast<std::size_t>(w.size());
          std::vector<std::size_t> idx(n);
          for (std::size_t i = 0; i < n; ++i) idx[i] = i;
          rng.shuffle(idx.begin(), idx.end());
          double max_abs_diff = 0.0;
          double scale = 0.0;
          for (std::size_t pos = 0; pos < n && grp.probed < opt.probes_per_group; ++pos) {
            double& wi = w.data()[idx[pos]];
            const double orig = wi;
            wi = orig + opt.step;
            const double lp = cfn_loss(probe, std::span<const StepSample>(batch), target_seed);
            const auto pat_p = detail::relu_pattern(probe, sb);
            wi = orig - opt.step;
            const double lm = cfn_loss(probe, std::span<const StepSample>(batch), target_seed);
            const auto pat_m = detail::relu_pattern(probe, sb);
            wi = orig;
            if (pat_p != pat_m) {
              ++grp.kink_skips;
              continue;
            }
            const double numeric = (lp - lm) / (2.0 * opt.step);
            const double a = g.data()[idx[pos]];
            max_abs_diff = std::max(max_abs_diff, std::abs(a - numeric));
            scale = std::max({scale, std::abs(a), std::abs(numeric)});
            ++grp.probed;
          }
          grp.max_rel_error = max_abs_diff / std::max(scale, opt.abs_floor);
          res.max_rel_error = std::max(res.max_rel_error, grp.max_rel_error);
          res.total_probes += grp.probed;
          res.total_kink_skips += grp.kink_skips;
          res.groups.push_back(std::move(grp));
        },
        probe, grad_copy);
  }
  res.passed = res.max_rel_error < opt.tolerance;
  return res;
}

}  // namespace vlaconf
