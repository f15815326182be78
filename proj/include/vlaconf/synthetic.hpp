#pragma once

// Controlled synthetic rollout generators.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vlaconf/rng.hpp"
#include "vlaconf/rollout.hpp"

namespace vlaconf {

enum class OodKind { FeatureShift, PhaseSwap, LateDeviation };

inline std::string ood_kind_name(OodKind k) {
  switch (k) {
    case OodKind::FeatureShift: return "feature_shift";
    case OodKind::PhaseSwap: return "phase_swap";
    case OodKind::LateDeviation: return "late_deviation";
  }
  return "?";
}

/// Rollouts walk through `n_phases` phases of `steps_per_phase` steps; each
/// phase has Gaussian (h_v, h_l, x) blocks with isotropic noise `noise`.
/// Proprio dimensions carry native scales 1, 10, 100 in rotation.
struct PhaseGenConfig {
  std::uint32_t n_phases = 4;
  std::uint32_t steps_per_phase = 8;
  std::uint32_t d_v = 64;
  std::uint32_t d_l = 32;
  std::uint32_t d_x = 8;
  double phase_spread = 3.0;  // std of the phase means around zero
  double noise = 0.3;         // within-phase std per coordinate (the unit sigma)
  double step_noise_share = 1.0;  // fraction of that variance redrawn every step; the rest is fixed per rollout and phase
  std::uint32_t n_success = 200;          // success-only training rollouts
  std::uint32_t n_labeled_success = 100;  // Y = 1 rollouts in the labeled set
  std::uint32_t n_ood = 100;
  OodKind ood_kind = OodKind::FeatureShift;
  double shift_magnitude = 10.0;  // per-coordinate displacement, in noise units
  double late_onset = 0.6;        // fraction of the rollout after which late deviations start
  double ood_success_prob = 0.0;  // Bernoulli leak; 0 means perturbed rollouts always fail
  double difficulty_magnitude = 0.0;  // > 0 gives labeled successes a graded shift and later first success
  std::uint64_t seed = 0;

  void validate() const {
    if (n_phases < 1 || steps_per_phase < 1) throw Error(Errc::InvalidConfig, "need >= 1 phase and >= 1 step per phase");
    if (d_v == 0 || d_l == 0 || d_x == 0) throw Error(Errc::InvalidConfig, "feature dims must be positive");
    if (!(shift_magnitude >= 0.0) || !(phase_spread >= 0.0) || !(noise >= 0.0) || !(difficulty_magnitude >= 0.0)) {
      throw Error(Errc::InvalidConfig, "magnitudes must be >= 0");
    }
    if (!(step_noise_share >= 0.0 && step_noise_share <= 1.0)) {
      throw Error(Errc::InvalidConfig, "step_noise_share must lie in [0, 1]");
    }
    if (!(ood_success_prob >= 0.0 && ood_success_prob <= 1.0)) {
      throw Error(Errc::InvalidConfig, "ood_success_prob must lie in [0, 1]");
    }
    if (!(late_onset >= 0.0 && late_onset <= 1.0)) throw Error(Errc::InvalidConfig, "late_onset must lie in [0, 1]");
    if (ood_kind == OodKind::PhaseSwap && n_ood > 0 && n_phases < 2) {
      throw Error(Errc::InvalidConfig, "phase_swap needs at least two phases");
    }
  }

  std::uint32_t length() const { return n_phases * steps_per_phase; }
};

struct PhaseData {
  RolloutSet sft;
  RolloutSet labeled;
  std::vector<bool> perturbed;                             // per labeled trace
  std::vector<std::optional<std::uint32_t>> first_success;  // per labeled trace, successes only
};

namespace detail {

struct Block {
  std::vector<std::vector<double>> phase_means;  // n_phases x dim
  std::vector<double> scale;                     // native unit per dim
  std::vector<double> shift_dir;                 // random +-1 per coordinate
};

inline Block make_block(Rng& rng, std::uint32_t dim, std::uint32_t n_phases, double spread, bool shared_mean,
                        bool unit_scales) {
  Block b;
  b.scale.assign(dim, 1.0);
  if (unit_scales) {
    for (std::uint32_t j = 0; j < dim; ++j) b.scale[j] = std::pow(10.0, static_cast<double>(j % 3));
  }
  std::vector<double> shared(dim);
  for (auto& v : shared) v = spread * rng.normal();
  for (std::uint32_t p = 0; p < n_phases; ++p) {
    std::vector<double> m(dim);
    for (std::uint32_t j = 0; j < dim; ++j) m[j] = shared_mean ? shared[j] : spread * rng.normal();
    b.phase_means.push_back(std::move(m));
  }
  b.shift_dir.resize(dim);
  for (auto& v : b.shift_dir) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
  return b;
}

inline std::vector<float> sample_block(Rng& rng, const Block& b, std::uint32_t phase, const std::vector<double>& offset,
                                       double step_noise, double shift) {
  const auto& m = b.phase_means[phase];
  std::vector<float> out(m.size());
  for (std::size_t j = 0; j < m.size(); ++j) {
    out[j] = static_cast<float>(b.scale[j] * (m[j] + offset[j] + step_noise * rng.normal() + shift * b.shift_dir[j]));
  }
  return out;
}

/// Per-phase offsets shared by every step of one rollout in that phase.
inline std::vector<std::vector<double>> rollout_offsets(Rng& rng, std::size_t dim, std::uint32_t n_phases, double sd) {
  std::vector<std::vector<double>> out(n_phases, std::vector<double>(dim));
  for (auto& phase : out)
    for (auto& v : phase) v = sd * rng.normal();
  return out;
}

}  // namespace detail

/// Deterministic per seed. Training rollouts are unlabeled successes; the
/// labeled set holds successes (Y = 1) followed by perturbed rollouts whose
/// outcome follows the Bernoulli leak.
inline PhaseData gen_phase_rollouts(const PhaseGenConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  // Language block is the instruction summary: one mean shared by all phases.
  const auto bv = detail::make_block(rng, cfg.d_v, cfg.n_phases, cfg.phase_spread, false, false);
  const auto bl = detail::make_block(rng, cfg.d_l, cfg.n_phases, cfg.phase_spread, true, false);
  const auto bx = detail::make_block(rng, cfg.d_x, cfg.n_phases, cfg.phase_spread, false, true);
  const std::uint32_t T = cfg.length();

  // phase_of[k-1] gives the phase used at step k; shift_at[k-1] the displacement.
  auto make_trace = [&](std::uint32_t id, const std::vector<std::uint32_t>& phase_order,
                        const std::vector<double>& shift_at) {
    RolloutTrace tr;
    tr.rollout_id = id;
    tr.instruction_id = "phase-task";
    const double fixed_sd = cfg.noise * std::sqrt(1.0 - cfg.step_noise_share);
    const double step_sd = cfg.noise * std::sqrt(cfg.step_noise_share);
    const auto ov = detail::rollout_offsets(rng, cfg.d_v, cfg.n_phases, fixed_sd);
    const auto ol = detail::rollout_offsets(rng, cfg.d_l, cfg.n_phases, fixed_sd);
    const auto ox = detail::rollout_offsets(rng, cfg.d_x, cfg.n_phases, fixed_sd);
    for (std::uint32_t k = 1; k <= T; ++k) {
      const std::uint32_t phase = phase_order[(k - 1) / cfg.steps_per_phase];
      const double shift = shift_at[k - 1] * cfg.noise;
      StepRecord s;
      s.k = k;
      s.h_v = detail::sample_block(rng, bv, phase, ov[phase], step_sd, shift);
      s.h_l = detail::sample_block(rng, bl, phase, ol[phase], step_sd, shift);
      s.x = detail::sample_block(rng, bx, phase, ox[phase], step_sd, shift);
      tr.steps.push_back(std::move(s));
    }
    return tr;
  };

  std::vector<std::uint32_t> nominal_order(cfg.n_phases);
  for (std::uint32_t p = 0; p < cfg.n_phases; ++p) nominal_order[p] = p;
  const std::vector<double> no_shift(T, 0.0);
  auto nominal_first_success = [&](double difficulty) {
    const auto fs = static_cast<std::uint32_t>(std::floor(static_cast<double>(T) * (0.55 + 0.4 * difficulty)));
    return std::clamp<std::uint32_t>(fs, 1, T);
  };

  PhaseData out;
  out.sft.header = {cfg.d_v, cfg.d_l, cfg.d_x, kRolloutVersion};
  out.sft.role = Role::Sft;
  for (std::uint32_t i = 0; i < cfg.n_success; ++i) out.sft.traces.push_back(make_trace(i, nominal_order, no_shift));

  out.labeled.header = out.sft.header;
  out.labeled.role = Role::Eval;
  std::uint32_t id = 0;
  for (std::uint32_t i = 0; i < cfg.n_labeled_success; ++i) {
    const double difficulty = cfg.difficulty_magnitude > 0.0 ? rng.uniform() : 0.0;
    auto tr = make_trace(id++, nominal_order,
                         std::vector<double>(T, difficulty * cfg.difficulty_magnitude));
    tr.outcome = 1;
    out.labeled.traces.push_back(std::move(tr));
    out.perturbed.push_back(false);
    out.first_success.emplace_back(nominal_first_success(difficulty));
  }
  for (std::uint32_t i = 0; i < cfg.n_ood; ++i) {
    std::vector<std::uint32_t> order = nominal_order;
    std::vector<double> shift(T, 0.0);
    switch (cfg.ood_kind) {
      case OodKind::FeatureShift: std::fill(shift.begin(), shift.end(), cfg.shift_magnitude); break;
      case OodKind::LateDeviation: {
        const auto onset = static_cast<std::uint32_t>(std::floor(cfg.late_onset * static_cast<double>(T)));
        for (std::uint32_t k = onset; k < T; ++k) shift[k] = cfg.shift_magnitude;
        break;
      }
      case OodKind::PhaseSwap:
        // Uniform derangement: no phase stays in its own slot.
        do {
          rng.shuffle(order.begin(), order.end());
        } while ([&] {
          for (std::uint32_t p = 0; p < cfg.n_phases; ++p)
            if (order[p] == p) return true;
          return false;
        }());
        break;
    }
    auto tr = make_trace(id++, order, shift);
    const bool success = cfg.ood_success_prob > 0.0 && rng.uniform() < cfg.ood_success_prob;
    tr.outcome = success ? 1 : 0;
    out.labeled.traces.push_back(std::move(tr));
    out.perturbed.push_back(true);
    out.first_success.push_back(success ? std::optional<std::uint32_t>(T) : std::nullopt);
  }
  return out;
}

/// Tabular count oracle: one-step rollouts whose features take one of a set
/// of fixed random vectors; cell z is repeated N(z) times under distinct
/// rollout ids, so every copy draws an independent coin target.
struct TabularOracleConfig {
  std::vector<std::uint32_t> ladder{1, 2, 4, 8, 16};
  std::uint32_t cells_per_count = 16;
  std::uint32_t n_novel = 0;  // extra never-seen cells, for calibration checks
  std::uint32_t d = 64;
  std::uint32_t d_v = 16;
  std::uint32_t d_l = 8;
  std::uint32_t d_x = 4;
  std::uint64_t seed = 0;

  std::size_t n_cells() const { return ladder.size() * cells_per_count; }
};

struct TabularData {
  RolloutSet set;
  std::vector<std::uint32_t> cell_of_trace;
  std::vector<std::uint32_t> count_of_cell;
  std::vector<StepRecord> cell_features;
  std::vector<StepRecord> novel_features;
};

inline TabularData gen_tabular_dataset(const TabularOracleConfig& cfg) {
  if (cfg.n_cells() == 0) throw Error(Errc::InvalidConfig, "tabular oracle needs at least one cell");
  for (auto n : cfg.ladder)
    if (n < 1) throw Error(Errc::InvalidConfig, "tabular counts must be >= 1");
  if (cfg.d == 0 || cfg.d_v == 0 || cfg.d_l == 0 || cfg.d_x == 0) throw Error(Errc::InvalidConfig, "dims must be positive");
  Rng rng(cfg.seed);
  auto random_record = [&] {
    StepRecord s;
    s.k = 1;
    s.h_v.resize(cfg.d_v);
    s.h_l.resize(cfg.d_l);
    s.x.resize(cfg.d_x);
    for (auto& f : s.h_v) f = static_cast<float>(rng.normal());
    for (auto& f : s.h_l) f = static_cast<float>(rng.normal());
    for (auto& f : s.x) f = static_cast<float>(rng.normal());
    return s;
  };
  TabularData out;
  out.set.header = {cfg.d_v, cfg.d_l, cfg.d_x, kRolloutVersion};
  out.set.role = Role::Sft;
  std::uint32_t id = 0;
  for (std::uint32_t level = 0; level < cfg.ladder.size(); ++level) {
    for (std::uint32_t c = 0; c < cfg.cells_per_count; ++c) {
      const auto cell = static_cast<std::uint32_t>(out.cell_features.size());
      out.cell_features.push_back(random_record());
      out.count_of_cell.push_back(cfg.ladder[level]);
      for (std::uint32_t r = 0; r < cfg.ladder[level]; ++r) {
        RolloutTrace tr;
        tr.rollout_id = id++;
        tr.instruction_id = "cell-" + std::to_string(cell);
        tr.steps.push_back(out.cell_features.back());
        out.set.traces.push_back(std::move(tr));
        out.cell_of_trace.push_back(cell);
      }
    }
  }
  for (std::uint32_t c = 0; c < cfg.n_novel; ++c) out.novel_features.push_back(random_record());
  return out;
}

}  // namespace vlaconf
