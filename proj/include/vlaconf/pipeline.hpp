#pragma once

#include <span>
#include <vector>

#include "vlaconf/calibration.hpp"
#include "vlaconf/head.hpp"
#include "vlaconf/training.hpp"

namespace vlaconf {

/// Step scores for every trace of a set. Outcomes are copied only when
/// `with_outcomes` is set.
inline std::vector<ScoredRollout> score_rollouts(const HeadParams<double>& p, const RolloutSet& set,
                                                 bool with_outcomes, unsigned threads = 1) {
  check_dims(p.config, set.header);
  std::vector<ScoredRollout> out(set.traces.size());
  detail::run_chunks(set.traces.size(), threads, [&](std::size_t i) {
    const auto& tr = set.traces[i];
    out[i].rollout_id = tr.rollout_id;
    out[i].scores = score_steps(p, std::span<const StepRecord>(tr.steps));
    if (with_outcomes) out[i].outcome = tr.outcome;
  });
  return out;
}

inline std::vector<double> prefix_signals(std::span<const ScoredRollout> rs, AggregationRule rule, double fraction) {
  std::vector<double> u;
  u.reserve(rs.size());
  for (const auto& r : rs) u.push_back(prefix_signal(r, rule, fraction));
  return u;
}

inline std::vector<std::uint8_t> outcomes(std::span<const ScoredRollout> rs) {
  std::vector<std::uint8_t> y;
  y.reserve(rs.size());
  for (const auto& r : rs) {
    if (!r.outcome) throw Error(Errc::InvalidConfig, "rollout " + std::to_string(r.rollout_id) + " has no outcome");
    y.push_back(*r.outcome);
  }
  return y;
}

}  // namespace vlaconf
