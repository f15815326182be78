#pragma once

// End-to-end oracle experiments on synthetic data. Each suite generates its
// data, trains, scores, calibrates, evaluates, and writes a JSON summary plus
// CSV tables into its output directory.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlaconf/calibration.hpp"
#include "vlaconf/head.hpp"
#include "vlaconf/metrics.hpp"
#include "vlaconf/pipeline.hpp"
#include "vlaconf/synthetic.hpp"
#include "vlaconf/training.hpp"

namespace vlaconf {

inline constexpr const char* kBenchSuites[] = {"tabular_1overN", "separation", "step_ablation", "calibration_gain",
                                               "progress_correlation"};

struct BenchCheck {
  std::string name;
  double value = 0.0;
  std::string relation;  // "<", "<=", ">", "==" or "true"
  double bound = 0.0;
  bool passed = false;
};

struct BenchReport {
  std::string suite;
  std::vector<BenchCheck> checks;
  nlohmann::json details = nlohmann::json::object();
  std::vector<std::string> files;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const BenchCheck& c) { return c.passed; });
  }
  const BenchCheck& check(const std::string& name) const {
    for (const auto& c : checks)
      if (c.name == name) return c;
    throw Error(Errc::InvalidConfig, "suite " + suite + " has no check '" + name + "'");
  }
};

inline nlohmann::json to_json(const BenchReport& r) {
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : r.checks) {
    checks.push_back(
        {{"name", c.name}, {"value", c.value}, {"relation", c.relation}, {"bound", c.bound}, {"passed", c.passed}});
  }
  return {{"suite", r.suite}, {"passed", r.passed()}, {"checks", checks}, {"details", r.details}};
}

struct BenchOptions {
  unsigned threads = 1;
  std::uint64_t seed = 0;
};

/// Head used by every suite: the default architecture at desk width.
inline HeadConfig bench_head_config(const RolloutHeader& h, bool step_conditioning, std::uint32_t horizon,
                                    std::uint64_t seed) {
  HeadConfig c;
  c.d_v = h.d_v;
  c.d_l = h.d_l;
  c.d_x = h.d_x;
  c.ex_hidden = 32;
  c.d_x_out = 16;
  c.mix_hidden = 128;
  c.d_z = 64;
  c.proj_width = 64;
  c.d_e = 16;
  c.cond_hidden = 32;
  c.d_c = 32;
  c.q_hidden = 256;
  c.d = 64;
  c.horizon = horizon;
  c.step_conditioning = step_conditioning;
  c.seed = seed;
  return c;
}

inline TrainConfig bench_train_config(std::uint32_t steps, std::uint64_t seed, unsigned threads) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 256;
  t.shuffle_seed = seed + 1;
  t.target_seed = seed + 2;
  t.log_every = 50;
  t.threads = threads;
  return t;
}

namespace detail {

class BenchWriter {
 public:
  BenchWriter(std::filesystem::path dir, BenchReport& report) : dir_(std::move(dir)), report_(report) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw Error(Errc::IoError, "cannot create " + dir_.string() + ": " + ec.message());
  }

  void text(const std::string& name, const std::string& body) {
    const auto path = dir_ / name;
    write_file(path, std::span<const char>(body.data(), body.size()));
    report_.files.push_back(name);
  }

 private:
  std::filesystem::path dir_;
  BenchReport& report_;
};

inline void add_check(BenchReport& r, std::string name, double value, const std::string& rel, double bound) {
  bool ok = false;
  if (rel == "<") ok = value < bound;
  else if (rel == "<=") ok = value <= bound;
  else if (rel == ">") ok = value > bound;
  else if (rel == ">=") ok = value >= bound;
  else if (rel == "==") ok = value == bound;
  r.checks.push_back({std::move(name), value, rel, bound, ok});
}

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Pre-Platt NLL (sigmoid of the standardised negated signal) against
/// post-Platt NLL, both on the calibration split itself.
inline std::pair<double, double> calibration_gain(std::span<const double> u, std::span<const std::uint8_t> y) {
  const double pre = nll(standardized_confidence(u), y);
  const auto fit = fit_platt(u, y);
  std::vector<double> p;
  for (double x : u) p.push_back(apply_platt(fit.cal, x));
  return {pre, nll(p, y)};
}

inline void add_gain_check(BenchReport& r, const std::string& prefix, std::span<const double> u,
                           std::span<const std::uint8_t> y) {
  const auto [pre, post] = calibration_gain(u, y);
  r.details[prefix + "nll_pre_platt"] = pre;
  r.details[prefix + "nll_post_platt"] = post;
  add_check(r, prefix + "calibration_gain", post, "<=", pre);
}

inline std::pair<HeadParams<double>, TrainReport> fit_head(const RolloutSet& sft, const HeadConfig& cfg,
                                                           const TrainConfig& tc, BenchWriter& w,
                                                           const std::string& tag) {
  auto [params, report] = train(sft, cfg, tc);
  w.text(tag + "_loss.csv", report.loss_csv());
  return {params.cast<double>(), report};
}

struct Split {
  std::vector<ScoredRollout> cal;
  std::vector<ScoredRollout> eval;
};

/// Fixed half/half partition of labeled rollouts by the set's own split.
inline Split split_scored(const std::vector<ScoredRollout>& all, const RolloutSet& labeled, std::uint64_t seed) {
  const auto [cal_set, eval_set] = split_dataset(labeled, {0.5, 0.5}, seed);
  std::map<std::uint64_t, const ScoredRollout*> by_id;
  for (const auto& r : all) by_id[r.rollout_id] = &r;
  Split s;
  for (const auto& tr : cal_set.traces) s.cal.push_back(*by_id.at(tr.rollout_id));
  for (const auto& tr : eval_set.traces) s.eval.push_back(*by_id.at(tr.rollout_id));
  return s;
}

inline double mean_step_score(std::span<const ScoredRollout> rs) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : rs)
    for (double s : r.scores) {
      sum += s;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : 0.0;
}

inline PhaseGenConfig bench_phase_config(std::uint64_t seed) {
  PhaseGenConfig g;
  g.seed = seed;
  return g;
}

// ---------------------------------------------------------------------------

inline void suite_tabular(BenchReport& r, BenchWriter& w, const BenchOptions& o) {
  TabularOracleConfig tc;
  tc.cells_per_count = 16;
  tc.n_novel = 80;
  tc.seed = o.seed + 11;
  const auto data = gen_tabular_dataset(tc);
  const auto cfg = bench_head_config(data.set.header, true, 32, o.seed + 12);
  auto train_cfg = bench_train_config(4000, o.seed + 13, o.threads);
  const auto [head, report] = fit_head(data.set, cfg, train_cfg, w, "tabular_1overN");

  std::vector<double> cell_score(data.cell_features.size());
  for (std::size_t c = 0; c < cell_score.size(); ++c) cell_score[c] = score_step(head, data.cell_features[c]).s;

  // Monte Carlo cross-check: squared norm of each cell's empirical target mean.
  std::vector<Vec<double>> target_sum(data.cell_features.size(), Vec<double>::Zero(cfg.d));
  for (std::size_t t = 0; t < data.set.traces.size(); ++t) {
    const auto ct = coin_target(train_cfg.target_seed, data.set.traces[t].rollout_id, 1, cfg.d);
    for (std::uint32_t j = 0; j < cfg.d; ++j) target_sum[data.cell_of_trace[t]](j) += ct.c[j];
  }

  std::string csv = "cell,count,score,empirical_optimum\n";
  nlohmann::json levels = nlohmann::json::array();
  double prev = 0.0;
  bool first = true;
  for (std::uint32_t n : tc.ladder) {
    double mean = 0.0, mc = 0.0;
    std::size_t cells = 0;
    for (std::size_t c = 0; c < cell_score.size(); ++c) {
      if (data.count_of_cell[c] != n) continue;
      const double opt = (target_sum[c] / static_cast<double>(n)).squaredNorm();
      csv += std::to_string(c) + "," + std::to_string(n) + "," + fmt(cell_score[c]) + "," + fmt(opt) + "\n";
      mean += cell_score[c];
      mc += opt;
      ++cells;
    }
    mean /= static_cast<double>(cells);
    mc /= static_cast<double>(cells);
    const double expected = static_cast<double>(cfg.d) / n;
    levels.push_back({{"count", n}, {"mean_score", mean}, {"closed_form", expected}, {"empirical_optimum", mc}});
    add_check(r, "relative_error_N" + std::to_string(n), std::abs(mean - expected) / expected, "<", 0.25);
    if (!first) add_check(r, "decreasing_N" + std::to_string(n), mean, "<", prev);
    prev = mean;
    first = false;
  }
  w.text("tabular_1overN_cells.csv", csv);
  r.details["levels"] = levels;
  r.details["final_loss"] = report.final_loss;

  // Seen cells are labeled successes, never-seen cells failures.
  std::vector<double> u;
  std::vector<std::uint8_t> y;
  for (std::size_t c = 0; c < data.cell_features.size(); ++c) {
    u.push_back(cell_score[c]);
    y.push_back(1);
  }
  for (const auto& rec : data.novel_features) {
    u.push_back(score_step(head, rec).s);
    y.push_back(0);
  }
  std::vector<double> u_cal;
  std::vector<std::uint8_t> y_cal;
  for (std::size_t i = 0; i < u.size(); i += 2) {
    u_cal.push_back(u[i]);
    y_cal.push_back(y[i]);
  }
  add_gain_check(r, "", u_cal, y_cal);
}

inline void suite_separation(BenchReport& r, BenchWriter& w, const BenchOptions& o) {
  auto g = bench_phase_config(o.seed + 21);
  g.ood_kind = OodKind::FeatureShift;
  g.shift_magnitude = 10.0;
  const auto data = gen_phase_rollouts(g);
  const auto cfg = bench_head_config(data.sft.header, true, g.length(), o.seed + 22);
  const auto [head, report] = fit_head(data.sft, cfg, bench_train_config(4000, o.seed + 23, o.threads), w, "separation");

  const auto scored = score_rollouts(head, data.labeled, true, o.threads);
  const auto split = split_scored(scored, data.labeled, o.seed + 24);
  const auto rule = AggregationRule::PrefixMax;
  const auto u_eval = prefix_signals(split.eval, rule, 0.5);
  const auto y_eval = outcomes(split.eval);
  add_check(r, "auroc_prefix_max_0.5", auroc_anomaly(u_eval, y_eval), ">", 0.9);

  std::vector<ScoredRollout> ood, ok;
  for (const auto& s : scored) (*s.outcome ? ok : ood).push_back(s);
  add_check(r, "ood_mean_step_score_exceeds_success", mean_step_score(ood), ">", mean_step_score(ok));

  const auto curve = temporal_calibration(split.cal, split.eval, kAllRules, default_fractions());
  w.text("separation_temporal.csv", temporal_csv(curve));
  r.details["temporal"] = to_json(curve);

  // PCA + k-means baseline on the raw concatenated step features.
  auto rows_of = [&](const RolloutSet& set, std::span<const ScoredRollout> which) {
    std::map<std::uint64_t, const RolloutTrace*> by_id;
    for (const auto& tr : set.traces) by_id[tr.rollout_id] = &tr;
    std::vector<const StepRecord*> steps;
    for (const auto& sr : which)
      for (const auto& s : by_id.at(sr.rollout_id)->steps) steps.push_back(&s);
    const Eigen::Index width = set.header.d_v + set.header.d_l + set.header.d_x;
    Eigen::MatrixXd m(static_cast<Eigen::Index>(steps.size()), width);
    for (std::size_t i = 0; i < steps.size(); ++i) {
      Eigen::Index c = 0;
      for (float f : steps[i]->h_v) m(static_cast<Eigen::Index>(i), c++) = f;
      for (float f : steps[i]->h_l) m(static_cast<Eigen::Index>(i), c++) = f;
      for (float f : steps[i]->x) m(static_cast<Eigen::Index>(i), c++) = f;
    }
    return m;
  };
  std::vector<ScoredRollout> all_sft;
  for (const auto& tr : data.sft.traces) all_sft.push_back({tr.rollout_id, {}, std::nullopt, std::nullopt});
  const auto baseline = fit_pca_kmeans(rows_of(data.sft, all_sft), 32, 16, o.seed + 25);
  std::vector<ScoredRollout> base_eval = split.eval;
  {
    const auto scores = baseline.score(rows_of(data.labeled, split.eval));
    std::size_t at = 0;
    for (auto& sr : base_eval)
      for (auto& s : sr.scores) s = scores[at++];
  }
  r.details["pca_kmeans_auroc"] = auroc_anomaly(prefix_signals(base_eval, rule, 0.5), y_eval);
  r.details["pca_kmeans_rank_reduced"] = baseline.rank_reduced;
  r.details["final_loss"] = report.final_loss;

  add_gain_check(r, "", prefix_signals(split.cal, rule, 0.5), outcomes(split.cal));
}

inline void suite_step_ablation(BenchReport& r, BenchWriter& w, const BenchOptions& o) {
  auto g = bench_phase_config(o.seed + 31);
  g.ood_kind = OodKind::PhaseSwap;
  // A small training set whose within-phase features stay fixed along a
  // rollout: step-specific targets can then only be fitted through k.
  g.n_success = 50;
  g.step_noise_share = 0.0;
  const auto data = gen_phase_rollouts(g);
  const auto rule = AggregationRule::PrefixMax;
  const double gap_bound = 0.05 * 64.0;

  struct Arm {
    std::string name;
    bool conditioned;
    double brier = 0.0;
  };
  std::vector<Arm> arms{{"conditioned", true}, {"nostep", false}};
  std::string csv = "head,rule,fraction,metric,value\n";
  for (auto& arm : arms) {
    const auto cfg = bench_head_config(data.sft.header, arm.conditioned, g.length(), o.seed + 32);
    const auto [head, report] =
        fit_head(data.sft, cfg, bench_train_config(4000, o.seed + 33, o.threads), w, "step_ablation_" + arm.name);
    const auto scored = score_rollouts(head, data.labeled, true, o.threads);
    const auto split = split_scored(scored, data.labeled, o.seed + 34);
    const auto fit = fit_platt(prefix_signals(split.cal, rule, 0.5), outcomes(split.cal));
    std::vector<double> p;
    for (double u : prefix_signals(split.eval, rule, 0.5)) p.push_back(apply_platt(fit.cal, u));
    const auto rep = metrics_report(p, outcomes(split.eval));
    arm.brier = rep.brier;
    r.details[arm.name] = {{"metrics", to_json(rep)}, {"alpha", fit.cal.alpha}, {"beta", fit.cal.beta},
                           {"final_loss", report.final_loss}};
    csv += arm.name + ",max,0.50,ece," + fmt(rep.ece) + "\n";
    csv += arm.name + ",max,0.50,brier," + fmt(rep.brier) + "\n";
    csv += arm.name + ",max,0.50,nll," + fmt(rep.nll) + "\n";

    std::vector<ScoredRollout> swapped, ok;
    for (const auto& s : scored) (*s.outcome ? ok : swapped).push_back(s);
    const double gap = std::abs(mean_step_score(swapped) - mean_step_score(ok));
    r.details[arm.name]["step_score_gap"] = gap;
    add_check(r, arm.name + "_step_score_gap", gap, arm.conditioned ? ">" : "<", gap_bound);
    add_gain_check(r, arm.name + "_", prefix_signals(split.cal, rule, 0.5), outcomes(split.cal));

    if (!arm.conditioned) {
      // Exact k-invariance: rescoring every labeled step under a different k.
      std::size_t mismatches = 0;
      for (const auto& tr : data.labeled.traces)
        for (auto s : tr.steps) {
          const double base = score_step(head, s).s;
          for (std::uint32_t k : {1u, 2u, 17u, 999u}) {
            s.k = k;
            if (score_step(head, s).s != base) ++mismatches;
          }
        }
      add_check(r, "nostep_k_invariance_mismatches", static_cast<double>(mismatches), "==", 0.0);
    }
  }
  w.text("step_ablation_metrics.csv", csv);
  add_check(r, "conditioned_brier_below_nostep", arms[0].brier, "<", arms[1].brier);
}

inline void suite_calibration_gain(BenchReport& r, BenchWriter& w, const BenchOptions& o) {
  auto g = bench_phase_config(o.seed + 41);
  g.ood_kind = OodKind::LateDeviation;
  g.shift_magnitude = 10.0;
  g.late_onset = 0.6;
  g.ood_success_prob = 0.1;
  const auto data = gen_phase_rollouts(g);
  const auto cfg = bench_head_config(data.sft.header, true, g.length(), o.seed + 42);
  const auto [head, report] =
      fit_head(data.sft, cfg, bench_train_config(4000, o.seed + 43, o.threads), w, "calibration_gain");
  const auto scored = score_rollouts(head, data.labeled, true, o.threads);
  const auto split = split_scored(scored, data.labeled, o.seed + 44);

  const auto fractions = default_fractions();
  const auto curve = temporal_calibration(split.cal, split.eval, kAllRules, fractions);
  w.text("calibration_gain_temporal.csv", temporal_csv(curve));
  r.details["temporal"] = to_json(curve);
  r.details["final_loss"] = report.final_loss;

  std::string gains = "rule,fraction,nll_pre_platt,nll_post_platt\n";
  const auto y_cal = outcomes(split.cal);
  double worst_margin = -1e300;
  for (auto rule : kAllRules)
    for (double f : fractions) {
      const auto [pre, post] = calibration_gain(prefix_signals(split.cal, rule, f), y_cal);
      worst_margin = std::max(worst_margin, post - pre);
      char buf[64];
      std::snprintf(buf, sizeof buf, ",%.2f,", f);
      gains += rule_name(rule) + buf + fmt(pre) + "," + fmt(post) + "\n";
    }
  w.text("calibration_gain_nll.csv", gains);
  add_check(r, "worst_post_minus_pre_nll", worst_margin, "<=", 0.0);
  add_check(r, "brier_mean_0.9_below_0.1", curve.at(AggregationRule::RunningMean, 0.9).report.brier, "<",
            curve.at(AggregationRule::RunningMean, 0.1).report.brier);
  add_gain_check(r, "", prefix_signals(split.cal, AggregationRule::PrefixMax, 0.5), y_cal);
}

inline void suite_progress(BenchReport& r, BenchWriter& w, const BenchOptions& o) {
  auto g = bench_phase_config(o.seed + 51);
  g.ood_kind = OodKind::FeatureShift;
  g.shift_magnitude = 10.0;
  g.n_labeled_success = 150;
  g.n_ood = 50;
  g.difficulty_magnitude = 5.0;
  const auto data = gen_phase_rollouts(g);
  const auto cfg = bench_head_config(data.sft.header, true, g.length(), o.seed + 52);
  const auto [head, report] =
      fit_head(data.sft, cfg, bench_train_config(4000, o.seed + 53, o.threads), w, "progress_correlation");
  auto scored = score_rollouts(head, data.labeled, true, o.threads);
  for (std::size_t i = 0; i < scored.size(); ++i) scored[i].first_success_step = data.first_success[i];

  std::vector<ScoredRollout> successes;
  for (const auto& s : scored)
    if (*s.outcome == 1) successes.push_back(s);
  std::string csv = "rule,bucket,lower,upper,count,mean_first_success\n";
  for (auto rule : {AggregationRule::RunningMean, AggregationRule::PrefixMax}) {
    const auto b = progress_buckets(successes, rule, 5);
    for (std::size_t i = 0; i < b.buckets.size(); ++i) {
      const auto& k = b.buckets[i];
      csv += rule_name(rule) + "," + std::to_string(i) + "," + fmt(k.lower) + "," + fmt(k.upper) + "," +
             std::to_string(k.count) + "," + (k.mean_first_success ? fmt(*k.mean_first_success) : "") + "\n";
    }
    r.details["buckets_" + rule_name(rule)] = to_json(b);
    add_check(r, "monotone_buckets_" + rule_name(rule), b.monotone() ? 1.0 : 0.0, "==", 1.0);
  }
  w.text("progress_correlation_buckets.csv", csv);
  r.details["final_loss"] = report.final_loss;

  const auto split = split_scored(scored, data.labeled, o.seed + 54);
  add_gain_check(r, "", prefix_signals(split.cal, AggregationRule::PrefixMax, 0.5), outcomes(split.cal));
}

}  // namespace detail

/// Runs one named suite and writes `<suite>.json` plus its CSV tables into
/// `out_dir`.
inline BenchReport run_bench(const std::string& suite, const std::filesystem::path& out_dir,
                             const BenchOptions& opt = {}) {
  static const std::map<std::string, std::function<void(BenchReport&, detail::BenchWriter&, const BenchOptions&)>>
      suites{{"tabular_1overN", detail::suite_tabular},
             {"separation", detail::suite_separation},
             {"step_ablation", detail::suite_step_ablation},
             {"calibration_gain", detail::suite_calibration_gain},
             {"progress_correlation", detail::suite_progress}};
  const auto it = suites.find(suite);
  if (it == suites.end()) throw Error(Errc::UnknownSuite, "unknown bench suite '" + suite + "'");
  BenchReport report;
  report.suite = suite;
  detail::BenchWriter writer(out_dir, report);
  it->second(report, writer, opt);
  writer.text(suite + ".json", to_json(report).dump(2) + "\n");
  return report;
}

}  // namespace vlaconf
