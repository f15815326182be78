// vlaconf command-line front end: train, score, calibrate, eval, bench, gradcheck.
//
// Exit status: 0 success, 1 runtime failure, 2 usage or validation failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vlaconf/vlaconf.hpp"

namespace fs = std::filesystem;
using namespace vlaconf;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int exit_code_for(Errc c) {
  switch (c) {
    case Errc::DivergedLoss:
    case Errc::NonFiniteGradient:
    case Errc::IoError:
      return kExitRuntime;
    default:
      return kExitUsage;
  }
}

// ---------------------------------------------------------------------------
// Options shared by every subcommand.

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string rule;
  std::optional<double> fraction;
  std::optional<unsigned> threads;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "Flat key/value config file (JSON object or 'key = value' lines)");
  app->add_option("--seed", c.seed, "Seed for every random stream of the command");
  app->add_option("--out", c.out, "Output directory")->capture_default_str();
  app->add_option("--rule", c.rule, "Prefix aggregation rule")->check(CLI::IsMember({"first", "mean", "max"}));
  app->add_option("--fraction", c.fraction, "Checkpoint fraction of the rollout, in (0, 1]")
      ->check(CLI::Validator(
          [](std::string& v) {
            double f = 0.0;
            if (!CLI::detail::lexical_cast(v, f)) return std::string("--fraction must be a number");
            return f > 0.0 && f <= 1.0 ? std::string() : std::string("--fraction must lie in (0, 1]");
          },
          "(0, 1]"));
  app->add_option("--threads", c.threads, "Worker threads (results do not depend on this)");
}

/// Parsed config file split into its head, train, and protocol sections.
struct FileConfig {
  nlohmann::json head = nlohmann::json::object();
  nlohmann::json train = nlohmann::json::object();
  nlohmann::json protocol = nlohmann::json::object();
};

nlohmann::json parse_flat_config(const std::string& text, const std::string& path) {
  std::size_t first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    try {
      auto j = nlohmann::json::parse(text);
      for (const auto& [k, v] : j.items()) {
        if (v.is_object() || v.is_array()) throw UsageError(path + ": key '" + k + "' must hold a scalar");
      }
      return j;
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(path + ": " + e.what());
    }
  }
  nlohmann::json j = nlohmann::json::object();
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    auto trim = [](std::string s) {
      const auto l = s.find_first_not_of(" \t\r");
      const auto r = s.find_last_not_of(" \t\r");
      return l == std::string::npos ? std::string() : s.substr(l, r - l + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      j[key] = nlohmann::json::parse(value);
    } catch (const nlohmann::json::exception&) {
      j[key] = value;  // bare word, read as a string
    }
  }
  return j;
}

FileConfig load_config(const std::string& path) {
  FileConfig fc;
  if (path.empty()) return fc;
  if (!fs::is_regular_file(path)) throw UsageError("config file not found: " + path);
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  const auto flat = parse_flat_config(ss.str(), path);
  const nlohmann::json head_keys = HeadConfig{};
  const nlohmann::json train_keys = TrainConfig{};
  for (const auto& [k, v] : flat.items()) {
    if (head_keys.contains(k)) fc.head[k] = v;
    else if (train_keys.contains(k)) fc.train[k] = v;
    else if (k == "rule" || k == "fraction" || k == "n_bins") fc.protocol[k] = v;
    else throw UsageError(path + ": unknown config key '" + k + "'");
  }
  return fc;
}

struct Protocol {
  AggregationRule rule = AggregationRule::PrefixMax;
  double fraction = 0.5;
  std::size_t n_bins = kDefaultBins;
};

Protocol resolve_protocol(const Common& c, const FileConfig& fc) {
  Protocol p;
  try {
    if (fc.protocol.contains("rule")) p.rule = parse_rule(fc.protocol["rule"].get<std::string>());
    if (fc.protocol.contains("fraction")) p.fraction = fc.protocol["fraction"].get<double>();
    if (fc.protocol.contains("n_bins")) p.n_bins = fc.protocol["n_bins"].get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config protocol keys: ") + e.what());
  }
  if (!c.rule.empty()) p.rule = parse_rule(c.rule);
  if (c.fraction) p.fraction = *c.fraction;
  if (!(p.fraction > 0.0 && p.fraction <= 1.0)) throw UsageError("--fraction must lie in (0, 1]");
  if (p.n_bins == 0) throw UsageError("n_bins must be >= 1");
  return p;
}

unsigned resolve_threads(const Common& c, const FileConfig& fc) {
  if (c.threads) return std::max(1u, *c.threads);
  if (fc.train.contains("threads")) return std::max(1u, fc.train["threads"].get<unsigned>());
  return 1;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing ") + what);
  if (!fs::is_regular_file(path)) throw UsageError(std::string(what) + " not found: " + path);
}

void write_text(const fs::path& path, const std::string& body) {
  detail::write_file(path, std::span<const char>(body.data(), body.size()));
}

fs::path prepare_out(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Error(Errc::IoError, "cannot create output directory " + out + ": " + ec.message());
  return fs::path(out);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  Common common;
  std::string data;
  std::optional<std::uint32_t> steps;
  std::optional<std::uint32_t> batch_size;
  std::optional<double> learning_rate;
};

int cmd_train(const TrainArgs& a) {
  require_file(a.data, "--data rollout file");
  const auto fc = load_config(a.common.config_path);

  const auto set = load_rollout_file(a.data);
  if (set.labeled()) {
    throw Error(Errc::NotSuccessOnly, "training data must be success-only: " + a.data +
                                          " carries outcome labels; train on unlabeled successful rollouts");
  }
  HeadConfig cfg;
  cfg.d_v = set.header.d_v;
  cfg.d_l = set.header.d_l;
  cfg.d_x = set.header.d_x;
  update_from_json(cfg, fc.head);
  check_dims(cfg, set.header);

  TrainConfig tc;
  update_from_json(tc, fc.train);
  if (a.common.seed) {
    cfg.seed = *a.common.seed;
    tc.shuffle_seed = *a.common.seed;
    tc.target_seed = *a.common.seed;
  }
  if (a.steps) tc.steps = *a.steps;
  if (a.batch_size) tc.batch_size = *a.batch_size;
  if (a.learning_rate) tc.learning_rate = *a.learning_rate;
  tc.threads = resolve_threads(a.common, fc);
  cfg.validate();
  tc.validate();

  const auto out = prepare_out(a.common.out);
  auto [params, report] = train(set, cfg, tc);
  save_checkpoint(params, out / "head.vlac");
  write_text(out / "train_loss.csv", report.loss_csv());
  nlohmann::json summary = {{"head_config", cfg},
                            {"train_config", tc},
                            {"final_loss", report.final_loss},
                            {"parameters", params.param_count()},
                            {"steps_in_set", set.step_count()}};
  write_text(out / "train_report.json", summary.dump(2) + "\n");
  std::printf("trained %zu parameters on %zu steps; final loss %.6f; %.2f s\n", params.param_count(),
              set.step_count(), report.final_loss, report.wall_seconds);
  std::printf("wrote %s\n", (out / "head.vlac").string().c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// score

struct ScoreArgs {
  Common common;
  std::string model;
  std::string data;
};

int cmd_score(const ScoreArgs& a) {
  require_file(a.model, "--model checkpoint");
  require_file(a.data, "--data rollout file");
  const auto fc = load_config(a.common.config_path);
  if (!fc.head.empty() || !fc.train.empty()) throw UsageError("score accepts only protocol keys in --config");
  const auto params = load_checkpoint(a.model).cast<double>();
  const auto set = load_rollout_file(a.data);
  check_dims(params.config, set.header);

  std::vector<AggregationRule> rules;
  if (!a.common.rule.empty()) rules.push_back(parse_rule(a.common.rule));
  else rules.assign(std::begin(kAllRules), std::end(kAllRules));

  const auto out = prepare_out(a.common.out);
  std::string csv = "rollout_id,k,s";
  for (auto r : rules) csv += ",u_" + rule_name(r);
  csv += "\n";
  double seconds = 0.0;
  std::size_t steps = 0;
  for (const auto& tr : set.traces) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto scores = score_steps(params, std::span<const StepRecord>(tr.steps));
    seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    steps += scores.size();
    for (std::size_t t = 0; t < scores.size(); ++t) {
      csv += std::to_string(tr.rollout_id) + "," + std::to_string(tr.steps[t].k) + "," + fmt(scores[t]);
      for (auto r : rules) csv += "," + fmt(aggregate_prefix(std::span<const double>(scores.data(), t + 1), r).u);
      csv += "\n";
    }
  }
  write_text(out / "scores.csv", csv);
  const double latency_ms = steps ? 1e3 * seconds / static_cast<double>(steps) : 0.0;
  const nlohmann::json latency = {{"steps", steps}, {"mean_step_latency_ms", latency_ms}};
  write_text(out / "latency.json", latency.dump(2) + "\n");
  std::printf("scored %zu steps from %zu rollouts; mean per-step latency %.4f ms\n", steps, set.traces.size(),
              latency_ms);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// calibrate

struct CalibrateArgs {
  Common common;
  std::string model;
  std::string data;
};

std::vector<ScoredRollout> score_labeled(const HeadParams<double>& params, const std::string& path, unsigned threads) {
  const auto set = load_rollout_file(path);
  if (!set.labeled()) throw UsageError(path + " carries no outcome labels");
  return score_rollouts(params, set, true, threads);
}

int cmd_calibrate(const CalibrateArgs& a) {
  require_file(a.model, "--model checkpoint");
  require_file(a.data, "--data labeled calibration file");
  const auto fc = load_config(a.common.config_path);
  const auto proto = resolve_protocol(a.common, fc);
  const auto params = load_checkpoint(a.model).cast<double>();
  const auto scored = score_labeled(params, a.data, resolve_threads(a.common, fc));
  const auto fit = fit_platt(prefix_signals(scored, proto.rule, proto.fraction), outcomes(scored));

  const auto out = prepare_out(a.common.out);
  CalibratorFile file{fit.cal, proto.rule, proto.fraction};
  write_text(out / "calibrator.json", to_json(file).dump(2) + "\n");
  std::printf("alpha %.6f beta %.6f (%s at %.2f, %d iterations%s)\n", fit.cal.alpha, fit.cal.beta,
              rule_name(proto.rule).c_str(), proto.fraction, fit.iterations,
              fit.single_class ? ", single class" : "");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  Common common;
  std::string model;
  std::string data;
  std::string cal_data;
  std::string calibrator;
};

int cmd_eval(const EvalArgs& a) {
  require_file(a.model, "--model checkpoint");
  require_file(a.data, "--data labeled evaluation file");
  if (a.cal_data.empty() && a.calibrator.empty()) throw UsageError("eval needs --cal-data or --calibrator");
  if (!a.cal_data.empty()) require_file(a.cal_data, "--cal-data labeled calibration file");
  if (!a.calibrator.empty()) require_file(a.calibrator, "--calibrator file");
  const auto fc = load_config(a.common.config_path);
  auto proto = resolve_protocol(a.common, fc);
  const unsigned threads = resolve_threads(a.common, fc);

  const auto params = load_checkpoint(a.model).cast<double>();
  const auto eval = score_labeled(params, a.data, threads);
  std::optional<std::vector<ScoredRollout>> cal;
  if (!a.cal_data.empty()) cal = score_labeled(params, a.cal_data, threads);

  Calibrator calibrator;
  if (!a.calibrator.empty()) {
    const auto text = detail::read_file(a.calibrator);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text.begin(), text.end());
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(a.calibrator + ": " + e.what());
    }
    const auto file = calibrator_from_json(j);
    if (!a.common.rule.empty() || a.common.fraction) {
      if (file.rule != proto.rule || std::abs(file.fraction - proto.fraction) > 1e-12) {
        throw UsageError("--rule/--fraction conflict with the protocol stored in " + a.calibrator);
      }
    }
    proto.rule = file.rule;
    proto.fraction = file.fraction;
    calibrator = file.cal;
  } else {
    calibrator = fit_platt(prefix_signals(*cal, proto.rule, proto.fraction), outcomes(*cal)).cal;
  }

  const auto u = prefix_signals(eval, proto.rule, proto.fraction);
  const auto y = outcomes(eval);
  std::vector<double> probs;
  for (double x : u) probs.push_back(apply_platt(calibrator, x));
  const auto report = metrics_report(probs, y, proto.n_bins);
  const auto pre = metrics_report(standardized_confidence(u), y, proto.n_bins);

  const auto out = prepare_out(a.common.out);
  nlohmann::json summary = {{"rule", rule_name(proto.rule)},
                            {"fraction", proto.fraction},
                            {"alpha", calibrator.alpha},
                            {"beta", calibrator.beta},
                            {"metrics", to_json(report)},
                            {"uncalibrated_metrics", to_json(pre)},
                            {"auroc", auroc_anomaly(u, y)}};
  char frac[16];
  std::snprintf(frac, sizeof frac, "%.2f", proto.fraction);
  std::string csv = "rule,fraction,metric,value\n";
  const std::pair<const char*, double> rows[] = {{"ece", report.ece},
                                                 {"brier", report.brier},
                                                 {"nll", report.nll},
                                                 {"alpha", calibrator.alpha},
                                                 {"beta", calibrator.beta}};
  for (const auto& [name, v] : rows) csv += rule_name(proto.rule) + "," + frac + "," + name + "," + fmt(v) + "\n";
  write_text(out / "metrics.csv", csv);

  std::string bins = "bin,lower,upper,count,confidence,accuracy\n";
  for (std::size_t b = 0; b < report.bins.size(); ++b) {
    const auto& r = report.bins[b];
    bins += std::to_string(b) + "," + fmt(r.lower) + "," + fmt(r.upper) + "," + std::to_string(r.count) + "," +
            fmt(r.confidence) + "," + fmt(r.accuracy) + "\n";
  }
  write_text(out / "reliability.csv", bins);

  if (cal) {
    const auto curve = temporal_calibration(*cal, eval, kAllRules, default_fractions(), proto.n_bins);
    write_text(out / "temporal.csv", temporal_csv(curve));
    summary["temporal"] = to_json(curve);
  }
  write_text(out / "metrics.json", summary.dump(2) + "\n");
  std::printf("%s at %.2f: ECE %.4f  Brier %.4f  NLL %.4f  (n=%zu)\n", rule_name(proto.rule).c_str(),
              proto.fraction, report.ece, report.brier, report.nll, report.n);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  Common common;
  std::string suite;
};

int cmd_bench(const BenchArgs& a) {
  const auto fc = load_config(a.common.config_path);
  if (!fc.head.empty() || !fc.train.empty() || !fc.protocol.empty()) {
    throw UsageError("bench suites use fixed configurations; --config is not accepted");
  }
  std::vector<std::string> suites;
  if (a.suite == "all") suites.assign(std::begin(kBenchSuites), std::end(kBenchSuites));
  else suites.push_back(a.suite);
  BenchOptions opt;
  opt.threads = resolve_threads(a.common, fc);
  if (a.common.seed) opt.seed = *a.common.seed;

  bool all_passed = true;
  for (const auto& s : suites) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto report = run_bench(s, a.common.out, opt);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (const auto& c : report.checks) {
      std::printf("  [%s] %s: %.6g %s %.6g\n", c.passed ? "ok" : "FAIL", c.name.c_str(), c.value,
                  c.relation.c_str(), c.bound);
    }
    std::printf("%s %s (%.1f s)\n", s.c_str(), report.passed() ? "PASSED" : "FAILED", secs);
    all_passed = all_passed && report.passed();
  }
  return all_passed ? kExitOk : kExitRuntime;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
  Common common;
  std::uint32_t configs = 5;
  std::uint32_t probes = 128;
  bool write_report = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  const auto fc = load_config(a.common.config_path);
  if (!fc.head.empty() || !fc.train.empty() || !fc.protocol.empty()) {
    throw UsageError("gradcheck draws its own configs; --config is not accepted");
  }
  GradcheckOptions opt;
  opt.n_configs = a.configs;
  opt.probes_per_group = a.probes;
  if (a.common.seed) opt.seed = *a.common.seed;
  if (opt.n_configs == 0 || opt.probes_per_group == 0) throw UsageError("--configs and --probes must be >= 1");

  const auto t0 = std::chrono::steady_clock::now();
  const auto res = gradcheck(opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("configs %zu  probes %u  kink skips %u  max relative error %.3e (tolerance %.0e)  %.1f s\n",
              res.configs.size(), res.total_probes, res.total_kink_skips, res.max_rel_error, opt.tolerance, secs);
  if (a.write_report) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : res.groups) {
      groups.push_back({{"name", g.name},
                        {"probed", g.probed},
                        {"kink_skips", g.kink_skips},
                        {"max_rel_error", g.max_rel_error}});
    }
    nlohmann::json j = {{"passed", res.passed},
                        {"max_rel_error", res.max_rel_error},
                        {"tolerance", opt.tolerance},
                        {"configs", res.configs},
                        {"groups", groups}};
    const auto out = prepare_out(a.common.out);
    write_text(out / "gradcheck.json", j.dump(2) + "\n");
  }
  std::printf("%s\n", res.passed ? "PASSED" : "FAILED");
  return res.passed ? kExitOk : kExitRuntime;
}

// ---------------------------------------------------------------------------
// synth: writes synthetic rollout files for trying the other subcommands.

struct SynthArgs {
  Common common;
  std::string kind = "feature_shift";
  std::uint32_t n_success = 200;
  std::uint32_t n_labeled = 200;
};

int cmd_synth(const SynthArgs& a) {
  PhaseGenConfig g;
  if (a.kind == "feature_shift") g.ood_kind = OodKind::FeatureShift;
  else if (a.kind == "phase_swap") g.ood_kind = OodKind::PhaseSwap;
  else if (a.kind == "late_deviation") g.ood_kind = OodKind::LateDeviation;
  else throw UsageError("unknown --kind '" + a.kind + "'");
  g.n_success = a.n_success;
  g.n_labeled_success = a.n_labeled / 2;
  g.n_ood = a.n_labeled - a.n_labeled / 2;
  if (a.common.seed) g.seed = *a.common.seed;
  const auto data = gen_phase_rollouts(g);
  const auto [cal, eval] = split_dataset(data.labeled, {0.5, 0.5}, g.seed + 1);

  const auto out = prepare_out(a.common.out);
  auto with_role = [](RolloutSet s, Role r) {
    s.role = r;
    return s;
  };
  auto manifest = [&](const RolloutSet& s, Role r) {
    nlohmann::json first = nlohmann::json::object();
    for (const auto& tr : s.traces) {
      const auto& fs = data.first_success[tr.rollout_id];
      if (fs && r != Role::Sft) first[std::to_string(tr.rollout_id)] = *fs;
    }
    return nlohmann::json{{"role", role_name(r)},
                          {"generator", ood_kind_name(g.ood_kind)},
                          {"seed", g.seed},
                          {"first_success_step", first}};
  };
  write_rollout_file(data.sft, out / "sft.vlaf");
  write_manifest(out / "sft.vlaf", manifest(data.sft, Role::Sft));
  write_rollout_file(with_role(cal, Role::Cal), out / "cal.vlaf");
  write_manifest(out / "cal.vlaf", manifest(cal, Role::Cal));
  write_rollout_file(with_role(eval, Role::Eval), out / "eval.vlaf");
  write_manifest(out / "eval.vlaf", manifest(eval, Role::Eval));
  std::printf("wrote sft.vlaf (%zu rollouts), cal.vlaf (%zu), eval.vlaf (%zu) to %s\n", data.sft.traces.size(),
              cal.traces.size(), eval.traces.size(), out.string().c_str());
  return kExitOk;
}

template <class F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.code());
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vlaconf: success-only step-conditioned confidence for rollout features"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a confidence head on success-only rollouts");
  add_common(train_cmd, train_args.common);
  train_cmd->add_option("--data", train_args.data, "Success-only rollout file (VLAF)")->required();
  train_cmd->add_option("--steps", train_args.steps, "Optimizer steps");
  train_cmd->add_option("--batch-size", train_args.batch_size, "Minibatch size");
  train_cmd->add_option("--learning-rate", train_args.learning_rate, "AdamW learning rate");

  ScoreArgs score_args;
  auto* score_cmd = app.add_subcommand("score", "Per-step scores and running prefix signals");
  add_common(score_cmd, score_args.common);
  score_cmd->add_option("--model", score_args.model, "Checkpoint (VLAC)")->required();
  score_cmd->add_option("--data", score_args.data, "Rollout file (VLAF)")->required();

  CalibrateArgs cal_args;
  auto* cal_cmd = app.add_subcommand("calibrate", "Fit a Platt calibrator on labeled rollouts");
  add_common(cal_cmd, cal_args.common);
  cal_cmd->add_option("--model", cal_args.model, "Checkpoint (VLAC)")->required();
  cal_cmd->add_option("--data", cal_args.data, "Labeled calibration rollouts (VLAF)")->required();

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Calibration metrics and temporal curves on labeled rollouts");
  add_common(eval_cmd, eval_args.common);
  eval_cmd->add_option("--model", eval_args.model, "Checkpoint (VLAC)")->required();
  eval_cmd->add_option("--data", eval_args.data, "Labeled evaluation rollouts (VLAF)")->required();
  eval_cmd->add_option("--cal-data", eval_args.cal_data, "Labeled calibration rollouts (VLAF)");
  eval_cmd->add_option("--calibrator", eval_args.calibrator, "Calibrator JSON written by 'calibrate'");

  BenchArgs bench_args;
  auto* bench_cmd = app.add_subcommand("bench", "Run a synthetic oracle suite");
  add_common(bench_cmd, bench_args.common);
  bench_cmd->add_option("suite", bench_args.suite, "Suite name or 'all'")->required();

  GradcheckArgs gc_args;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with central finite differences");
  add_common(gc_cmd, gc_args.common);
  gc_cmd->add_option("--configs", gc_args.configs, "Random head configs to check")->capture_default_str();
  gc_cmd->add_option("--probes", gc_args.probes, "Probed coordinates per parameter group")->capture_default_str();
  gc_cmd->add_flag("--report", gc_args.write_report, "Write gradcheck.json into --out");

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth", "Write synthetic sft/cal/eval rollout files");
  add_common(synth_cmd, synth_args.common);
  synth_cmd->add_option("--kind", synth_args.kind, "feature_shift, phase_swap or late_deviation")
      ->capture_default_str();
  synth_cmd->add_option("--successes", synth_args.n_success, "Success-only training rollouts")->capture_default_str();
  synth_cmd->add_option("--labeled", synth_args.n_labeled, "Labeled rollouts, split evenly into cal and eval")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  if (*train_cmd) return guarded([&] { return cmd_train(train_args); });
  if (*score_cmd) return guarded([&] { return cmd_score(score_args); });
  if (*cal_cmd) return guarded([&] { return cmd_calibrate(cal_args); });
  if (*eval_cmd) return guarded([&] { return cmd_eval(eval_args); });
  if (*bench_cmd) return guarded([&] { return cmd_bench(bench_args); });
  if (*gc_cmd) return guarded([&] { return cmd_gradcheck(gc_args); });
  if (*synth_cmd) return guarded([&] { return cmd_synth(synth_args); });
  return kExitUsage;
}
