// Acceptance runner. Prints one PASS/FAIL line per criterion and exits
// nonzero if any line fails. Bench suites are driven through the CLI binary
// so the shipped entry point is what gets measured.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "vlaconf/vlaconf.hpp"

namespace fs = std::filesystem;
using namespace vlaconf;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradBudgetSec = 60.0;
constexpr double kOneOverNBudgetSec = 300.0;
constexpr double kSeparationBudgetSec = 600.0;
constexpr double kBenchBudgetSec = 600.0;
constexpr double kMetricTolerance = 1e-12;
constexpr double kPlattTolerance = 0.1;

int g_failures = 0;

void verdict(const std::string& name, bool ok, const std::string& detail) {
  std::printf("%s %-18s %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(VLACONF_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct SuiteRun {
  int exit_code = -1;
  double seconds = 0.0;
  nlohmann::json report;
  std::map<std::string, nlohmann::json> checks;
};

SuiteRun run_suite(const std::string& suite, const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  SuiteRun r;
  const auto t0 = std::chrono::steady_clock::now();
  r.exit_code = run_cli("bench " + suite + " --out " + dir.string(), dir / "bench.log");
  r.seconds = seconds_since(t0);
  const auto path = dir / (suite + ".json");
  if (fs::exists(path)) {
    r.report = nlohmann::json::parse(slurp(path));
    for (const auto& c : r.report.at("checks")) r.checks[c.at("name").get<std::string>()] = c;
  }
  return r;
}

bool check_passed(const SuiteRun& r, const std::string& name) {
  const auto it = r.checks.find(name);
  return it != r.checks.end() && it->second.at("passed").get<bool>();
}

std::string check_value(const SuiteRun& r, const std::string& name) {
  const auto it = r.checks.find(name);
  if (it == r.checks.end()) return name + "=missing";
  std::ostringstream s;
  s << name << "=" << it->second.at("value").dump();
  return s.str();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Logs and latency.json carry wall-clock timings and are not compared.
bool compared(const fs::directory_entry& e) {
  return e.is_regular_file() && e.path().extension() != ".log" && e.path().filename() != "latency.json";
}

// Files under `a` and `b` with identical relative names and bytes.
bool same_tree(const fs::path& a, const fs::path& b, std::string& why) {
  std::vector<fs::path> names;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (compared(e)) names.push_back(fs::relative(e.path(), a));
  }
  std::size_t in_b = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) {
    if (compared(e)) ++in_b;
  }
  if (names.empty() || names.size() != in_b) {
    why = "file sets differ";
    return false;
  }
  for (const auto& n : names) {
    if (!fs::exists(b / n) || slurp(a / n) != slurp(b / n)) {
      why = n.string() + " differs";
      return false;
    }
  }
  why = std::to_string(names.size()) + " files identical";
  return true;
}

void gradient_criterion() {
  GradcheckOptions opt;
  opt.tolerance = kGradTolerance;
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = gradcheck(opt);
  const double secs = seconds_since(t0);
  verdict("gradient", res.passed && res.max_rel_error < kGradTolerance && secs < kGradBudgetSec,
          "configs=" + std::to_string(res.configs.size()) + " max_rel_error=" + fmt("%.3e", res.max_rel_error) +
              " time=" + fmt("%.1fs", secs));
}

void metric_oracle_criterion() {
  using oracle::Labels;
  using oracle::Probs;
  bool ok = true;
  double worst = 0.0;
  auto expect = [&](double got, double want) {
    worst = std::max(worst, std::abs(got - want));
    ok = ok && std::abs(got - want) <= kMetricTolerance;
  };
  expect(ece(Probs{0.8, 0.8}, Labels{1, 0}), 0.3);
  expect(ece(Probs{0, 1, 1, 0}, Labels{0, 1, 1, 0}), 0.0);
  expect(brier(Probs{0.5, 0.5, 0.5}, Labels{0, 1, 1}), 0.25);
  expect(brier(Probs{0, 1, 1}, Labels{0, 1, 1}), 0.0);
  expect(nll(Probs{0.5}, Labels{1}), std::log(2.0));
  expect(nll(Probs{0.0}, Labels{1}), -std::log(1e-7));
  Rng rng(20261016);
  for (int trial = 0; trial < 100; ++trial) {
    const auto [p, y] = oracle::random_pairs(rng);
    expect(ece(p, y), oracle::ece(p, y, 10));
    expect(brier(p, y), oracle::brier(p, y));
    expect(nll(p, y), oracle::nll(p, y));
  }
  verdict("metric_oracles", ok, "worked examples + 100 random sets, max_abs_diff=" + fmt("%.3e", worst));
}

void platt_criterion() {
  Rng rng(7);
  std::vector<double> u;
  std::vector<std::uint8_t> y;
  for (int i = 0; i < 10'000; ++i) {
    u.push_back(rng.normal(0.0, 1.5));
    y.push_back(rng.uniform() < sigmoid(-2.0 * u.back() + 1.0) ? 1 : 0);
  }
  const auto fit = fit_platt(u, y);
  double rate = 0.0;
  for (auto v : y) rate += v;
  rate /= static_cast<double>(y.size());
  std::vector<double> fitted, constant(y.size(), rate);
  for (double v : u) fitted.push_back(apply_platt(fit.cal, v));
  const double nll_fit = nll(fitted, y), nll_const = nll(constant, y);
  const bool ok = std::abs(fit.cal.alpha - 2.0) <= kPlattTolerance && std::abs(fit.cal.beta - 1.0) <= kPlattTolerance &&
                  nll_fit <= nll_const && fit.cal.alpha >= 0.0;
  verdict("platt_recovery", ok,
          "alpha=" + fmt("%.4f", fit.cal.alpha) + " beta=" + fmt("%.4f", fit.cal.beta) + " nll=" + fmt("%.4f", nll_fit) +
              " constant_nll=" + fmt("%.4f", nll_const));
}

void determinism_criterion(const fs::path& root, const SuiteRun& tabular_a) {
  auto pipeline = [&](const fs::path& d) {
    fs::remove_all(d);
    fs::create_directories(d);
    const auto s = d.string();
    int rc = run_cli("synth --successes 60 --labeled 80 --seed 11 --out " + s, d / "synth.log");
    rc |= run_cli("train --data " + s + "/sft.vlaf --steps 150 --seed 11 --out " + s, d / "train.log");
    rc |= run_cli("score --model " + s + "/head.vlac --data " + s + "/eval.vlaf --out " + s + "/score", d / "score.log");
    rc |= run_cli("calibrate --model " + s + "/head.vlac --data " + s + "/cal.vlaf --out " + s + "/cal", d / "cal.log");
    rc |= run_cli("eval --model " + s + "/head.vlac --data " + s + "/eval.vlaf --calibrator " + s +
                      "/cal/calibrator.json --cal-data " + s + "/cal.vlaf --out " + s + "/eval",
                  d / "eval.log");
    return rc;
  };
  const int rc1 = pipeline(root / "det_a");
  const int rc2 = pipeline(root / "det_b");
  std::string why_cli, why_bench;
  const bool cli_same = rc1 == 0 && rc2 == 0 && same_tree(root / "det_a", root / "det_b", why_cli);
  const auto tabular_b = run_suite("tabular_1overN", root / "tabular_1overN_rerun");
  const bool bench_same = tabular_a.exit_code >= 0 && tabular_b.exit_code == tabular_a.exit_code &&
                          same_tree(root / "tabular_1overN", root / "tabular_1overN_rerun", why_bench);
  verdict("determinism", cli_same && bench_same, "pipeline: " + why_cli + "; bench: " + why_bench);
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "vlaconf_acceptance";
  fs::create_directories(root);
  std::printf("acceptance workspace: %s\n", root.string().c_str());

  gradient_criterion();
  metric_oracle_criterion();
  platt_criterion();

  std::map<std::string, SuiteRun> runs;
  double bench_total = 0.0;
  for (const std::string suite : kBenchSuites) {
    runs[suite] = run_suite(suite, root / suite);
    bench_total += runs[suite].seconds;
    std::printf("     bench %-22s exit=%d time=%.1fs\n", suite.c_str(), runs[suite].exit_code, runs[suite].seconds);
    std::fflush(stdout);
  }

  {
    const auto& r = runs.at("tabular_1overN");
    bool all = !r.checks.empty();
    std::string detail;
    for (const auto& [name, c] : r.checks) {
      if (name.rfind("relative_error_N", 0) == 0 || name.rfind("decreasing_N", 0) == 0) {
        all = all && c.at("passed").get<bool>();
        if (name.rfind("relative_error_N", 0) == 0) detail += check_value(r, name) + " ";
      }
    }
    verdict("one_over_n", all && r.seconds < kOneOverNBudgetSec, detail + "time=" + fmt("%.1fs", r.seconds));
  }
  {
    const auto& r = runs.at("separation");
    verdict("separation", check_passed(r, "auroc_prefix_max_0.5") && r.seconds < kSeparationBudgetSec,
            check_value(r, "auroc_prefix_max_0.5") + " time=" + fmt("%.1fs", r.seconds));
  }
  {
    const auto& r = runs.at("step_ablation");
    verdict("step_ablation",
            check_passed(r, "conditioned_brier_below_nostep") && check_passed(r, "nostep_k_invariance_mismatches"),
            check_value(r, "conditioned_brier_below_nostep") + " " + check_value(r, "nostep_k_invariance_mismatches"));
  }
  {
    bool all = true;
    std::size_t n = 0;
    std::string failed;
    for (const auto& [suite, r] : runs) {
      for (const auto& [name, c] : r.checks) {
        const bool gain = name.size() >= 16 && name.compare(name.size() - 16, 16, "calibration_gain") == 0;
        if (!gain && name != "worst_post_minus_pre_nll") continue;
        ++n;
        if (!c.at("passed").get<bool>()) {
          all = false;
          failed += suite + "/" + name + " ";
        }
      }
    }
    verdict("calibration_gain", all && n >= std::size(kBenchSuites),
            std::to_string(n) + " checks" + (failed.empty() ? "" : ", failed: " + failed));
  }
  {
    const auto& r = runs.at("progress_correlation");
    verdict("progress", check_passed(r, "monotone_buckets_mean") && check_passed(r, "monotone_buckets_max"),
            check_value(r, "monotone_buckets_mean") + " " + check_value(r, "monotone_buckets_max"));
  }
  {
    bool all = true;
    for (const auto& [suite, r] : runs) all = all && r.exit_code == 0;
    verdict("bench_suites", all && bench_total < kBenchBudgetSec,
            "all suites passed=" + std::string(all ? "yes" : "no") + " total_time=" + fmt("%.1fs", bench_total));
  }

  determinism_criterion(root, runs.at("tabular_1overN"));

  std::printf("%s (%d failing)\n", g_failures == 0 ? "ACCEPTANCE PASSED" : "ACCEPTANCE FAILED", g_failures);
  return g_failures == 0 ? 0 : 1;
}
