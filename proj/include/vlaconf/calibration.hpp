#pragma once

// Prefix aggregation of step scores and Platt calibration into success
// probabilities. Only one binary outcome per rollout is ever consumed here.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlaconf/error.hpp"

namespace vlaconf {

enum class AggregationRule { First, RunningMean, PrefixMax };

inline std::string rule_name(AggregationRule r) {
  switch (r) {
    case AggregationRule::First: return "first";
    case AggregationRule::RunningMean: return "mean";
    case AggregationRule::PrefixMax: return "max";
  }
  return "?";
}

inline AggregationRule parse_rule(const std::string& s) {
  if (s == "first") return AggregationRule::First;
  if (s == "mean" || s == "running_mean") return AggregationRule::RunningMean;
  if (s == "max" || s == "prefix_max") return AggregationRule::PrefixMax;
  throw Error(Errc::InvalidConfig, "unknown aggregation rule '" + s + "' (expected first|mean|max)");
}

inline constexpr AggregationRule kAllRules[] = {AggregationRule::First, AggregationRule::RunningMean,
                                                AggregationRule::PrefixMax};

struct PrefixSignal {
  double u = 0.0;
  std::size_t t = 0;
  AggregationRule rule = AggregationRule::PrefixMax;
};

inline PrefixSignal aggregate_prefix(std::span<const double> scores, AggregationRule rule) {
  if (scores.empty()) throw Error(Errc::EmptyPrefix, "cannot aggregate an empty prefix");
  for (double s : scores) {
    if (!std::isfinite(s) || s < 0.0) throw Error(Errc::NonFiniteInput, "step scores must be finite and >= 0");
  }
  PrefixSignal sig{0.0, scores.size(), rule};
  switch (rule) {
    case AggregationRule::First: sig.u = scores.front(); break;
    case AggregationRule::RunningMean: {
      double sum = 0.0;
      for (double s : scores) sum += s;
      sig.u = sum / static_cast<double>(scores.size());
      break;
    }
    case AggregationRule::PrefixMax: sig.u = *std::max_element(scores.begin(), scores.end()); break;
  }
  return sig;
}

/// t = max(1, floor(fraction * T)). The 1e-9 slack keeps products such as
/// 0.29 * 100 from flooring one step short.
inline std::size_t checkpoint_index(std::size_t length, double fraction) {
  if (length < 1) throw Error(Errc::EmptyPrefix, "rollout length must be >= 1");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error(Errc::InvalidConfig, "checkpoint fraction must lie in (0, 1]");
  const auto t = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(length) + 1e-9));
  return std::clamp<std::size_t>(t, 1, length);
}

/// One rollout's step scores, with its outcome when known.
struct ScoredRollout {
  std::uint32_t rollout_id = 0;
  std::vector<double> scores;
  std::optional<std::uint8_t> outcome;
  std::optional<std::uint32_t> first_success_step;
};

inline double prefix_signal(const ScoredRollout& r, AggregationRule rule, double fraction) {
  const auto t = checkpoint_index(r.scores.size(), fraction);
  return aggregate_prefix(std::span<const double>(r.scores).first(t), rule).u;
}

// ---------------------------------------------------------------------------
// Platt scaling: p = sigmoid(-alpha * u + beta), alpha >= 0

struct Calibrator {
  double alpha = 0.0;
  double beta = 0.0;
};

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double apply_platt(const Calibrator& cal, double u) { return sigmoid(-cal.alpha * u + cal.beta); }

inline constexpr double kPlattRidge = 1e-4;
inline constexpr double kPlattTol = 1e-10;
inline constexpr int kPlattMaxIter = 100;

struct PlattFit {
  Calibrator cal;
  int iterations = 0;
  bool single_class = false;  // all outcomes equal; the ridge keeps the fit finite
  double objective = 0.0;
};

namespace detail {

inline double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

inline double platt_objective(std::span<const double> u, std::span<const std::uint8_t> y, double a, double b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double z = -a * u[i] + b;
    sum += softplus(z) - static_cast<double>(y[i]) * z;
  }
  return sum / static_cast<double>(u.size()) + kPlattRidge * (a * a + b * b);
}

}  // namespace detail

/// Mean binary cross-entropy plus a 1e-4 ridge on (alpha, beta), minimised by
/// projected Newton with backtracking. When alpha sits on its bound and the
/// gradient pushes it negative, only beta is updated.
inline PlattFit fit_platt(std::span<const double> u, std::span<const std::uint8_t> y) {
  if (u.size() != y.size()) throw Error(Errc::LengthMismatch, "signals and outcomes differ in length");
  if (u.size() < 2) throw Error(Errc::LengthMismatch, "Platt fitting needs at least two rollouts");
  const double n = static_cast<double>(u.size());
  double pos = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (!std::isfinite(u[i])) throw Error(Errc::NonFiniteInput, "signal " + std::to_string(i) + " is not finite");
    if (y[i] > 1) throw Error(Errc::InvalidConfig, "outcome " + std::to_string(i) + " is not in {0,1}");
    pos += y[i];
  }
  PlattFit fit;
  fit.single_class = pos == 0.0 || pos == n;

  double a = 0.0;
  const double rate = std::clamp(pos / n, 1e-3, 1.0 - 1e-3);
  double b = std::log(rate / (1.0 - rate));
  double obj = detail::platt_objective(u, y, a, b);
  for (int it = 1; it <= kPlattMaxIter; ++it) {
    fit.iterations = it;
    double ga = 2.0 * kPlattRidge * a, gb = 2.0 * kPlattRidge * b;
    double haa = 2.0 * kPlattRidge, hab = 0.0, hbb = 2.0 * kPlattRidge;
    for (std::size_t i = 0; i < u.size(); ++i) {
      const double p = sigmoid(-a * u[i] + b);
      const double r = (p - static_cast<double>(y[i])) / n;
      const double w = p * (1.0 - p) / n;
      ga -= r * u[i];
      gb += r;
      haa += w * u[i] * u[i];
      hab -= w * u[i];
      hbb += w;
    }
    double da = 0.0, db = 0.0;
    if (a <= 0.0 && ga > 0.0) {
      db = gb / hbb;
    } else {
      const double det = haa * hbb - hab * hab;
      da = (hbb * ga - hab * gb) / det;
      db = (haa * gb - hab * ga) / det;
    }
    double step = 1.0, na = a, nb = b, nobj = obj;
    for (int ls = 0; ls < 60; ++ls) {
      na = std::max(0.0, a - step * da);
      nb = b - step * db;
      nobj = detail::platt_objective(u, y, na, nb);
      if (nobj <= obj + 1e-15 * std::abs(obj)) break;
      step *= 0.5;
    }
    const double change = std::hypot(na - a, nb - b);
    if (nobj <= obj + 1e-15 * std::abs(obj)) {
      a = na;
      b = nb;
      obj = nobj;
    }
    if (change < kPlattTol) break;
  }
  fit.cal = {a, b};
  fit.objective = obj;
  return fit;
}

/// Calibrator as persisted next to a head: the map plus the protocol it was fitted under.
struct CalibratorFile {
  Calibrator cal;
  AggregationRule rule = AggregationRule::PrefixMax;
  double fraction = 0.5;
};

inline nlohmann::json to_json(const CalibratorFile& f) {
  return {{"alpha", f.cal.alpha}, {"beta", f.cal.beta}, {"rule", rule_name(f.rule)}, {"fraction", f.fraction}};
}

inline CalibratorFile calibrator_from_json(const nlohmann::json& j) {
  try {
    CalibratorFile f;
    f.cal.alpha = j.at("alpha").get<double>();
    f.cal.beta = j.at("beta").get<double>();
    f.rule = parse_rule(j.at("rule").get<std::string>());
    f.fraction = j.at("fraction").get<double>();
    if (f.cal.alpha < 0.0) throw Error(Errc::InvalidConfig, "calibrator alpha must be >= 0");
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidConfig, std::string("calibrator JSON: ") + e.what());
  }
}

/// The uncalibrated reference: sigmoid of the standardised, negated signal.
inline std::vector<double> standardized_confidence(std::span<const double> u) {
  double mean = 0.0;
  for (double x : u) mean += x;
  mean /= static_cast<double>(u.size());
  double var = 0.0;
  for (double x : u) var += (x - mean) * (x - mean);
  const double sd = std::max(std::sqrt(var / static_cast<double>(u.size())), 1e-12);
  std::vector<double> p;
  p.reserve(u.size());
  for (double x : u) p.push_back(sigmoid(-(x - mean) / sd));
  return p;
}

}  // namespace vlaconf
