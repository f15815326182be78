#pragma once

// Calibration metrics, temporal calibration curves, prefix-score progress
// buckets and the PCA + k-means nearest-centroid baseline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "vlaconf/calibration.hpp"
#include "vlaconf/error.hpp"
#include "vlaconf/rng.hpp"

namespace vlaconf {

inline constexpr std::size_t kDefaultBins = 10;
inline constexpr double kNllClamp = 1e-7;

namespace detail {

inline void check_pairs(std::span<const double> probs, std::span<const std::uint8_t> outcomes) {
  if (probs.size() != outcomes.size()) throw Error(Errc::LengthMismatch, "probabilities and outcomes differ in length");
  if (probs.empty()) throw Error(Errc::EmptyInput, "metrics need at least one prediction");
}

}  // namespace detail

/// Bin b covers (b/n, (b+1)/n]; bin 0 also takes p = 0.
inline std::size_t ece_bin(double p, std::size_t n_bins) {
  const double nb = static_cast<double>(n_bins);
  auto b = static_cast<std::ptrdiff_t>(std::ceil(p * nb)) - 1;
  b = std::clamp<std::ptrdiff_t>(b, 0, static_cast<std::ptrdiff_t>(n_bins) - 1);
  // Snap onto the edge convention where p * n rounds differently from b / n.
  while (b > 0 && p <= static_cast<double>(b) / nb) --b;
  while (b + 1 < static_cast<std::ptrdiff_t>(n_bins) && p > static_cast<double>(b + 1) / nb) ++b;
  return static_cast<std::size_t>(b);
}

struct BinRow {
  double lower = 0.0;
  double upper = 0.0;
  double confidence = 0.0;  // mean predicted probability
  double accuracy = 0.0;    // mean outcome
  std::size_t count = 0;
};

inline std::vector<BinRow> reliability_bins(std::span<const double> probs, std::span<const std::uint8_t> outcomes,
                                            std::size_t n_bins) {
  detail::check_pairs(probs, outcomes);
  if (n_bins == 0) throw Error(Errc::InvalidConfig, "ECE needs at least one bin");
  std::vector<BinRow> bins(n_bins);
  for (std::size_t b = 0; b < n_bins; ++b) {
    bins[b].lower = static_cast<double>(b) / static_cast<double>(n_bins);
    bins[b].upper = static_cast<double>(b + 1) / static_cast<double>(n_bins);
  }
  for (std::size_t i = 0; i < probs.size(); ++i) {
    auto& row = bins[ece_bin(probs[i], n_bins)];
    row.confidence += probs[i];
    row.accuracy += outcomes[i];
    ++row.count;
  }
  for (auto& row : bins) {
    if (row.count == 0) continue;
    row.confidence /= static_cast<double>(row.count);
    row.accuracy /= static_cast<double>(row.count);
  }
  return bins;
}

inline double ece(std::span<const double> probs, std::span<const std::uint8_t> outcomes,
                  std::size_t n_bins = kDefaultBins) {
  const auto bins = reliability_bins(probs, outcomes, n_bins);
  double sum = 0.0;
  for (const auto& row : bins) {
    if (row.count == 0) continue;
    sum += static_cast<double>(row.count) * std::abs(row.confidence - row.accuracy);
  }
  return sum / static_cast<double>(probs.size());
}

inline double brier(std::span<const double> probs, std::span<const std::uint8_t> outcomes) {
  detail::check_pairs(probs, outcomes);
  double sum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double e = probs[i] - outcomes[i];
    sum += e * e;
  }
  return sum / static_cast<double>(probs.size());
}

inline double nll(std::span<const double> probs, std::span<const std::uint8_t> outcomes) {
  detail::check_pairs(probs, outcomes);
  double sum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], kNllClamp, 1.0 - kNllClamp);
    sum -= outcomes[i] ? std::log(p) : std::log(1.0 - p);
  }
  return sum / static_cast<double>(probs.size());
}

/// Probability that a random success scores below a random failure on the
/// anomaly signal (ties count half), i.e. AUROC of -u for predicting success.
inline double auroc_anomaly(std::span<const double> u, std::span<const std::uint8_t> outcomes) {
  if (u.size() != outcomes.size()) throw Error(Errc::LengthMismatch, "signals and outcomes differ in length");
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (outcomes[i] != 1) continue;
    for (std::size_t j = 0; j < u.size(); ++j) {
      if (outcomes[j] != 0) continue;
      ++pairs;
      wins += u[i] < u[j] ? 1.0 : (u[i] == u[j] ? 0.5 : 0.0);
    }
  }
  if (pairs == 0) throw Error(Errc::EmptyInput, "AUROC needs both successes and failures");
  return wins / static_cast<double>(pairs);
}

struct MetricsReport {
  double ece = 0.0;
  double brier = 0.0;
  double nll = 0.0;
  double success_rate = 0.0;
  std::size_t n = 0;
  std::vector<BinRow> bins;
};

inline MetricsReport metrics_report(std::span<const double> probs, std::span<const std::uint8_t> outcomes,
                                    std::size_t n_bins = kDefaultBins) {
  MetricsReport r;
  r.bins = reliability_bins(probs, outcomes, n_bins);
  r.ece = ece(probs, outcomes, n_bins);
  r.brier = brier(probs, outcomes);
  r.nll = nll(probs, outcomes);
  r.n = probs.size();
  double pos = 0.0;
  for (auto y : outcomes) pos += y;
  r.success_rate = pos / static_cast<double>(r.n);
  return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json bins = nlohmann::json::array();
  for (const auto& b : r.bins) {
    bins.push_back({{"lower", b.lower}, {"upper", b.upper}, {"confidence", b.confidence}, {"accuracy", b.accuracy},
                    {"count", b.count}});
  }
  return {{"ece", r.ece}, {"brier", r.brier}, {"nll", r.nll}, {"success_rate", r.success_rate}, {"n", r.n},
          {"bins", bins}};
}

// ---------------------------------------------------------------------------
// Temporal calibration

struct TemporalPoint {
  AggregationRule rule = AggregationRule::RunningMean;
  double fraction = 1.0;
  Calibrator cal;
  MetricsReport report;
};

struct TemporalCurve {
  std::vector<TemporalPoint> points;

  const TemporalPoint& at(AggregationRule rule, double fraction) const {
    for (const auto& p : points)
      if (p.rule == rule && std::abs(p.fraction - fraction) < 1e-12) return p;
    throw Error(Errc::InvalidConfig, "no temporal point for " + rule_name(rule) + " at " + std::to_string(fraction));
  }
};

inline std::vector<double> default_fractions() {
  std::vector<double> f;
  for (int i = 1; i <= 10; ++i) f.push_back(i / 10.0);
  return f;
}

namespace detail {

inline std::vector<std::uint8_t> outcomes_of(std::span<const ScoredRollout> rs) {
  std::vector<std::uint8_t> y;
  y.reserve(rs.size());
  for (const auto& r : rs) {
    if (!r.outcome) throw Error(Errc::InvalidConfig, "rollout " + std::to_string(r.rollout_id) + " has no outcome");
    y.push_back(*r.outcome);
  }
  return y;
}

inline std::vector<double> signals_of(std::span<const ScoredRollout> rs, AggregationRule rule, double fraction) {
  std::vector<double> u;
  u.reserve(rs.size());
  for (const auto& r : rs) u.push_back(prefix_signal(r, rule, fraction));
  return u;
}

}  // namespace detail

/// For each (rule, fraction): u at the checkpoint, Platt fitted on `cal`,
/// applied to `eval`, metrics on `eval`.
inline TemporalCurve temporal_calibration(std::span<const ScoredRollout> cal, std::span<const ScoredRollout> eval,
                                          std::span<const AggregationRule> rules, std::span<const double> fractions,
                                          std::size_t n_bins = kDefaultBins) {
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (!(fractions[i] > 0.0 && fractions[i] <= 1.0) || (i > 0 && !(fractions[i] > fractions[i - 1]))) {
      throw Error(Errc::InvalidConfig, "fractions must be strictly increasing in (0, 1]");
    }
  }
  const auto y_cal = detail::outcomes_of(cal);
  const auto y_eval = detail::outcomes_of(eval);
  TemporalCurve curve;
  for (auto rule : rules) {
    for (double f : fractions) {
      TemporalPoint pt{rule, f, {}, {}};
      pt.cal = fit_platt(detail::signals_of(cal, rule, f), y_cal).cal;
      std::vector<double> probs;
      for (double u : detail::signals_of(eval, rule, f)) probs.push_back(apply_platt(pt.cal, u));
      pt.report = metrics_report(probs, y_eval, n_bins);
      curve.points.push_back(std::move(pt));
    }
  }
  return curve;
}

/// Flat CSV, one row per (rule, fraction, metric).
inline std::string temporal_csv(const TemporalCurve& c) {
  std::string out = "rule,fraction,metric,value\n";
  char buf[128];
  for (const auto& p : c.points) {
    const std::pair<const char*, double> rows[] = {
        {"ece", p.report.ece}, {"brier", p.report.brier}, {"nll", p.report.nll}, {"alpha", p.cal.alpha},
        {"beta", p.cal.beta}};
    for (const auto& [name, v] : rows) {
      std::snprintf(buf, sizeof buf, "%s,%.2f,%s,%.17g\n", rule_name(p.rule).c_str(), p.fraction, name, v);
      out += buf;
    }
  }
  return out;
}

inline nlohmann::json to_json(const TemporalCurve& c) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : c.points) {
    arr.push_back({{"rule", rule_name(p.rule)},
                   {"fraction", p.fraction},
                   {"alpha", p.cal.alpha},
                   {"beta", p.cal.beta},
                   {"metrics", to_json(p.report)}});
  }
  return arr;
}

// ---------------------------------------------------------------------------
// Prefix-score progress buckets

struct ProgressBucket {
  double lower = 0.0;
  double upper = 0.0;
  std::optional<double> mean_first_success;
  std::size_t count = 0;
};

struct ProgressBuckets {
  std::vector<ProgressBucket> buckets;

  /// Bucket means are non-decreasing across the non-empty buckets.
  bool monotone() const {
    std::optional<double> prev;
    for (const auto& b : buckets) {
      if (!b.mean_first_success) continue;
      if (prev && *b.mean_first_success < *prev) return false;
      prev = b.mean_first_success;
    }
    return true;
  }
};

/// Equal-width buckets over the observed prefix-score range of successful
/// rollouts; a degenerate range is widened by 1e-9.
inline ProgressBuckets progress_buckets(std::span<const ScoredRollout> successes, AggregationRule rule,
                                        std::size_t n_buckets, double fraction = 1.0) {
  if (successes.empty()) throw Error(Errc::EmptyInput, "progress analysis needs at least one successful rollout");
  if (n_buckets == 0) throw Error(Errc::InvalidConfig, "progress analysis needs at least one bucket");
  std::vector<double> u;
  for (const auto& r : successes) {
    if (r.outcome && *r.outcome != 1) {
      throw Error(Errc::InvalidConfig, "rollout " + std::to_string(r.rollout_id) + " is not successful");
    }
    if (!r.first_success_step) {
      throw Error(Errc::InvalidConfig, "rollout " + std::to_string(r.rollout_id) + " has no first-success step");
    }
    u.push_back(prefix_signal(r, rule, fraction));
  }
  const double lo = *std::min_element(u.begin(), u.end());
  double hi = *std::max_element(u.begin(), u.end());
  if (hi - lo <= 0.0) hi = lo + 1e-9;
  const double width = (hi - lo) / static_cast<double>(n_buckets);

  ProgressBuckets out;
  std::vector<double> sums(n_buckets, 0.0);
  out.buckets.resize(n_buckets);
  for (std::size_t b = 0; b < n_buckets; ++b) {
    out.buckets[b].lower = lo + width * static_cast<double>(b);
    out.buckets[b].upper = b + 1 == n_buckets ? hi : lo + width * static_cast<double>(b + 1);
  }
  for (std::size_t i = 0; i < u.size(); ++i) {
    auto b = static_cast<std::size_t>((u[i] - lo) / (hi - lo) * static_cast<double>(n_buckets));
    b = std::min(b, n_buckets - 1);
    sums[b] += *successes[i].first_success_step;
    ++out.buckets[b].count;
  }
  for (std::size_t b = 0; b < n_buckets; ++b) {
    if (out.buckets[b].count) out.buckets[b].mean_first_success = sums[b] / static_cast<double>(out.buckets[b].count);
  }
  return out;
}

inline nlohmann::json to_json(const ProgressBuckets& p) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& b : p.buckets) {
    arr.push_back({{"lower", b.lower},
                   {"upper", b.upper},
                   {"count", b.count},
                   {"mean_first_success", b.mean_first_success ? nlohmann::json(*b.mean_first_success) : nullptr}});
  }
  return arr;
}

// ---------------------------------------------------------------------------
// PCA + k-means baseline

struct PcaKmeansModel {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // dim x n_used
  Eigen::MatrixXd centroids;   // k x n_used
  std::size_t requested_components = 0;
  bool rank_reduced = false;   // fewer effective dimensions than requested
  int iterations = 0;

  Eigen::MatrixXd project(const Eigen::MatrixXd& rows) const {
    return (rows.rowwise() - mean.transpose()) * components;
  }

  /// Euclidean distance to the nearest centroid in projected space.
  std::vector<double> score(const Eigen::MatrixXd& rows) const {
    const Eigen::MatrixXd proj = project(rows);
    std::vector<double> out(static_cast<std::size_t>(proj.rows()));
    for (Eigen::Index i = 0; i < proj.rows(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index c = 0; c < centroids.rows(); ++c) best = std::min(best, (proj.row(i) - centroids.row(c)).squaredNorm());
      out[static_cast<std::size_t>(i)] = std::sqrt(best);
    }
    return out;
  }
};

inline constexpr int kKmeansMaxIter = 100;

/// Mean-centred PCA then k-means (k-means++ seeding, at most 100 Lloyd
/// iterations, empty clusters reseeded at the point farthest from its centroid).
inline PcaKmeansModel fit_pca_kmeans(const Eigen::MatrixXd& train, std::size_t n_components, std::size_t k_clusters,
                                     std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(train.rows());
  if (n < 2 || k_clusters == 0 || n_components == 0 || k_clusters > n) {
    throw Error(Errc::InvalidConfig, "PCA-k-means needs >= 2 rows, >= 1 component and 1 <= k <= rows");
  }
  if (!train.allFinite()) throw Error(Errc::NonFiniteInput, "PCA-k-means training features contain non-finite values");
  PcaKmeansModel m;
  m.requested_components = n_components;
  m.mean = train.colwise().mean().transpose();
  const Eigen::MatrixXd centered = train.rowwise() - m.mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::VectorXd& ev = es.eigenvalues();  // ascending
  const double top = std::max(ev(ev.size() - 1), 0.0);
  std::size_t effective = 0;
  for (Eigen::Index i = 0; i < ev.size(); ++i)
    if (ev(i) > 1e-12 * top && ev(i) > 0.0) ++effective;
  std::size_t used = std::min<std::size_t>(n_components, static_cast<std::size_t>(ev.size()));
  if (effective < n_components) {
    m.rank_reduced = true;
    used = std::max<std::size_t>(1, effective);
  }
  m.components = es.eigenvectors().rightCols(static_cast<Eigen::Index>(used)).rowwise().reverse();

  const Eigen::MatrixXd proj = centered * m.components;
  const auto k = static_cast<Eigen::Index>(k_clusters);
  Rng rng(seed);
  m.centroids.resize(k, proj.cols());
  Eigen::VectorXd d2(proj.rows());
  m.centroids.row(0) = proj.row(static_cast<Eigen::Index>(rng.below(n)));
  for (Eigen::Index i = 0; i < proj.rows(); ++i) d2(i) = (proj.row(i) - m.centroids.row(0)).squaredNorm();
  for (Eigen::Index c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      for (pick = 0; pick + 1 < proj.rows(); ++pick) {
        target -= d2(pick);
        if (target < 0.0) break;
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.below(n));
    }
    m.centroids.row(c) = proj.row(pick);
    for (Eigen::Index i = 0; i < proj.rows(); ++i)
      d2(i) = std::min(d2(i), (proj.row(i) - m.centroids.row(c)).squaredNorm());
  }

  std::vector<Eigen::Index> assign(n, -1);
  for (int it = 1; it <= kKmeansMaxIter; ++it) {
    m.iterations = it;
    bool changed = false;
    Eigen::VectorXd own(proj.rows());
    for (Eigen::Index i = 0; i < proj.rows(); ++i) {
      Eigen::Index best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (Eigen::Index c = 0; c < k; ++c) {
        const double dd = (proj.row(i) - m.centroids.row(c)).squaredNorm();
        if (dd < bd) {
          bd = dd;
          best = c;
        }
      }
      own(i) = bd;
      if (assign[static_cast<std::size_t>(i)] != best) {
        assign[static_cast<std::size_t>(i)] = best;
        changed = true;
      }
    }
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, proj.cols());
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < proj.rows(); ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += proj.row(i);
      ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    for (Eigen::Index c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        m.centroids.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
      } else {
        Eigen::Index far = 0;
        own.maxCoeff(&far);
        m.centroids.row(c) = proj.row(far);
        own(far) = 0.0;
        changed = true;
      }
    }
    if (!changed) break;
  }
  return m;
}

struct PcaKmeansScores {
  std::vector<double> scores;
  bool rank_reduced = false;
};

inline PcaKmeansScores pca_kmeans_score(const Eigen::MatrixXd& train, const Eigen::MatrixXd& query,
                                        std::size_t n_components, std::size_t k_clusters, std::uint64_t seed) {
  if (query.cols() != train.cols()) throw Error(Errc::DimensionMismatch, "query and training features differ in width");
  const auto model = fit_pca_kmeans(train, n_components, k_clusters, seed);
  return {model.score(query), model.rank_reduced};
}

}  // namespace vlaconf
