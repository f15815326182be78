#pragma once

// Coin-flip training of the scoring head on success-only step samples.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "vlaconf/head.hpp"

namespace vlaconf {

// ---------------------------------------------------------------------------
// Deterministic Rademacher targets

inline constexpr std::uint64_t kMaxRolloutId = 1ull << 24;
inline constexpr std::uint64_t kMaxStep = 1ull << 20;
inline constexpr std::uint64_t kMaxCoord = 1ull << 20;

/// Entry j of the target for (rollout i, step k): bit 63 of
/// mix64(seed ^ mix64((i << 40) | (k << 20) | j)) selects +1, else -1.
inline int coin_bit(std::uint64_t target_seed, std::uint64_t i, std::uint64_t k, std::uint64_t j) {
  const std::uint64_t packed = (i << 40) | (k << 20) | j;
  return (mix64(target_seed ^ mix64(packed)) >> 63) ? 1 : -1;
}

struct CoinTarget {
  std::vector<std::int8_t> c;
};

inline CoinTarget coin_target(std::uint64_t target_seed, std::uint64_t i, std::uint64_t k, std::uint64_t d) {
  if (d == 0) throw Error(Errc::InvalidConfig, "coin dimension must be >= 1");
  if (i >= kMaxRolloutId || k >= kMaxStep || d > kMaxCoord) {
    throw Error(Errc::PackOverflow, "coin target index out of range (i=" + std::to_string(i) +
                                        ", k=" + std::to_string(k) + ", d=" + std::to_string(d) + ")");
  }
  CoinTarget t;
  t.c.resize(d);
  for (std::uint64_t j = 0; j < d; ++j) t.c[j] = static_cast<std::int8_t>(coin_bit(target_seed, i, k, j));
  return t;
}

// ---------------------------------------------------------------------------
// Loss and gradient

struct StepSample {
  const StepRecord* record = nullptr;
  std::uint32_t rollout_id = 0;
};

/// Flattens every (trace, step) pair of a set, in file order.
inline std::vector<StepSample> step_samples(const RolloutSet& set) {
  std::vector<StepSample> out;
  out.reserve(set.step_count());
  for (const auto& tr : set.traces)
    for (const auto& s : tr.steps) out.push_back({&s, tr.rollout_id});
  return out;
}

namespace detail {

template <class T>
Tensor<T> target_matrix(std::span<const StepSample> batch, std::uint64_t target_seed, std::uint32_t d) {
  Tensor<T> c(static_cast<Eigen::Index>(batch.size()), d);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto t = coin_target(target_seed, batch[i].rollout_id, batch[i].record->k, d);
    for (std::uint32_t j = 0; j < d; ++j) c(static_cast<Eigen::Index>(i), j) = static_cast<T>(t.c[j]);
  }
  return c;
}

template <class T>
StepBatch<T> batch_of(std::span<const StepSample> samples, const HeadConfig& cfg) {
  std::vector<const StepRecord*> recs;
  recs.reserve(samples.size());
  for (const auto& s : samples) recs.push_back(s.record);
  return make_batch<T>(recs, cfg);
}

template <class T>
Tensor<T> relu_grad(const Tensor<T>& upstream, const Tensor<T>& pre) {
  return (pre.array() > T(0)).select(upstream, T(0));
}

template <class T>
Tensor<T> layer_norm_backward(const LayerNormOut<T>& ln, const NormAffine<T>& aff, const Tensor<T>& d_out,
                              NormAffine<T>& g_aff) {
  g_aff.gain.col(0) += (d_out.array() * ln.normed.array()).colwise().sum().transpose().matrix();
  g_aff.bias.col(0) += d_out.colwise().sum().transpose();
  const Tensor<T> dn = d_out.array().rowwise() * aff.gain.col(0).transpose().array();
  const Vec<T> mean_dn = dn.rowwise().mean();
  const Vec<T> mean_dn_n = (dn.array() * ln.normed.array()).rowwise().mean();
  Tensor<T> dx = dn.colwise() - mean_dn;
  dx -= (ln.normed.array().colwise() * mean_dn_n.array()).matrix();
  return dx.array().colwise() * ln.inv_std.array();
}

template <class T>
Tensor<T> linear_backward(const Linear<T>& l, const Tensor<T>& input, const Tensor<T>& d_out, Linear<T>& g) {
  g.w.noalias() += d_out.transpose() * input;
  g.b.col(0) += d_out.colwise().sum().transpose();
  return d_out * l.w;
}

}  // namespace detail

/// Accumulates d(sum of per-sample losses)/d(params) into `g`, given
/// dL/dv for every row of the batch.
template <class T>
void backward(const HeadParams<T>& p, const ForwardCache<T>& fc, const Tensor<T>& d_v, HeadParams<T>& g) {
  using detail::linear_backward;
  using detail::relu_grad;
  const auto& cfg = p.config;

  const Tensor<T> r_coin = detail::relu(fc.a_coin);
  Tensor<T> d = linear_backward(p.coin.l2, r_coin, d_v, g.coin.l2);
  d = relu_grad(d, fc.a_coin);
  const Tensor<T> d_zt = linear_backward(p.coin.l1, fc.z_tilde, d, g.coin.l1);

  Tensor<T> d_h;
  if (cfg.step_conditioning) {
    const Eigen::Index H = cfg.proj_width;
    const Tensor<T> d_eta = (d_zt.array() * (fc.post_ln.out.array() - fc.h.array())).matrix();
    const Tensor<T> d_ht = (d_zt.array() * fc.eta.array()).matrix();
    d_h = (d_zt.array() * (T(1) - fc.eta.array())).matrix();

    const Tensor<T> d_mod = detail::layer_norm_backward(fc.post_ln, p.post_ln, d_ht, g.post_ln);
    Tensor<T> d_film(d_mod.rows(), 2 * H);
    d_film.leftCols(H) = (d_mod.array() * fc.h.array()).matrix();
    d_film.rightCols(H) = d_mod;
    d_h += (d_mod.array() * (fc.gamma.array() + T(1))).matrix();

    const Tensor<T> d_gate_pre = (d_eta.array() * fc.eta.array() * (T(1) - fc.eta.array())).matrix();
    Tensor<T> d_c = linear_backward(p.film, fc.c, d_film, g.film);
    d_c += linear_backward(p.gate, fc.c, d_gate_pre, g.gate);

    const Tensor<T> r_cond = detail::relu(fc.a_cond);
    Tensor<T> dc1 = linear_backward(p.cond.l2, r_cond, d_c, g.cond.l2);
    dc1 = relu_grad(dc1, fc.a_cond);
    const Tensor<T> d_psi = linear_backward(p.cond.l1, fc.psi, dc1, g.cond.l1);
    for (Eigen::Index i = 0; i < d_psi.rows(); ++i) {
      g.step_emb.row(fc.k_hat[static_cast<std::size_t>(i)]) += d_psi.row(i).head(cfg.d_e);
    }
  } else {
    d_h = d_zt;
  }

  const Tensor<T> d_ln = (d_h.array() * (T(1) - fc.h.array().square())).matrix();
  const Tensor<T> d_proj = detail::layer_norm_backward(fc.proj_ln, p.proj_ln, d_ln, g.proj_ln);
  const Tensor<T> d_z = linear_backward(p.proj, fc.z, d_proj, g.proj);

  const Tensor<T> r_mix = detail::relu(fc.a_mix);
  Tensor<T> dm = linear_backward(p.mixer.l2, r_mix, d_z, g.mixer.l2);
  dm = relu_grad(dm, fc.a_mix);
  const Tensor<T> d_cat = linear_backward(p.mixer.l1, fc.concat, dm, g.mixer.l1);

  const Tensor<T> d_hx = d_cat.rightCols(cfg.d_x_out);
  const Tensor<T> r_state = detail::relu(fc.a_state);
  Tensor<T> ds = linear_backward(p.state_enc.l2, r_state, d_hx, g.state_enc.l2);
  ds = relu_grad(ds, fc.a_state);
  linear_backward(p.state_enc.l1, fc.x_norm, ds, g.state_enc.l1);
}

/// Samples per independently reduced chunk. Chunk sums are always added in
/// chunk order, so results do not depend on the thread count.
inline constexpr std::size_t kGradChunk = 64;

template <class T>
struct LossGrad {
  double loss = 0.0;  // mean over the batch
  HeadParams<T> grad;
};

namespace detail {

template <class T>
double chunk_loss_sum(const HeadParams<T>& p, std::span<const StepSample> chunk, std::uint64_t target_seed,
                      HeadParams<T>* g) {
  const auto b = batch_of<T>(chunk, p.config);
  const auto fc = forward(p, b);
  const Tensor<T> diff = fc.v - target_matrix<T>(chunk, target_seed, p.config.d);
  if (g) backward(p, fc, Tensor<T>(T(2) * diff), *g);
  return static_cast<double>(diff.squaredNorm());
}

template <class F>
void run_chunks(std::size_t n_chunks, unsigned threads, F&& work) {
  if (threads <= 1 || n_chunks <= 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) work(c);
    return;
  }
  std::vector<std::thread> pool;
  const unsigned n = std::min<unsigned>(threads, static_cast<unsigned>(n_chunks));
  for (unsigned t = 0; t < n; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t c = t; c < n_chunks; c += n) work(c);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

/// Mean coin-flip loss and its exact gradient, evaluated in T.
template <class T>
LossGrad<T> loss_and_grad(const HeadParams<T>& p, std::span<const StepSample> batch, std::uint64_t target_seed,
                          unsigned threads = 1) {
  if (batch.empty()) throw Error(Errc::EmptyDataset, "gradient of an empty batch");
  const std::size_t n_chunks = (batch.size() + kGradChunk - 1) / kGradChunk;
  std::vector<double> losses(n_chunks, 0.0);
  std::vector<HeadParams<T>> grads;
  grads.reserve(n_chunks);
  for (std::size_t c = 0; c < n_chunks; ++c) grads.push_back(HeadParams<T>::zeros(p.config));
  detail::run_chunks(n_chunks, threads, [&](std::size_t c) {
    const auto start = c * kGradChunk;
    const auto len = std::min(kGradChunk, batch.size() - start);
    losses[c] = detail::chunk_loss_sum(p, batch.subspan(start, len), target_seed, &grads[c]);
  });

  LossGrad<T> out{0.0, std::move(grads[0])};
  out.loss = losses[0];
  for (std::size_t c = 1; c < n_chunks; ++c) {
    out.loss += losses[c];
    HeadParams<T>::zip([](const char*, TensorKind, Tensor<T>& acc, Tensor<T>& part) { acc += part; }, out.grad,
                       grads[c]);
  }
  const T inv_n = T(1) / static_cast<T>(batch.size());
  out.loss /= static_cast<double>(batch.size());
  HeadParams<T>::zip([&](const char*, TensorKind, Tensor<T>& t) { t *= inv_n; }, out.grad);
  return out;
}

/// Mean over the batch of |v - c|^2.
template <class T>
double cfn_loss(const HeadParams<T>& p, std::span<const StepSample> batch, std::uint64_t target_seed,
                unsigned threads = 1) {
  if (batch.empty()) throw Error(Errc::EmptyDataset, "loss of an empty batch");
  const std::size_t n_chunks = (batch.size() + kGradChunk - 1) / kGradChunk;
  std::vector<double> losses(n_chunks, 0.0);
  detail::run_chunks(n_chunks, threads, [&](std::size_t c) {
    const auto start = c * kGradChunk;
    const auto len = std::min(kGradChunk, batch.size() - start);
    losses[c] = detail::chunk_loss_sum<T>(p, batch.subspan(start, len), target_seed, nullptr);
  });
  double sum = 0.0;
  for (double l : losses) sum += l;
  return sum / static_cast<double>(batch.size());
}

/// Exact gradient of cfn_loss for float-stored parameters, accumulated in double.
inline LossGrad<double> grad(const HeadParams<float>& p, std::span<const StepSample> batch, std::uint64_t target_seed,
                             unsigned threads = 1) {
  auto lg = loss_and_grad(p.cast<double>(), batch, target_seed, threads);
  bool finite = true;
  HeadParams<double>::zip([&](const char*, TensorKind, const Tensor<double>& t) { finite = finite && t.allFinite(); },
                          lg.grad);
  if (!finite) throw Error(Errc::NonFiniteGradient, "gradient contains a non-finite entry");
  return lg;
}

// ---------------------------------------------------------------------------
// Optimizer and training loop

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint32_t batch_size = 256;
  std::uint32_t steps = 10000;
  std::uint64_t shuffle_seed = 0;
  std::uint64_t target_seed = 0;
  std::optional<double> clip_norm;  // off unless set; 10.0 is the documented escape hatch
  std::uint32_t log_every = 10;
  unsigned threads = 1;

  void validate() const {
    if (!(learning_rate > 0.0)) throw Error(Errc::InvalidConfig, "train config 'learning_rate' must be > 0");
    if (batch_size < 1) throw Error(Errc::InvalidConfig, "train config 'batch_size' must be >= 1");
    if (!(weight_decay >= 0.0)) throw Error(Errc::InvalidConfig, "train config 'weight_decay' must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw Error(Errc::InvalidConfig, "train config moment coefficients must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) throw Error(Errc::InvalidConfig, "train config 'epsilon' must be > 0");
    if (clip_norm && !(*clip_norm > 0.0)) throw Error(Errc::InvalidConfig, "train config 'clip_norm' must be > 0");
    if (log_every < 1) throw Error(Errc::InvalidConfig, "train config 'log_every' must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},                 {"beta2", c.beta2},
                     {"epsilon", c.epsilon},             {"batch_size", c.batch_size},
                     {"steps", c.steps},                 {"shuffle_seed", c.shuffle_seed},
                     {"target_seed", c.target_seed},     {"log_every", c.log_every},
                     {"threads", c.threads}};
  j["clip_norm"] = c.clip_norm ? nlohmann::json(*c.clip_norm) : nlohmann::json(nullptr);
}

inline void update_from_json(TrainConfig& c, const nlohmann::json& j) {
  nlohmann::json cur = c;
  for (const auto& [key, value] : j.items()) {
    if (!cur.contains(key)) throw Error(Errc::InvalidConfig, "unknown train config key '" + key + "'");
    cur[key] = value;
  }
  try {
    c.learning_rate = cur.at("learning_rate").get<double>();
    c.weight_decay = cur.at("weight_decay").get<double>();
    c.beta1 = cur.at("beta1").get<double>();
    c.beta2 = cur.at("beta2").get<double>();
    c.epsilon = cur.at("epsilon").get<double>();
    c.batch_size = cur.at("batch_size").get<std::uint32_t>();
    c.steps = cur.at("steps").get<std::uint32_t>();
    c.shuffle_seed = cur.at("shuffle_seed").get<std::uint64_t>();
    c.target_seed = cur.at("target_seed").get<std::uint64_t>();
    c.log_every = cur.at("log_every").get<std::uint32_t>();
    c.threads = cur.at("threads").get<unsigned>();
    const auto& clip = cur.at("clip_norm");
    c.clip_norm = clip.is_null() ? std::nullopt : std::optional<double>(clip.get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidConfig, std::string("train config: ") + e.what());
  }
}

/// Decoupled weight decay Adam. Moments are kept in double; the parameters
/// themselves stay float.
class AdamW {
 public:
  AdamW(const HeadConfig& cfg, const TrainConfig& tc) : tc_(tc), m_(HeadParams<double>::zeros(cfg)), v_(HeadParams<double>::zeros(cfg)) {}

  void step(HeadParams<float>& p, const HeadParams<double>& g) {
    ++t_;
    const double bc1 = 1.0 - std::pow(tc_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(tc_.beta2, static_cast<double>(t_));
    const double lr = tc_.learning_rate;
    HeadParams<float>::zip(
        [&](const char*, TensorKind kind, Tensor<float>& w, const Tensor<double>& gr, Tensor<double>& m,
            Tensor<double>& v) {
          const double decay = kind == TensorKind::Weight ? 1.0 - lr * tc_.weight_decay : 1.0;
          for (Eigen::Index i = 0; i < w.size(); ++i) {
            const double gi = gr.data()[i];
            double& mi = m.data()[i];
            double& vi = v.data()[i];
            mi = tc_.beta1 * mi + (1.0 - tc_.beta1) * gi;
            vi = tc_.beta2 * vi + (1.0 - tc_.beta2) * gi * gi;
            const double update = (mi / bc1) / (std::sqrt(vi / bc2) + tc_.epsilon);
            w.data()[i] = static_cast<float>(static_cast<double>(w.data()[i]) * decay - lr * update);
          }
        },
        p, g, m_, v_);
  }

 private:
  TrainConfig tc_;
  HeadParams<double> m_;
  HeadParams<double> v_;
  std::uint64_t t_ = 0;
};

struct TrainReport {
  std::vector<std::pair<std::uint32_t, double>> loss_curve;
  double final_loss = 0.0;
  double wall_seconds = 0.0;
  HeadConfig head_config;
  TrainConfig train_config;

  std::string loss_csv() const {
    std::string out = "step,loss\n";
    char buf[64];
    for (const auto& [step, loss] : loss_curve) {
      std::snprintf(buf, sizeof buf, "%u,%.17g\n", step, loss);
      out += buf;
    }
    return out;
  }
};

/// Per-dimension z-score statistics over every step of the set; std floored.
inline std::pair<Vec<double>, Vec<double>> proprio_statistics(const RolloutSet& set) {
  const auto dx = static_cast<Eigen::Index>(set.header.d_x);
  Vec<double> mean = Vec<double>::Zero(dx);
  Vec<double> sq = Vec<double>::Zero(dx);
  std::size_t n = 0;
  for (const auto& tr : set.traces)
    for (const auto& s : tr.steps) {
      for (Eigen::Index i = 0; i < dx; ++i) mean(i) += s.x[static_cast<std::size_t>(i)];
      ++n;
    }
  if (n == 0) return {mean, Vec<double>::Ones(dx)};
  mean /= static_cast<double>(n);
  for (const auto& tr : set.traces)
    for (const auto& s : tr.steps)
      for (Eigen::Index i = 0; i < dx; ++i) {
        const double dlt = s.x[static_cast<std::size_t>(i)] - mean(i);
        sq(i) += dlt * dlt;
      }
  Vec<double> stddev = (sq / static_cast<double>(n)).cwiseSqrt().cwiseMax(kStdFloor);
  return {mean, stddev};
}

/// Checks that a head config's input dims agree with a rollout header.
inline void check_dims(const HeadConfig& cfg, const RolloutHeader& h) {
  if (cfg.d_v != h.d_v || cfg.d_l != h.d_l || cfg.d_x != h.d_x) {
    throw Error(Errc::DimensionMismatch, "head expects (d_v,d_l,d_x)=(" + std::to_string(cfg.d_v) + "," +
                                             std::to_string(cfg.d_l) + "," + std::to_string(cfg.d_x) +
                                             ") but data has (" + std::to_string(h.d_v) + "," +
                                             std::to_string(h.d_l) + "," + std::to_string(h.d_x) + ")");
  }
}

/// Trains on every step of a success-only set. Never reads outcome labels;
/// a set that carries them is refused.
inline std::pair<HeadParams<float>, TrainReport> train(const RolloutSet& sft, const HeadConfig& cfg,
                                                       const TrainConfig& tc) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  tc.validate();
  if (sft.role != Role::Sft) {
    throw Error(Errc::NotSuccessOnly, "training set is tagged '" + std::string(role_name(sft.role)) +
                                          "'; the head trains on success-only (sft) data");
  }
  validate(sft);
  check_dims(cfg, sft.header);
  const auto samples = step_samples(sft);
  if (samples.empty()) throw Error(Errc::EmptyDataset, "success-only set has no step samples");

  HeadParams<float> params = init_params(cfg);
  const auto [mean, stddev] = proprio_statistics(sft);
  params.proprio_mean = mean.cast<float>();
  params.proprio_std = stddev.cast<float>();

  AdamW opt(cfg, tc);
  Rng shuffle_rng(tc.shuffle_seed);
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle_rng.shuffle(order.begin(), order.end());
  std::size_t cursor = 0;
  std::vector<StepSample> batch;

  TrainReport report;
  report.head_config = cfg;
  report.train_config = tc;
  for (std::uint32_t step = 1; step <= tc.steps; ++step) {
    if (cursor >= order.size()) {
      shuffle_rng.shuffle(order.begin(), order.end());
      cursor = 0;
    }
    const std::size_t take = std::min<std::size_t>(tc.batch_size, order.size() - cursor);
    batch.clear();
    for (std::size_t i = 0; i < take; ++i) batch.push_back(samples[order[cursor + i]]);
    cursor += take;

    auto lg = loss_and_grad(params.cast<double>(), batch, tc.target_seed, tc.threads);
    if (!std::isfinite(lg.loss)) throw Error(Errc::DivergedLoss, "loss became non-finite at step " + std::to_string(step));
    double sq_norm = 0.0;
    HeadParams<double>::zip([&](const char*, TensorKind, const Tensor<double>& t) { sq_norm += t.squaredNorm(); },
                            lg.grad);
    if (!std::isfinite(sq_norm)) {
      throw Error(Errc::NonFiniteGradient, "gradient became non-finite at step " + std::to_string(step));
    }
    if (tc.clip_norm && std::sqrt(sq_norm) > *tc.clip_norm) {
      const double scale = *tc.clip_norm / std::sqrt(sq_norm);
      HeadParams<double>::zip([&](const char*, TensorKind, Tensor<double>& t) { t *= scale; }, lg.grad);
    }
    opt.step(params, lg.grad);
    if (step % tc.log_every == 0 || step == 1 || step == tc.steps) report.loss_curve.emplace_back(step, lg.loss);
  }
  if (!params.all_finite()) throw Error(Errc::DivergedLoss, "parameters became non-finite");

  report.final_loss = cfn_loss(params.cast<double>(), std::span<const StepSample>(samples), tc.target_seed, tc.threads);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(params), std::move(report)};
}

}  // namespace vlaconf
