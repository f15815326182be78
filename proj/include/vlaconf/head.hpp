#pragma once

// Step-conditioned coin-flip scoring head.
//
//   h_x  = E_x(normalize(x))
//   z    = M_mix([h_v; h_l; h_x])
//   h    = tanh(LN(W_proj z))
//   psi  = [Emb[k_hat]; k_bar],  k_hat = clip(k-1, 0, K-1),  k_bar = k_hat/(K-1)
//   c    = A_cond(psi)
//   (gamma, beta) = W_film c,  eta = sigmoid(W_gate c)
//   z~   = eta * LN((1+gamma) * h + beta) + (1-eta) * h
//   v    = q(z~),  s = |v|^2
//
// Two-layer perceptrons use ReLU between layers. With step conditioning off,
// v = q(h).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "vlaconf/error.hpp"
#include "vlaconf/rng.hpp"
#include "vlaconf/rollout.hpp"

namespace vlaconf {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kStdFloor = 1e-6;
inline constexpr double kGateBiasInit = -2.0;
inline constexpr double kGateWeightScale = 0.01;

struct HeadConfig {
  std::uint32_t d_v = 0;
  std::uint32_t d_l = 0;
  std::uint32_t d_x = 0;
  std::uint32_t ex_hidden = 128;
  std::uint32_t d_x_out = 128;
  std::uint32_t mix_hidden = 512;
  std::uint32_t d_z = 512;
  std::uint32_t proj_width = 256;
  std::uint32_t d_e = 32;
  std::uint32_t cond_hidden = 128;
  std::uint32_t d_c = 128;
  std::uint32_t q_hidden = 256;
  std::uint32_t d = 64;
  std::uint32_t horizon = 96;
  bool step_conditioning = true;
  std::uint64_t seed = 0;

  bool operator==(const HeadConfig&) const = default;

  void validate() const {
    const std::pair<const char*, std::uint32_t> dims[] = {
        {"d_v", d_v},       {"d_l", d_l},         {"d_x", d_x},   {"ex_hidden", ex_hidden}, {"d_x_out", d_x_out},
        {"mix_hidden", mix_hidden}, {"d_z", d_z}, {"proj_width", proj_width}, {"d_e", d_e},
        {"cond_hidden", cond_hidden}, {"d_c", d_c}, {"q_hidden", q_hidden}, {"d", d}};
    for (const auto& [name, v] : dims) {
      if (v == 0) throw Error(Errc::InvalidConfig, std::string("head config field '") + name + "' must be positive");
    }
    if (horizon < 2) throw Error(Errc::InvalidConfig, "head config field 'horizon' (K) must be >= 2");
  }
};

inline void to_json(nlohmann::json& j, const HeadConfig& c) {
  j = nlohmann::json{{"d_v", c.d_v},
                     {"d_l", c.d_l},
                     {"d_x", c.d_x},
                     {"ex_hidden", c.ex_hidden},
                     {"d_x_out", c.d_x_out},
                     {"mix_hidden", c.mix_hidden},
                     {"d_z", c.d_z},
                     {"proj_width", c.proj_width},
                     {"d_e", c.d_e},
                     {"cond_hidden", c.cond_hidden},
                     {"d_c", c.d_c},
                     {"q_hidden", c.q_hidden},
                     {"d", c.d},
                     {"horizon", c.horizon},
                     {"step_conditioning", c.step_conditioning},
                     {"seed", c.seed}};
}

/// Missing keys keep their current value; unknown keys are rejected.
inline void update_from_json(HeadConfig& c, const nlohmann::json& j) {
  nlohmann::json cur = c;
  for (const auto& [key, value] : j.items()) {
    if (!cur.contains(key)) throw Error(Errc::InvalidConfig, "unknown head config key '" + key + "'");
    cur[key] = value;
  }
  try {
    c.d_v = cur.at("d_v").get<std::uint32_t>();
    c.d_l = cur.at("d_l").get<std::uint32_t>();
    c.d_x = cur.at("d_x").get<std::uint32_t>();
    c.ex_hidden = cur.at("ex_hidden").get<std::uint32_t>();
    c.d_x_out = cur.at("d_x_out").get<std::uint32_t>();
    c.mix_hidden = cur.at("mix_hidden").get<std::uint32_t>();
    c.d_z = cur.at("d_z").get<std::uint32_t>();
    c.proj_width = cur.at("proj_width").get<std::uint32_t>();
    c.d_e = cur.at("d_e").get<std::uint32_t>();
    c.cond_hidden = cur.at("cond_hidden").get<std::uint32_t>();
    c.d_c = cur.at("d_c").get<std::uint32_t>();
    c.q_hidden = cur.at("q_hidden").get<std::uint32_t>();
    c.d = cur.at("d").get<std::uint32_t>();
    c.horizon = cur.at("horizon").get<std::uint32_t>();
    c.step_conditioning = cur.at("step_conditioning").get<bool>();
    c.seed = cur.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidConfig, std::string("head config: ") + e.what());
  }
}

template <class T>
using Tensor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

enum class TensorKind { Weight, Bias, NormAffine, Embedding };

template <class T>
struct Linear {
  Tensor<T> w;  // out x in
  Tensor<T> b;  // out x 1

  Linear() = default;
  Linear(Eigen::Index in, Eigen::Index out) : w(Tensor<T>::Zero(out, in)), b(Tensor<T>::Zero(out, 1)) {}

  /// Rows of `x` are samples.
  Tensor<T> apply(const Tensor<T>& x) const {
    Tensor<T> y = x * w.transpose();
    y.rowwise() += b.col(0).transpose();
    return y;
  }
};

template <class T>
struct Mlp2 {
  Linear<T> l1;
  Linear<T> l2;
};

template <class T>
struct NormAffine {
  Tensor<T> gain;
  Tensor<T> bias;

  NormAffine() = default;
  explicit NormAffine(Eigen::Index n) : gain(Tensor<T>::Ones(n, 1)), bias(Tensor<T>::Zero(n, 1)) {}
};

template <class T>
struct HeadParams {
  HeadConfig config;
  Mlp2<T> state_enc;
  Mlp2<T> mixer;
  Linear<T> proj;
  NormAffine<T> proj_ln;
  Tensor<T> step_emb;  // K x d_e
  Mlp2<T> cond;
  Linear<T> film;  // d_c -> 2H, gamma rows first
  Linear<T> gate;
  NormAffine<T> post_ln;
  Mlp2<T> coin;
  Vec<T> proprio_mean;
  Vec<T> proprio_std;

  HeadParams() = default;

  /// Zero-filled parameters with the shapes implied by `cfg`; unit proprio std.
  explicit HeadParams(const HeadConfig& cfg) : config(cfg) {
    cfg.validate();
    const auto mix_in = Eigen::Index(cfg.d_v) + cfg.d_l + cfg.d_x_out;
    state_enc = {Linear<T>(cfg.d_x, cfg.ex_hidden), Linear<T>(cfg.ex_hidden, cfg.d_x_out)};
    mixer = {Linear<T>(mix_in, cfg.mix_hidden), Linear<T>(cfg.mix_hidden, cfg.d_z)};
    proj = Linear<T>(cfg.d_z, cfg.proj_width);
    proj_ln = NormAffine<T>(cfg.proj_width);
    step_emb = Tensor<T>::Zero(cfg.horizon, cfg.d_e);
    cond = {Linear<T>(Eigen::Index(cfg.d_e) + 1, cfg.cond_hidden), Linear<T>(cfg.cond_hidden, cfg.d_c)};
    film = Linear<T>(cfg.d_c, 2 * Eigen::Index(cfg.proj_width));
    gate = Linear<T>(cfg.d_c, cfg.proj_width);
    post_ln = NormAffine<T>(cfg.proj_width);
    coin = {Linear<T>(cfg.proj_width, cfg.q_hidden), Linear<T>(cfg.q_hidden, cfg.d)};
    proprio_mean = Vec<T>::Zero(cfg.d_x);
    proprio_std = Vec<T>::Ones(cfg.d_x);
  }

  /// Same shapes with every entry zero; used for gradients and optimizer moments.
  static HeadParams zeros(const HeadConfig& cfg) {
    HeadParams z(cfg);
    zip([](const char*, TensorKind, Tensor<T>& t) { t.setZero(); }, z);
    z.proprio_std.setZero();
    return z;
  }

  /// Visits every trainable tensor of `ps...` in lockstep, in the fixed
  /// checkpoint order: f(name, kind, tensor_of_p0, tensor_of_p1, ...).
  template <class F, class... P>
  static void zip(F&& f, P&... ps) {
    f("state_enc.l1.w", TensorKind::Weight, ps.state_enc.l1.w...);
    f("state_enc.l1.b", TensorKind::Bias, ps.state_enc.l1.b...);
    f("state_enc.l2.w", TensorKind::Weight, ps.state_enc.l2.w...);
    f("state_enc.l2.b", TensorKind::Bias, ps.state_enc.l2.b...);
    f("mixer.l1.w", TensorKind::Weight, ps.mixer.l1.w...);
    f("mixer.l1.b", TensorKind::Bias, ps.mixer.l1.b...);
    f("mixer.l2.w", TensorKind::Weight, ps.mixer.l2.w...);
    f("mixer.l2.b", TensorKind::Bias, ps.mixer.l2.b...);
    f("proj.w", TensorKind::Weight, ps.proj.w...);
    f("proj.b", TensorKind::Bias, ps.proj.b...);
    f("proj_ln.gain", TensorKind::NormAffine, ps.proj_ln.gain...);
    f("proj_ln.bias", TensorKind::NormAffine, ps.proj_ln.bias...);
    f("step_emb", TensorKind::Embedding, ps.step_emb...);
    f("cond.l1.w", TensorKind::Weight, ps.cond.l1.w...);
    f("cond.l1.b", TensorKind::Bias, ps.cond.l1.b...);
    f("cond.l2.w", TensorKind::Weight, ps.cond.l2.w...);
    f("cond.l2.b", TensorKind::Bias, ps.cond.l2.b...);
    f("film.w", TensorKind::Weight, ps.film.w...);
    f("film.b", TensorKind::Bias, ps.film.b...);
    f("gate.w", TensorKind::Weight, ps.gate.w...);
    f("gate.b", TensorKind::Bias, ps.gate.b...);
    f("post_ln.gain", TensorKind::NormAffine, ps.post_ln.gain...);
    f("post_ln.bias", TensorKind::NormAffine, ps.post_ln.bias...);
    f("coin.l1.w", TensorKind::Weight, ps.coin.l1.w...);
    f("coin.l1.b", TensorKind::Bias, ps.coin.l1.b...);
    f("coin.l2.w", TensorKind::Weight, ps.coin.l2.w...);
    f("coin.l2.b", TensorKind::Bias, ps.coin.l2.b...);
  }

  template <class U>
  HeadParams<U> cast() const {
    HeadParams<U> out(config);
    zip([](const char*, TensorKind, const Tensor<T>& src, Tensor<U>& dst) { dst = src.template cast<U>(); }, *this,
        out);
    out.proprio_mean = proprio_mean.template cast<U>();
    out.proprio_std = proprio_std.template cast<U>();
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    zip([&](const char*, TensorKind, const Tensor<T>& t) { n += static_cast<std::size_t>(t.size()); }, *this);
    return n;
  }

  bool all_finite() const {
    bool ok = proprio_mean.allFinite() && proprio_std.allFinite();
    zip([&](const char*, TensorKind, const Tensor<T>& t) { ok = ok && t.allFinite(); }, *this);
    return ok;
  }
};

/// Deterministic per config seed. FiLM weights and bias start at zero and the
/// gate bias at -2, so the head begins as an unconditioned coin-flip network.
inline HeadParams<float> init_params(const HeadConfig& cfg) {
  HeadParams<float> p(cfg);
  Rng rng(cfg.seed);
  auto uniform_fill = [&](Tensor<float>& t, double bound) {
    for (Eigen::Index j = 0; j < t.cols(); ++j)
      for (Eigen::Index i = 0; i < t.rows(); ++i) t(i, j) = static_cast<float>(rng.uniform(-bound, bound));
  };
  HeadParams<float>::zip(
      [&](const char* name, TensorKind kind, Tensor<float>& t) {
        const std::string n = name;
        if (kind == TensorKind::Weight) {
          const double fan_in = static_cast<double>(t.cols());
          if (n == "film.w") {
            t.setZero();
          } else if (n == "gate.w") {
            uniform_fill(t, kGateWeightScale / std::sqrt(fan_in));
          } else {
            uniform_fill(t, 1.0 / std::sqrt(fan_in));
          }
        } else if (kind == TensorKind::Embedding) {
          for (Eigen::Index j = 0; j < t.cols(); ++j)
            for (Eigen::Index i = 0; i < t.rows(); ++i) t(i, j) = static_cast<float>(rng.normal());
        } else if (n == "gate.b") {
          t.setConstant(static_cast<float>(kGateBiasInit));
        }
      },
      p);
  return p;
}

struct StepDescriptor {
  std::uint32_t k_hat = 0;
  double k_bar = 0.0;
};

/// k_hat = clip(k-1, 0, K-1), k_bar = k_hat / (K-1).
inline StepDescriptor step_descriptor(std::uint32_t k, std::uint32_t horizon) {
  const std::uint32_t k_hat = std::min(k == 0 ? 0u : k - 1, horizon - 1);
  return {k_hat, static_cast<double>(k_hat) / static_cast<double>(horizon - 1)};
}

/// The descriptor plus its embedding row e_k.
template <class T>
std::pair<StepDescriptor, Vec<T>> step_descriptor(const HeadParams<T>& p, std::uint32_t k) {
  const auto sd = step_descriptor(k, p.config.horizon);
  return {sd, p.step_emb.row(sd.k_hat).transpose()};
}

namespace detail {

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return a.cwiseMax(T(0));
}

template <class T>
struct LayerNormOut {
  Tensor<T> normed;  // pre-affine
  Vec<T> inv_std;    // per row
  Tensor<T> out;
};

template <class T>
LayerNormOut<T> layer_norm(const Tensor<T>& x, const NormAffine<T>& aff) {
  LayerNormOut<T> r;
  const Vec<T> mu = x.rowwise().mean();
  Tensor<T> centered = x.colwise() - mu;
  const Vec<T> var = centered.array().square().rowwise().mean();
  r.inv_std = (var.array() + T(kLayerNormEps)).sqrt().inverse();
  r.normed = centered.array().colwise() * r.inv_std.array();
  r.out = r.normed.array().rowwise() * aff.gain.col(0).transpose().array();
  r.out.rowwise() += aff.bias.col(0).transpose();
  return r;
}

template <class T>
Tensor<T> normalize_state(const HeadParams<T>& p, const Tensor<T>& x) {
  const Vec<T> inv = p.proprio_std.cwiseMax(T(kStdFloor)).cwiseInverse();
  Tensor<T> out = x.rowwise() - p.proprio_mean.transpose();
  return out.array().rowwise() * inv.transpose().array();
}

}  // namespace detail

/// A batch of step records laid out as sample-per-row matrices.
template <class T>
struct StepBatch {
  Tensor<T> h_v;
  Tensor<T> h_l;
  Tensor<T> x;
  std::vector<std::uint32_t> k;

  Eigen::Index size() const { return h_v.rows(); }
};

template <class T>
StepBatch<T> make_batch(std::span<const StepRecord* const> recs, const HeadConfig& cfg) {
  const auto n = static_cast<Eigen::Index>(recs.size());
  StepBatch<T> b{Tensor<T>(n, cfg.d_v), Tensor<T>(n, cfg.d_l), Tensor<T>(n, cfg.d_x), {}};
  b.k.reserve(recs.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const StepRecord& r = *recs[static_cast<std::size_t>(i)];
    if (r.h_v.size() != cfg.d_v || r.h_l.size() != cfg.d_l || r.x.size() != cfg.d_x) {
      throw Error(Errc::DimensionMismatch, "step record dims (" + std::to_string(r.h_v.size()) + "," +
                                               std::to_string(r.h_l.size()) + "," + std::to_string(r.x.size()) +
                                               ") vs head (" + std::to_string(cfg.d_v) + "," +
                                               std::to_string(cfg.d_l) + "," + std::to_string(cfg.d_x) + ")");
    }
    for (std::uint32_t c = 0; c < cfg.d_v; ++c) b.h_v(i, c) = static_cast<T>(r.h_v[c]);
    for (std::uint32_t c = 0; c < cfg.d_l; ++c) b.h_l(i, c) = static_cast<T>(r.h_l[c]);
    for (std::uint32_t c = 0; c < cfg.d_x; ++c) b.x(i, c) = static_cast<T>(r.x[c]);
    b.k.push_back(r.k);
  }
  if (!b.h_v.allFinite() || !b.h_l.allFinite() || !b.x.allFinite()) {
    throw Error(Errc::NonFiniteInput, "step batch contains a non-finite feature");
  }
  return b;
}

/// Every intermediate of a batched forward pass, kept for backpropagation.
template <class T>
struct ForwardCache {
  Tensor<T> x_norm, a_state, h_x;
  Tensor<T> concat, a_mix, z;
  detail::LayerNormOut<T> proj_ln;
  Tensor<T> h;
  std::vector<std::uint32_t> k_hat;
  Tensor<T> psi, a_cond, c;
  Tensor<T> gamma, beta, eta;
  Tensor<T> modulated;
  detail::LayerNormOut<T> post_ln;
  Tensor<T> z_tilde;
  Tensor<T> a_coin;
  Tensor<T> v;

  Vec<T> scores() const { return v.rowwise().squaredNorm(); }
};

template <class T>
ForwardCache<T> forward(const HeadParams<T>& p, const StepBatch<T>& b) {
  const auto& cfg = p.config;
  ForwardCache<T> fc;
  fc.x_norm = detail::normalize_state(p, b.x);
  fc.a_state = p.state_enc.l1.apply(fc.x_norm);
  fc.h_x = p.state_enc.l2.apply(detail::relu(fc.a_state));

  fc.concat.resize(b.size(), Eigen::Index(cfg.d_v) + cfg.d_l + cfg.d_x_out);
  fc.concat << b.h_v, b.h_l, fc.h_x;
  fc.a_mix = p.mixer.l1.apply(fc.concat);
  fc.z = p.mixer.l2.apply(detail::relu(fc.a_mix));

  fc.proj_ln = detail::layer_norm(p.proj.apply(fc.z), p.proj_ln);
  fc.h = fc.proj_ln.out.array().tanh();

  if (cfg.step_conditioning) {
    const Eigen::Index H = cfg.proj_width;
    fc.psi.resize(b.size(), Eigen::Index(cfg.d_e) + 1);
    fc.k_hat.resize(b.k.size());
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      const auto sd = step_descriptor(b.k[static_cast<std::size_t>(i)], cfg.horizon);
      fc.k_hat[static_cast<std::size_t>(i)] = sd.k_hat;
      fc.psi.row(i).head(cfg.d_e) = p.step_emb.row(sd.k_hat);
      fc.psi(i, cfg.d_e) = static_cast<T>(sd.k_bar);
    }
    fc.a_cond = p.cond.l1.apply(fc.psi);
    fc.c = p.cond.l2.apply(detail::relu(fc.a_cond));
    const Tensor<T> film = p.film.apply(fc.c);
    fc.gamma = film.leftCols(H);
    fc.beta = film.rightCols(H);
    fc.eta = (T(1) / (T(1) + (-p.gate.apply(fc.c).array()).exp())).matrix();
    fc.modulated = ((fc.gamma.array() + T(1)) * fc.h.array() + fc.beta.array()).matrix();
    fc.post_ln = detail::layer_norm(fc.modulated, p.post_ln);
    fc.z_tilde = (fc.eta.array() * fc.post_ln.out.array() + (T(1) - fc.eta.array()) * fc.h.array()).matrix();
  } else {
    fc.z_tilde = fc.h;
  }

  fc.a_coin = p.coin.l1.apply(fc.z_tilde);
  fc.v = p.coin.l2.apply(detail::relu(fc.a_coin));
  return fc;
}

template <class T>
struct StepScore {
  Vec<T> v;
  T s = T(0);
};

/// h_x = E_x(normalize(x)).
template <class T>
Vec<T> encode_state(const HeadParams<T>& p, std::span<const float> x) {
  if (x.size() != p.config.d_x) throw Error(Errc::DimensionMismatch, "state vector has wrong length");
  Tensor<T> xm(1, static_cast<Eigen::Index>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) throw Error(Errc::NonFiniteInput, "state vector entry " + std::to_string(i));
    xm(0, static_cast<Eigen::Index>(i)) = static_cast<T>(x[i]);
  }
  const Tensor<T> a = p.state_enc.l1.apply(detail::normalize_state(p, xm));
  return p.state_enc.l2.apply(detail::relu(a)).row(0).transpose();
}

/// z = M_mix([h_v; h_l; h_x]).
template <class T>
Vec<T> mix_features(const HeadParams<T>& p, const Vec<T>& h_v, const Vec<T>& h_l, const Vec<T>& h_x) {
  const auto& cfg = p.config;
  if (h_v.size() != cfg.d_v || h_l.size() != cfg.d_l || h_x.size() != cfg.d_x_out) {
    throw Error(Errc::DimensionMismatch, "mixer input dims do not match head config");
  }
  Tensor<T> cat(1, h_v.size() + h_l.size() + h_x.size());
  cat << h_v.transpose(), h_l.transpose(), h_x.transpose();
  const Tensor<T> a = p.mixer.l1.apply(cat);
  return p.mixer.l2.apply(detail::relu(a)).row(0).transpose();
}

template <class T>
StepScore<T> score_step(const HeadParams<T>& p, const StepRecord& rec) {
  const StepRecord* one[] = {&rec};
  const auto fc = forward(p, make_batch<T>(one, p.config));
  StepScore<T> out;
  out.v = fc.v.row(0).transpose();
  out.s = out.v.squaredNorm();
  return out;
}

/// Per-step scores for a list of records, evaluated in batches.
template <class T>
std::vector<double> score_steps(const HeadParams<T>& p, std::span<const StepRecord> recs,
                                std::size_t batch_size = 256) {
  std::vector<double> out;
  out.reserve(recs.size());
  std::vector<const StepRecord*> ptrs;
  for (std::size_t start = 0; start < recs.size(); start += batch_size) {
    const std::size_t end = std::min(recs.size(), start + batch_size);
    ptrs.clear();
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&recs[i]);
    const auto fc = forward(p, make_batch<T>(ptrs, p.config));
    const Vec<T> s = fc.scores();
    for (Eigen::Index i = 0; i < s.size(); ++i) out.push_back(static_cast<double>(s(i)));
  }
  return out;
}

}  // namespace vlaconf
