#pragma once

// Shared fixtures and reference oracles for the unit tests. The reference
// forward pass is written with plain loops in double precision so that it
// shares no code with the Eigen implementation under test.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "vlaconf/vlaconf.hpp"

namespace vlaconf::testing {

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("vlaconf_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline void expect_errc(Errc code, const std::function<void()>& f) {
  try {
    f();
    ADD_FAILURE() << "expected " << errc_name(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

inline StepRecord random_record(const HeadConfig& cfg, Rng& rng, std::uint32_t k) {
  StepRecord s;
  s.k = k;
  for (std::uint32_t i = 0; i < cfg.d_v; ++i) s.h_v.push_back(static_cast<float>(rng.normal()));
  for (std::uint32_t i = 0; i < cfg.d_l; ++i) s.h_l.push_back(static_cast<float>(rng.normal()));
  for (std::uint32_t i = 0; i < cfg.d_x; ++i) s.x.push_back(static_cast<float>(rng.normal()));
  return s;
}

inline HeadConfig small_config(bool step_conditioning = true, std::uint64_t seed = 3) {
  HeadConfig c;
  c.d_v = 6;
  c.d_l = 4;
  c.d_x = 3;
  c.ex_hidden = 8;
  c.d_x_out = 5;
  c.mix_hidden = 12;
  c.d_z = 9;
  c.proj_width = 10;
  c.d_e = 4;
  c.cond_hidden = 7;
  c.d_c = 6;
  c.q_hidden = 11;
  c.d = 8;
  c.horizon = 12;
  c.step_conditioning = step_conditioning;
  c.seed = seed;
  return c;
}

namespace ref {

using Vecd = std::vector<double>;

inline Vecd linear(const Linear<float>& l, const Vecd& x) {
  Vecd y(static_cast<std::size_t>(l.w.rows()));
  for (Eigen::Index o = 0; o < l.w.rows(); ++o) {
    double acc = l.b(o, 0);
    for (Eigen::Index i = 0; i < l.w.cols(); ++i) acc += static_cast<double>(l.w(o, i)) * x[static_cast<std::size_t>(i)];
    y[static_cast<std::size_t>(o)] = acc;
  }
  return y;
}

inline Vecd relu(Vecd x) {
  for (auto& v : x) v = v > 0.0 ? v : 0.0;
  return x;
}

inline Vecd mlp(const Mlp2<float>& m, const Vecd& x) { return linear(m.l2, relu(linear(m.l1, x))); }

inline Vecd layer_norm(const Vecd& x, const NormAffine<float>& a) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  Vecd y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    y[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * a.gain(ii, 0) + a.bias(ii, 0);
  }
  return y;
}

inline Vecd to_d(const std::vector<float>& v) { return Vecd(v.begin(), v.end()); }

/// Full head pipeline for one record; returns v.
inline Vecd forward(const HeadParams<float>& p, const StepRecord& r) {
  const auto& c = p.config;
  Vecd xn(c.d_x);
  for (std::uint32_t i = 0; i < c.d_x; ++i) {
    const double sd = std::max(static_cast<double>(p.proprio_std(i)), 1e-6);
    xn[i] = (r.x[i] - static_cast<double>(p.proprio_mean(i))) / sd;
  }
  const Vecd hx = mlp(p.state_enc, xn);
  Vecd cat = to_d(r.h_v);
  cat.insert(cat.end(), r.h_l.begin(), r.h_l.end());
  cat.insert(cat.end(), hx.begin(), hx.end());
  const Vecd z = mlp(p.mixer, cat);
  Vecd h = layer_norm(linear(p.proj, z), p.proj_ln);
  for (auto& v : h) v = std::tanh(v);

  Vecd zt = h;
  if (c.step_conditioning) {
    const std::uint32_t kh = r.k <= 1 ? 0 : std::min(r.k - 1, c.horizon - 1);
    Vecd psi(c.d_e + 1);
    for (std::uint32_t i = 0; i < c.d_e; ++i) psi[i] = p.step_emb(kh, i);
    psi[c.d_e] = static_cast<double>(kh) / static_cast<double>(c.horizon - 1);
    const Vecd cv = mlp(p.cond, psi);
    const Vecd film = linear(p.film, cv);
    const Vecd gate = linear(p.gate, cv);
    const std::size_t H = h.size();
    Vecd mod(H);
    for (std::size_t i = 0; i < H; ++i) mod[i] = (1.0 + film[i]) * h[i] + film[H + i];
    const Vecd ln = layer_norm(mod, p.post_ln);
    for (std::size_t i = 0; i < H; ++i) {
      const double eta = 1.0 / (1.0 + std::exp(-gate[i]));
      zt[i] = eta * ln[i] + (1.0 - eta) * h[i];
    }
  }
  return mlp(p.coin, zt);
}

inline double sq_norm(const Vecd& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

}  // namespace ref

}  // namespace vlaconf::testing
