#pragma once

// Rollout data model and the "VLAF" binary feature format.
//
// Layout (all little-endian):
//   "VLAF" | version u32 | D_v u32 | D_l u32 | D_x u32 | trace_count u32
//   per trace: id u32 | instruction (u32 length + UTF-8 bytes) | T u32 |
//              outcome i8 (-1 absent, 0/1) | T x (h_v f32[D_v], h_l f32[D_l], x f32[D_x])

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vlaconf/error.hpp"
#include "vlaconf/rng.hpp"

namespace vlaconf {

inline constexpr std::array<char, 4> kRolloutMagic{'V', 'L', 'A', 'F'};
inline constexpr std::uint32_t kRolloutVersion = 1;

/// Backbone hidden states for one step: row-major n_tokens x dim with a validity mask.
struct TokenFeatures {
  std::size_t dim = 0;
  std::vector<float> tokens;
  std::vector<std::uint8_t> mask;

  std::size_t n_tokens() const { return mask.size(); }
};

/// Mean of the rows whose mask entry is set. Accumulates in double.
inline std::vector<float> masked_mean_pool(const TokenFeatures& tf) {
  if (tf.dim == 0 || tf.tokens.size() != tf.mask.size() * tf.dim) {
    throw Error(Errc::DimensionMismatch, "token matrix is " + std::to_string(tf.tokens.size()) +
                                             " values for " + std::to_string(tf.mask.size()) +
                                             " mask entries of dim " + std::to_string(tf.dim));
  }
  std::vector<double> acc(tf.dim, 0.0);
  std::size_t valid = 0;
  for (std::size_t r = 0; r < tf.mask.size(); ++r) {
    if (!tf.mask[r]) continue;
    ++valid;
    const float* row = tf.tokens.data() + r * tf.dim;
    for (std::size_t c = 0; c < tf.dim; ++c) acc[c] += row[c];
  }
  if (valid == 0) throw Error(Errc::AllMasked, "no valid token in mask");
  std::vector<float> out(tf.dim);
  for (std::size_t c = 0; c < tf.dim; ++c) out[c] = static_cast<float>(acc[c] / static_cast<double>(valid));
  return out;
}

struct StepRecord {
  std::vector<float> h_v;
  std::vector<float> h_l;
  std::vector<float> x;
  std::uint32_t k = 1;

  bool operator==(const StepRecord&) const = default;
};

struct RolloutTrace {
  std::uint32_t rollout_id = 0;
  std::string instruction_id;
  std::vector<StepRecord> steps;
  std::optional<std::uint8_t> outcome;

  std::uint32_t length() const { return static_cast<std::uint32_t>(steps.size()); }
  bool operator==(const RolloutTrace&) const = default;
};

enum class Role { Sft, Cal, Eval };

inline std::string_view role_name(Role r) {
  switch (r) {
    case Role::Sft: return "sft";
    case Role::Cal: return "cal";
    case Role::Eval: return "eval";
  }
  return "?";
}

struct RolloutHeader {
  std::uint32_t d_v = 0;
  std::uint32_t d_l = 0;
  std::uint32_t d_x = 0;
  std::uint32_t version = kRolloutVersion;

  bool operator==(const RolloutHeader&) const = default;
};

struct RolloutSet {
  RolloutHeader header;
  std::vector<RolloutTrace> traces;
  Role role = Role::Sft;

  bool labeled() const { return role != Role::Sft; }
  std::size_t step_count() const {
    std::size_t n = 0;
    for (const auto& t : traces) n += t.steps.size();
    return n;
  }
  bool operator==(const RolloutSet&) const = default;
};

namespace detail {

inline bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float f) { return std::isfinite(f); });
}

}  // namespace detail

/// Throws DimensionMismatch / CorruptPayload / NotSuccessOnly on the first violated invariant.
inline void validate(const RolloutSet& set) {
  const auto& h = set.header;
  std::unordered_set<std::uint32_t> ids;
  for (std::size_t ti = 0; ti < set.traces.size(); ++ti) {
    const auto& tr = set.traces[ti];
    const std::string where = "trace " + std::to_string(ti);
    if (!ids.insert(tr.rollout_id).second) {
      throw Error(Errc::CorruptPayload, where + ": duplicate rollout_id " + std::to_string(tr.rollout_id));
    }
    if (tr.steps.empty()) throw Error(Errc::CorruptPayload, where + ": empty trace");
    if (set.role == Role::Sft && tr.outcome) {
      throw Error(Errc::NotSuccessOnly, where + ": sft set must not carry outcome labels");
    }
    if (set.role != Role::Sft && !tr.outcome) {
      throw Error(Errc::CorruptPayload, where + ": labeled set requires an outcome on every trace");
    }
    if (tr.outcome && *tr.outcome > 1) throw Error(Errc::CorruptPayload, where + ": outcome not in {0,1}");
    for (std::size_t si = 0; si < tr.steps.size(); ++si) {
      const auto& s = tr.steps[si];
      if (s.k != si + 1) {
        throw Error(Errc::CorruptPayload, where + ": step " + std::to_string(si) + " has k=" + std::to_string(s.k));
      }
      if (s.h_v.size() != h.d_v || s.h_l.size() != h.d_l || s.x.size() != h.d_x) {
        throw Error(Errc::DimensionMismatch, where + ", step " + std::to_string(s.k) + ": dims (" +
                                                 std::to_string(s.h_v.size()) + "," + std::to_string(s.h_l.size()) +
                                                 "," + std::to_string(s.x.size()) + ") vs header (" +
                                                 std::to_string(h.d_v) + "," + std::to_string(h.d_l) + "," +
                                                 std::to_string(h.d_x) + ")");
      }
      if (!detail::all_finite(s.h_v) || !detail::all_finite(s.h_l) || !detail::all_finite(s.x)) {
        throw Error(Errc::CorruptPayload, where + ", step " + std::to_string(s.k) + ": non-finite value");
      }
    }
  }
}

namespace detail {

class ByteWriter {
 public:
  explicit ByteWriter(std::vector<char>& out) : out_(out) {}

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  }
  void i8(std::int8_t v) { out_.push_back(static_cast<char>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f32s(std::span<const float> v) {
    for (float f : v) f32(f);
  }
  void bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }

 private:
  std::vector<char>& out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const char> in) : in_(in) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    const std::uint64_t hi = u32();
    return lo | (hi << 32);
  }
  std::int8_t i8() {
    need(1);
    return static_cast<std::int8_t>(in_[pos_++]);
  }
  float f32() { return std::bit_cast<float>(u32()); }
  void f32s(std::vector<float>& out, std::size_t n) {
    need(4 * n);
    out.resize(n);
    for (auto& f : out) f = f32();
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(in_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw Error(Errc::CorruptPayload, "truncated payload at byte " + std::to_string(pos_));
  }

  std::span<const char> in_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return buf;
}

inline void write_file(const std::filesystem::path& path, std::span<const char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoError, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::IoError, "short write to " + path.string());
}

}  // namespace detail

inline std::vector<char> encode_rollouts(const RolloutSet& set) {
  validate(set);
  std::vector<char> buf;
  detail::ByteWriter w(buf);
  w.bytes(std::string_view(kRolloutMagic.data(), kRolloutMagic.size()));
  w.u32(kRolloutVersion);
  w.u32(set.header.d_v);
  w.u32(set.header.d_l);
  w.u32(set.header.d_x);
  w.u32(static_cast<std::uint32_t>(set.traces.size()));
  for (const auto& tr : set.traces) {
    w.u32(tr.rollout_id);
    w.u32(static_cast<std::uint32_t>(tr.instruction_id.size()));
    w.bytes(tr.instruction_id);
    w.u32(tr.length());
    w.i8(tr.outcome ? static_cast<std::int8_t>(*tr.outcome) : std::int8_t{-1});
    for (const auto& s : tr.steps) {
      w.f32s(s.h_v);
      w.f32s(s.h_l);
      w.f32s(s.x);
    }
  }
  return buf;
}

/// Decodes and validates. The role is Sft when no trace carries an outcome and
/// Eval when every trace does; callers retag to Cal as needed.
inline RolloutSet decode_rollouts(std::span<const char> bytes) {
  if (bytes.size() < 4 || !std::equal(kRolloutMagic.begin(), kRolloutMagic.end(), bytes.begin())) {
    throw Error(Errc::BadMagic, "expected \"VLAF\"");
  }
  detail::ByteReader r(bytes.subspan(4));
  RolloutSet set;
  set.header.version = r.u32();
  if (set.header.version != kRolloutVersion) {
    throw Error(Errc::VersionUnsupported, "rollout format version " + std::to_string(set.header.version));
  }
  set.header.d_v = r.u32();
  set.header.d_l = r.u32();
  set.header.d_x = r.u32();
  const std::uint32_t count = r.u32();
  std::size_t labeled = 0;
  for (std::uint32_t t = 0; t < count; ++t) {
    RolloutTrace tr;
    tr.rollout_id = r.u32();
    tr.instruction_id = r.bytes(r.u32());
    const std::uint32_t len = r.u32();
    const std::int8_t outcome = r.i8();
    if (outcome == 0 || outcome == 1) {
      tr.outcome = static_cast<std::uint8_t>(outcome);
      ++labeled;
    } else if (outcome != -1) {
      throw Error(Errc::CorruptPayload, "outcome byte " + std::to_string(outcome));
    }
    const std::size_t per_step = 4ull * (set.header.d_v + set.header.d_l + set.header.d_x);
    if (per_step != 0 && r.remaining() / per_step < len) {
      throw Error(Errc::CorruptPayload, "trace " + std::to_string(t) + " declares " + std::to_string(len) + " steps");
    }
    tr.steps.resize(len);
    for (std::uint32_t k = 0; k < len; ++k) {
      auto& s = tr.steps[k];
      s.k = k + 1;
      r.f32s(s.h_v, set.header.d_v);
      r.f32s(s.h_l, set.header.d_l);
      r.f32s(s.x, set.header.d_x);
    }
    set.traces.push_back(std::move(tr));
  }
  if (r.remaining() != 0) throw Error(Errc::CorruptPayload, "trailing bytes after last trace");
  if (labeled != 0 && labeled != count) {
    throw Error(Errc::CorruptPayload, "outcome labels present on only some traces");
  }
  set.role = labeled == 0 ? Role::Sft : Role::Eval;
  validate(set);
  return set;
}

inline void write_rollout_file(const RolloutSet& set, const std::filesystem::path& path) {
  const auto bytes = encode_rollouts(set);
  detail::write_file(path, bytes);
}

inline RolloutSet load_rollout_file(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  return decode_rollouts(bytes);
}

/// "<dir>/<stem>.manifest.json" next to a rollout file.
inline std::filesystem::path manifest_path(const std::filesystem::path& rollout_path) {
  auto p = rollout_path;
  p.replace_extension(".manifest.json");
  return p;
}

inline void write_manifest(const std::filesystem::path& rollout_path, const nlohmann::json& meta) {
  const std::string s = meta.dump(2) + "\n";
  detail::write_file(manifest_path(rollout_path), s);
}

inline std::optional<nlohmann::json> read_manifest(const std::filesystem::path& rollout_path) {
  const auto p = manifest_path(rollout_path);
  if (!std::filesystem::exists(p)) return std::nullopt;
  const auto bytes = detail::read_file(p);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::CorruptPayload, "manifest " + p.string() + ": " + e.what());
  }
}

/// Deterministic two-way partition at trace granularity. The first part takes
/// round(fractions.first * n) traces drawn by a seeded shuffle; both parts keep
/// file order.
inline std::pair<RolloutSet, RolloutSet> split_dataset(const RolloutSet& set, std::pair<double, double> fractions,
                                                       std::uint64_t seed) {
  if (set.traces.empty()) throw Error(Errc::EmptySet, "cannot split an empty rollout set");
  const auto [f0, f1] = fractions;
  if (!(f0 >= 0.0) || !(f1 >= 0.0) || std::abs(f0 + f1 - 1.0) > 1e-9) {
    throw Error(Errc::InvalidConfig, "split fractions must be non-negative and sum to 1");
  }
  const std::size_t n = set.traces.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  const auto n0 = std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(f0 * static_cast<double>(n))));
  std::vector<std::size_t> first(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n0));
  std::vector<std::size_t> second(order.begin() + static_cast<std::ptrdiff_t>(n0), order.end());
  std::sort(first.begin(), first.end());
  std::sort(second.begin(), second.end());

  auto take = [&](const std::vector<std::size_t>& idx) {
    RolloutSet out;
    out.header = set.header;
    out.role = set.role;
    out.traces.reserve(idx.size());
    for (auto i : idx) out.traces.push_back(set.traces[i]);
    return out;
  };
  return {take(first), take(second)};
}

}  // namespace vlaconf
