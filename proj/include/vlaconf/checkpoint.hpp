#pragma once

// "VLAC" head checkpoint, little-endian:
//   "VLAC" | version u32 | config_len u32 | config JSON (UTF-8, sorted keys)
//   | param_count u64 | f32[param_count] in HeadParams::zip order, each tensor
//     column-major | D_x u32 | proprio mean f32[D_x] | proprio std f32[D_x]

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "vlaconf/head.hpp"
#include "vlaconf/rollout.hpp"

namespace vlaconf {

inline constexpr std::array<char, 4> kCheckpointMagic{'V', 'L', 'A', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<char> encode_checkpoint(const HeadParams<float>& p) {
  std::vector<char> buf;
  detail::ByteWriter w(buf);
  w.bytes(std::string_view(kCheckpointMagic.data(), kCheckpointMagic.size()));
  w.u32(kCheckpointVersion);
  const std::string cfg = nlohmann::json(p.config).dump();
  w.u32(static_cast<std::uint32_t>(cfg.size()));
  w.bytes(cfg);
  w.u64(p.param_count());
  HeadParams<float>::zip(
      [&](const char*, TensorKind, const Tensor<float>& t) { w.f32s({t.data(), static_cast<std::size_t>(t.size())}); },
      p);
  w.u32(static_cast<std::uint32_t>(p.proprio_mean.size()));
  w.f32s({p.proprio_mean.data(), static_cast<std::size_t>(p.proprio_mean.size())});
  w.f32s({p.proprio_std.data(), static_cast<std::size_t>(p.proprio_std.size())});
  return buf;
}

inline HeadParams<float> decode_checkpoint(std::span<const char> bytes) {
  if (bytes.size() < 4 || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
    throw Error(Errc::BadMagic, "expected \"VLAC\"");
  }
  detail::ByteReader r(bytes.subspan(4));
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw Error(Errc::VersionUnsupported, "checkpoint version " + std::to_string(version));
  }
  HeadConfig cfg;
  try {
    update_from_json(cfg, nlohmann::json::parse(r.bytes(r.u32())));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::CorruptPayload, std::string("checkpoint config: ") + e.what());
  }
  HeadParams<float> p(cfg);
  if (r.u64() != p.param_count()) throw Error(Errc::CorruptPayload, "parameter count does not match config");
  std::vector<float> tmp;
  HeadParams<float>::zip(
      [&](const char*, TensorKind, Tensor<float>& t) {
        r.f32s(tmp, static_cast<std::size_t>(t.size()));
        std::copy(tmp.begin(), tmp.end(), t.data());
      },
      p);
  if (r.u32() != cfg.d_x) throw Error(Errc::CorruptPayload, "proprio statistics length does not match d_x");
  r.f32s(tmp, cfg.d_x);
  std::copy(tmp.begin(), tmp.end(), p.proprio_mean.data());
  r.f32s(tmp, cfg.d_x);
  std::copy(tmp.begin(), tmp.end(), p.proprio_std.data());
  if (r.remaining() != 0) throw Error(Errc::CorruptPayload, "trailing bytes in checkpoint");
  if (!p.all_finite()) throw Error(Errc::CorruptPayload, "non-finite parameter in checkpoint");
  return p;
}

inline void save_checkpoint(const HeadParams<float>& p, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(p));
}

inline HeadParams<float> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

}  // namespace vlaconf
