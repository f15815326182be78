#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vlaconf {

enum class Errc {
  AllMasked,
  DimensionMismatch,
  IoError,
  BadMagic,
  VersionUnsupported,
  CorruptPayload,
  EmptySet,
  NonFiniteInput,
  PackOverflow,
  NonFiniteGradient,
  EmptyDataset,
  DivergedLoss,
  EmptyPrefix,
  LengthMismatch,
  InvalidConfig,
  UnknownSuite,
  EmptyInput,
  NotSuccessOnly,
};

inline std::string_view errc_name(Errc e) {
  switch (e) {
    case Errc::AllMasked: return "AllMasked";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::IoError: return "IoError";
    case Errc::BadMagic: return "BadMagic";
    case Errc::VersionUnsupported: return "VersionUnsupported";
    case Errc::CorruptPayload: return "CorruptPayload";
    case Errc::EmptySet: return "EmptySet";
    case Errc::NonFiniteInput: return "NonFiniteInput";
    case Errc::PackOverflow: return "PackOverflow";
    case Errc::NonFiniteGradient: return "NonFiniteGradient";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::DivergedLoss: return "DivergedLoss";
    case Errc::EmptyPrefix: return "EmptyPrefix";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::UnknownSuite: return "UnknownSuite";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::NotSuccessOnly: return "NotSuccessOnly";
  }
  return "Unknown";
}

/// Every failure in the library is reported as an Error carrying a code.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace vlaconf
