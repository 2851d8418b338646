#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace histonorm {

enum class ErrorCode {
  InvalidArgument,
  TooFewTissuePixels,
  DegenerateStainCloud,
  SingularBasis,
  ZeroSaturation,
  EmptyRegion,
  InsufficientCandidates,
  TargetTooSmall,
  DimensionMismatch,
  EmptyInput,
  PredictorFailure,
  NormalizationFailed,
  ParseError,
  MissingFile,
  DuplicateId,
  ValidationFailed,
  LabelOverflow,
  BadMagic,
  IoError,
  StageFailure,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::TooFewTissuePixels: return "TooFewTissuePixels";
    case ErrorCode::DegenerateStainCloud: return "DegenerateStainCloud";
    case ErrorCode::SingularBasis: return "SingularBasis";
    case ErrorCode::ZeroSaturation: return "ZeroSaturation";
    case ErrorCode::EmptyRegion: return "EmptyRegion";
    case ErrorCode::InsufficientCandidates: return "InsufficientCandidates";
    case ErrorCode::TargetTooSmall: return "TargetTooSmall";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::PredictorFailure: return "PredictorFailure";
    case ErrorCode::NormalizationFailed: return "NormalizationFailed";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::ValidationFailed: return "ValidationFailed";
    case ErrorCode::LabelOverflow: return "LabelOverflow";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::StageFailure: return "StageFailure";
  }
  return "Unknown";
}

/// Exception carrying a machine-readable code next to the message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace histonorm
