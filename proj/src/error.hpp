#pragma once

#include <stdexcept>
#include <string>

namespace gatedformer {

// Stable failure categories; mirrored one-to-one by the gf_status codes of
// the public C API.
enum class ErrorCode : int {
  ShapeMismatch = 1,
  AllMasked = 2,
  NotScalar = 3,
  NondeterministicFunction = 4,
  OddDimension = 5,
  IndivisibleHeads = 6,
  InvalidPlacement = 7,
  OutOfVocab = 8,
  ConfigError = 9,
  IoError = 10,
  EmptyCorpus = 11,
  CorpusTooSmall = 12,
  DivergedLoss = 13,
  VersionMismatch = 14,
  ChecksumMismatch = 15,
  NoGates = 16,
  EmptyTensor = 17,
  NonFinite = 18,
  InvalidArgument = 19,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool ok, ErrorCode code, const std::string& message) {
  if (!ok) fail(code, message);
}

inline const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::AllMasked: return "AllMasked";
    case ErrorCode::NotScalar: return "NotScalar";
    case ErrorCode::NondeterministicFunction: return "NondeterministicFunction";
    case ErrorCode::OddDimension: return "OddDimension";
    case ErrorCode::IndivisibleHeads: return "IndivisibleHeads";
    case ErrorCode::InvalidPlacement: return "InvalidPlacement";
    case ErrorCode::OutOfVocab: return "OutOfVocab";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::CorpusTooSmall: return "CorpusTooSmall";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::NoGates: return "NoGates";
    case ErrorCode::EmptyTensor: return "EmptyTensor";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "UnknownError";
}

}  // namespace gatedformer
