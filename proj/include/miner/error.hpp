#pragma once

#include <stdexcept>
#include <string>

namespace miner {

enum class ErrorCode {
  InvalidArgument,
  DegenerateResult,
  CropTooLarge,
  MalformedRecord,
  VersionMismatch,
  DimensionMismatch,
  MissingTarget,
  EmptyBatch,
  NonfiniteGradient,
  InvalidValidationImage,
  ZeroWeightVector,
  UnknownImage,
  UnknownRequest,
  StaleRequest,
  ConflictingResult,
  CorruptCheckpoint,
  IncompleteRun,
  Io,
};

const char* to_string(ErrorCode code) noexcept;

/// Exception type thrown by every module; `code()` identifies the failure kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace miner
