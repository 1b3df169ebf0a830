#include "miner/error.hpp"

namespace miner {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid-argument";
    case ErrorCode::DegenerateResult: return "degenerate-result";
    case ErrorCode::CropTooLarge: return "crop-too-large";
    case ErrorCode::MalformedRecord: return "malformed-record";
    case ErrorCode::VersionMismatch: return "version-mismatch";
    case ErrorCode::DimensionMismatch: return "dimension-mismatch";
    case ErrorCode::MissingTarget: return "missing-target";
    case ErrorCode::EmptyBatch: return "empty-batch";
    case ErrorCode::NonfiniteGradient: return "nonfinite-gradient";
    case ErrorCode::InvalidValidationImage: return "invalid-validation-image";
    case ErrorCode::ZeroWeightVector: return "zero-weight-vector";
    case ErrorCode::UnknownImage: return "unknown-image";
    case ErrorCode::UnknownRequest: return "unknown-request";
    case ErrorCode::StaleRequest: return "stale-request";
    case ErrorCode::ConflictingResult: return "conflicting-result";
    case ErrorCode::CorruptCheckpoint: return "corrupt-checkpoint";
    case ErrorCode::IncompleteRun: return "incomplete-run";
    case ErrorCode::Io: return "io";
  }
  return "unknown";
}

}  // namespace miner
