#include "toan/error.hpp"

namespace toan {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kNonFiniteResult: return "NonFiniteResult";
    case ErrorCode::kInvalidHyperparameter: return "InvalidHyperparameter";
    case ErrorCode::kTapeReuse: return "TapeReuse";
    case ErrorCode::kNonScalarLoss: return "NonScalarLoss";
    case ErrorCode::kEmptySupportSet: return "EmptySupportSet";
    case ErrorCode::kIndivisibleGroups: return "IndivisibleGroups";
    case ErrorCode::kLabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::kInsufficientClasses: return "InsufficientClasses";
    case ErrorCode::kInsufficientSamples: return "InsufficientSamples";
    case ErrorCode::kSplitOverflow: return "SplitOverflow";
    case ErrorCode::kInvalidSpec: return "InvalidSpec";
    case ErrorCode::kEmptyClassFolder: return "EmptyClassFolder";
    case ErrorCode::kUnreadableImage: return "UnreadableImage";
    case ErrorCode::kConfigMismatch: return "ConfigMismatch";
    case ErrorCode::kDivergenceDetected: return "DivergenceDetected";
    case ErrorCode::kMissingGradient: return "MissingGradient";
    case ErrorCode::kCheckpointMismatch: return "CheckpointMismatch";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kConfigParseError: return "ConfigParseError";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& what)
    : std::runtime_error(std::string(to_string(code)) + ": " + what),
      code_(code) {}

}  // namespace toan
