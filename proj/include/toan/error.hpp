#pragma once

#include <stdexcept>
#include <string>

namespace toan {

enum class ErrorCode {
  kShapeMismatch,
  kNonFiniteResult,
  kInvalidHyperparameter,
  kTapeReuse,
  kNonScalarLoss,
  kEmptySupportSet,
  kIndivisibleGroups,
  kLabelOutOfRange,
  kInsufficientClasses,
  kInsufficientSamples,
  kSplitOverflow,
  kInvalidSpec,
  kEmptyClassFolder,
  kUnreadableImage,
  kConfigMismatch,
  kDivergenceDetected,
  kMissingGradient,
  kCheckpointMismatch,
  kIoError,
  kConfigParseError,
};

const char* to_string(ErrorCode code);

// Every failure raised by the library carries one of the codes above so
// callers (the CLI in particular) can map it onto an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace toan
