#ifndef VOLNET_ERROR_HPP
#define VOLNET_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>

namespace volnet {

enum class ErrorCode {
  InvalidShape,
  IndexOutOfRange,
  CropOutOfBounds,
  ShapeMismatch,
  InvalidAxes,
  DegenerateBatch,
  InvalidConfig,
  NumericError,
  InvalidTarget,
  InvalidMode,
  DuplicateSubject,
  InvalidLabel,
  ParseError,
  FormatError,
  InsufficientSubjects,
  IoError,
  InvalidSampleCount,
};

std::string_view to_string(ErrorCode code);

// Every failure surfaced by the library carries one of the codes above so
// callers (and the CLI exit-code mapping) can dispatch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidShape: return "InvalidShape";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::CropOutOfBounds: return "CropOutOfBounds";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::InvalidAxes: return "InvalidAxes";
    case ErrorCode::DegenerateBatch: return "DegenerateBatch";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::NumericError: return "NumericError";
    case ErrorCode::InvalidTarget: return "InvalidTarget";
    case ErrorCode::InvalidMode: return "InvalidMode";
    case ErrorCode::DuplicateSubject: return "DuplicateSubject";
    case ErrorCode::InvalidLabel: return "InvalidLabel";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::InsufficientSubjects: return "InsufficientSubjects";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::InvalidSampleCount: return "InvalidSampleCount";
  }
  return "Unknown";
}

}  // namespace volnet

#endif  // VOLNET_ERROR_HPP
