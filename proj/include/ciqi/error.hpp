#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ciqi {

enum class ErrorCode {
  // domain / corpus
  MalformedRecord,
  MissingField,
  EmptyAttribute,
  DuplicateId,
  Io,
  // protocol
  MalformedCallBody,
  UnclosedTag,
  // vision
  DegenerateBBox,
  DecodeError,
  IndexOutOfRange,
  // retrieval
  DimMismatch,
  ZeroVector,
  EmptyIndex,
  BothAbsent,
  MalformedStore,
  // ingest
  EncoderUnavailable,
  DimInconsistent,
  MissingVector,
  // gateway
  Transport,
  BackendError,
  RateLimited,
  BadModality,
  // agent
  NoRetrievalPerformed,
  // reward / judge
  MissingTag,
  OutOfRange,
  EmptyGroup,
  LengthMismatch,
  ConstantInput,
  // bench
  ParseFailure,
  DegenerateOptions,
  BadWeights,
  JudgeFailure,
  // misc
  InvalidArgument,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::MissingField: return "MissingField";
    case ErrorCode::EmptyAttribute: return "EmptyAttribute";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::Io: return "IoError";
    case ErrorCode::MalformedCallBody: return "MalformedCallBody";
    case ErrorCode::UnclosedTag: return "UnclosedTag";
    case ErrorCode::DegenerateBBox: return "DegenerateBBox";
    case ErrorCode::DecodeError: return "DecodeError";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::EmptyIndex: return "EmptyIndex";
    case ErrorCode::BothAbsent: return "BothAbsent";
    case ErrorCode::MalformedStore: return "MalformedStore";
    case ErrorCode::EncoderUnavailable: return "EncoderUnavailable";
    case ErrorCode::DimInconsistent: return "DimInconsistent";
    case ErrorCode::MissingVector: return "MissingVector";
    case ErrorCode::Transport: return "Transport";
    case ErrorCode::BackendError: return "BackendError";
    case ErrorCode::RateLimited: return "RateLimited";
    case ErrorCode::BadModality: return "BadModality";
    case ErrorCode::NoRetrievalPerformed: return "NoRetrievalPerformed";
    case ErrorCode::MissingTag: return "MissingTag";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::EmptyGroup: return "EmptyGroup";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::ConstantInput: return "ConstantInput";
    case ErrorCode::ParseFailure: return "ParseFailure";
    case ErrorCode::DegenerateOptions: return "DegenerateOptions";
    case ErrorCode::BadWeights: return "BadWeights";
    case ErrorCode::JudgeFailure: return "JudgeFailure";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

// Every fallible operation in the library throws this. `line` is set by the
// corpus loader (1-based), `subject` names the offending record id / tag /
// field where one exists.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::string subject = {},
        std::optional<std::size_t> line = std::nullopt)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        message_(message),
        subject_(std::move(subject)),
        line_(line) {}

  ErrorCode code() const noexcept { return code_; }
  // what() without the code prefix.
  const std::string& message() const noexcept { return message_; }
  const std::string& subject() const noexcept { return subject_; }
  std::optional<std::size_t> line() const noexcept { return line_; }

 private:
  ErrorCode code_;
  std::string message_;
  std::string subject_;
  std::optional<std::size_t> line_;
};

}  // namespace ciqi
