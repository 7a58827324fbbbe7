#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ki67 {

enum class ErrorCode {
  InvalidArgument,
  MalformedDocument,
  MalformedLine,
  UnknownLabel,
  UnknownClassId,
  OutOfRange,
  DegenerateBox,
  ConfidenceOutOfRange,
  CountMismatch,
  SplitExists,
  EmptyResult,
  TargetTooLarge,
  DuplicateId,
  EmptySubset,
  NoGroundTruth,
  NoCells,
  EmptyCase,
  UnknownCase,
  UnknownImage,
  VersionConflict,
  IndexOutOfRange,
  InvalidBox,
  Io,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the toolkit carries one of the codes above so callers
/// (the CLI, the HTTP layer) can map it to exit codes and status codes.
class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

private:
  ErrorCode code_;
};

}  // namespace ki67
