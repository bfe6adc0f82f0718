#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pilotgrid {

enum class ErrorCode {
  IllegalTransition,
  TimestampRegression,
  NotNew,
  InvalidField,
  DuplicateId,
  UnknownApplication,
  DuplicateApp,
  UnknownId,
  AmbiguousPrefix,
  CycleDetected,
  ChildAlreadyStarted,
  BasenameCollision,
  AlreadyTerminal,
  MissingEnvironment,
  SpawnFailure,
  UnknownTemplate,
  UnboundPlaceholder,
  SubmitFailure,
  CorruptHistory,
  AlreadyExists,
  StoreUnreachable,
  InvalidPolicy,
  ServiceLocked,
  Io,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library. `subject` carries the offending id or
/// name when there is one (e.g. the task whose transition was rejected).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::string subject = {})
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        subject_(std::move(subject)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& subject() const noexcept { return subject_; }

 private:
  ErrorCode code_;
  std::string subject_;
};

}  // namespace pilotgrid
