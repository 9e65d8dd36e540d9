#pragma once

#include <stdexcept>
#include <string>

namespace milecf {

/// Base for every library error. `code()` is a stable identifier used by the
/// CLI and the HTTP layer (e.g. "MissingColumn", "NotConverged").
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define MILECF_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                       \
   public:                                                          \
    explicit Name(const std::string& message) : Error(#Name, message) {} \
  };

// eventlog
MILECF_DEFINE_ERROR(MissingColumn)
MILECF_DEFINE_ERROR(NegativeAmount)
MILECF_DEFINE_ERROR(EmptyLog)
MILECF_DEFINE_ERROR(UnknownToken)
MILECF_DEFINE_ERROR(InvalidArgument)

// numcore
MILECF_DEFINE_ERROR(ShapeMismatch)
MILECF_DEFINE_ERROR(IndexOutOfBounds)
MILECF_DEFINE_ERROR(NonScalarLoss)
MILECF_DEFINE_ERROR(MissingGradient)

// predictor
MILECF_DEFINE_ERROR(VersionMismatch)
MILECF_DEFINE_ERROR(CorruptCheckpoint)

// cfengine
MILECF_DEFINE_ERROR(EmptyKnowledgeBase)
MILECF_DEFINE_ERROR(NoReachableMilestone)
MILECF_DEFINE_ERROR(NoCounterfactualFound)

#undef MILECF_DEFINE_ERROR

class MalformedRow : public Error {
 public:
  MalformedRow(std::size_t row, const std::string& what)
      : Error("MalformedRow", "row " + std::to_string(row) + ": " + what), row_(row) {}

  /// 1-based line number of the offending record (header is row 1).
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

}  // namespace milecf
