#pragma once

#include <stdexcept>
#include <string>

namespace crl {

// Exit codes surfaced by the command-line tool.
enum class ErrorKind {
  kShape,
  kInvalidMask,
  kVocabulary,
  kActionRange,
  kMaskOwnership,
  kCalibrationUnavailable,
  kDivergence,
  kConfig,
  kTask,
  kIo,
  kInvalidArgument,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

const char* error_kind_name(ErrorKind kind);

// 0 ok, 2 config error, 3 task/oracle failure, 4 training divergence, 1 other.
int exit_code_for(ErrorKind kind);

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace crl
