#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ultra {

enum class ErrorKind {
  io,
  missing_file,
  bad_magic,
  version_mismatch,
  bad_dtype,
  shape_mismatch,
  nan_payload,
  invalid_manifest,
  invariant_violation,
  invalid_argument,
  metric_failure,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io: return "io";
    case ErrorKind::missing_file: return "missing_file";
    case ErrorKind::bad_magic: return "bad_magic";
    case ErrorKind::version_mismatch: return "version_mismatch";
    case ErrorKind::bad_dtype: return "bad_dtype";
    case ErrorKind::shape_mismatch: return "shape_mismatch";
    case ErrorKind::nan_payload: return "nan_payload";
    case ErrorKind::invalid_manifest: return "invalid_manifest";
    case ErrorKind::invariant_violation: return "invariant_violation";
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::metric_failure: return "metric_failure";
  }
  return "unknown";
}

/// Every failure in the library is reported through this type. `file` is
/// empty unless the failure is tied to a particular file on disk.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string message, std::string file = {})
      : std::runtime_error(compose(kind, message, file)),
        kind_(kind),
        message_(std::move(message)),
        file_(std::move(file)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& message() const noexcept { return message_; }
  const std::string& file() const noexcept { return file_; }

 private:
  static std::string compose(ErrorKind kind, const std::string& message,
                             const std::string& file) {
    std::string out(to_string(kind));
    if (!file.empty()) out += " [" + file + "]";
    out += ": " + message;
    return out;
  }

  ErrorKind kind_;
  std::string message_;
  std::string file_;
};

[[noreturn]] inline void fail(ErrorKind kind, std::string message,
                              std::string file = {}) {
  throw Error(kind, std::move(message), std::move(file));
}

inline void require(bool condition, ErrorKind kind, const char* message) {
  if (!condition) fail(kind, message);
}

}  // namespace ultra
