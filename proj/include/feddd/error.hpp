#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace feddd {

enum class ErrorKind {
  invalid_spec,
  shape_mismatch,
  bad_magic,
  truncated_file,
  count_mismatch,
  insufficient_data,
  numeric_overflow,
  divergence,
  range,
  infeasible,
  empty_round,
  domain,
  undefined,
  io,
  config,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_spec: return "invalid_spec";
    case ErrorKind::shape_mismatch: return "shape_mismatch";
    case ErrorKind::bad_magic: return "bad_magic";
    case ErrorKind::truncated_file: return "truncated_file";
    case ErrorKind::count_mismatch: return "count_mismatch";
    case ErrorKind::insufficient_data: return "insufficient_data";
    case ErrorKind::numeric_overflow: return "numeric_overflow";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::range: return "range";
    case ErrorKind::infeasible: return "infeasible";
    case ErrorKind::empty_round: return "empty_round";
    case ErrorKind::domain: return "domain";
    case ErrorKind::undefined: return "undefined";
    case ErrorKind::io: return "io";
    case ErrorKind::config: return "config";
  }
  return "unknown";
}

// Every failure raised by the library carries a machine-readable kind so the
// CLI can emit structured error JSON.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool ok, ErrorKind kind, const std::string& what) {
  if (!ok) fail(kind, what);
}

}  // namespace feddd
