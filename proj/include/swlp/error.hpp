#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace swlp {

/// Runtime error carrying a stable machine-readable code next to the
/// human-readable message.  The CLI maps these onto its JSON error report,
/// so codes are part of the public contract:
///
///   "dim-mismatch"  operands live in incompatible spaces
///   "bad-argument"  argument outside the documented domain (e.g. negative
///                   time for a semigroup that is not a group)
///   "bad-config"    malformed or inconsistent configuration input
///   "divergence"    a computed state stopped being finite
///   "max-iter"      an iteration failed to meet its tolerance
///   "io"            file could not be read or written
///
///   "unsupported-regime"  the request is well-formed but lies outside what
///                   this implementation models (e.g. anticipating fields,
///                   serializing path-dependent coefficient hooks)
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

[[noreturn]] inline void fail(const char* code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace swlp
