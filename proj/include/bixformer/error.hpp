#pragma once

#include <stdexcept>
#include <string>

namespace bixformer {

/// Base of every error thrown by the library. `exit_code()` follows the
/// command-line taxonomy: 1 internal, 2 config/parse, 3 I/O, 4 infeasible,
/// 5 verification failure.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, int exit_code = 1)
      : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

/// Shape disagreement between operands.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error("dimension error: " + what) {}
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error("contract error: " + what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what, 2) {}
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error("parse error: " + what, 2) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("I/O error: " + what, 3) {}
};

/// Assignment problems with fewer candidates than targets.
class InfeasibleError : public Error {
 public:
  explicit InfeasibleError(const std::string& what) : Error("infeasible: " + what, 4) {}
};

class VerificationError : public Error {
 public:
  explicit VerificationError(const std::string& what)
      : Error("verification failure: " + what, 5) {}
};

/// Raised when a function handed to the gradient checker returns different
/// values for the same input.
class DeterminismError : public Error {
 public:
  explicit DeterminismError(const std::string& what) : Error("determinism error: " + what, 5) {}
};

/// Raised by the merge step when one query carries two non-None labels.
class MergeConflictError : public Error {
 public:
  explicit MergeConflictError(const std::string& what) : Error("merge conflict: " + what) {}
};

class GenerationError : public Error {
 public:
  explicit GenerationError(const std::string& what) : Error("generation error: " + what) {}
};

/// Training produced a non-finite loss. `state()` holds a JSON dump.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::string state)
      : Error("divergence: " + what, 5), state_(std::move(state)) {}
  const std::string& state() const noexcept { return state_; }

 private:
  std::string state_;
};

}  // namespace bixformer
