#pragma once

#include <stdexcept>
#include <string>

namespace cmaf {

/// Base class for all library errors. The `kind` discriminates how a caller
/// (notably the CLI) should map the failure to an exit status: configuration
/// and input problems are user errors, everything else is a run failure.
class Error : public std::runtime_error {
 public:
  enum class Kind { config, geometry, admissibility, solver, domain, io };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Invalid user-facing input: config files, preset names, grid parameters.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(Kind::config, what) {}
};

/// A geometric construction failed its verification (e.g. a requested form
/// cannot be made positive semidefinite).
class GeometryError : public Error {
 public:
  explicit GeometryError(const std::string& what) : Error(Kind::geometry, what) {}
};

/// A field violates the nodewise positive-semidefiniteness cone where it is
/// required to lie inside it.
class AdmissibilityError : public Error {
 public:
  explicit AdmissibilityError(const std::string& what) : Error(Kind::admissibility, what) {}
};

/// An iterative solver failed to reach its tolerance.
class SolverError : public Error {
 public:
  explicit SolverError(const std::string& what) : Error(Kind::solver, what) {}
};

/// A single implicit time step failed (Newton divergence or admissibility
/// loss); the caller is expected to retry with a smaller step.
class StepError : public SolverError {
 public:
  explicit StepError(const std::string& what) : SolverError(what) {}
};

/// An argument lies outside the documented domain of an operation.
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error(Kind::domain, what) {}
};

/// File-system level failure (unreadable snapshot, unwritable output dir).
class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(Kind::io, what) {}
};

}  // namespace cmaf
