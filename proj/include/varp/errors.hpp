#pragma once

#include <stdexcept>
#include <string>

namespace varp {

// Violated precondition or shape/arity mismatch.
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

class IndexError : public std::out_of_range {
 public:
  explicit IndexError(const std::string& what) : std::out_of_range(what) {}
};

// NaN/Inf observed in data or gradients, or a training run diverged.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

class VocabularyError : public std::invalid_argument {
 public:
  explicit VocabularyError(const std::string& what) : std::invalid_argument(what) {}
};

class CorruptFileError : public std::runtime_error {
 public:
  explicit CorruptFileError(const std::string& what) : std::runtime_error(what) {}
};

class VersionError : public std::runtime_error {
 public:
  explicit VersionError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or incomplete run configuration. `line` is 1-based, 0 if unknown.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, int line = 0) : std::runtime_error(what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

}  // namespace varp
