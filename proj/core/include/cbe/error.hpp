// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace cbe {

/// Broad failure category. The CLI maps each kind to a process exit code.
enum class ErrorKind { Config, Data, Divergence };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

/// A Many/Medium/Few fold that must be nonempty has no classes.
class EmptyFoldError : public DataError {
 public:
  explicit EmptyFoldError(std::string fold)
      : DataError("empty fold: " + fold), fold_(std::move(fold)) {}
  const std::string& fold() const noexcept { return fold_; }

 private:
  std::string fold_;
};

/// Raised when a loss or objective becomes non-finite during optimisation.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, int epoch)
      : Error(ErrorKind::Divergence, what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace cbe
