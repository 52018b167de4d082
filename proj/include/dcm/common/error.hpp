#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace dcm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes incompatible with an operator.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Autograd misuse: backward on a consumed graph, double backward, etc.
class GraphError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Training loss became non-finite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Aggregated configuration violations, one entry per offending field path.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  std::vector<std::string> problems_;
};

}  // namespace dcm
