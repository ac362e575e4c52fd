#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace fairseg {

// All library errors carry a machine-parseable category; the CLI prints
// "error: category=<cat>: <message>" on one line and exits nonzero.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(message), category_(std::move(category)) {}
  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};
struct DataError : Error {
  explicit DataError(const std::string& m) : Error("data", m) {}
};
struct StateError : Error {
  explicit StateError(const std::string& m) : Error("state", m) {}
};
struct TrainingError : Error {
  explicit TrainingError(const std::string& m) : Error("training", m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};

}  // namespace fairseg
