#pragma once

#include <stdexcept>
#include <string>

namespace amen {

// Every failure the library reports carries a short machine-readable kind
// ("config", "dimension", "io", "data", ...) next to the human message.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& message) : Error("dimension", message) {}
};

class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message)
      : Error("config", field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace amen
