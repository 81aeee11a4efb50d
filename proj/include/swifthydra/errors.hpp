#pragma once

#include <stdexcept>
#include <string>

namespace sh {

// Exit-code mapping: UsageError -> 1, DataError -> 2, TrainError -> 3.
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& m) : std::runtime_error(m) {}
};

struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& m) : std::runtime_error(m) {}
};

} // namespace sh
