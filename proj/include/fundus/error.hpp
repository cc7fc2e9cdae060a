#pragma once

#include <stdexcept>
#include <string>

namespace fundus {

// Process exit codes used by the command-line front end.
enum class ExitCode : int { ok = 0, usage = 1, data = 2, internal = 3 };

// Bad arguments or configuration supplied by the caller.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Input data violates a contract: malformed files, inconsistent labels,
// images of the wrong size, and so on.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline DataError data_error_at(const std::string& file, std::size_t line, const std::string& what) {
  return DataError(file + ":" + std::to_string(line) + ": " + what);
}

}  // namespace fundus
