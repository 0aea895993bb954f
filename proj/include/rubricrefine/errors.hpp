#pragma once

#include <stdexcept>
#include <string>

namespace rubricrefine {

/// Invalid configuration, arguments, or violated preconditions.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (corpus rows, run records).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Filesystem failures: missing files, unwritable run directories.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A model backend failed in a way retries cannot fix (e.g. rejected
/// credentials, unknown model).
class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace rubricrefine
