#pragma once

#include <stdexcept>
#include <string>

namespace toa {

/// Root of every error the library throws. Subclasses map one-to-one onto the
/// failure classes callers are expected to distinguish.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class RangeError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class DataError : public Error { using Error::Error; };
class StatisticsError : public Error { using Error::Error; };
class CorruptionError : public Error { using Error::Error; };
class LoadError : public Error { using Error::Error; };

}  // namespace toa
