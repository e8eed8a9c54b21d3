#pragma once

#include <stdexcept>
#include <string>

namespace esceme {

// Invalid arguments, malformed files, incompatible checkpoint/config pairs.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// NaN/Inf in a forward pass, loss or gradient.
class NumericFault : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

}  // namespace esceme
