#pragma once

#include <stdexcept>
#include <string>

namespace kbforge {

// Exit-code families used by the command-line driver.
enum class ExitCode : int {
    ok = 0,
    usage = 1,
    data = 2,
    numeric = 3,
};

// Bad flags, unknown subcommands, inconsistent option combinations.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input data (corpus lines, checkpoints, records).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A forward op produced NaN/Inf, or a gradient went non-finite.
struct NumericFault : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace kbforge
