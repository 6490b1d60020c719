#pragma once

#include <stdexcept>
#include <string>

namespace dive {

// Error taxonomy mapped onto CLI exit codes:
//   UsageError -> 1, DataError -> 2, NumericError -> 3.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace dive
