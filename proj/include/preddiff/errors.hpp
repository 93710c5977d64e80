#pragma once

#include <stdexcept>
#include <string>

namespace preddiff {

// Error taxonomy mirrored by the CLI exit codes:
// validation -> 1, format/io -> 2, numeric -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad arguments, incompatible shapes, out-of-range indices, domain violations.
struct ValidationError : Error {
    using Error::Error;
};

// A file exists but its contents do not match the expected format.
struct FormatError : Error {
    using Error::Error;
};

// The file system said no.
struct IoError : Error {
    using Error::Error;
};

// A numerical procedure failed (e.g. a Cholesky factorization).
struct NumericError : Error {
    using Error::Error;
};

}  // namespace preddiff
