#pragma once

// Exception taxonomy. Everything thrown by this library derives from
// fit::Error so callers can catch one type at the CLI boundary.

#include <stdexcept>
#include <string>

namespace fit {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape disagreement between matrix operands or graph nodes.
struct DimensionMismatch : Error {
    using Error::Error;
};

// Cholesky pivot failure: the matrix is not (numerically) positive
// definite.  For covariance mixes this signals degeneracy; raising the
// identity weight of the mix is the usual remedy.
struct NotPositiveDefinite : Error {
    using Error::Error;
};

// Dataset problems.
struct EmptyDataset : Error {
    using Error::Error;
};
struct EmptyClass : Error {
    using Error::Error;
};
struct TooFewShots : Error {
    using Error::Error;
};
struct UncoveredClass : Error {
    using Error::Error;
};
struct InsufficientData : Error {
    using Error::Error;
};

// A tape node without an adjoint rule reached the reverse pass.
struct UnsupportedNode : Error {
    using Error::Error;
};

// Text/file ingestion.
struct ParseError : Error {
    using Error::Error;
};
struct RaggedRows : ParseError {
    using ParseError::ParseError;
};
struct IoError : Error {
    using Error::Error;
};

// Bad run configuration (unknown keys, out-of-range values, ...).
struct ConfigError : Error {
    using Error::Error;
};

}  // namespace fit
