#pragma once

#include <stdexcept>
#include <string>

namespace twist {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or axis mismatch between tensors.
struct DimError : Error { using Error::Error; };
// Bad argument value (out-of-range k, invalid eps, non-scalar loss, ...).
struct ArgError : Error { using Error::Error; };
// NaN/Inf reached a checked boundary.
struct NumericError : Error { using Error::Error; };
// Unknown word or token id.
struct VocabError : Error { using Error::Error; };
// Scene/sample generation could not satisfy its constraints.
struct GenError : Error { using Error::Error; };
// Prompt template slot problems.
struct TemplateError : Error { using Error::Error; };
// Malformed file (checkpoint, dataset line, report).
struct FormatError : Error { using Error::Error; };
// Operation called in the wrong lifecycle state.
struct StateError : Error { using Error::Error; };
// Config or dataset contract violation.
struct ValidationError : Error { using Error::Error; };

} // namespace twist
