#pragma once

#include <stdexcept>
#include <string>

namespace petgamma {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DegenerateChord : Error {
    using Error::Error;
};
struct OutOfRange : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct ShrinkNotAllowed : Error {
    using Error::Error;
};
struct MassMismatch : Error {
    using Error::Error;
};
struct SupportViolation : Error {
    using Error::Error;
};

}  // namespace petgamma
