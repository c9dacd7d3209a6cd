#pragma once

#include <stdexcept>
#include <string>

namespace exprclone {

/// Runtime failure raised by every module in the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed user input (bad lengths, non-finite values, bad indices).
class InvalidInput : public Error {
public:
    using Error::Error;
};

} // namespace exprclone
