#pragma once

#include <stdexcept>
#include <string>

namespace protos {

/// Input has the wrong shape, an out-of-range value, or names something that does not exist.
class RejectedInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A parameter makes an operation ill-defined (zero-norm prototype, tau <= 0, NaN weights).
class InvalidParameter : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A structural invariant was found broken on entry (negative classifier weight, negative similarity).
class InvariantViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// File contents do not follow the expected layout (bad magic, bad header).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Reading or writing failed, including truncated payloads.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace protos
