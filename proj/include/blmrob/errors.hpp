#pragma once

#include <stdexcept>
#include <string>

namespace blmrob {

// Base for everything thrown by this library; CLI maps these to exit code 2,
// config/path problems (ValidationError) to exit code 1.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeMismatch : Error {
    using Error::Error;
};
struct DivisionByZero : Error {
    using Error::Error;
};
struct NonScalarOutput : Error {
    using Error::Error;
};
struct NonFiniteValue : Error {
    using Error::Error;
};
struct InvalidConfig : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};

// A window channel has (near-)zero standard deviation and cannot be normalized.
struct SigmaZero : Error {
    explicit SigmaZero(int channel_, const std::string& what_ = "")
        : Error(what_.empty() ? "channel " + std::to_string(channel_) + " has sigma below threshold"
                              : what_),
          channel(channel_) {}
    int channel;
};

struct WindowTooLong : Error {
    using Error::Error;
};
struct TraceTooShort : Error {
    using Error::Error;
};
struct BoxViolation : Error {
    using Error::Error;
};
struct NoUnpaddedEntries : Error {
    using Error::Error;
};
struct GradientFailure : Error {
    using Error::Error;
};
struct NonReconstructible : Error {
    using Error::Error;
};
struct EmptyDataset : Error {
    using Error::Error;
};
struct DatasetClassMissing : Error {
    using Error::Error;
};
struct DivergedLoss : Error {
    using Error::Error;
};
struct InvalidGenParams : Error {
    using Error::Error;
};
struct InvalidSplit : Error {
    using Error::Error;
};
struct ManifestMismatch : Error {
    using Error::Error;
};

// Bad CLI arguments / run configs. Exit code 1.
struct ValidationError : Error {
    using Error::Error;
};

}  // namespace blmrob
