#pragma once

#include <stdexcept>
#include <string>

namespace textgan {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shapes incompatible with the requested operation.
struct DimensionError : Error {
    using Error::Error;
};

// A caller broke an operation's contract (bad argument, wrong state).
struct ContractError : Error {
    using Error::Error;
};

// NaN/Inf produced or consumed where finite values are required.
struct NumericError : Error {
    using Error::Error;
};

// Token id or index out of range.
struct IndexError : Error {
    using Error::Error;
};

// Corpus / file ingestion failure.
struct IngestError : Error {
    using Error::Error;
};

// Experiment configuration problems (reported with file:line where known).
struct ConfigError : Error {
    using Error::Error;
};

}  // namespace textgan
