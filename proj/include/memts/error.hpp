#pragma once

#include <stdexcept>
#include <string>

namespace memts {

// Error categories mirror the CLI exit-code classes: configuration and
// dimension problems are usage errors, ingestion/persistence problems are
// data errors, non-finite values are numeric failures.

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct ContractError : Error {
    using Error::Error;
};

struct IngestionError : Error {
    using Error::Error;
};

struct PersistenceError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

}  // namespace memts
