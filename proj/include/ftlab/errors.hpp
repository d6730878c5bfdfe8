#pragma once

#include <stdexcept>
#include <string>

namespace ftlab {

/// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape or dimension disagreement between tensors.
struct DimensionError : Error {
    using Error::Error;
};

/// A configuration value violates its documented range or constraint.
struct ConfigError : Error {
    using Error::Error;
};

/// Structural mismatch between two models (registry, config).
struct StructuralError : Error {
    using Error::Error;
};

/// Malformed binary archive; message carries the byte offset.
struct FormatError : Error {
    using Error::Error;
};

/// Text that does not parse; message carries the position.
struct ParseError : Error {
    ParseError(const std::string& msg, std::size_t position)
        : Error(msg + " (at position " + std::to_string(position) + ")"), pos(position) {}
    std::size_t pos;
};

/// Division by zero or overflow while evaluating an expression.
struct ArithmeticError : Error {
    using Error::Error;
};

/// Index outside its valid range (token ids, tap layers, targets).
struct IndexError : Error {
    using Error::Error;
};

/// Input or output of a numeric op is NaN/Inf under debug verification.
struct FiniteError : Error {
    using Error::Error;
};

/// A function expected to be deterministic produced two different values.
struct DeterminismError : Error {
    using Error::Error;
};

/// Degenerate tensor (zero norm) where a norm-dependent op is undefined.
struct DegenerateTensorError : Error {
    using Error::Error;
};

/// Dataset or batch too small for the requested operation.
struct SizeError : Error {
    using Error::Error;
};

/// Failure while loading a dataset file; message carries the line number.
struct LoadError : Error {
    using Error::Error;
};

/// Expression generator could not produce valid samples.
struct GenerationStuckError : Error {
    using Error::Error;
};

/// Network-level judge failure (retryable).
struct TransportError : Error {
    using Error::Error;
};

/// Judge endpoint answered but not in the expected protocol (non-retryable).
struct ProtocolError : Error {
    using Error::Error;
};

/// Classification asked of an invalid judge score.
struct ClassificationError : Error {
    using Error::Error;
};

/// Report aggregation over an empty or all-invalid record set.
struct AggregationError : Error {
    using Error::Error;
};

/// Training aborted; message carries diagnostics and checkpoint path.
struct TrainAbortError : Error {
    using Error::Error;
};

/// A reproduction run could not satisfy its preconditions within budget.
struct ReproductionInfeasibleError : Error {
    using Error::Error;
};

}  // namespace ftlab
