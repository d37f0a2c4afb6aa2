#pragma once

#include <stdexcept>

namespace hkecg {

/// Invalid layer, model or run configuration (indivisible widths, bad hyperparameters, unknown keys).
class ConfigError : public std::invalid_argument {
public:
	using std::invalid_argument::invalid_argument;
};

/// API misuse: non-scalar loss, foreign tape variables, impossible padding.
class UsageError : public std::logic_error {
public:
	using std::logic_error::logic_error;
};

/// Malformed or inconsistent input files: bundles, annotations, checkpoints, predictions.
class DataError : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

/// Non-finite values during optimisation.
class NumericError : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

} // namespace hkecg
