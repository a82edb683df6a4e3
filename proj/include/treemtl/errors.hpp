#pragma once

#include <stdexcept>
#include <string>

namespace treemtl {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error { using Error::Error; };
class InputError : public Error { using Error::Error; };
class DimensionError : public InputError { using InputError::InputError; };
class IndexError : public InputError { using InputError::InputError; };
class StateError : public Error { using Error::Error; };
class UndefinedMetricError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };

/// Raised when a loss or gradient turns non-finite during training.
class NumericalError : public Error { using Error::Error; };

class CheckpointError : public Error { using Error::Error; };
class VersionError : public CheckpointError { using CheckpointError::CheckpointError; };
class FingerprintError : public CheckpointError { using CheckpointError::CheckpointError; };
class TruncationError : public CheckpointError { using CheckpointError::CheckpointError; };
class FormatError : public CheckpointError { using CheckpointError::CheckpointError; };

/// Dataset ingestion failures; carry the 1-based manifest row when known.
class LoadError : public Error {
public:
    LoadError(const std::string& what, long row = -1) : Error(what), row_(row) {}
    long row() const noexcept { return row_; }

private:
    long row_;
};

class MissingFileError : public LoadError { using LoadError::LoadError; };
class DensityError : public LoadError { using LoadError::LoadError; };
class TaskTagError : public LoadError { using LoadError::LoadError; };

}  // namespace treemtl
