#pragma once

#include <stdexcept>
#include <string>

namespace dipss {

/// Base of the project error hierarchy. Three branches map onto the CLI
/// exit codes: UsageError -> 1, DataError -> 2, NumericError -> 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UsageError : Error {
  using Error::Error;
};

/// Malformed, missing or inconsistent input data.
struct DataError : Error {
  using Error::Error;
};

/// A numeric procedure failed (divergence, non-finite values, ...).
struct NumericError : Error {
  using Error::Error;
};

// -- Data errors ------------------------------------------------------------

struct UnreadableFile : DataError {
  using DataError::DataError;
};
struct DimensionMismatch : DataError {
  using DataError::DataError;
};
struct UnsupportedFormat : DataError {
  using DataError::DataError;
};
struct MissingSlices : DataError {
  using DataError::DataError;
};
struct InvalidProfile : DataError {
  using DataError::DataError;
};
struct DegenerateInput : DataError {
  using DataError::DataError;
};
struct OddDimension : DataError {
  using DataError::DataError;
};
struct ShapeIncompatible : DataError {
  using DataError::DataError;
};
struct EmptyBatch : DataError {
  using DataError::DataError;
};
struct EmptyPool : DataError {
  using DataError::DataError;
};
struct ClassOutOfRange : DataError {
  using DataError::DataError;
};
struct MissingClass : DataError {
  using DataError::DataError;
};
struct EmptyMask : DataError {
  using DataError::DataError;
};
struct MissingAnchorCategory : DataError {
  using DataError::DataError;
};
struct TooFewMembers : DataError {
  using DataError::DataError;
};
struct EmptyCategory : DataError {
  using DataError::DataError;
};
struct TooFewPoints : DataError {
  using DataError::DataError;
};
struct FoldCountMismatch : DataError {
  using DataError::DataError;
};
struct EmptyConfusion : DataError {
  using DataError::DataError;
};
struct TooFewCases : DataError {
  using DataError::DataError;
};
struct EmptyStore : DataError {
  using DataError::DataError;
};
struct CorruptCheckpoint : DataError {
  using DataError::DataError;
};
struct DuplicateCaseId : DataError {
  using DataError::DataError;
};

// -- Numeric errors ---------------------------------------------------------

struct NoConvergence : NumericError {
  using NumericError::NumericError;
};
struct NonFiniteLoss : NumericError {
  using NumericError::NumericError;
};
struct ZeroAnchorDistance : NumericError {
  using NumericError::NumericError;
};

}  // namespace dipss
