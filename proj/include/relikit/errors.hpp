#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace relikit {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input: bad files, bad flags, inconsistent dimensions.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure: non-finite densities, sampler breakdown.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class MissingColumn : public InputError {
 public:
  explicit MissingColumn(const std::string& column)
      : InputError("missing column '" + column + "'"), column_(column) {}
  const std::string& column() const { return column_; }

 private:
  std::string column_;
};

class NonBinaryOutcome : public InputError {
 public:
  // row is 1-based and counts data rows (the header is not a row).
  explicit NonBinaryOutcome(std::size_t row, const std::string& value = {})
      : InputError("non-binary outcome '" + value + "' in data row " +
                   std::to_string(row)),
        row_(row) {}
  std::size_t row() const { return row_; }

 private:
  std::size_t row_;
};

class DuplicateCell : public InputError {
 public:
  DuplicateCell(int i, int j, int k)
      : InputError("duplicate (subject, rater, time) cell (" +
                   std::to_string(i) + "," + std::to_string(j) + "," +
                   std::to_string(k) + ")"),
        i_(i), j_(j), k_(k) {}
  int subject() const { return i_; }
  int rater() const { return j_; }
  int time() const { return k_; }

 private:
  int i_, j_, k_;
};

class DimensionMismatch : public InputError {
 public:
  using InputError::InputError;
};

/// Chance agreement is 1, so kappa is undefined.
class DegenerateAgreement : public Error {
 public:
  DegenerateAgreement() : Error("chance agreement equals 1; kappa undefined") {}
  explicit DegenerateAgreement(const std::string& what) : Error(what) {}
};

class UnequalRatingsPerItem : public InputError {
 public:
  UnequalRatingsPerItem()
      : InputError("Fleiss' kappa requires the same number of ratings per item") {}
};

class NonFiniteDensity : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class NotPositiveDefinite : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class TooFewDraws : public InputError {
 public:
  explicit TooFewDraws(std::size_t n)
      : InputError("PSIS-LOO needs at least 100 draws, got " + std::to_string(n)) {}
};

class AllDivergent : public NumericalError {
 public:
  AllDivergent() : NumericalError("every warmup transition diverged") {}
};

}  // namespace relikit
