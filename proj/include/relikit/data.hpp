#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace relikit {

/// Column names used when reading a long-format ratings file.
struct CsvSchema {
  std::string subject = "subject";
  std::string rater = "rater";
  std::string time = "time";
  std::string outcome = "y";
  // Empty means "every other column is a covariate".
  std::optional<std::vector<std::string>> covariates;
};

/// Zero-based lattice coordinate of one observation.
struct Cell {
  int subject = 0;
  int rater = 0;
  int time = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

/// Long-format binary ratings of I subjects by J raters at K time points.
///
/// Identifiers are strings on the outside and dense zero-based indices on the
/// inside, assigned in order of first appearance. Immutable once built.
class RatingsTable {
 public:
  class Builder {
   public:
    explicit Builder(std::vector<std::string> covariate_names = {});

    /// Throws NonBinaryOutcome, DuplicateCell or DimensionMismatch.
    Builder& add(const std::string& subject, const std::string& rater,
                 const std::string& time, int y,
                 const std::vector<double>& covariates = {});

    /// Throws InputError when fewer than two subjects were added.
    RatingsTable build() &&;

   private:
    static int intern(std::unordered_map<std::string, int>& index,
                      std::vector<std::string>& ids, const std::string& id);

    std::vector<std::string> covariate_names_;
    std::unordered_map<std::string, int> subject_index_, rater_index_, time_index_;
    std::vector<std::string> subject_ids_, rater_ids_, time_ids_;
    std::vector<Cell> cells_;
    std::vector<int> y_;
    std::vector<double> covariates_;  // row-major
    std::unordered_map<long long, std::size_t> seen_;
  };

  std::size_t size() const { return cells_.size(); }
  int n_subjects() const { return static_cast<int>(subject_ids_.size()); }
  int n_raters() const { return static_cast<int>(rater_ids_.size()); }
  int n_times() const { return static_cast<int>(time_ids_.size()); }
  int n_covariates() const { return static_cast<int>(covariate_names_.size()); }

  const Cell& cell(std::size_t n) const { return cells_[n]; }
  int y(std::size_t n) const { return y_[n]; }
  const std::vector<Cell>& cells() const { return cells_; }
  const std::vector<int>& outcomes() const { return y_; }
  /// n_obs x p covariate matrix (p may be zero).
  const Eigen::MatrixXd& covariates() const { return covariates_; }

  const std::vector<std::string>& subject_ids() const { return subject_ids_; }
  const std::vector<std::string>& rater_ids() const { return rater_ids_; }
  const std::vector<std::string>& time_ids() const { return time_ids_; }
  const std::vector<std::string>& covariate_names() const { return covariate_names_; }

  /// Row index of a lattice cell, if observed.
  std::optional<std::size_t> find(const Cell& c) const;

  /// Same design and covariates, new outcomes.
  RatingsTable with_outcomes(std::vector<int> y) const;

 private:
  RatingsTable() = default;

  std::vector<std::string> subject_ids_, rater_ids_, time_ids_, covariate_names_;
  std::vector<Cell> cells_;
  std::vector<int> y_;
  Eigen::MatrixXd covariates_;
  std::vector<std::ptrdiff_t> lattice_;  // -1 where missing
};

struct DesignSummary {
  int I = 0, J = 0, K = 0;
  std::size_t n_obs = 0;
  bool is_complete_block = false;
  std::vector<Cell> missing_cells;  // zero-based, lexicographic (i, j, k)
};

enum class TimeCoding { none, reference };

RatingsTable load_csv(const std::filesystem::path& path, const CsvSchema& schema = {});
RatingsTable read_csv(std::istream& in, const CsvSchema& schema = {});
void write_csv(const RatingsTable& table, std::ostream& out, const CsvSchema& schema = {});
void write_csv(const RatingsTable& table, const std::filesystem::path& path,
               const CsvSchema& schema = {});

DesignSummary validate(const RatingsTable& table);

/// Fixed-effects design: [ones | time indicators for k = 2..K | covariates].
Eigen::MatrixXd design_matrix(const RatingsTable& table, bool intercept,
                              TimeCoding time_coding);

/// Splits one CSV record, honouring double-quoted fields.
std::vector<std::string> split_csv_line(const std::string& line);

}  // namespace relikit
