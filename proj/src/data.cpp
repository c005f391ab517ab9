#include "relikit/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

#include "relikit/errors.hpp"

namespace relikit {

namespace {

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

long long cell_key(int i, int j, int k) {
  return (static_cast<long long>(i) << 42) | (static_cast<long long>(j) << 21) | k;
}

double parse_double(const std::string& s, std::size_t row, const std::string& column) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw InputError("cannot parse covariate '" + column + "' value '" + s +
                     "' in data row " + std::to_string(row));
  }
}

std::string quote_if_needed(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t n = 0; n < line.size(); ++n) {
    char c = line[n];
    if (quoted) {
      if (c == '"') {
        if (n + 1 < line.size() && line[n + 1] == '"') {
          cur += '"';
          ++n;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

RatingsTable::Builder::Builder(std::vector<std::string> covariate_names)
    : covariate_names_(std::move(covariate_names)) {}

int RatingsTable::Builder::intern(std::unordered_map<std::string, int>& index,
                                  std::vector<std::string>& ids, const std::string& id) {
  auto [it, inserted] = index.try_emplace(id, static_cast<int>(ids.size()));
  if (inserted) ids.push_back(id);
  return it->second;
}

RatingsTable::Builder& RatingsTable::Builder::add(const std::string& subject,
                                                  const std::string& rater,
                                                  const std::string& time, int y,
                                                  const std::vector<double>& covariates) {
  if (y != 0 && y != 1) throw NonBinaryOutcome(cells_.size() + 1, std::to_string(y));
  if (covariates.size() != covariate_names_.size())
    throw DimensionMismatch("record has " + std::to_string(covariates.size()) +
                            " covariates, expected " +
                            std::to_string(covariate_names_.size()));
  Cell c{intern(subject_index_, subject_ids_, subject), intern(rater_index_, rater_ids_, rater),
         intern(time_index_, time_ids_, time)};
  if (!seen_.emplace(cell_key(c.subject, c.rater, c.time), cells_.size()).second)
    throw DuplicateCell(c.subject + 1, c.rater + 1, c.time + 1);
  cells_.push_back(c);
  y_.push_back(y);
  covariates_.insert(covariates_.end(), covariates.begin(), covariates.end());
  return *this;
}

RatingsTable RatingsTable::Builder::build() && {
  if (subject_ids_.size() < 2)
    throw InputError("at least two subjects are required, got " +
                     std::to_string(subject_ids_.size()));
  RatingsTable t;
  t.subject_ids_ = std::move(subject_ids_);
  t.rater_ids_ = std::move(rater_ids_);
  t.time_ids_ = std::move(time_ids_);
  t.covariate_names_ = std::move(covariate_names_);
  t.cells_ = std::move(cells_);
  t.y_ = std::move(y_);
  const auto n = static_cast<Eigen::Index>(t.cells_.size());
  const auto p = static_cast<Eigen::Index>(t.covariate_names_.size());
  t.covariates_ = Eigen::MatrixXd(n, p);
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < p; ++c) t.covariates_(r, c) = covariates_[r * p + c];
  const int I = t.n_subjects(), J = t.n_raters(), K = t.n_times();
  t.lattice_.assign(static_cast<std::size_t>(I) * J * K, -1);
  for (std::size_t r = 0; r < t.cells_.size(); ++r) {
    const auto& c = t.cells_[r];
    t.lattice_[(static_cast<std::size_t>(c.subject) * J + c.rater) * K + c.time] =
        static_cast<std::ptrdiff_t>(r);
  }
  return t;
}

std::optional<std::size_t> RatingsTable::find(const Cell& c) const {
  if (c.subject < 0 || c.subject >= n_subjects() || c.rater < 0 || c.rater >= n_raters() ||
      c.time < 0 || c.time >= n_times())
    return std::nullopt;
  auto idx = lattice_[(static_cast<std::size_t>(c.subject) * n_raters() + c.rater) * n_times() +
                      c.time];
  if (idx < 0) return std::nullopt;
  return static_cast<std::size_t>(idx);
}

RatingsTable RatingsTable::with_outcomes(std::vector<int> y) const {
  if (y.size() != y_.size())
    throw DimensionMismatch("outcome vector length " + std::to_string(y.size()) +
                            " does not match table size " + std::to_string(y_.size()));
  for (std::size_t n = 0; n < y.size(); ++n)
    if (y[n] != 0 && y[n] != 1) throw NonBinaryOutcome(n + 1, std::to_string(y[n]));
  RatingsTable t = *this;
  t.y_ = std::move(y);
  return t;
}

RatingsTable read_csv(std::istream& in, const CsvSchema& schema) {
  std::string line;
  if (!std::getline(in, line)) throw InputError("empty CSV input (header row required)");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  auto header = split_csv_line(line);
  for (auto& h : header) h = trim(h);

  auto column = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw MissingColumn(name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t cs = column(schema.subject), cr = column(schema.rater),
                    ct = column(schema.time), cy = column(schema.outcome);

  std::vector<std::size_t> cov_cols;
  std::vector<std::string> cov_names;
  if (schema.covariates) {
    for (const auto& name : *schema.covariates) {
      cov_cols.push_back(column(name));
      cov_names.push_back(name);
    }
  } else {
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (c == cs || c == cr || c == ct || c == cy) continue;
      cov_cols.push_back(c);
      cov_names.push_back(header[c]);
    }
  }

  RatingsTable::Builder builder(cov_names);
  std::size_t row = 0;
  std::vector<double> cov(cov_cols.size());
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row;
    auto fields = split_csv_line(line);
    if (fields.size() != header.size())
      throw InputError("data row " + std::to_string(row) + " has " +
                       std::to_string(fields.size()) + " fields, header has " +
                       std::to_string(header.size()));
    const std::string ystr = trim(fields[cy]);
    int y;
    if (ystr == "0")
      y = 0;
    else if (ystr == "1")
      y = 1;
    else
      throw NonBinaryOutcome(row, ystr);
    for (std::size_t c = 0; c < cov_cols.size(); ++c)
      cov[c] = parse_double(trim(fields[cov_cols[c]]), row, cov_names[c]);
    builder.add(trim(fields[cs]), trim(fields[cr]), trim(fields[ct]), y, cov);
  }
  return std::move(builder).build();
}

RatingsTable load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  return read_csv(in, schema);
}

void write_csv(const RatingsTable& table, std::ostream& out, const CsvSchema& schema) {
  out << quote_if_needed(schema.subject) << ',' << quote_if_needed(schema.rater) << ','
      << quote_if_needed(schema.time) << ',' << quote_if_needed(schema.outcome);
  for (const auto& name : table.covariate_names()) out << ',' << quote_if_needed(name);
  out << '\n';
  const auto& X = table.covariates();
  const auto old_precision = out.precision(std::numeric_limits<double>::max_digits10);
  for (std::size_t n = 0; n < table.size(); ++n) {
    const auto& c = table.cell(n);
    out << quote_if_needed(table.subject_ids()[c.subject]) << ','
        << quote_if_needed(table.rater_ids()[c.rater]) << ','
        << quote_if_needed(table.time_ids()[c.time]) << ',' << table.y(n);
    for (Eigen::Index p = 0; p < X.cols(); ++p) out << ',' << X(static_cast<Eigen::Index>(n), p);
    out << '\n';
  }
  out.precision(old_precision);
}

void write_csv(const RatingsTable& table, const std::filesystem::path& path,
               const CsvSchema& schema) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  write_csv(table, out, schema);
}

DesignSummary validate(const RatingsTable& table) {
  DesignSummary s;
  s.I = table.n_subjects();
  s.J = table.n_raters();
  s.K = table.n_times();
  s.n_obs = table.size();
  for (int i = 0; i < s.I; ++i)
    for (int j = 0; j < s.J; ++j)
      for (int k = 0; k < s.K; ++k)
        if (!table.find({i, j, k})) s.missing_cells.push_back({i, j, k});
  s.is_complete_block = s.missing_cells.empty();
  return s;
}

Eigen::MatrixXd design_matrix(const RatingsTable& table, bool intercept, TimeCoding time_coding) {
  const auto n = static_cast<Eigen::Index>(table.size());
  const int n_time_cols = time_coding == TimeCoding::reference ? table.n_times() - 1 : 0;
  const Eigen::Index cols = (intercept ? 1 : 0) + n_time_cols + table.n_covariates();
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n, cols);
  Eigen::Index c0 = 0;
  if (intercept) X.col(c0++).setOnes();
  for (Eigen::Index r = 0; r < n; ++r) {
    const int k = table.cell(static_cast<std::size_t>(r)).time;
    if (n_time_cols > 0 && k > 0) X(r, c0 + k - 1) = 1.0;
  }
  c0 += n_time_cols;
  if (table.n_covariates() > 0) X.rightCols(table.n_covariates()) = table.covariates();
  return X;
}

}  // namespace relikit
