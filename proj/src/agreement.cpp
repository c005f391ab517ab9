#include "relikit/agreement.hpp"

#include <algorithm>
#include <cmath>

#include "relikit/errors.hpp"

namespace relikit {

namespace {

// Chance agreement this close to one is treated as exactly one.
constexpr double kDegenerateTol = 1e-14;

KappaEstimate finish(double p_o, double p_c, std::size_t n_items, KappaMethod method) {
  if (p_c >= 1.0 - kDegenerateTol) throw DegenerateAgreement();
  KappaEstimate e;
  e.p_o = p_o;
  e.p_c = p_c;
  e.kappa = (p_o - p_c) / (1.0 - p_c);
  e.n_items = n_items;
  e.method = method;
  return e;
}

struct PairTable {
  double agree = 0, mean_a = 0, mean_b = 0;
  std::size_t n = 0;
};

PairTable tabulate(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size())
    throw DimensionMismatch("rating vectors differ in length (" + std::to_string(a.size()) +
                            " vs " + std::to_string(b.size()) + ")");
  if (a.size() < 2) throw InputError("at least two items are required");
  PairTable t;
  t.n = a.size();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if ((a[i] != 0 && a[i] != 1) || (b[i] != 0 && b[i] != 1))
      throw NonBinaryOutcome(i + 1);
    t.agree += a[i] == b[i];
    t.mean_a += a[i];
    t.mean_b += b[i];
  }
  const double n = static_cast<double>(t.n);
  t.agree /= n;
  t.mean_a /= n;
  t.mean_b /= n;
  return t;
}

// Complete two-slot items of a slot matrix as a pair of vectors.
void complete_pairs(const SlotMatrix& s, std::vector<int>& a, std::vector<int>& b) {
  if (s.slots() != 2)
    throw DimensionMismatch("Cohen's kappa and Scott's pi need exactly two slots, got " +
                     std::to_string(s.slots()));
  for (std::size_t i = 0; i < s.items(); ++i) {
    if (s(i, 0) == SlotMatrix::missing || s(i, 1) == SlotMatrix::missing) continue;
    a.push_back(s(i, 0));
    b.push_back(s(i, 1));
  }
}

}  // namespace

std::string_view to_string(AgreementMode mode) {
  return mode == AgreementMode::interrater ? "inter" : "intra";
}

std::string_view to_string(KappaMethod method) {
  switch (method) {
    case KappaMethod::cohen: return "cohen";
    case KappaMethod::scott: return "scott";
    case KappaMethod::fleiss: return "fleiss";
    case KappaMethod::conger: return "conger";
  }
  return "conger";
}

AgreementMode parse_agreement_mode(std::string_view s) {
  if (s == "inter" || s == "interrater") return AgreementMode::interrater;
  if (s == "intra" || s == "intrarater") return AgreementMode::intrarater;
  throw InputError("unknown agreement mode '" + std::string(s) + "'");
}

KappaMethod parse_kappa_method(std::string_view s) {
  if (s == "cohen") return KappaMethod::cohen;
  if (s == "scott") return KappaMethod::scott;
  if (s == "fleiss") return KappaMethod::fleiss;
  if (s == "conger") return KappaMethod::conger;
  throw InputError("unknown kappa method '" + std::string(s) + "'");
}

bool SlotMatrix::has_missing() const {
  return std::find(data_.begin(), data_.end(), missing) != data_.end();
}

ItemRatingMatrix SlotMatrix::counts() const {
  ItemRatingMatrix m;
  m.n1.assign(items_, 0);
  m.n0.assign(items_, 0);
  for (std::size_t i = 0; i < items_; ++i)
    for (std::size_t s = 0; s < slots_; ++s) {
      auto v = (*this)(i, s);
      if (v == 1) ++m.n1[i];
      if (v == 0) ++m.n0[i];
    }
  return m;
}

KappaEstimate cohen_kappa(std::span<const int> a, std::span<const int> b) {
  auto t = tabulate(a, b);
  const double p_c = t.mean_a * t.mean_b + (1 - t.mean_a) * (1 - t.mean_b);
  return finish(t.agree, p_c, t.n, KappaMethod::cohen);
}

KappaEstimate scotts_pi(std::span<const int> a, std::span<const int> b) {
  auto t = tabulate(a, b);
  const double q = 0.5 * (t.mean_a + t.mean_b);
  return finish(t.agree, q * q + (1 - q) * (1 - q), t.n, KappaMethod::scott);
}

KappaEstimate fleiss_kappa(const ItemRatingMatrix& m) {
  const std::size_t N = m.n_items();
  if (N == 0 || m.n0.size() != N) throw InputError("Fleiss' kappa needs at least one item");
  const int M = m.n1[0] + m.n0[0];
  if (M < 2) throw InputError("Fleiss' kappa needs at least two ratings per item");
  double p_o = 0, ones = 0;
  for (std::size_t i = 0; i < N; ++i) {
    const int n1 = m.n1[i], n0 = m.n0[i];
    if (n1 < 0 || n0 < 0) throw InputError("negative category count");
    if (n1 + n0 != M) throw UnequalRatingsPerItem();
    p_o += static_cast<double>(n1 * (n1 - 1) + n0 * (n0 - 1)) / (M * (M - 1));
    ones += n1;
  }
  p_o /= static_cast<double>(N);
  const double p1 = ones / (static_cast<double>(N) * M);
  return finish(p_o, p1 * p1 + (1 - p1) * (1 - p1), N, KappaMethod::fleiss);
}

KappaEstimate conger_kappa(const SlotMatrix& s) {
  const std::size_t N = s.items(), M = s.slots();
  if (M < 2) throw InputError("Conger's kappa needs at least two slots");
  double p_o = 0;
  std::size_t n_items = 0;
  std::vector<double> slot_ones(M, 0.0), slot_n(M, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    int n1 = 0, n0 = 0;
    for (std::size_t j = 0; j < M; ++j) {
      auto v = s(i, j);
      n1 += v == 1;
      n0 += v == 0;
    }
    const int m = n1 + n0;
    if (m < 2) continue;
    ++n_items;
    p_o += static_cast<double>(n1 * (n1 - 1) + n0 * (n0 - 1)) / (m * (m - 1));
    for (std::size_t j = 0; j < M; ++j) {
      auto v = s(i, j);
      if (v == SlotMatrix::missing) continue;
      slot_ones[j] += v;
      slot_n[j] += 1;
    }
  }
  if (n_items == 0) throw InputError("no item has two or more ratings");
  p_o /= static_cast<double>(n_items);

  // Category-1 proportion per slot; the category-0 proportions are their
  // complements, so both categories share the same between-slot variance.
  std::vector<double> prop;
  for (std::size_t j = 0; j < M; ++j)
    if (slot_n[j] > 0) prop.push_back(slot_ones[j] / slot_n[j]);
  const double m = static_cast<double>(prop.size());
  double mean = 0;
  for (double p : prop) mean += p;
  mean /= m;
  double var = 0;
  for (double p : prop) var += (p - mean) * (p - mean);
  var /= (m - 1);
  const double p_c = mean * mean + (1 - mean) * (1 - mean) - 2 * var / m;
  return finish(p_o, p_c, n_items, KappaMethod::conger);
}

KappaEstimate kappa(const SlotMatrix& slots, KappaMethod method) {
  switch (method) {
    case KappaMethod::cohen:
    case KappaMethod::scott: {
      std::vector<int> a, b;
      complete_pairs(slots, a, b);
      return method == KappaMethod::cohen ? cohen_kappa(a, b) : scotts_pi(a, b);
    }
    case KappaMethod::fleiss: return fleiss_kappa(slots.counts());
    case KappaMethod::conger: return conger_kappa(slots);
  }
  throw InputError("unknown kappa method");
}

SlotMatrix slot_matrix(const RatingsTable& table, AgreementMode mode) {
  const int I = table.n_subjects(), J = table.n_raters(), K = table.n_times();
  const bool inter = mode == AgreementMode::interrater;
  SlotMatrix s(static_cast<std::size_t>(I) * (inter ? K : J), inter ? J : K);
  for (std::size_t n = 0; n < table.size(); ++n) {
    const auto& c = table.cell(n);
    const std::size_t item = inter ? static_cast<std::size_t>(c.subject) * K + c.time
                                   : static_cast<std::size_t>(c.subject) * J + c.rater;
    s(item, inter ? c.rater : c.time) = static_cast<std::int8_t>(table.y(n));
  }
  return s;
}

KappaEstimate agreement_kappa(const RatingsTable& table, AgreementMode mode,
                              KappaMethod method) {
  if (mode == AgreementMode::interrater && table.n_raters() < 2)
    throw InputError("interrater kappa needs at least two raters");
  if (mode == AgreementMode::intrarater && table.n_times() < 2)
    throw InputError("intrarater kappa needs at least two time points");
  auto e = kappa(slot_matrix(table, mode), method);
  e.mode = mode;
  return e;
}

KappaEstimate interrater_kappa(const RatingsTable& table, KappaMethod method) {
  return agreement_kappa(table, AgreementMode::interrater, method);
}

KappaEstimate intrarater_kappa(const RatingsTable& table, KappaMethod method) {
  return agreement_kappa(table, AgreementMode::intrarater, method);
}

}  // namespace relikit
