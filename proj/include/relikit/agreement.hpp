#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "relikit/data.hpp"

namespace relikit {

enum class AgreementMode { interrater, intrarater };
enum class KappaMethod { cohen, scott, fleiss, conger };

std::string_view to_string(AgreementMode mode);
std::string_view to_string(KappaMethod method);
AgreementMode parse_agreement_mode(std::string_view s);
KappaMethod parse_kappa_method(std::string_view s);

struct KappaEstimate {
  double kappa = 0.0;
  double p_o = 0.0;
  double p_c = 0.0;
  std::size_t n_items = 0;
  std::optional<AgreementMode> mode;
  KappaMethod method = KappaMethod::conger;
};

/// Per-item category counts, the input of Fleiss' kappa.
struct ItemRatingMatrix {
  std::vector<int> n1;  // ratings of category 1 per item
  std::vector<int> n0;  // ratings of category 0 per item

  std::size_t n_items() const { return n1.size(); }
};

/// Items x slots binary matrix with missing entries.
///
/// Slots are raters (interrater pooling) or time points (intrarater pooling).
class SlotMatrix {
 public:
  static constexpr std::int8_t missing = -1;

  SlotMatrix() = default;
  SlotMatrix(std::size_t items, std::size_t slots)
      : items_(items), slots_(slots), data_(items * slots, missing) {}

  std::size_t items() const { return items_; }
  std::size_t slots() const { return slots_; }
  std::int8_t operator()(std::size_t item, std::size_t slot) const {
    return data_[item * slots_ + slot];
  }
  std::int8_t& operator()(std::size_t item, std::size_t slot) {
    return data_[item * slots_ + slot];
  }
  bool has_missing() const;
  ItemRatingMatrix counts() const;

 private:
  std::size_t items_ = 0, slots_ = 0;
  std::vector<std::int8_t> data_;
};

KappaEstimate cohen_kappa(std::span<const int> a, std::span<const int> b);
KappaEstimate scotts_pi(std::span<const int> a, std::span<const int> b);
KappaEstimate fleiss_kappa(const ItemRatingMatrix& m);
KappaEstimate conger_kappa(const SlotMatrix& slots);

/// Dispatches on method. Cohen and Scott need exactly two slots; items with a
/// missing entry are dropped for them.
KappaEstimate kappa(const SlotMatrix& slots, KappaMethod method);

/// Items are (subject, time) pairs and slots are raters for interrater
/// pooling; items are (subject, rater) pairs and slots are times for
/// intrarater pooling.
SlotMatrix slot_matrix(const RatingsTable& table, AgreementMode mode);

KappaEstimate interrater_kappa(const RatingsTable& table,
                               KappaMethod method = KappaMethod::conger);
KappaEstimate intrarater_kappa(const RatingsTable& table,
                               KappaMethod method = KappaMethod::conger);
KappaEstimate agreement_kappa(const RatingsTable& table, AgreementMode mode,
                              KappaMethod method = KappaMethod::conger);

}  // namespace relikit
