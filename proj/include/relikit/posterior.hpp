#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "relikit/data.hpp"
#include "relikit/model.hpp"
#include "relikit/rng.hpp"
#include "relikit/sampler.hpp"

namespace relikit {

/// How the fully nested time correlation is computed. `derived` uses the
/// covariance implied by the model; `as_printed` drops the shared rater term
/// from the numerator of Corr_T.
enum class FormulaVariant { derived, as_printed };

std::string_view to_string(FormulaVariant v);
FormulaVariant parse_formula_variant(std::string_view s);

struct CorrelationSummary {
  double corr_R = 0;  // two raters, same subject and time
  double corr_T = 0;  // two times, same subject and rater
  double rho_R = 0;   // 0 when the model has no rater correlation
  double rho_T = 0;
  FormulaVariant variant = FormulaVariant::derived;
};

/// Covariance of the linear predictor over the J*K cells of one subject,
/// indexed j * K + k.
Eigen::MatrixXd predictor_covariance(ModelKind kind, const ParamVector& params, int J, int K);

/// Marginal correlations of the linear predictor. With slot-specific
/// variances the pairwise correlations are averaged over all pairs.
/// J and K default to 2 or the number of slot-specific sigmas; pass them
/// explicitly for an unstructured fully nested time block.
CorrelationSummary marginal_correlations(ModelKind kind, const ParamVector& params,
                                         FormulaVariant variant = FormulaVariant::derived,
                                         int J = 0, int K = 0);

/// Draws new random effects from their prior given the hyperparameters in
/// `params` (beta and sigmas/rhos; u, v, w are ignored), then outcomes on the
/// model's design.
std::vector<int> replicate_outcomes(const Model& model, const ParamVector& params, Rng& rng);

struct PredictiveKappa {
  std::vector<double> inter;  // one entry per retained replicate
  std::vector<double> intra;
  std::size_t n_draws = 0;
  std::size_t n_dropped = 0;  // replicates with degenerate agreement
  double mean_inter = 0, lower_inter = 0, upper_inter = 0;
  double mean_intra = 0, lower_intra = 0, upper_intra = 0;
};

/// Conger interrater and intrarater kappa of one replicated dataset per
/// draw. Draws are in the model's constrained layout. Replicate s uses the
/// RNG stream (seed, s), so results do not depend on `threads`.
PredictiveKappa posterior_predictive_kappa(const Model& model, const RatingsTable& table,
                                           const PosteriorDraws& draws, std::uint64_t seed,
                                           int threads = 1);
PredictiveKappa posterior_predictive_kappa(const ModelSpec& spec, const PosteriorDraws& draws,
                                           const RatingsTable& table, std::uint64_t seed,
                                           int threads = 1);

struct ParameterSummary {
  std::string name;
  double mean = 0;
  double sd = 0;
  double lower = 0;  // 2.5% quantile
  double upper = 0;  // 97.5% quantile
};

/// Type-7 (linear interpolation) sample quantile.
double quantile(std::vector<double> values, double prob);
ParameterSummary summarize_values(std::string name, std::span<const double> values);

/// One row per coordinate of the draws.
std::vector<ParameterSummary> summarize(const PosteriorDraws& draws);

/// Per-draw marginal and random-effect correlations, averaged over draws:
/// rows corr_R, corr_T, rho_R, rho_T, plus corr_R_as_printed and
/// corr_T_as_printed for the fully nested model.
std::vector<ParameterSummary> correlation_summaries(const ModelSpec& spec, const ParamLayout& layout,
                                                    const PosteriorDraws& draws);

}  // namespace relikit
