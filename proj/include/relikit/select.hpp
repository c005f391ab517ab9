#pragma once

#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "relikit/data.hpp"
#include "relikit/model.hpp"
#include "relikit/sampler.hpp"

namespace relikit {

struct LooResult {
  double elpd_loo = 0;
  double p_loo = 0;
  double looic = 0;  // -2 * elpd_loo
  Eigen::VectorXd pareto_k;
  Eigen::VectorXd elpd_pointwise;
  std::size_t n_bad_k = 0;  // pareto_k > bad_k_threshold
};

inline constexpr double bad_k_threshold = 0.7;
inline constexpr std::size_t min_loo_draws = 100;

/// Conditional Bernoulli log-likelihood, draws x observations. Draws are in
/// the model's constrained layout.
Eigen::MatrixXd pointwise_loglik(const Model& model, const PosteriorDraws& draws);
Eigen::MatrixXd pointwise_loglik(const ModelSpec& spec, const PosteriorDraws& draws,
                                 const RatingsTable& table);

/// Generalized Pareto fit (shape k, scale sigma) to positive exceedances
/// sorted ascending, with the weakly informative shrinkage of k towards 0.5.
std::pair<double, double> fit_generalized_pareto(std::span<const double> x);

/// Pareto-smoothed log importance weights of one observation, normalised to
/// sum to one on the exp scale. Returns the fitted shape k.
double pareto_smooth(std::vector<double>& log_weights);

/// Leave-one-out cross-validation by Pareto-smoothed importance sampling.
/// Throws TooFewDraws below min_loo_draws rows.
LooResult psis_loo(const Eigen::MatrixXd& loglik);

/// Smallest LOOIC; exact ties go to the simpler model (IN, then PN, then FN).
ModelKind select_model(const std::vector<std::pair<ModelKind, LooResult>>& fits);
ModelKind select_model(const std::vector<std::pair<ModelKind, double>>& looics);

}  // namespace relikit
