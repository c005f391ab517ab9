#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "relikit/data.hpp"

namespace relikit {

/// Independent (IN), partially nested (PN) and fully nested (FN) random effects.
enum class ModelKind { IN, PN, FN };
enum class Link { logit, probit };
enum class CovStructure { common, separate, unstructured };
enum class RhoPrior { lkj, beta };

std::string_view to_string(ModelKind kind);
std::string_view to_string(Link link);
std::string_view to_string(CovStructure s);
std::string_view to_string(RhoPrior p);
ModelKind parse_model_kind(std::string_view s);  // "in"/"bin"/"IN"/...
Link parse_link(std::string_view s);
CovStructure parse_cov_structure(std::string_view s);
RhoPrior parse_rho_prior(std::string_view s);

/// Hyperpriors shared by the three models.
///
/// Variance components get inverse-gamma(gamma_a, gamma_b) priors, each
/// fixed-effect coefficient an independent normal(beta_mean, beta_sigma), and
/// exchangeable correlations either an LKJ(eta) prior or a Beta(beta_a,
/// beta_b) prior on (rho + 1) / 2.
struct PriorConfig {
  double gamma_a = 3.0;
  double gamma_b = 1.5;
  double beta_mean = 0.0;
  double beta_sigma = 1.0 / 0.3;
  double rho_R_eta = 1.0;
  double rho_T_eta = 1.0;
  double beta_a = 5.0;
  double beta_b = 5.0;
  RhoPrior rho_prior = RhoPrior::lkj;

  void validate() const;
};

struct ModelSpec {
  ModelKind kind = ModelKind::IN;
  Link link = Link::logit;
  CovStructure cov_R = CovStructure::common;  // FN rater block
  CovStructure cov_T = CovStructure::common;  // PN and FN time blocks
  bool intercept = true;
  // Unset means reference coding for PN and none otherwise.
  std::optional<TimeCoding> time_coding;
  PriorConfig priors;

  TimeCoding effective_time_coding() const;
};

struct ModelDims {
  int I = 0, J = 0, K = 0;
  int p = 0;  // fixed-effect columns
};

ModelDims model_dims(const ModelSpec& spec, const RatingsTable& table);

/// Model parameters in constrained coordinates.
///
/// Random-effect storage by kind:
///   IN: v[j], w[k]
///   PN: v[j * K + k]
///   FN: v[i * J + j], w[(i * J + j) * K + k]
/// sigma_v / sigma_w hold one entry for the common structure and one entry per
/// slot otherwise (FN sigma_w: K entries when separate, J * K when
/// unstructured).
struct ParamVector {
  Eigen::VectorXd beta;
  Eigen::VectorXd u;
  Eigen::VectorXd v;
  Eigen::VectorXd w;
  double sigma_u = 1.0;
  Eigen::VectorXd sigma_v;
  Eigen::VectorXd sigma_w;
  std::optional<double> rho_R;
  std::optional<double> rho_T;
};

/// Position of every parameter block in the flat coordinate vector. The same
/// layout is used for constrained and unconstrained coordinates.
class ParamLayout {
 public:
  ParamLayout(const ModelSpec& spec, ModelDims dims);

  struct Block {
    std::size_t offset = 0;
    std::size_t size = 0;
  };

  std::size_t dim() const { return dim_; }
  const ModelDims& dims() const { return dims_; }
  ModelKind kind() const { return kind_; }

  Block beta, u, v, w, sigma_u, sigma_v, sigma_w, rho_R, rho_T;

  /// Column names such as "beta[1]", "v[2,1]", "sigma_u", "rho_T".
  const std::vector<std::string>& names() const { return names_; }
  /// Indices of the hyperparameters (sigmas and rhos).
  std::vector<std::size_t> hyperparameter_indices() const;

  /// Exchangeable block dimension for the rater / time correlation (1 if absent).
  int rater_block_dim() const;
  int time_block_dim() const;

  Eigen::VectorXd flatten(const ParamVector& params) const;
  ParamVector unflatten(std::span<const double> flat) const;
  /// Throws DimensionMismatch when block sizes disagree with the layout.
  void check(const ParamVector& params) const;

 private:
  ModelKind kind_;
  ModelDims dims_;
  std::size_t dim_ = 0;
  std::vector<std::string> names_;
};

/// Lower end of the valid range of an exchangeable correlation on a
/// d-dimensional block.
double rho_lower_bound(int d);

/// Sigma = D Omega D with Omega exchangeable (unit diagonal, rho elsewhere).
/// sigmas has size 1 (common) or d. Throws NotPositiveDefinite.
Eigen::MatrixXd build_covariance(CovStructure structure, const Eigen::VectorXd& sigmas,
                                 double rho, int d);

/// Log density of one of the three models for a fixed data table.
///
/// Sampling happens in unconstrained coordinates: fixed effects as is,
/// random effects as standard-normal scores (non-centered), log-sigmas and
/// a scaled logit for each exchangeable correlation. Thread-safe.
class Model {
 public:
  Model(ModelSpec spec, const RatingsTable& table);

  const ModelSpec& spec() const { return spec_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t dim() const { return layout_.dim(); }
  std::size_t n_obs() const { return y_.size(); }
  const Eigen::MatrixXd& design() const { return X_; }

  ParamVector constrain(std::span<const double> z) const;
  Eigen::VectorXd unconstrain(const ParamVector& params) const;

  /// log_posterior(constrain(z)) + log |d constrain / dz|.
  double log_density(std::span<const double> z) const;
  /// Same value, with the exact gradient written to grad (size dim()).
  double log_density_gradient(std::span<const double> z, std::span<double> grad) const;
  double log_abs_det_jacobian(std::span<const double> z) const;

  Eigen::VectorXd linear_predictor(const ParamVector& params) const;
  /// Bernoulli log-likelihood per observation.
  Eigen::VectorXd pointwise_log_likelihood(const ParamVector& params) const;
  double log_likelihood(const ParamVector& params) const;
  /// Full log posterior in constrained coordinates (centered random effects),
  /// including all normalising constants except the LKJ one.
  double log_posterior(const ParamVector& params) const;

 private:
  struct Scratch;
  double evaluate(std::span<const double> z, double* grad) const;

  ModelSpec spec_;
  ParamLayout layout_;
  Eigen::MatrixXd X_;         // design with the PN sign convention folded in
  double re_sign_ = 1.0;      // -1 for PN
  std::vector<int> y_;
  std::vector<int> subject_, v_index_, w_index_;
};

/// Bernoulli log-likelihood of y given predictor eta, and its derivative.
double bernoulli_log_lik(Link link, int y, double eta);
double bernoulli_log_lik_deriv(Link link, int y, double eta);
double inverse_link(Link link, double eta);

Eigen::VectorXd linear_predictor(const ModelSpec& spec, const ParamVector& params,
                                 const RatingsTable& table);
double log_posterior(const ModelSpec& spec, const ParamVector& params,
                     const RatingsTable& table);
/// Gradient of the unconstrained log density at unconstrain(params).
Eigen::VectorXd grad_log_posterior(const ModelSpec& spec, const ParamVector& params,
                                   const RatingsTable& table);
ParamVector constrain(const ModelSpec& spec, ModelDims dims, std::span<const double> z);
Eigen::VectorXd unconstrain(const ModelSpec& spec, ModelDims dims, const ParamVector& params);

}  // namespace relikit
