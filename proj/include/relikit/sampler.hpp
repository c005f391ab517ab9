#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "relikit/data.hpp"
#include "relikit/model.hpp"

namespace relikit {

/// Differentiable log density over R^dim.
class LogDensityTarget {
 public:
  virtual ~LogDensityTarget() = default;
  virtual std::size_t dim() const = 0;
  /// Returns the log density and writes its gradient. May throw
  /// NumericalError, which the sampler treats as a zero-density point.
  virtual double log_density_gradient(std::span<const double> x, std::span<double> grad) const = 0;
};

class ModelTarget final : public LogDensityTarget {
 public:
  explicit ModelTarget(const Model& model) : model_(model) {}
  std::size_t dim() const override { return model_.dim(); }
  double log_density_gradient(std::span<const double> x, std::span<double> grad) const override {
    return model_.log_density_gradient(x, grad);
  }

 private:
  const Model& model_;
};

struct SamplerConfig {
  int niters = 2000;  // post-warmup draws per chain
  int nwarmup = 200;
  int nchains = 2;
  std::uint64_t seed = 0;
  double target_accept = 0.8;
  int max_tree_depth = 10;
  int threads = 1;
  double init_radius = 2.0;

  void validate() const;
};

struct ChainInfo {
  double stepsize = 0;
  Eigen::VectorXd inv_metric;
  std::size_t divergences = 0;         // post-warmup
  std::size_t warmup_divergences = 0;
  double mean_accept_stat = 0;
  double mean_tree_depth = 0;
  std::size_t n_leapfrog = 0;          // all iterations, warmup included
};

/// Post-warmup draws, chain-major: row (chain * niters + iter).
struct PosteriorDraws {
  int nchains = 0;
  int niters = 0;
  std::vector<std::string> names;
  Eigen::MatrixXd draws;
  std::vector<std::uint8_t> divergent;  // per row
  std::vector<ChainInfo> chains;

  std::size_t dim() const { return static_cast<std::size_t>(draws.cols()); }
  std::size_t n_draws() const { return static_cast<std::size_t>(draws.rows()); }
  std::size_t row(int chain, int iter) const {
    return static_cast<std::size_t>(chain) * static_cast<std::size_t>(niters) +
           static_cast<std::size_t>(iter);
  }
  std::size_t divergence_count() const;
  /// Index of a named coordinate; throws InputError when absent.
  std::size_t index_of(const std::string& name) const;
};

/// Multinomial no-U-turn sampler with a diagonal metric. Warmup adapts the
/// step size by dual averaging towards target_accept and the metric over
/// doubling windows. Deterministic given the config (including seed).
PosteriorDraws run_nuts(const LogDensityTarget& target, const SamplerConfig& config,
                        std::vector<std::string> names = {});

/// Fits a model; the returned draws are in constrained coordinates, laid out
/// by the model's ParamLayout.
PosteriorDraws sample(const ModelSpec& spec, const RatingsTable& table, const SamplerConfig& config);
PosteriorDraws sample(const Model& model, const SamplerConfig& config);

struct Diagnostics {
  std::vector<std::string> names;
  Eigen::VectorXd rhat;      // NaN when undefined (one chain, or constant draws)
  Eigen::VectorXd ess_bulk;
  double divergence_rate = 0;
};

/// Rank-normalised split R-hat (max of bulk and folded) and bulk ESS.
Diagnostics diagnostics(const PosteriorDraws& draws);

/// The chains of one coordinate, each a contiguous sequence.
double split_rhat(const std::vector<std::vector<double>>& chains);
double ess_bulk(const std::vector<std::vector<double>>& chains);

}  // namespace relikit
