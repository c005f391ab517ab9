#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "relikit/agreement.hpp"
#include "relikit/data.hpp"
#include "relikit/model.hpp"
#include "relikit/rng.hpp"
#include "relikit/sampler.hpp"

namespace relikit {

enum class DatasetReference { gait, radiograph, custom };

std::string_view to_string(DatasetReference r);
DatasetReference parse_dataset_reference(std::string_view s);

struct Dims {
  int I = 0, J = 0, K = 0;
};

/// Subjects x raters x times of a reference dataset.
Dims reference_dims(DatasetReference r);

/// Generating hyperparameters (posterior means of the reference fits) for a
/// model kind: sigmas, correlations and an intercept of zero.
ParamVector reference_parameters(DatasetReference r, ModelKind kind);

/// Random-effect-free lattice table (every cell once, outcomes 0) with ids
/// "1".."I" etc.
RatingsTable lattice_table(Dims dims);

/// Generates complete-block datasets from one of the three models.
class Simulator {
 public:
  /// `hyper` needs beta (size 1: the intercept), sigma_u, sigma_v, sigma_w
  /// and the correlations that `kind` uses, all with common structure or
  /// slot-specific sizes matching dims.
  Simulator(ModelKind kind, Link link, const ParamVector& hyper, Dims dims);

  const RatingsTable& design() const { return lattice_; }
  const Model& model() const { return model_; }
  RatingsTable simulate(Rng& rng) const;

 private:
  static ModelSpec make_spec(ModelKind kind, Link link, const ParamVector& hyper);
  RatingsTable lattice_;
  Model model_;
  ParamVector hyper_;
};

RatingsTable simulate_dataset(ModelKind kind, const ParamVector& hyper, Dims dims, Link link,
                              std::uint64_t seed);

struct TrueKappa {
  double inter = 0;
  double intra = 0;
  std::size_t n_used = 0;      // replicates with defined kappas
  std::size_t n_degenerate = 0;
};

/// Average Conger interrater and intrarater kappa over nreps simulated
/// datasets. Replicate r uses the RNG stream (seed, r).
TrueKappa true_kappa(ModelKind kind, const ParamVector& hyper, Dims dims, Link link, int nreps,
                     std::uint64_t seed, int threads = 1);

/// E[P(y = 1)] under the model, by quadrature over the summed random effects.
double marginal_success_probability(ModelKind kind, const ParamVector& hyper, Link link);

/// Intercept giving the requested marginal success probability.
double calibrate_intercept(ModelKind kind, const ParamVector& hyper, Link link,
                           double target = 0.5);

struct ScenarioConfig {
  DatasetReference reference = DatasetReference::gait;
  ModelKind sim_kind = ModelKind::IN;
  Dims dims = reference_dims(DatasetReference::gait);
  ParamVector generating = reference_parameters(DatasetReference::gait, ModelKind::IN);
  Link link = Link::probit;
  int n_replicates = 30;
  int true_kappa_reps = 2000;
  std::uint64_t seed = 1;

  static ScenarioConfig reference_scenario(DatasetReference r, ModelKind kind);
  void validate() const;
};

inline constexpr int paper_replicates = 148;
inline constexpr int paper_true_kappa_reps = 10000;

inline constexpr std::array<ModelKind, 3> all_kinds{ModelKind::IN, ModelKind::PN, ModelKind::FN};
inline constexpr std::array<std::string_view, 5> estimator_names{"freq", "BIN", "BPN", "BFN", "LOO"};

struct StudyConfig {
  DatasetReference reference = DatasetReference::gait;
  std::vector<ScenarioConfig> scenarios;  // one per generating model
  SamplerConfig sampler;
  std::size_t ppk_draws = 1000;  // posterior-predictive replicates per fit (0 = every draw)
  std::uint64_t seed = 1;
  int threads = 1;
  std::optional<std::filesystem::path> checkpoint;  // JSON lines, one per finished replicate

  /// Reference scenarios for the three generating models.
  static StudyConfig reference_study(DatasetReference r, int n_replicates = 30,
                                     int true_kappa_reps = 2000);
  void validate() const;
};

struct ReplicateRecord {
  ModelKind sim_kind = ModelKind::IN;
  int replicate = 0;
  bool ok = false;
  std::string error;
  std::array<double, 3> looic{};  // BIN, BPN, BFN
  std::array<double, 3> p_loo{};
  ModelKind selected = ModelKind::IN;
  double freq_inter = 0, freq_intra = 0;
  std::array<double, 3> bayes_inter{}, bayes_intra{};
  std::array<std::size_t, 3> divergences{};
};

struct KappaCell {
  ModelKind sim_kind = ModelKind::IN;
  AgreementMode mode = AgreementMode::interrater;
  std::string estimator;
  double truth = 0;
  double mean = 0;
  double rmse = 0;
  std::size_t n = 0;
};

struct StudyResult {
  DatasetReference reference = DatasetReference::gait;
  std::vector<ReplicateRecord> records;
  std::vector<TrueKappa> truths;       // per scenario
  std::vector<ModelKind> sim_kinds;    // per scenario
  Eigen::MatrixXd selection;           // scenario x {BIN, BPN, BFN}, rows sum to 1
  std::vector<std::size_t> failures;   // per scenario
  std::vector<KappaCell> kappa_table;
};

/// One replicate of the study: simulate, fit BIN/BPN/BFN, compare by LOOIC and
/// compute the five kappa estimators.
ReplicateRecord run_replicate(const ScenarioConfig& scenario, const StudyConfig& study, int replicate);

/// Aggregates finished replicates into the selection and kappa tables.
StudyResult aggregate_study(const StudyConfig& config, const std::vector<TrueKappa>& truths,
                            std::vector<ReplicateRecord> records);

using StudyProgress = std::function<void(const ReplicateRecord&)>;

/// Runs every replicate of every scenario, skipping replicates already in the
/// checkpoint file, and appending new ones to it as they finish.
StudyResult run_study(const StudyConfig& config, const StudyProgress& progress = {});

}  // namespace relikit
