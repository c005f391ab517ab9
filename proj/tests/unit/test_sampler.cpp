#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "relikit/errors.hpp"
#include "relikit/sampler.hpp"
#include "relikit/sim.hpp"

using namespace relikit;

namespace {

// Zero-mean Gaussian with covariance given by its precision matrix.
class Gaussian final : public LogDensityTarget {
 public:
  explicit Gaussian(Eigen::MatrixXd precision) : P_(std::move(precision)) {}
  std::size_t dim() const override { return static_cast<std::size_t>(P_.rows()); }
  double log_density_gradient(std::span<const double> x, std::span<double> grad) const override {
    Eigen::Map<const Eigen::VectorXd> v(x.data(), P_.rows());
    Eigen::VectorXd g = -P_ * v;
    std::copy(g.begin(), g.end(), grad.begin());
    return 0.5 * v.dot(g);
  }

 private:
  Eigen::MatrixXd P_;
};

class Broken final : public LogDensityTarget {
 public:
  std::size_t dim() const override { return 2; }
  double log_density_gradient(std::span<const double>, std::span<double>) const override {
    throw NonFiniteDensity("nowhere finite");
  }
};

Gaussian bivariate(double rho, double s1 = 1, double s2 = 1) {
  Eigen::Matrix2d S;
  S << s1 * s1, rho * s1 * s2, rho * s1 * s2, s2 * s2;
  return Gaussian(S.inverse());
}

std::vector<std::vector<double>> chains_of(const PosteriorDraws& d, Eigen::Index col) {
  std::vector<std::vector<double>> out(d.nchains);
  for (int c = 0; c < d.nchains; ++c)
    for (int t = 0; t < d.niters; ++t) out[c].push_back(d.draws(d.row(c, t), col));
  return out;
}

}  // namespace

TEST(Sampler, StandardNormalMoments) {
  Gaussian target(Eigen::MatrixXd::Identity(5, 5));
  SamplerConfig cfg;
  cfg.niters = 2000;
  cfg.nwarmup = 500;
  cfg.seed = 11;
  auto d = run_nuts(target, cfg);
  ASSERT_EQ(d.n_draws(), 4000u);
  for (Eigen::Index c = 0; c < 5; ++c) {
    auto col = d.draws.col(c);
    double mean = col.mean();
    double sd = std::sqrt((col.array() - mean).square().sum() / (col.size() - 1));
    double ess = ess_bulk(chains_of(d, c));
    double mcse = sd / std::sqrt(ess);
    EXPECT_LT(std::abs(mean), 4 * mcse) << "coordinate " << c;
    EXPECT_NEAR(sd, 1.0, 0.05) << "coordinate " << c;
  }
  EXPECT_EQ(d.divergence_count(), 0u);
}

TEST(Sampler, CorrelatedNormal) {
  auto target = bivariate(0.9);
  SamplerConfig cfg;
  cfg.niters = 2000;
  cfg.nwarmup = 500;
  cfg.seed = 3;
  auto d = run_nuts(target, cfg);
  double r = Eigen::VectorXd(d.draws.col(0)).dot(d.draws.col(1)) / d.n_draws();
  double s0 = std::sqrt(d.draws.col(0).squaredNorm() / d.n_draws());
  double s1 = std::sqrt(d.draws.col(1).squaredNorm() / d.n_draws());
  EXPECT_NEAR(r / (s0 * s1), 0.9, 0.05);
}

TEST(Sampler, KolmogorovSmirnovOneDimensional) {
  Gaussian target(Eigen::MatrixXd::Identity(1, 1));
  SamplerConfig cfg;
  cfg.niters = 4000;
  cfg.nwarmup = 500;
  cfg.seed = 5;
  auto d = run_nuts(target, cfg);
  std::vector<double> x(d.draws.col(0).begin(), d.draws.col(0).end());
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double D = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double F = 0.5 * std::erfc(-x[i] / std::sqrt(2.0));
    D = std::max({D, std::abs(F - i / n), std::abs((i + 1) / n - F)});
  }
  // Asymptotic critical value at alpha = 0.01.
  EXPECT_LT(D, 1.628 / std::sqrt(n));
}

TEST(Sampler, HigherTargetAcceptShrinksStepsize) {
  auto target = bivariate(0.7, 1.0, 3.0);
  std::vector<double> eps;
  for (double delta : {0.6, 0.8, 0.95}) {
    SamplerConfig cfg;
    cfg.niters = 200;
    cfg.nwarmup = 500;
    cfg.nchains = 1;
    cfg.seed = 42;
    cfg.target_accept = delta;
    eps.push_back(run_nuts(target, cfg).chains[0].stepsize);
  }
  EXPECT_GT(eps[0], eps[1]);
  EXPECT_GT(eps[1], eps[2]);
}

TEST(Sampler, DeterministicAcrossThreadCounts) {
  auto target = bivariate(0.5);
  SamplerConfig cfg;
  cfg.niters = 300;
  cfg.nwarmup = 150;
  cfg.nchains = 3;
  cfg.seed = 77;
  auto a = run_nuts(target, cfg);
  cfg.threads = 3;
  auto b = run_nuts(target, cfg);
  EXPECT_EQ(a.draws, b.draws);
  EXPECT_EQ(a.divergent, b.divergent);
  cfg.seed = 78;
  auto c = run_nuts(target, cfg);
  EXPECT_NE(a.draws, c.draws);
}

TEST(Sampler, ConfigValidation) {
  SamplerConfig cfg;
  cfg.target_accept = 1.0;
  EXPECT_THROW(cfg.validate(), InputError);
  cfg = {};
  cfg.niters = 0;
  EXPECT_THROW(cfg.validate(), InputError);
  cfg = {};
  cfg.threads = 0;
  EXPECT_THROW(cfg.validate(), InputError);
  EXPECT_NO_THROW(SamplerConfig{}.validate());
  SamplerConfig def;
  EXPECT_EQ(def.niters, 2000);
  EXPECT_EQ(def.nwarmup, 200);
  EXPECT_EQ(def.nchains, 2);
}

TEST(Sampler, NowhereFiniteTargetFails) {
  SamplerConfig cfg;
  cfg.niters = 10;
  cfg.nwarmup = 10;
  EXPECT_THROW(run_nuts(Broken{}, cfg), NumericalError);
}

TEST(Sampler, IndexOfAndNames) {
  auto target = bivariate(0.0);
  SamplerConfig cfg;
  cfg.niters = 20;
  cfg.nwarmup = 20;
  auto d = run_nuts(target, cfg, {"a", "b"});
  EXPECT_EQ(d.index_of("b"), 1u);
  EXPECT_THROW(d.index_of("c"), InputError);
  EXPECT_THROW(run_nuts(target, cfg, {"a"}), DimensionMismatch);
}

TEST(Sampler, ModelFitConvergesWithDefaults) {
  auto hyper = reference_parameters(DatasetReference::gait, ModelKind::IN);
  auto table = simulate_dataset(ModelKind::IN, hyper, reference_dims(DatasetReference::gait),
                                Link::logit, 2);
  ModelSpec spec;
  Model model(spec, table);
  SamplerConfig cfg;
  cfg.seed = 9;
  auto d = sample(model, cfg);
  ASSERT_EQ(d.dim(), model.dim());
  auto diag = diagnostics(d);
  for (auto n : model.layout().hyperparameter_indices())
    EXPECT_LT(diag.rhat[static_cast<Eigen::Index>(n)], 1.05) << d.names[n];
  // Constrained draws satisfy the parameter invariants.
  for (std::size_t r = 0; r < d.n_draws(); ++r) {
    Eigen::VectorXd row = d.draws.row(static_cast<Eigen::Index>(r));
    auto p = model.layout().unflatten({row.data(), model.dim()});
    ASSERT_GT(p.sigma_u, 0.0);
    ASSERT_GT(p.sigma_v.minCoeff(), 0.0);
    ASSERT_GT(p.sigma_w.minCoeff(), 0.0);
  }
}
