#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "relikit/errors.hpp"
#include "relikit/io.hpp"
#include "relikit/sim.hpp"

using namespace relikit;

namespace {

ParamVector flat_hyper(ModelKind kind, double s, double b0 = 0.0) {
  ParamVector p = reference_parameters(DatasetReference::gait, kind);
  p.beta[0] = b0;
  p.sigma_u = s;
  p.sigma_v.setConstant(s);
  p.sigma_w.setConstant(s);
  return p;
}

double mean_y(const RatingsTable& t) {
  double s = 0;
  for (int y : t.outcomes()) s += y;
  return s / static_cast<double>(t.size());
}

StudyConfig tiny_study(const std::filesystem::path& ckpt = {}) {
  StudyConfig c = StudyConfig::reference_study(DatasetReference::gait, 2, 40);
  for (auto& s : c.scenarios) s.dims = {10, 3, 2};
  c.sampler.niters = 100;
  c.sampler.nwarmup = 100;
  c.ppk_draws = 50;
  c.seed = 5;
  if (!ckpt.empty()) c.checkpoint = ckpt;
  return c;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "relikit_sim_test";
  std::filesystem::create_directories(dir);
  auto p = dir / name;
  std::filesystem::remove(p);
  return p;
}

}  // namespace

TEST(Simulate, ZeroVarianceIsFairCoin) {
  for (auto link : {Link::logit, Link::probit}) {
    auto t = simulate_dataset(ModelKind::IN, flat_hyper(ModelKind::IN, 1e-9), {1000, 5, 2}, link, 1);
    ASSERT_EQ(t.size(), 10000u);
    EXPECT_GE(mean_y(t), 0.45);
    EXPECT_LE(mean_y(t), 0.55);
  }
}

TEST(Simulate, CompleteBlockWithLatticeIds) {
  auto t = simulate_dataset(ModelKind::FN, reference_parameters(DatasetReference::radiograph, ModelKind::FN),
                            reference_dims(DatasetReference::radiograph), Link::probit, 2);
  auto d = validate(t);
  EXPECT_TRUE(d.is_complete_block);
  EXPECT_EQ(d.n_obs, 490u);
  EXPECT_EQ(t.subject_ids().front(), "1");
}

TEST(Simulate, RatersAgreeMoreWithinSubjects) {
  auto hyper = reference_parameters(DatasetReference::gait, ModelKind::IN);
  const Dims dims = reference_dims(DatasetReference::gait);
  double within = 0, across = 0;
  for (int r = 0; r < 100; ++r) {
    auto t = simulate_dataset(ModelKind::IN, hyper, dims, Link::probit, 100 + r);
    double w = 0, a = 0, nw = 0, na = 0;
    for (int i = 0; i < dims.I; ++i)
      for (int k = 0; k < dims.K; ++k) {
        int y1 = t.y(*t.find({i, 0, k}));
        w += y1 == t.y(*t.find({i, 1, k}));
        nw += 1;
        a += y1 == t.y(*t.find({(i + 1) % dims.I, 1, k}));
        na += 1;
      }
    within += w / nw;
    across += a / na;
  }
  EXPECT_GT(within, across);
}

TEST(Simulate, PerfectTimeCorrelationRepeatsRatings) {
  ParamVector p = reference_parameters(DatasetReference::gait, ModelKind::FN);
  p.sigma_u = 1e-9;
  p.sigma_v.setConstant(1e-9);
  p.sigma_w.setConstant(3.0);
  p.rho_T = 1.0;
  auto t = simulate_dataset(ModelKind::FN, p, {200, 3, 2}, Link::probit, 3);
  EXPECT_GT(intrarater_kappa(t).kappa, 0.6);
  EXPECT_LT(std::abs(interrater_kappa(t).kappa), 0.1);
}

TEST(Simulate, MarginalMeanMatchesQuadrature) {
  for (auto kind : {ModelKind::IN, ModelKind::PN, ModelKind::FN}) {
    ParamVector p = reference_parameters(DatasetReference::gait, kind);
    p.beta[0] = 0.7;
    const double target = marginal_success_probability(kind, p, Link::probit);
    Simulator sim(kind, Link::probit, p, reference_dims(DatasetReference::gait));
    auto rng = make_rng(4, 0);
    double ones = 0, n = 0;
    while (n < 1e6) {
      auto t = sim.simulate(rng);
      ones += mean_y(t) * t.size();
      n += t.size();
    }
    EXPECT_NEAR(ones / n, target, 0.005) << to_string(kind);
  }
}

TEST(Simulate, InterceptCalibration) {
  for (auto kind : {ModelKind::IN, ModelKind::PN, ModelKind::FN})
    for (auto link : {Link::logit, Link::probit}) {
      auto p = reference_parameters(DatasetReference::radiograph, kind);
      EXPECT_NEAR(calibrate_intercept(kind, p, link), 0.0, 1e-8);
      double b = calibrate_intercept(kind, p, link, 0.3);
      EXPECT_LT(b, 0.0);
      p.beta[0] = b;
      EXPECT_NEAR(marginal_success_probability(kind, p, link), 0.3, 1e-8);
    }
}

TEST(Simulate, Deterministic) {
  auto p = reference_parameters(DatasetReference::gait, ModelKind::PN);
  auto a = simulate_dataset(ModelKind::PN, p, {8, 3, 2}, Link::logit, 77);
  auto b = simulate_dataset(ModelKind::PN, p, {8, 3, 2}, Link::logit, 77);
  auto c = simulate_dataset(ModelKind::PN, p, {8, 3, 2}, Link::logit, 78);
  EXPECT_EQ(a.outcomes(), b.outcomes());
  EXPECT_NE(a.outcomes(), c.outcomes());
}

TEST(TrueKappa, ZeroVarianceIsChance) {
  auto k = true_kappa(ModelKind::IN, flat_hyper(ModelKind::IN, 1e-9), reference_dims(DatasetReference::gait),
                      Link::probit, 1000, 1);
  EXPECT_NEAR(k.inter, 0.0, 0.01);
  EXPECT_NEAR(k.intra, 0.0, 0.01);
  EXPECT_EQ(k.n_used + k.n_degenerate, 1000u);
}

TEST(TrueKappa, ThreadIndependent) {
  auto p = reference_parameters(DatasetReference::gait, ModelKind::FN);
  auto a = true_kappa(ModelKind::FN, p, reference_dims(DatasetReference::gait), Link::probit, 200, 9, 1);
  auto b = true_kappa(ModelKind::FN, p, reference_dims(DatasetReference::gait), Link::probit, 200, 9, 3);
  EXPECT_EQ(a.inter, b.inter);
  EXPECT_EQ(a.intra, b.intra);
}

TEST(TrueKappa, IndependentModelLargeSample) {
  // The J rater and K time effects are shared by every subject, so one large
  // dataset does not pin kappa down; the average over large datasets does.
  auto p = reference_parameters(DatasetReference::gait, ModelKind::IN);
  double inter = 0, intra = 0;
  const int n = 100;
  for (int r = 0; r < n; ++r) {
    auto t = simulate_dataset(ModelKind::IN, p, {5000, 3, 2}, Link::probit, 1000 + r);
    inter += interrater_kappa(t).kappa / n;
    intra += intrarater_kappa(t).kappa / n;
  }
  EXPECT_NEAR(inter, 0.261, 0.02);
  EXPECT_NEAR(intra, 0.271, 0.02);
  auto k = true_kappa(ModelKind::IN, p, reference_dims(DatasetReference::gait), Link::probit, 1000, 13);
  EXPECT_NEAR(k.inter, 0.261, 0.03);
  EXPECT_NEAR(k.intra, 0.271, 0.03);
}

TEST(Study, ConfigValidation) {
  auto c = StudyConfig::reference_study(DatasetReference::radiograph);
  EXPECT_EQ(c.scenarios.size(), 3u);
  EXPECT_EQ(c.scenarios[0].n_replicates, 30);
  EXPECT_EQ(c.scenarios[0].true_kappa_reps, 2000);
  EXPECT_EQ(c.scenarios[0].dims.I, 35);
  EXPECT_NO_THROW(c.validate());
  c.scenarios[1].sim_kind = ModelKind::IN;
  EXPECT_THROW(c.validate(), InputError);
  auto s = ScenarioConfig::reference_scenario(DatasetReference::gait, ModelKind::FN);
  s.n_replicates = 0;
  EXPECT_THROW(s.validate(), InputError);
}

TEST(Study, DeterministicWithResume) {
  auto full = run_study(tiny_study());
  ASSERT_EQ(full.records.size(), 6u);
  for (Eigen::Index r = 0; r < full.selection.rows(); ++r)
    EXPECT_NEAR(full.selection.row(r).sum(), 1.0, 1e-12);
  EXPECT_EQ(full.kappa_table.size(), 3u * 2u * estimator_names.size());

  auto again = run_study(tiny_study());
  EXPECT_EQ(study_result_to_json(full).dump(), study_result_to_json(again).dump());

  // Interrupt after two replicates: keep the header and two records, plus a
  // torn line.
  auto path = temp_path("ckpt.jsonl");
  run_study(tiny_study(path));
  std::ifstream in(path);
  std::string header, r1, r2;
  std::getline(in, header);
  std::getline(in, r1);
  std::getline(in, r2);
  in.close();
  std::ofstream(path, std::ios::trunc) << header << '\n' << r1 << '\n' << r2 << '\n' << r2.substr(0, 20);

  int rerun = 0;
  auto resumed = run_study(tiny_study(path), [&](const ReplicateRecord&) { ++rerun; });
  EXPECT_EQ(rerun, 4);
  EXPECT_EQ(study_result_to_json(full).dump(), study_result_to_json(resumed).dump());

  auto other = tiny_study(path);
  other.seed = 6;
  EXPECT_THROW(run_study(other), InputError);
}
