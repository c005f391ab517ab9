#include "relikit/sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <thread>

#include "relikit/errors.hpp"
#include "relikit/io.hpp"
#include "relikit/posterior.hpp"
#include "relikit/select.hpp"

namespace relikit {

namespace {

ParamVector hyper(double su, Eigen::VectorXd sv, Eigen::VectorXd sw, std::optional<double> rho_R,
                  std::optional<double> rho_T) {
  ParamVector p;
  p.beta = Eigen::VectorXd::Zero(1);
  p.sigma_u = su;
  p.sigma_v = std::move(sv);
  p.sigma_w = std::move(sw);
  p.rho_R = rho_R;
  p.rho_T = rho_T;
  return p;
}

Eigen::VectorXd one(double x) { return Eigen::VectorXd::Constant(1, x); }

PosteriorDraws thin(const PosteriorDraws& draws, std::size_t n) {
  if (n == 0 || n >= draws.n_draws()) return draws;
  PosteriorDraws out;
  out.nchains = 1;
  out.niters = static_cast<int>(n);
  out.names = draws.names;
  out.draws.resize(static_cast<Eigen::Index>(n), draws.draws.cols());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = i * draws.n_draws() / n;
    out.draws.row(static_cast<Eigen::Index>(i)) = draws.draws.row(static_cast<Eigen::Index>(r));
    out.divergent.push_back(draws.divergent[r]);
  }
  return out;
}

int kind_index(ModelKind k) { return static_cast<int>(k); }

template <class Fn>
void parallel_for(std::size_t n, int threads, Fn fn) {
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, threads)), n);
  if (workers <= 1) {
    for (std::size_t s = 0; s < n; ++s) fn(s);
    return;
  }
  std::mutex m;
  std::size_t next = 0;
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (;;) {
          std::size_t s;
          {
            std::lock_guard<std::mutex> lock(m);
            if (next >= n) return;
            s = next++;
          }
          fn(s);
        }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

std::string_view to_string(DatasetReference r) {
  switch (r) {
    case DatasetReference::gait: return "gait";
    case DatasetReference::radiograph: return "radiograph";
    case DatasetReference::custom: return "custom";
  }
  return "custom";
}

DatasetReference parse_dataset_reference(std::string_view s) {
  if (s == "gait") return DatasetReference::gait;
  if (s == "radiograph") return DatasetReference::radiograph;
  if (s == "custom") return DatasetReference::custom;
  throw InputError("unknown dataset reference '" + std::string(s) + "'");
}

Dims reference_dims(DatasetReference r) {
  switch (r) {
    case DatasetReference::gait: return {32, 3, 2};
    case DatasetReference::radiograph: return {35, 7, 2};
    case DatasetReference::custom: break;
  }
  throw InputError("a custom reference has no preset dimensions");
}

ParamVector reference_parameters(DatasetReference r, ModelKind kind) {
  const bool gait = r == DatasetReference::gait;
  if (r == DatasetReference::custom) throw InputError("a custom reference has no preset parameters");
  switch (kind) {
    case ModelKind::IN:
      return gait ? hyper(0.91, one(0.79), one(0.79), {}, {})
                  : hyper(1.31, one(0.77), one(0.78), {}, {});
    case ModelKind::PN:
      return gait ? hyper(0.89, one(0.75), Eigen::VectorXd(), {}, 0.50)
                  : hyper(1.31, one(0.70), Eigen::VectorXd(), {}, 0.51);
    case ModelKind::FN:
      return gait ? hyper(0.70, one(0.65), one(0.64), 0.54, 0.47)
                  : hyper(0.63, one(0.88), one(1.47), 0.42, 0.51);
  }
  return {};
}

RatingsTable lattice_table(Dims dims) {
  if (dims.I < 2 || dims.J < 1 || dims.K < 1) throw DimensionMismatch("invalid simulation dimensions");
  RatingsTable::Builder b;
  for (int i = 0; i < dims.I; ++i)
    for (int j = 0; j < dims.J; ++j)
      for (int k = 0; k < dims.K; ++k)
        b.add(std::to_string(i + 1), std::to_string(j + 1), std::to_string(k + 1), 0);
  return std::move(b).build();
}

ModelSpec Simulator::make_spec(ModelKind kind, Link link, const ParamVector& h) {
  ModelSpec spec;
  spec.kind = kind;
  spec.link = link;
  spec.intercept = true;
  spec.time_coding = TimeCoding::none;
  if (kind == ModelKind::PN) {
    spec.cov_T = h.sigma_v.size() > 1 ? CovStructure::separate : CovStructure::common;
  } else if (kind == ModelKind::FN) {
    spec.cov_R = h.sigma_v.size() > 1 ? CovStructure::separate : CovStructure::common;
    spec.cov_T = h.sigma_w.size() <= 1             ? CovStructure::common
                 : h.sigma_v.size() > 1 &&
                         h.sigma_w.size() > h.sigma_v.size() &&
                         h.sigma_w.size() % h.sigma_v.size() == 0
                     ? CovStructure::unstructured
                     : CovStructure::separate;
  }
  return spec;
}

Simulator::Simulator(ModelKind kind, Link link, const ParamVector& h, Dims dims)
    : lattice_(lattice_table(dims)), model_(make_spec(kind, link, h), lattice_), hyper_(h) {
  const ParamLayout& L = model_.layout();
  if (hyper_.beta.size() == 0) hyper_.beta = Eigen::VectorXd::Zero(1);
  if (hyper_.beta.size() != 1) throw DimensionMismatch("simulation takes an intercept only");
  if (kind == ModelKind::PN) hyper_.sigma_w.resize(0);
  if (kind == ModelKind::IN) {
    hyper_.rho_R.reset();
    hyper_.rho_T.reset();
  }
  // Correlations on the boundary (perfectly shared effects) are pulled just inside it.
  auto inside = [](double rho, int d) {
    return std::clamp(rho, rho_lower_bound(d) + 1e-9, 1.0 - 1e-9);
  };
  if (L.rho_R.size) hyper_.rho_R = inside(hyper_.rho_R.value_or(0.0), L.rater_block_dim());
  else hyper_.rho_R.reset();
  if (L.rho_T.size) hyper_.rho_T = inside(hyper_.rho_T.value_or(0.0), L.time_block_dim());
  else hyper_.rho_T.reset();
  if (static_cast<std::size_t>(hyper_.sigma_v.size()) != L.sigma_v.size ||
      static_cast<std::size_t>(hyper_.sigma_w.size()) != L.sigma_w.size)
    throw DimensionMismatch("generating sigmas do not match the simulation dimensions");
  if (!(hyper_.sigma_u >= 0) || (hyper_.sigma_v.array() < 0).any() || (hyper_.sigma_w.array() < 0).any())
    throw InputError("generating standard deviations must be non-negative");
  // A zero variance is allowed here; it is nudged so the unconstrained map exists.
  hyper_.sigma_u = std::max(hyper_.sigma_u, 1e-12);
  hyper_.sigma_v = hyper_.sigma_v.cwiseMax(1e-12);
  hyper_.sigma_w = hyper_.sigma_w.cwiseMax(1e-12);
  L.check([&] {
    ParamVector p = hyper_;
    p.u = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(L.u.size));
    p.v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(L.v.size));
    p.w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(L.w.size));
    return p;
  }());
}

RatingsTable Simulator::simulate(Rng& rng) const {
  return lattice_.with_outcomes(replicate_outcomes(model_, hyper_, rng));
}

RatingsTable simulate_dataset(ModelKind kind, const ParamVector& h, Dims dims, Link link,
                              std::uint64_t seed) {
  const Simulator sim(kind, link, h, dims);
  Rng rng = make_rng(seed, 0);
  return sim.simulate(rng);
}

TrueKappa true_kappa(ModelKind kind, const ParamVector& h, Dims dims, Link link, int nreps,
                     std::uint64_t seed, int threads) {
  if (nreps < 1) throw InputError("true kappa needs at least one replicate");
  const Simulator sim(kind, link, h, dims);
  const auto n = static_cast<std::size_t>(nreps);
  std::vector<double> inter(n), intra(n);
  std::vector<std::uint8_t> ok(n, 0);
  parallel_for(n, threads, [&](std::size_t r) {
    Rng rng = make_rng(seed, r);
    const RatingsTable data = sim.simulate(rng);
    try {
      inter[r] = dims.J >= 2 ? interrater_kappa(data).kappa : 0.0;
      intra[r] = dims.K >= 2 ? intrarater_kappa(data).kappa : 0.0;
      ok[r] = 1;
    } catch (const DegenerateAgreement&) {
    }
  });
  TrueKappa out;
  for (std::size_t r = 0; r < n; ++r) {
    if (!ok[r]) {
      ++out.n_degenerate;
      continue;
    }
    out.inter += inter[r];
    out.intra += intra[r];
    ++out.n_used;
  }
  if (out.n_used == 0) throw DegenerateAgreement("every simulated dataset had degenerate agreement");
  out.inter /= static_cast<double>(out.n_used);
  out.intra /= static_cast<double>(out.n_used);
  return out;
}

double marginal_success_probability(ModelKind kind, const ParamVector& h, Link link) {
  int J = 1, K = 1;
  if (kind == ModelKind::PN) K = std::max<int>(1, static_cast<int>(h.sigma_v.size()));
  if (kind == ModelKind::FN) {
    J = std::max<int>(1, static_cast<int>(h.sigma_v.size()));
    const auto nw = static_cast<int>(h.sigma_w.size());
    K = nw <= 1 ? 1 : (J > 1 && nw > J && nw % J == 0 ? nw / J : nw);
  }
  ParamVector p = h;
  if (kind == ModelKind::FN && J < 2) p.rho_R.reset();
  const Eigen::MatrixXd cov = predictor_covariance(kind, p, J, K);
  const double b0 = h.beta.size() ? h.beta[0] : 0.0;
  // Trapezoid rule over the standard normal on [-10, 10].
  constexpr int n = 4000;
  constexpr double lo = -10, hi = 10, step = (hi - lo) / n;
  double total = 0;
  for (Eigen::Index c = 0; c < cov.rows(); ++c) {
    const double sd = std::sqrt(cov(c, c));
    double acc = 0;
    for (int t = 0; t <= n; ++t) {
      const double x = lo + t * step;
      const double wgt = (t == 0 || t == n ? 0.5 : 1.0) * std::exp(-0.5 * x * x);
      acc += wgt * inverse_link(link, b0 + sd * x);
    }
    total += acc * step / std::sqrt(2 * std::numbers::pi);
  }
  return total / static_cast<double>(cov.rows());
}

double calibrate_intercept(ModelKind kind, const ParamVector& h, Link link, double target) {
  if (!(target > 0 && target < 1)) throw InputError("target probability must lie in (0, 1)");
  ParamVector p = h;
  if (p.beta.size() == 0) p.beta = Eigen::VectorXd::Zero(1);
  // Symmetric effects put 0.5 exactly at zero; skip the bisection residue.
  p.beta[0] = 0;
  if (std::abs(marginal_success_probability(kind, p, link) - target) < 1e-12) return 0.0;
  double lo = -30, hi = 30;
  for (int it = 0; it < 200 && hi - lo > 1e-12; ++it) {
    p.beta[0] = 0.5 * (lo + hi);
    if (marginal_success_probability(kind, p, link) < target) lo = p.beta[0];
    else hi = p.beta[0];
  }
  return 0.5 * (lo + hi);
}

ScenarioConfig ScenarioConfig::reference_scenario(DatasetReference r, ModelKind kind) {
  ScenarioConfig c;
  c.reference = r;
  c.sim_kind = kind;
  c.dims = reference_dims(r);
  c.generating = reference_parameters(r, kind);
  c.generating.beta[0] = calibrate_intercept(kind, c.generating, c.link);
  return c;
}

void ScenarioConfig::validate() const {
  if (dims.I < 2 || dims.J < 1 || dims.K < 1) throw InputError("scenario dimensions must be positive");
  if (dims.J < 2 && dims.K < 2) throw InputError("a scenario needs two raters or two times");
  if (n_replicates < 1) throw InputError("n_replicates must be at least 1");
  if (true_kappa_reps < 1) throw InputError("true_kappa_reps must be at least 1");
  if (!(generating.sigma_u > 0) || (generating.sigma_v.array() <= 0).any() ||
      (generating.sigma_w.array() <= 0).any())
    throw InputError("generating variances must be positive");
}

StudyConfig StudyConfig::reference_study(DatasetReference r, int n_replicates, int true_kappa_reps) {
  StudyConfig c;
  c.reference = r;
  for (ModelKind k : all_kinds) {
    ScenarioConfig s = ScenarioConfig::reference_scenario(r, k);
    s.n_replicates = n_replicates;
    s.true_kappa_reps = true_kappa_reps;
    c.scenarios.push_back(std::move(s));
  }
  return c;
}

void StudyConfig::validate() const {
  if (scenarios.empty()) throw InputError("a study needs at least one scenario");
  std::vector<int> seen;
  for (const auto& s : scenarios) {
    s.validate();
    if (std::find(seen.begin(), seen.end(), kind_index(s.sim_kind)) != seen.end())
      throw InputError("each generating model may appear once per study");
    seen.push_back(kind_index(s.sim_kind));
  }
  sampler.validate();
  if (threads < 1) throw InputError("threads must be at least 1");
}

ReplicateRecord run_replicate(const ScenarioConfig& scenario, const StudyConfig& study, int replicate) {
  ReplicateRecord rec;
  rec.sim_kind = scenario.sim_kind;
  rec.replicate = replicate;
  const std::uint64_t base = derive_seed(derive_seed(study.seed, static_cast<std::uint64_t>(kind_index(scenario.sim_kind))),
                                         static_cast<std::uint64_t>(replicate));
  try {
    const Simulator sim(scenario.sim_kind, scenario.link, scenario.generating, scenario.dims);
    Rng rng = make_rng(base, 0);
    const RatingsTable data = sim.simulate(rng);
    rec.freq_inter = interrater_kappa(data).kappa;
    rec.freq_intra = intrarater_kappa(data).kappa;

    std::vector<std::pair<ModelKind, double>> looics;
    for (ModelKind m : all_kinds) {
      const auto mi = static_cast<std::size_t>(kind_index(m));
      ModelSpec spec;
      spec.kind = m;
      spec.link = scenario.link;
      const Model model(spec, data);
      SamplerConfig sc = study.sampler;
      sc.seed = derive_seed(base, 1 + mi);
      sc.threads = 1;
      const PosteriorDraws draws = sample(model, sc);
      rec.divergences[mi] = draws.divergence_count();
      const LooResult loo = psis_loo(pointwise_loglik(model, draws));
      rec.looic[mi] = loo.looic;
      rec.p_loo[mi] = loo.p_loo;
      looics.emplace_back(m, loo.looic);
      const PredictiveKappa ppk =
          posterior_predictive_kappa(model, data, thin(draws, study.ppk_draws), derive_seed(base, 10 + mi));
      rec.bayes_inter[mi] = ppk.mean_inter;
      rec.bayes_intra[mi] = ppk.mean_intra;
    }
    rec.selected = select_model(looics);
    rec.ok = true;
  } catch (const Error& e) {
    rec.ok = false;
    rec.error = e.what();
  }
  return rec;
}

StudyResult aggregate_study(const StudyConfig& config, const std::vector<TrueKappa>& truths,
                            std::vector<ReplicateRecord> records) {
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
    return std::pair(kind_index(a.sim_kind), a.replicate) < std::pair(kind_index(b.sim_kind), b.replicate);
  });
  StudyResult out;
  out.reference = config.reference;
  out.truths = truths;
  const auto n_s = config.scenarios.size();
  out.selection = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_s), 3);
  out.failures.assign(n_s, 0);
  for (std::size_t s = 0; s < n_s; ++s) {
    const ScenarioConfig& sc = config.scenarios[s];
    out.sim_kinds.push_back(sc.sim_kind);
    std::vector<const ReplicateRecord*> ok;
    for (const auto& r : records) {
      if (r.sim_kind != sc.sim_kind || r.replicate >= sc.n_replicates) continue;
      if (r.ok) ok.push_back(&r);
      else ++out.failures[s];
    }
    for (const auto* r : ok) out.selection(static_cast<Eigen::Index>(s), kind_index(r->selected)) += 1;
    if (!ok.empty()) out.selection.row(static_cast<Eigen::Index>(s)) /= static_cast<double>(ok.size());

    for (AgreementMode mode : {AgreementMode::interrater, AgreementMode::intrarater}) {
      const bool inter = mode == AgreementMode::interrater;
      const double truth = inter ? truths[s].inter : truths[s].intra;
      for (std::size_t e = 0; e < estimator_names.size(); ++e) {
        KappaCell cell;
        cell.sim_kind = sc.sim_kind;
        cell.mode = mode;
        cell.estimator = std::string(estimator_names[e]);
        cell.truth = truth;
        double sum = 0, sq = 0;
        for (const auto* r : ok) {
          double v;
          if (e == 0) v = inter ? r->freq_inter : r->freq_intra;
          else if (e <= 3) v = inter ? r->bayes_inter[e - 1] : r->bayes_intra[e - 1];
          else {
            const auto sel = static_cast<std::size_t>(kind_index(r->selected));
            v = inter ? r->bayes_inter[sel] : r->bayes_intra[sel];
          }
          sum += v;
          sq += (v - truth) * (v - truth);
        }
        cell.n = ok.size();
        const double n = static_cast<double>(ok.size());
        cell.mean = ok.empty() ? std::nan("") : sum / n;
        cell.rmse = ok.empty() ? std::nan("") : std::sqrt(sq / n);
        out.kappa_table.push_back(std::move(cell));
      }
    }
  }
  out.records = std::move(records);
  return out;
}

StudyResult run_study(const StudyConfig& config, const StudyProgress& progress) {
  config.validate();
  std::vector<TrueKappa> truths;
  for (const auto& sc : config.scenarios)
    truths.push_back(true_kappa(sc.sim_kind, sc.generating, sc.dims, sc.link, sc.true_kappa_reps,
                                derive_seed(config.seed, 100 + static_cast<std::uint64_t>(kind_index(sc.sim_kind))),
                                config.threads));

  const nlohmann::json header = study_header_json(config);
  std::map<std::pair<int, int>, ReplicateRecord> done;
  if (config.checkpoint && std::filesystem::exists(*config.checkpoint)) {
    std::ifstream in(*config.checkpoint);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception&) {
        break;  // a torn final line from an interrupted write
      }
      if (first) {
        if (j != header) throw InputError("checkpoint was written by a different study configuration");
        first = false;
        continue;
      }
      ReplicateRecord r = replicate_from_json(j);
      done[{kind_index(r.sim_kind), r.replicate}] = std::move(r);
    }
  }
  std::ofstream ckpt;
  if (config.checkpoint) {
    const bool fresh = !std::filesystem::exists(*config.checkpoint) ||
                       std::filesystem::file_size(*config.checkpoint) == 0;
    if (fresh) {
      std::ofstream(*config.checkpoint) << header.dump() << '\n';
    } else {
      // Drop a torn trailing line so appended records start on a fresh line.
      std::ifstream in(*config.checkpoint);
      std::string content((std::istreambuf_iterator<char>(in)), {});
      if (!content.empty() && content.back() != '\n') {
        content.erase(content.rfind('\n') + 1);
        std::ofstream(*config.checkpoint, std::ios::trunc) << content;
      }
    }
    ckpt.open(*config.checkpoint, std::ios::app);
    if (!ckpt) throw InputError("cannot open checkpoint " + config.checkpoint->string());
  }

  std::vector<std::pair<std::size_t, int>> pending;
  for (std::size_t s = 0; s < config.scenarios.size(); ++s)
    for (int r = 0; r < config.scenarios[s].n_replicates; ++r)
      if (!done.count({kind_index(config.scenarios[s].sim_kind), r})) pending.emplace_back(s, r);

  std::mutex mu;
  parallel_for(pending.size(), config.threads, [&](std::size_t n) {
    const auto [s, r] = pending[n];
    ReplicateRecord rec = run_replicate(config.scenarios[s], config, r);
    std::lock_guard<std::mutex> lock(mu);
    if (ckpt.is_open()) {
      ckpt << replicate_to_json(rec).dump() << '\n';
      ckpt.flush();
    }
    if (progress) progress(rec);
    done[{kind_index(rec.sim_kind), rec.replicate}] = std::move(rec);
  });

  std::vector<ReplicateRecord> records;
  for (auto& [key, rec] : done) records.push_back(std::move(rec));
  return aggregate_study(config, truths, std::move(records));
}

}  // namespace relikit
