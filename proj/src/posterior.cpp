#include "relikit/posterior.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include "relikit/agreement.hpp"
#include "relikit/errors.hpp"

namespace relikit {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double slot(const Eigen::VectorXd& sigmas, int m) {
  if (sigmas.size() == 0) return 0.0;
  return sigmas.size() == 1 ? sigmas[0] : sigmas[m];
}

double mean_square(const Eigen::VectorXd& sigmas) {
  return sigmas.size() ? sigmas.squaredNorm() / static_cast<double>(sigmas.size()) : 0.0;
}

double mean_of(const std::vector<double>& x) {
  return x.empty() ? kNaN : std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

// Splits [0, n) into contiguous ranges, one per worker.
template <class Fn>
void parallel_for(std::size_t n, int threads, Fn fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n < 2) {
    for (std::size_t s = 0; s < n; ++s) fn(s);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t s = w * chunk; s < std::min(n, (w + 1) * chunk); ++s) fn(s);
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

std::string_view to_string(FormulaVariant v) {
  return v == FormulaVariant::derived ? "derived" : "as_printed";
}

FormulaVariant parse_formula_variant(std::string_view s) {
  if (s == "derived") return FormulaVariant::derived;
  if (s == "as_printed" || s == "as-printed" || s == "printed") return FormulaVariant::as_printed;
  throw InputError("unknown formula variant '" + std::string(s) + "'");
}

Eigen::MatrixXd predictor_covariance(ModelKind kind, const ParamVector& params, int J, int K) {
  if (J < 1 || K < 1) throw DimensionMismatch("J and K must be positive");
  const double su2 = params.sigma_u * params.sigma_u;
  const double rho_R = params.rho_R.value_or(0.0);
  const double rho_T = params.rho_T.value_or(0.0);
  const Eigen::VectorXd& sv = params.sigma_v;
  const Eigen::VectorXd& sw = params.sigma_w;
  if (kind == ModelKind::PN && sv.size() > 1 && sv.size() != K)
    throw DimensionMismatch("sigma_v needs one entry per time point");
  if (kind == ModelKind::FN) {
    if (sv.size() > 1 && sv.size() != J) throw DimensionMismatch("sigma_v needs one entry per rater");
    if (sw.size() > 1 && sw.size() != K && sw.size() != J * K)
      throw DimensionMismatch("sigma_w needs K or J*K entries");
  }
  auto sw_at = [&](int j, int k) {
    if (sw.size() <= 1) return slot(sw, 0);
    return sw.size() == K ? sw[k] : sw[j * K + k];
  };

  const int n = J * K;
  Eigen::MatrixXd cov(n, n);
  for (int j = 0; j < J; ++j)
    for (int k = 0; k < K; ++k)
      for (int j2 = 0; j2 < J; ++j2)
        for (int k2 = 0; k2 < K; ++k2) {
          double c = su2;
          switch (kind) {
            case ModelKind::IN:
              if (j == j2) c += slot(sv, 0) * slot(sv, 0);
              if (k == k2) c += slot(sw, 0) * slot(sw, 0);
              break;
            case ModelKind::PN:
              if (j == j2) c += slot(sv, k) * slot(sv, k2) * (k == k2 ? 1.0 : rho_T);
              break;
            case ModelKind::FN:
              c += slot(sv, j) * slot(sv, j2) * (j == j2 ? 1.0 : rho_R);
              if (j == j2) c += sw_at(j, k) * sw_at(j, k2) * (k == k2 ? 1.0 : rho_T);
              break;
          }
          cov(j * K + k, j2 * K + k2) = c;
        }
  return cov;
}

CorrelationSummary marginal_correlations(ModelKind kind, const ParamVector& params,
                                         FormulaVariant variant, int J, int K) {
  if (J <= 0) J = kind == ModelKind::FN ? std::max<int>(2, static_cast<int>(params.sigma_v.size())) : 2;
  if (K <= 0) {
    const auto& s = kind == ModelKind::PN ? params.sigma_v : params.sigma_w;
    K = kind == ModelKind::IN ? 2 : std::max<int>(2, static_cast<int>(s.size()));
  }
  CorrelationSummary out;
  out.variant = variant;
  out.rho_R = kind == ModelKind::FN ? params.rho_R.value_or(0.0) : 0.0;
  out.rho_T = kind == ModelKind::IN ? 0.0 : params.rho_T.value_or(0.0);

  const Eigen::MatrixXd cov = predictor_covariance(kind, params, J, K);
  auto corr = [&](int a, int b) { return cov(a, b) / std::sqrt(cov(a, a) * cov(b, b)); };
  double sum_R = 0, sum_T = 0;
  int n_R = 0, n_T = 0;
  for (int k = 0; k < K; ++k)
    for (int j = 0; j < J; ++j)
      for (int j2 = j + 1; j2 < J; ++j2, ++n_R) sum_R += corr(j * K + k, j2 * K + k);
  for (int j = 0; j < J; ++j)
    for (int k = 0; k < K; ++k)
      for (int k2 = k + 1; k2 < K; ++k2, ++n_T) sum_T += corr(j * K + k, j * K + k2);
  out.corr_R = n_R ? sum_R / n_R : kNaN;
  out.corr_T = n_T ? sum_T / n_T : kNaN;

  if (kind == ModelKind::FN && variant == FormulaVariant::as_printed) {
    const double su2 = params.sigma_u * params.sigma_u;
    const double sv2 = mean_square(params.sigma_v);
    const double sw2 = mean_square(params.sigma_w);
    const double total = su2 + sv2 + sw2;
    out.corr_R = (su2 + out.rho_R * sv2) / total;
    out.corr_T = (su2 + out.rho_T * sw2) / total;
  }
  return out;
}

std::vector<int> replicate_outcomes(const Model& model, const ParamVector& params, Rng& rng) {
  const ParamLayout& L = model.layout();
  ParamVector p = params;
  p.u = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(L.u.size));
  p.v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(L.v.size));
  p.w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(L.w.size));
  Eigen::VectorXd z = model.unconstrain(p);
  for (const auto* b : {&L.u, &L.v, &L.w})
    for (std::size_t n = 0; n < b->size; ++n)
      z[static_cast<Eigen::Index>(b->offset + n)] = standard_normal(rng);
  const ParamVector q = model.constrain(std::span<const double>(z.data(), static_cast<std::size_t>(z.size())));
  const Eigen::VectorXd eta = model.linear_predictor(q);
  std::vector<int> y(static_cast<std::size_t>(eta.size()));
  for (Eigen::Index n = 0; n < eta.size(); ++n)
    y[static_cast<std::size_t>(n)] = uniform01(rng) < inverse_link(model.spec().link, eta[n]) ? 1 : 0;
  return y;
}

PredictiveKappa posterior_predictive_kappa(const Model& model, const RatingsTable& table,
                                           const PosteriorDraws& draws, std::uint64_t seed,
                                           int threads) {
  if (draws.n_draws() == 0) throw InputError("no posterior draws");
  const ParamLayout& L = model.layout();
  if (draws.dim() != L.dim()) throw DimensionMismatch("draws do not match the model layout");
  const bool has_inter = table.n_raters() >= 2;
  const bool has_intra = table.n_times() >= 2;

  const std::size_t S = draws.n_draws();
  std::vector<double> inter(S, kNaN), intra(S, kNaN);
  std::vector<std::uint8_t> dropped(S, 0);
  parallel_for(S, threads, [&](std::size_t s) {
    Rng rng = make_rng(seed, s);
    const Eigen::VectorXd row = draws.draws.row(static_cast<Eigen::Index>(s)).transpose();
    const ParamVector p = L.unflatten(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
    const RatingsTable rep = table.with_outcomes(replicate_outcomes(model, p, rng));
    try {
      if (has_inter) inter[s] = interrater_kappa(rep).kappa;
      if (has_intra) intra[s] = intrarater_kappa(rep).kappa;
    } catch (const DegenerateAgreement&) {
      dropped[s] = 1;
    }
  });

  PredictiveKappa out;
  out.n_draws = S;
  for (std::size_t s = 0; s < S; ++s) {
    if (dropped[s]) {
      ++out.n_dropped;
      continue;
    }
    if (has_inter) out.inter.push_back(inter[s]);
    if (has_intra) out.intra.push_back(intra[s]);
  }
  auto fill = [](const std::vector<double>& v, double& mean, double& lo, double& hi) {
    mean = mean_of(v);
    lo = v.empty() ? kNaN : quantile(v, 0.025);
    hi = v.empty() ? kNaN : quantile(v, 0.975);
  };
  fill(out.inter, out.mean_inter, out.lower_inter, out.upper_inter);
  fill(out.intra, out.mean_intra, out.lower_intra, out.upper_intra);
  return out;
}

PredictiveKappa posterior_predictive_kappa(const ModelSpec& spec, const PosteriorDraws& draws,
                                           const RatingsTable& table, std::uint64_t seed,
                                           int threads) {
  const Model model(spec, table);
  return posterior_predictive_kappa(model, table, draws, seed, threads);
}

double quantile(std::vector<double> values, double prob) {
  if (values.empty()) throw InputError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

ParameterSummary summarize_values(std::string name, std::span<const double> values) {
  if (values.empty()) throw InputError("no draws to summarise for " + name);
  ParameterSummary s;
  s.name = std::move(name);
  std::vector<double> v(values.begin(), values.end());
  s.mean = mean_of(v);
  double ss = 0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  s.lower = quantile(v, 0.025);
  s.upper = quantile(v, 0.975);
  return s;
}

std::vector<ParameterSummary> summarize(const PosteriorDraws& draws) {
  std::vector<ParameterSummary> out;
  std::vector<double> col(draws.n_draws());
  for (std::size_t d = 0; d < draws.dim(); ++d) {
    for (std::size_t r = 0; r < draws.n_draws(); ++r)
      col[r] = draws.draws(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(d));
    out.push_back(summarize_values(draws.names[d], col));
  }
  return out;
}

std::vector<ParameterSummary> correlation_summaries(const ModelSpec& spec, const ParamLayout& layout,
                                                    const PosteriorDraws& draws) {
  if (draws.dim() != layout.dim()) throw DimensionMismatch("draws do not match the model layout");
  const std::size_t S = draws.n_draws();
  const int J = std::max(2, layout.dims().J), K = std::max(2, layout.dims().K);
  std::vector<double> cR(S), cT(S), rR(S), rT(S), pR(S), pT(S);
  for (std::size_t s = 0; s < S; ++s) {
    const Eigen::VectorXd row = draws.draws.row(static_cast<Eigen::Index>(s)).transpose();
    const ParamVector p = layout.unflatten(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
    const CorrelationSummary c = marginal_correlations(spec.kind, p, FormulaVariant::derived, J, K);
    cR[s] = c.corr_R;
    cT[s] = c.corr_T;
    rR[s] = c.rho_R;
    rT[s] = c.rho_T;
    if (spec.kind == ModelKind::FN) {
      const CorrelationSummary a = marginal_correlations(spec.kind, p, FormulaVariant::as_printed, J, K);
      pR[s] = a.corr_R;
      pT[s] = a.corr_T;
    }
  }
  std::vector<ParameterSummary> out{summarize_values("corr_R", cR), summarize_values("corr_T", cT),
                                    summarize_values("rho_R", rR), summarize_values("rho_T", rT)};
  if (spec.kind == ModelKind::FN) {
    out.push_back(summarize_values("corr_R_as_printed", pR));
    out.push_back(summarize_values("corr_T_as_printed", pT));
  }
  return out;
}

}  // namespace relikit
