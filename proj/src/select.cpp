#include "relikit/select.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "relikit/errors.hpp"

namespace relikit {

namespace {

double log_sum_exp(const std::vector<double>& x) {
  const double m = *std::max_element(x.begin(), x.end());
  if (!std::isfinite(m)) return m;
  double s = 0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

double gpd_quantile(double p, double k, double sigma) {
  if (k == 0) return -sigma * std::log1p(-p);
  return sigma * std::expm1(-k * std::log1p(-p)) / k;
}

}  // namespace

Eigen::MatrixXd pointwise_loglik(const Model& model, const PosteriorDraws& draws) {
  const ParamLayout& L = model.layout();
  if (draws.dim() != L.dim()) throw DimensionMismatch("draws do not match the model layout");
  Eigen::MatrixXd out(static_cast<Eigen::Index>(draws.n_draws()), static_cast<Eigen::Index>(model.n_obs()));
  for (Eigen::Index s = 0; s < out.rows(); ++s) {
    const Eigen::VectorXd row = draws.draws.row(s).transpose();
    const ParamVector p = L.unflatten(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
    out.row(s) = model.pointwise_log_likelihood(p).transpose();
  }
  return out;
}

Eigen::MatrixXd pointwise_loglik(const ModelSpec& spec, const PosteriorDraws& draws,
                                 const RatingsTable& table) {
  return pointwise_loglik(Model(spec, table), draws);
}

std::pair<double, double> fit_generalized_pareto(std::span<const double> x) {
  const std::size_t n = x.size();
  if (n < 2) throw InputError("generalized Pareto fit needs at least two points");
  const double N = static_cast<double>(n);
  const double prior = 3.0;
  const int m = 30 + static_cast<int>(std::floor(std::sqrt(N)));
  const double x_star = x[static_cast<std::size_t>(std::floor(N / 4 + 0.5)) - 1];

  std::vector<double> theta(static_cast<std::size_t>(m)), log_lik(theta.size());
  for (int j = 1; j <= m; ++j) {
    const double t = 1 / x[n - 1] + (1 - std::sqrt(m / (j - 0.5))) / prior / x_star;
    double k = 0;
    for (double v : x) k += std::log1p(-t * v);
    k /= N;
    theta[static_cast<std::size_t>(j - 1)] = t;
    log_lik[static_cast<std::size_t>(j - 1)] = N * (std::log(-t / k) - k - 1);
  }
  const double lse = log_sum_exp(log_lik);
  double theta_hat = 0;
  for (std::size_t j = 0; j < theta.size(); ++j) theta_hat += theta[j] * std::exp(log_lik[j] - lse);

  double k = 0;
  for (double v : x) k += std::log1p(-theta_hat * v);
  k /= N;
  const double sigma = -k / theta_hat;
  k = (k * N + 0.5 * 10) / (N + 10);
  return {k, sigma};
}

double pareto_smooth(std::vector<double>& lw) {
  const std::size_t S = lw.size();
  const double max_lw = *std::max_element(lw.begin(), lw.end());
  for (double& v : lw) v -= max_lw;

  const auto tail_len = static_cast<std::size_t>(
      std::ceil(std::min(0.2 * static_cast<double>(S), 3 * std::sqrt(static_cast<double>(S)))));
  double k = std::numeric_limits<double>::infinity();
  if (tail_len >= 5 && tail_len < S) {
    std::vector<std::size_t> order(S);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return lw[a] < lw[b]; });
    const std::size_t first = S - tail_len;
    const double lo = lw[order[first]], hi = lw[order[S - 1]];
    if (std::abs(hi - lo) < std::numeric_limits<double>::epsilon() / 100) {
      k = 0;  // nothing to smooth
    } else {
      const double cutoff = lw[order[first - 1]];
      const double exp_cutoff = std::exp(cutoff);
      std::vector<double> exceed(tail_len);
      for (std::size_t t = 0; t < tail_len; ++t) exceed[t] = std::exp(lw[order[first + t]]) - exp_cutoff;
      const auto [shape, scale] = fit_generalized_pareto(exceed);
      k = shape;
      if (std::isfinite(k)) {
        for (std::size_t t = 0; t < tail_len; ++t) {
          const double p = (static_cast<double>(t) + 0.5) / static_cast<double>(tail_len);
          lw[order[first + t]] = std::log(gpd_quantile(p, k, scale) + exp_cutoff);
        }
      }
    }
  }
  for (double& v : lw) v = std::min(v, 0.0);
  const double lse = log_sum_exp(lw);
  for (double& v : lw) v -= lse;
  return k;
}

LooResult psis_loo(const Eigen::MatrixXd& loglik) {
  const auto S = static_cast<std::size_t>(loglik.rows());
  if (S < min_loo_draws) throw TooFewDraws(S);
  const Eigen::Index n = loglik.cols();
  if (!loglik.allFinite()) throw NonFiniteDensity("pointwise log-likelihood has non-finite entries");

  LooResult out;
  out.pareto_k.resize(n);
  out.elpd_pointwise.resize(n);
  double p_loo = 0;
  std::vector<double> lw(S), ll(S);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (std::size_t s = 0; s < S; ++s) {
      ll[s] = loglik(static_cast<Eigen::Index>(s), i);
      lw[s] = -ll[s];
    }
    if (std::all_of(ll.begin(), ll.end(), [&](double v) { return v == ll[0]; })) {
      // No posterior uncertainty: both averages are the value itself.
      out.pareto_k[i] = 0;
      out.elpd_pointwise[i] = ll[0];
      continue;
    }
    out.pareto_k[i] = pareto_smooth(lw);
    for (std::size_t s = 0; s < S; ++s) lw[s] += ll[s];
    out.elpd_pointwise[i] = log_sum_exp(lw);
    p_loo += log_sum_exp(ll) - std::log(static_cast<double>(S)) - out.elpd_pointwise[i];
    if (out.pareto_k[i] > bad_k_threshold) ++out.n_bad_k;
  }
  out.elpd_loo = out.elpd_pointwise.sum();
  out.p_loo = p_loo;
  out.looic = -2 * out.elpd_loo;
  return out;
}

ModelKind select_model(const std::vector<std::pair<ModelKind, double>>& looics) {
  if (looics.size() < 2) throw InputError("model selection needs at least two fits");
  auto best = looics.front();
  for (const auto& f : looics) {
    if (f.second < best.second ||
        (f.second == best.second && static_cast<int>(f.first) < static_cast<int>(best.first)))
      best = f;
  }
  return best.first;
}

ModelKind select_model(const std::vector<std::pair<ModelKind, LooResult>>& fits) {
  std::vector<std::pair<ModelKind, double>> looics;
  for (const auto& [kind, loo] : fits) looics.emplace_back(kind, loo.looic);
  return select_model(looics);
}

}  // namespace relikit
