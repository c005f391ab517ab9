#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numeric>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <unsupported/Eigen/FFT>

#include "relikit/errors.hpp"
#include "relikit/sampler.hpp"

namespace relikit {

namespace {

using Chains = std::vector<std::vector<double>>;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double mean_of(const std::vector<double>& x) {
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

double var_of(const std::vector<double>& x) {
  const double m = mean_of(x);
  double s = 0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

bool is_constant(const Chains& chains) {
  const double first = chains.front().front();
  for (const auto& c : chains)
    for (double v : c)
      if (v != first) return false;
  return true;
}

void check_chains(const Chains& chains) {
  if (chains.empty()) throw InputError("no chains supplied");
  const std::size_t n = chains.front().size();
  for (const auto& c : chains)
    if (c.size() != n) throw DimensionMismatch("chains must have equal length");
}

Chains split(const Chains& chains) {
  Chains out;
  for (const auto& c : chains) {
    const std::size_t half = c.size() / 2;
    out.emplace_back(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(half));
    out.emplace_back(c.end() - static_cast<std::ptrdiff_t>(half), c.end());
  }
  return out;
}

// Normal scores of the pooled ranks (average rank for ties).
Chains rank_normalize(const Chains& chains) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t c = 0; c < chains.size(); ++c)
    for (std::size_t i = 0; i < chains[c].size(); ++i)
      all.emplace_back(chains[c][i], c * chains[c].size() + i);
  std::sort(all.begin(), all.end());
  const double S = static_cast<double>(all.size());
  std::vector<double> score(all.size());
  const boost::math::normal_distribution<double> std_normal;
  for (std::size_t a = 0; a < all.size();) {
    std::size_t b = a;
    while (b + 1 < all.size() && all[b + 1].first == all[a].first) ++b;
    const double rank = 0.5 * static_cast<double>(a + b) + 1.0;
    const double z = boost::math::quantile(std_normal, (rank - 0.375) / (S + 0.25));
    for (std::size_t t = a; t <= b; ++t) score[all[t].second] = z;
    a = b + 1;
  }
  Chains out = chains;
  for (std::size_t c = 0; c < out.size(); ++c)
    for (std::size_t i = 0; i < out[c].size(); ++i) out[c][i] = score[c * out[c].size() + i];
  return out;
}

double rhat_basic(const Chains& chains) {
  const double n = static_cast<double>(chains.front().size());
  std::vector<double> means, vars;
  for (const auto& c : chains) {
    means.push_back(mean_of(c));
    vars.push_back(var_of(c));
  }
  const double B = n * var_of(means);
  const double W = mean_of(vars);
  return std::sqrt(((n - 1) / n * W + B / n) / W);
}

// Biased autocovariance of one chain by zero-padded FFT.
std::vector<double> autocovariance(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::size_t m = 1;
  while (m < 2 * n) m <<= 1;
  const double mu = mean_of(x);
  std::vector<double> padded(m, 0.0);
  for (std::size_t i = 0; i < n; ++i) padded[i] = x[i] - mu;
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> freq;
  fft.fwd(freq, padded);
  for (auto& f : freq) f = std::norm(f);
  std::vector<double> ac;
  fft.inv(ac, freq);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = ac[i] / static_cast<double>(n);
  return out;
}

// Effective sample size with Geyer's initial monotone sequence estimator.
double ess_raw(const Chains& chains) {
  const std::size_t m = chains.size();
  const std::size_t n = chains.front().size();
  if (n < 4) return kNaN;
  std::vector<std::vector<double>> acov;
  std::vector<double> means, vars;
  for (const auto& c : chains) {
    acov.push_back(autocovariance(c));
    means.push_back(mean_of(c));
    vars.push_back(acov.back()[0] * static_cast<double>(n) / static_cast<double>(n - 1));
  }
  const double mean_var = mean_of(vars);
  double var_plus = mean_var * static_cast<double>(n - 1) / static_cast<double>(n);
  if (m > 1) var_plus += var_of(means);

  std::vector<double> rho(n, 0.0);
  auto rho_at = [&](std::size_t t) {
    double s = 0;
    for (const auto& a : acov) s += a[t];
    return 1.0 - (mean_var - s / static_cast<double>(m)) / var_plus;
  };
  rho[0] = 1.0;
  double rho_even = 1.0, rho_odd = rho_at(1);
  rho[1] = rho_odd;
  std::size_t t = 1;
  while (t + 5 < n && std::isfinite(rho_even) && rho_even + rho_odd > 0) {
    rho_even = rho_at(t + 1);
    rho_odd = rho_at(t + 2);
    if (rho_even + rho_odd >= 0) {
      rho[t + 1] = rho_even;
      rho[t + 2] = rho_odd;
    }
    t += 2;
  }
  const std::size_t max_t = t;
  if (rho_even > 0) rho[max_t + 1] = rho_even;
  for (std::size_t k = 1; k + 3 <= max_t; k += 2) {
    if (rho[k + 1] + rho[k + 2] > rho[k - 1] + rho[k]) {
      rho[k + 1] = (rho[k - 1] + rho[k]) / 2;
      rho[k + 2] = rho[k + 1];
    }
  }
  double tau = -1.0 + 2.0 * std::accumulate(rho.begin(), rho.begin() + static_cast<std::ptrdiff_t>(max_t), 0.0) +
               rho[max_t + 1];
  const double total = static_cast<double>(m * n);
  tau = std::max(tau, 1.0 / std::log10(total));
  return total / tau;
}

}  // namespace

double split_rhat(const Chains& chains) {
  check_chains(chains);
  if (chains.front().size() < 4 || is_constant(chains)) return kNaN;
  const Chains s = split(chains);
  const double bulk = rhat_basic(rank_normalize(s));
  Chains folded = s;
  std::vector<double> pooled;
  for (const auto& c : s) pooled.insert(pooled.end(), c.begin(), c.end());
  std::sort(pooled.begin(), pooled.end());
  const std::size_t P = pooled.size();
  const double median = P % 2 ? pooled[P / 2] : 0.5 * (pooled[P / 2 - 1] + pooled[P / 2]);
  for (auto& c : folded)
    for (double& v : c) v = std::abs(v - median);
  const double tail = is_constant(folded) ? bulk : rhat_basic(rank_normalize(folded));
  return std::max(bulk, tail);
}

double ess_bulk(const Chains& chains) {
  check_chains(chains);
  if (chains.front().size() < 4) return kNaN;
  if (is_constant(chains)) return 0.0;
  return ess_raw(rank_normalize(split(chains)));
}

Diagnostics diagnostics(const PosteriorDraws& draws) {
  Diagnostics out;
  out.names = draws.names;
  const auto dim = static_cast<Eigen::Index>(draws.dim());
  out.rhat.resize(dim);
  out.ess_bulk.resize(dim);
  for (Eigen::Index d = 0; d < dim; ++d) {
    Chains chains(static_cast<std::size_t>(draws.nchains));
    for (int c = 0; c < draws.nchains; ++c) {
      auto& chain = chains[static_cast<std::size_t>(c)];
      chain.resize(static_cast<std::size_t>(draws.niters));
      for (int i = 0; i < draws.niters; ++i)
        chain[static_cast<std::size_t>(i)] = draws.draws(static_cast<Eigen::Index>(draws.row(c, i)), d);
    }
    out.rhat[d] = split_rhat(chains);
    out.ess_bulk[d] = ess_bulk(chains);
  }
  out.divergence_rate = draws.n_draws() ? static_cast<double>(draws.divergence_count()) /
                                              static_cast<double>(draws.n_draws())
                                        : 0.0;
  return out;
}

}  // namespace relikit
