#include "relikit/sampler.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <thread>

#include "relikit/errors.hpp"
#include "relikit/rng.hpp"

namespace relikit {

namespace {

using Vec = Eigen::VectorXd;

constexpr double kMaxDeltaH = 1000.0;
constexpr double kInf = std::numeric_limits<double>::infinity();

double log_sum_exp(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

struct PhasePoint {
  Vec q, p, grad;
  double lp = -kInf;
};

// Stan-style dual averaging of log step size.
class StepsizeAdapter {
 public:
  explicit StepsizeAdapter(double delta) : delta_(delta) {}
  void set_mu(double mu) { mu_ = mu; }
  void restart() {
    counter_ = 0;
    s_bar_ = 0;
    x_bar_ = 0;
  }
  void learn(double& epsilon, double accept_stat) {
    ++counter_;
    accept_stat = std::min(1.0, accept_stat);
    const double eta = 1.0 / (counter_ + t0_);
    s_bar_ = (1.0 - eta) * s_bar_ + eta * (delta_ - accept_stat);
    const double x = mu_ - s_bar_ * std::sqrt(counter_) / gamma_;
    const double x_eta = std::pow(counter_, -kappa_);
    x_bar_ = (1.0 - x_eta) * x_bar_ + x_eta * x;
    epsilon = std::exp(x);
  }
  double final_stepsize() const { return std::exp(x_bar_); }

 private:
  double delta_;
  double mu_ = std::log(10.0);
  double counter_ = 0, s_bar_ = 0, x_bar_ = 0;
  double gamma_ = 0.05, t0_ = 10.0, kappa_ = 0.75;
};

// Metric adaptation windows: an initial fast buffer, doubling slow windows,
// and a terminal fast buffer.
class WindowSchedule {
 public:
  explicit WindowSchedule(int num_warmup) : num_warmup_(num_warmup) {
    if (num_warmup < 20) {
      enabled_ = false;
      return;
    }
    if (init_buffer_ + base_window_ + term_buffer_ > num_warmup) {
      init_buffer_ = static_cast<int>(0.15 * num_warmup);
      term_buffer_ = static_cast<int>(0.1 * num_warmup);
      base_window_ = num_warmup - (init_buffer_ + term_buffer_);
    }
    window_size_ = base_window_;
    next_window_ = init_buffer_ + window_size_ - 1;
  }

  bool in_window() const {
    return enabled_ && counter_ >= init_buffer_ && counter_ < num_warmup_ - term_buffer_ &&
           counter_ != num_warmup_;
  }
  bool window_end() const {
    return enabled_ && counter_ == next_window_ && counter_ != num_warmup_;
  }
  void advance() { ++counter_; }
  void compute_next_window() {
    if (next_window_ == num_warmup_ - term_buffer_ - 1) return;
    window_size_ *= 2;
    next_window_ = counter_ + window_size_;
    if (next_window_ != num_warmup_ - term_buffer_ - 1) {
      const int next_boundary = next_window_ + 2 * window_size_;
      if (next_boundary >= num_warmup_ - term_buffer_) next_window_ = num_warmup_ - term_buffer_ - 1;
    }
  }

 private:
  int num_warmup_;
  bool enabled_ = true;
  int init_buffer_ = 75, term_buffer_ = 50, base_window_ = 25;
  int window_size_ = 25, next_window_ = 0, counter_ = 0;
};

class WelfordVariance {
 public:
  explicit WelfordVariance(std::size_t dim) : mean_(Vec::Zero(static_cast<Eigen::Index>(dim))), m2_(mean_) {}
  void add(const Vec& x) {
    ++n_;
    const Vec delta = x - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_ += delta.cwiseProduct(x - mean_);
  }
  std::size_t n() const { return n_; }
  Vec variance() const { return m2_ / static_cast<double>(n_ - 1); }
  void restart() {
    n_ = 0;
    mean_.setZero();
    m2_.setZero();
  }

 private:
  std::size_t n_ = 0;
  Vec mean_, m2_;
};

struct Transition {
  double accept_stat = 0;
  int depth = 0;
  int n_leapfrog = 0;
  bool divergent = false;
};

class Nuts {
 public:
  Nuts(const LogDensityTarget& target, Rng& rng, int max_depth)
      : target_(target), rng_(rng), max_depth_(max_depth) {
    const auto n = static_cast<Eigen::Index>(target.dim());
    inv_metric_ = Vec::Ones(n);
  }

  double epsilon = 1.0;
  Vec& inv_metric() { return inv_metric_; }

  void evaluate(PhasePoint& z) const {
    try {
      z.lp = target_.log_density_gradient(
          std::span<const double>(z.q.data(), static_cast<std::size_t>(z.q.size())),
          std::span<double>(z.grad.data(), static_cast<std::size_t>(z.grad.size())));
      if (!std::isfinite(z.lp) || !z.grad.allFinite()) z.lp = -kInf;
    } catch (const NumericalError&) {
      z.lp = -kInf;
    }
  }

  double hamiltonian(const PhasePoint& z) const {
    if (!std::isfinite(z.lp)) return kInf;
    return -z.lp + 0.5 * z.p.cwiseProduct(inv_metric_).dot(z.p);
  }

  void sample_momentum(PhasePoint& z) {
    for (Eigen::Index n = 0; n < z.p.size(); ++n)
      z.p[n] = standard_normal(rng_) / std::sqrt(inv_metric_[n]);
  }

  void leapfrog(PhasePoint& z, double eps) const {
    z.p += 0.5 * eps * z.grad;
    z.q += eps * inv_metric_.cwiseProduct(z.p);
    evaluate(z);
    if (std::isfinite(z.lp)) z.p += 0.5 * eps * z.grad;
  }

  // Doubles the step size until the one-step acceptance crosses 0.8.
  void init_stepsize(const PhasePoint& start) {
    PhasePoint z = start;
    sample_momentum(z);
    double h0 = hamiltonian(z);
    leapfrog(z, epsilon);
    double h = hamiltonian(z);
    if (std::isnan(h)) h = kInf;
    double delta_h = h0 - h;
    const int direction = delta_h > std::log(0.8) ? 1 : -1;
    for (int iter = 0; iter < 100; ++iter) {
      z = start;
      sample_momentum(z);
      h0 = hamiltonian(z);
      leapfrog(z, epsilon);
      h = hamiltonian(z);
      if (std::isnan(h)) h = kInf;
      delta_h = h0 - h;
      if (direction == 1 && !(delta_h > std::log(0.8))) break;
      if (direction == -1 && !(delta_h < std::log(0.8))) break;
      epsilon = direction == 1 ? 2 * epsilon : 0.5 * epsilon;
      if (epsilon > 1e7) throw NumericalError("step size diverged to infinity during initialisation");
      if (epsilon == 0) throw NumericalError("step size collapsed to zero during initialisation");
    }
  }

  Transition transition(PhasePoint& z) {
    Transition t;
    sample_momentum(z);
    PhasePoint z_fwd = z, z_bck = z, z_sample = z, z_propose = z;
    Vec p_sharp_fwd_bck = inv_metric_.cwiseProduct(z.p);
    Vec p_sharp_fwd_fwd = p_sharp_fwd_bck, p_sharp_bck_fwd = p_sharp_fwd_bck,
        p_sharp_bck_bck = p_sharp_fwd_bck;
    Vec p_fwd_fwd = z.p, p_fwd_bck = z.p, p_bck_fwd = z.p, p_bck_bck = z.p;
    Vec rho = z.p;
    double log_sum_weight = 0;
    const double h0 = hamiltonian(z);
    int n_leapfrog = 0;
    double sum_metro = 0;
    divergent_ = false;

    int depth = 0;
    while (depth < max_depth_) {
      Vec rho_fwd = Vec::Zero(rho.size()), rho_bck = Vec::Zero(rho.size());
      bool valid_subtree;
      double log_sum_weight_subtree = -kInf;
      if (uniform01(rng_) > 0.5) {
        rho_bck = rho;
        p_bck_fwd = p_fwd_bck;
        p_sharp_bck_fwd = p_sharp_fwd_bck;
        PhasePoint& cur = z_fwd;
        valid_subtree = build_tree(depth, cur, z_propose, p_sharp_fwd_bck, p_sharp_fwd_fwd, rho_fwd,
                                   p_fwd_bck, p_fwd_fwd, h0, 1.0, n_leapfrog,
                                   log_sum_weight_subtree, sum_metro);
      } else {
        rho_fwd = rho;
        p_fwd_bck = p_bck_fwd;
        p_sharp_fwd_bck = p_sharp_bck_fwd;
        PhasePoint& cur = z_bck;
        valid_subtree = build_tree(depth, cur, z_propose, p_sharp_bck_fwd, p_sharp_bck_bck, rho_bck,
                                   p_bck_fwd, p_bck_bck, h0, -1.0, n_leapfrog,
                                   log_sum_weight_subtree, sum_metro);
      }
      if (!valid_subtree) break;
      ++depth;
      if (log_sum_weight_subtree > log_sum_weight) {
        z_sample = z_propose;
      } else if (uniform01(rng_) < std::exp(log_sum_weight_subtree - log_sum_weight)) {
        z_sample = z_propose;
      }
      log_sum_weight = log_sum_exp(log_sum_weight, log_sum_weight_subtree);
      rho = rho_bck + rho_fwd;
      bool persist = no_u_turn(p_sharp_bck_bck, p_sharp_fwd_fwd, rho);
      Vec rho_ext = rho_bck + p_fwd_bck;
      persist = persist && no_u_turn(p_sharp_bck_bck, p_sharp_fwd_bck, rho_ext);
      rho_ext = rho_fwd + p_bck_fwd;
      persist = persist && no_u_turn(p_sharp_bck_fwd, p_sharp_fwd_fwd, rho_ext);
      if (!persist) break;
    }
    t.depth = depth;
    t.n_leapfrog = n_leapfrog;
    t.accept_stat = n_leapfrog > 0 ? sum_metro / n_leapfrog : 0.0;
    t.divergent = divergent_;
    z = z_sample;
    return t;
  }

 private:
  static bool no_u_turn(const Vec& p_sharp_minus, const Vec& p_sharp_plus, const Vec& rho) {
    return p_sharp_plus.dot(rho) > 0 && p_sharp_minus.dot(rho) > 0;
  }

  bool build_tree(int depth, PhasePoint& z, PhasePoint& z_propose, Vec& p_sharp_beg,
                  Vec& p_sharp_end, Vec& rho, Vec& p_beg, Vec& p_end, double h0, double sign,
                  int& n_leapfrog, double& log_sum_weight, double& sum_metro) {
    if (depth == 0) {
      leapfrog(z, sign * epsilon);
      ++n_leapfrog;
      double h = hamiltonian(z);
      if (std::isnan(h)) h = kInf;
      if (h - h0 > kMaxDeltaH) divergent_ = true;
      log_sum_weight = log_sum_exp(log_sum_weight, h0 - h);
      sum_metro += h0 - h > 0 ? 1.0 : std::exp(h0 - h);
      z_propose = z;
      p_sharp_beg = inv_metric_.cwiseProduct(z.p);
      p_sharp_end = p_sharp_beg;
      rho += z.p;
      p_beg = z.p;
      p_end = p_beg;
      return !divergent_;
    }

    const auto n = rho.size();
    Vec p_sharp_init_end(n), p_init_end(n), rho_init = Vec::Zero(n);
    double log_sum_weight_init = -kInf;
    bool valid_init = build_tree(depth - 1, z, z_propose, p_sharp_beg, p_sharp_init_end, rho_init,
                                 p_beg, p_init_end, h0, sign, n_leapfrog, log_sum_weight_init,
                                 sum_metro);
    if (!valid_init) return false;

    PhasePoint z_propose_final = z;
    Vec p_sharp_final_beg(n), p_final_beg(n), rho_final = Vec::Zero(n);
    double log_sum_weight_final = -kInf;
    bool valid_final = build_tree(depth - 1, z, z_propose_final, p_sharp_final_beg, p_sharp_end,
                                  rho_final, p_final_beg, p_end, h0, sign, n_leapfrog,
                                  log_sum_weight_final, sum_metro);
    if (!valid_final) return false;

    const double log_sum_weight_subtree = log_sum_exp(log_sum_weight_init, log_sum_weight_final);
    log_sum_weight = log_sum_exp(log_sum_weight, log_sum_weight_subtree);
    if (log_sum_weight_final > log_sum_weight_subtree) {
      z_propose = z_propose_final;
    } else if (uniform01(rng_) < std::exp(log_sum_weight_final - log_sum_weight_subtree)) {
      z_propose = z_propose_final;
    }

    const Vec rho_subtree = rho_init + rho_final;
    rho += rho_subtree;
    bool persist = no_u_turn(p_sharp_beg, p_sharp_end, rho_subtree);
    Vec rho_ext = rho_init + p_final_beg;
    persist = persist && no_u_turn(p_sharp_beg, p_sharp_final_beg, rho_ext);
    rho_ext = rho_final + p_init_end;
    persist = persist && no_u_turn(p_sharp_init_end, p_sharp_end, rho_ext);
    return persist;
  }

  const LogDensityTarget& target_;
  Rng& rng_;
  int max_depth_;
  Vec inv_metric_;
  bool divergent_ = false;
};

struct ChainResult {
  Eigen::MatrixXd draws;  // niters x dim, unconstrained
  std::vector<std::uint8_t> divergent;
  ChainInfo info;
};

ChainResult run_chain(const LogDensityTarget& target, const SamplerConfig& cfg, int chain) {
  Rng rng = make_rng(cfg.seed, static_cast<std::uint64_t>(chain));
  const auto dim = static_cast<Eigen::Index>(target.dim());
  Nuts nuts(target, rng, cfg.max_tree_depth);

  PhasePoint z;
  z.q.resize(dim);
  z.p.resize(dim);
  z.grad.resize(dim);
  bool ok = false;
  for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
    for (Eigen::Index n = 0; n < dim; ++n) z.q[n] = cfg.init_radius * (2 * uniform01(rng) - 1);
    nuts.evaluate(z);
    ok = std::isfinite(z.lp);
  }
  if (!ok) throw NonFiniteDensity("no finite initial point after 100 attempts");

  nuts.epsilon = 1.0;
  nuts.init_stepsize(z);
  StepsizeAdapter stepsize(cfg.target_accept);
  stepsize.set_mu(std::log(10 * nuts.epsilon));
  stepsize.restart();
  WindowSchedule windows(cfg.nwarmup);
  WelfordVariance variance(target.dim());

  ChainResult out;
  out.draws.resize(cfg.niters, dim);
  out.divergent.assign(static_cast<std::size_t>(cfg.niters), 0);
  std::size_t warmup_div = 0;
  for (int it = 0; it < cfg.nwarmup; ++it) {
    const Transition t = nuts.transition(z);
    out.info.n_leapfrog += static_cast<std::size_t>(t.n_leapfrog);
    warmup_div += t.divergent;
    stepsize.learn(nuts.epsilon, t.accept_stat);
    if (windows.in_window()) variance.add(z.q);
    if (windows.window_end()) {
      windows.compute_next_window();
      const double n = static_cast<double>(variance.n());
      Vec var = variance.variance();
      var = (n / (n + 5.0)) * var + Vec::Constant(dim, 1e-3 * (5.0 / (n + 5.0)));
      if (!var.allFinite()) throw NumericalError("non-finite metric estimate during warmup");
      nuts.inv_metric() = var;
      variance.restart();
      nuts.init_stepsize(z);
      stepsize.set_mu(std::log(10 * nuts.epsilon));
      stepsize.restart();
    }
    windows.advance();
  }
  if (cfg.nwarmup > 0) {
    if (warmup_div == static_cast<std::size_t>(cfg.nwarmup)) throw AllDivergent();
    nuts.epsilon = stepsize.final_stepsize();
  }
  out.info.warmup_divergences = warmup_div;

  double accept_sum = 0, depth_sum = 0;
  for (int it = 0; it < cfg.niters; ++it) {
    const Transition t = nuts.transition(z);
    out.info.n_leapfrog += static_cast<std::size_t>(t.n_leapfrog);
    out.draws.row(it) = z.q.transpose();
    out.divergent[static_cast<std::size_t>(it)] = t.divergent;
    out.info.divergences += t.divergent;
    accept_sum += t.accept_stat;
    depth_sum += t.depth;
  }
  out.info.stepsize = nuts.epsilon;
  out.info.inv_metric = nuts.inv_metric();
  out.info.mean_accept_stat = cfg.niters > 0 ? accept_sum / cfg.niters : 0.0;
  out.info.mean_tree_depth = cfg.niters > 0 ? depth_sum / cfg.niters : 0.0;
  return out;
}

}  // namespace

void SamplerConfig::validate() const {
  if (niters < 1) throw InputError("niters must be at least 1");
  if (nwarmup < 0) throw InputError("nwarmup must be non-negative");
  if (nchains < 1) throw InputError("nchains must be at least 1");
  if (!(target_accept > 0 && target_accept < 1)) throw InputError("target_accept must lie in (0, 1)");
  if (max_tree_depth < 1) throw InputError("max_tree_depth must be at least 1");
  if (threads < 1) throw InputError("threads must be at least 1");
  if (!(init_radius > 0)) throw InputError("init_radius must be positive");
}

std::size_t PosteriorDraws::divergence_count() const {
  std::size_t n = 0;
  for (auto d : divergent) n += d;
  return n;
}

std::size_t PosteriorDraws::index_of(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw InputError("no parameter named '" + name + "'");
  return static_cast<std::size_t>(it - names.begin());
}

PosteriorDraws run_nuts(const LogDensityTarget& target, const SamplerConfig& config,
                        std::vector<std::string> names) {
  config.validate();
  if (target.dim() == 0) throw InputError("target has dimension zero");
  if (names.empty())
    for (std::size_t n = 0; n < target.dim(); ++n) names.push_back("x[" + std::to_string(n + 1) + "]");
  if (names.size() != target.dim()) throw DimensionMismatch("one name per coordinate is required");

  std::vector<ChainResult> results(static_cast<std::size_t>(config.nchains));
  std::vector<std::exception_ptr> errors(results.size());
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int c = next++; c < config.nchains; c = next++) {
      try {
        results[static_cast<std::size_t>(c)] = run_chain(target, config, c);
      } catch (...) {
        errors[static_cast<std::size_t>(c)] = std::current_exception();
      }
    }
  };
  const int n_threads = std::min(config.threads, config.nchains);
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  PosteriorDraws out;
  out.nchains = config.nchains;
  out.niters = config.niters;
  out.names = std::move(names);
  out.draws.resize(static_cast<Eigen::Index>(config.nchains) * config.niters,
                   static_cast<Eigen::Index>(target.dim()));
  for (int c = 0; c < config.nchains; ++c) {
    auto& r = results[static_cast<std::size_t>(c)];
    out.draws.middleRows(static_cast<Eigen::Index>(c) * config.niters, config.niters) = r.draws;
    out.divergent.insert(out.divergent.end(), r.divergent.begin(), r.divergent.end());
    out.chains.push_back(std::move(r.info));
  }
  return out;
}

PosteriorDraws sample(const Model& model, const SamplerConfig& config) {
  ModelTarget target(model);
  PosteriorDraws draws = run_nuts(target, config, model.layout().names());
  for (Eigen::Index r = 0; r < draws.draws.rows(); ++r) {
    const Vec z = draws.draws.row(r).transpose();
    const ParamVector p =
        model.constrain(std::span<const double>(z.data(), static_cast<std::size_t>(z.size())));
    draws.draws.row(r) = model.layout().flatten(p).transpose();
  }
  return draws;
}

PosteriorDraws sample(const ModelSpec& spec, const RatingsTable& table, const SamplerConfig& config) {
  Model model(spec, table);
  return sample(model, config);
}

}  // namespace relikit
