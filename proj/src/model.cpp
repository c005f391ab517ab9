#include "relikit/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>

#include "relikit/errors.hpp"

namespace relikit {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
double log_sigmoid(double x) { return -softplus(-x); }

// Asymptotic series 1 - x^-2 + 3 x^-4 - 15 x^-6 for the lower normal tail.
constexpr double kTailSwitch = -30.0;

double log_normal_cdf(double x) {
  if (x > kTailSwitch) return std::log(0.5 * std::erfc(-x * std::numbers::sqrt2 / 2));
  const double x2 = x * x;
  const double s = 1 - 1 / x2 + 3 / (x2 * x2) - 15 / (x2 * x2 * x2);
  return -0.5 * x2 - 0.5 * kLog2Pi - std::log(-x) + std::log(s);
}

// phi(x) / Phi(x), the derivative of log Phi.
double inverse_mills(double x) {
  if (x > kTailSwitch) {
    const double log_pdf = -0.5 * x * x - 0.5 * kLog2Pi;
    return std::exp(log_pdf - log_normal_cdf(x));
  }
  const double x2 = x * x;
  const double s = 1 - 1 / x2 + 3 / (x2 * x2) - 15 / (x2 * x2 * x2);
  const double ds = 2 / (x2 * x) - 12 / (x2 * x2 * x) + 90 / (x2 * x2 * x2 * x);
  return -x - 1 / x + ds / s;
}

double inverse_gamma_log_density(double var, double a, double b) {
  return a * std::log(b) - std::lgamma(a) - (a + 1) * std::log(var) - b / var;
}

// Exchangeable correlation on a d-block, parameterised by the unconstrained
// coordinate t. Omega^(1/2) = a I + (b - a) 11'/d with a^2 = 1 - rho and
// b^2 = 1 + (d - 1) rho, both computed from t without cancellation.
struct BlockCorr {
  int d = 1;
  double t = 0, sp = 0.5, sm = 0.5;
  double lambda0 = 1, lambda1 = 1;
  double a = 1, b = 1, da = 0, db = 0;
  double rho = 0;

  static BlockCorr from_unconstrained(int d, double t) {
    BlockCorr c;
    c.d = d;
    if (d < 2) return c;
    c.t = t;
    c.sp = sigmoid(t);
    c.sm = sigmoid(-t);
    c.lambda0 = static_cast<double>(d) / (d - 1) * c.sm;
    c.lambda1 = d * c.sp;
    c.a = std::sqrt(c.lambda0);
    c.b = std::sqrt(c.lambda1);
    c.da = -0.5 * c.a * c.sp;
    c.db = 0.5 * c.b * c.sm;
    const double lo = rho_lower_bound(d);
    c.rho = lo + (1 - lo) * c.sp;
    return c;
  }

  static BlockCorr from_rho(int d, double rho) {
    BlockCorr c;
    c.d = d;
    if (d < 2) return c;
    c.rho = rho;
    c.lambda0 = 1 - rho;
    c.lambda1 = 1 + (d - 1) * rho;
    if (!(c.lambda0 > 0) || !(c.lambda1 > 0))
      throw NonFiniteDensity("correlation " + std::to_string(rho) +
                             " outside the positive-definite range of a " +
                             std::to_string(d) + "-block");
    c.a = std::sqrt(c.lambda0);
    c.b = std::sqrt(c.lambda1);
    const double lo = rho_lower_bound(d);
    c.sp = (rho - lo) / (1 - lo);
    c.sm = 1 - c.sp;
    c.t = std::log(c.sp) - std::log1p(-c.sp);
    return c;
  }

  double log_det() const {
    return d < 2 ? 0.0 : (d - 1) * std::log(lambda0) + std::log(lambda1);
  }
};

// x_m = sigma_m * (Omega^(1/2) z)_m
template <class SigmaOf>
void forward_block(const BlockCorr& c, const double* z, double* x, SigmaOf sigma_of) {
  double zbar = 0;
  for (int m = 0; m < c.d; ++m) zbar += z[m];
  zbar /= c.d;
  for (int m = 0; m < c.d; ++m) x[m] = sigma_of(m) * (c.a * z[m] + (c.b - c.a) * zbar);
}

template <class SigmaOf>
void inverse_block(const BlockCorr& c, const double* x, double* z, SigmaOf sigma_of) {
  double ybar = 0;
  for (int m = 0; m < c.d; ++m) ybar += x[m] / sigma_of(m);
  ybar /= c.d;
  for (int m = 0; m < c.d; ++m)
    z[m] = x[m] / sigma_of(m) / c.a + (1 / c.b - 1 / c.a) * ybar;
}

template <class SigmaOf, class SlotOf>
void backprop_block(const BlockCorr& c, const double* z, const double* gx, double* gz,
                    double* g_sigma, double& g_t, SigmaOf sigma_of, SlotOf slot_of) {
  double zbar = 0, hbar = 0;
  for (int m = 0; m < c.d; ++m) {
    zbar += z[m];
    hbar += sigma_of(m) * gx[m];
  }
  zbar /= c.d;
  hbar /= c.d;
  for (int m = 0; m < c.d; ++m) {
    const double s = sigma_of(m);
    gz[m] += c.a * s * gx[m] + (c.b - c.a) * hbar;
    g_sigma[slot_of(m)] += gx[m] * (c.a * z[m] + (c.b - c.a) * zbar);
    g_t += gx[m] * s * (c.da * z[m] + (c.db - c.da) * zbar);
  }
}

template <class SigmaOf>
double block_log_normal(const BlockCorr& c, const double* x, SigmaOf sigma_of) {
  double ss = 0, ybar = 0, log_sigma = 0;
  for (int m = 0; m < c.d; ++m) {
    const double s = sigma_of(m);
    const double y = x[m] / s;
    ss += y * y;
    ybar += y;
    log_sigma += std::log(s);
  }
  ybar /= c.d;
  const double q = c.d < 2 ? ss : (ss - c.d * ybar * ybar) / c.lambda0 + c.d * ybar * ybar / c.lambda1;
  return -0.5 * (c.d * kLog2Pi + 2 * log_sigma + c.log_det() + q);
}

double rho_log_prior(const PriorConfig& pr, double eta, const BlockCorr& c) {
  if (c.d < 2) return 0;
  if (pr.rho_prior == RhoPrior::lkj) return (eta - 1) * c.log_det();
  const double lo = rho_lower_bound(c.d);
  const double one_plus = (1 + lo) + (1 - lo) * c.sp;
  const double log_beta = std::lgamma(pr.beta_a) + std::lgamma(pr.beta_b) -
                          std::lgamma(pr.beta_a + pr.beta_b);
  return (pr.beta_a - 1) * std::log(0.5 * one_plus) +
         (pr.beta_b - 1) * std::log(0.5 * c.lambda0) - log_beta - std::log(2.0);
}

// d/dt of rho_log_prior for a block built from t.
double rho_log_prior_dt(const PriorConfig& pr, double eta, const BlockCorr& c) {
  if (c.d < 2) return 0;
  if (pr.rho_prior == RhoPrior::lkj) return (eta - 1) * (-(c.d - 1) * c.sp + c.sm);
  const double lo = rho_lower_bound(c.d);
  const double one_plus = (1 + lo) + (1 - lo) * c.sp;
  const double drho_dt = (1 - lo) * c.sp * c.sm;
  return ((pr.beta_a - 1) / one_plus - (pr.beta_b - 1) / c.lambda0) * drho_dt;
}

double rho_log_jacobian(const BlockCorr& c) {
  if (c.d < 2) return 0;
  return std::log(1 - rho_lower_bound(c.d)) + log_sigmoid(c.t) + log_sigmoid(-c.t);
}

void check_positive(double value, const char* name) {
  if (!(value > 0) || !std::isfinite(value))
    throw NonFiniteDensity(std::string(name) + " must be positive and finite");
}

}  // namespace

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::IN: return "IN";
    case ModelKind::PN: return "PN";
    case ModelKind::FN: return "FN";
  }
  return "IN";
}

std::string_view to_string(Link link) { return link == Link::logit ? "logit" : "probit"; }

std::string_view to_string(CovStructure s) {
  switch (s) {
    case CovStructure::common: return "common";
    case CovStructure::separate: return "separate";
    case CovStructure::unstructured: return "unstructured";
  }
  return "common";
}

std::string_view to_string(RhoPrior p) { return p == RhoPrior::lkj ? "lkj" : "beta"; }

ModelKind parse_model_kind(std::string_view s) {
  const auto l = lower(s);
  if (l == "in" || l == "bin") return ModelKind::IN;
  if (l == "pn" || l == "bpn") return ModelKind::PN;
  if (l == "fn" || l == "bfn") return ModelKind::FN;
  throw InputError("unknown model kind '" + std::string(s) + "'");
}

Link parse_link(std::string_view s) {
  const auto l = lower(s);
  if (l == "logit") return Link::logit;
  if (l == "probit") return Link::probit;
  throw InputError("unknown link '" + std::string(s) + "'");
}

CovStructure parse_cov_structure(std::string_view s) {
  const auto l = lower(s);
  if (l == "common") return CovStructure::common;
  if (l == "separate") return CovStructure::separate;
  if (l == "unstructured") return CovStructure::unstructured;
  throw InputError("unknown covariance structure '" + std::string(s) + "'");
}

RhoPrior parse_rho_prior(std::string_view s) {
  const auto l = lower(s);
  if (l == "lkj") return RhoPrior::lkj;
  if (l == "beta") return RhoPrior::beta;
  throw InputError("unknown correlation prior '" + std::string(s) + "'");
}

void PriorConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0) || !std::isfinite(v))
      throw InputError(std::string(name) + " must be positive and finite");
  };
  positive(gamma_a, "gamma_a");
  positive(gamma_b, "gamma_b");
  positive(beta_sigma, "beta_sigma");
  positive(rho_R_eta, "rho_R_eta");
  positive(rho_T_eta, "rho_T_eta");
  positive(beta_a, "beta_a");
  positive(beta_b, "beta_b");
  if (!std::isfinite(beta_mean)) throw InputError("beta_mean must be finite");
}

TimeCoding ModelSpec::effective_time_coding() const {
  if (time_coding) return *time_coding;
  return kind == ModelKind::PN ? TimeCoding::reference : TimeCoding::none;
}

ModelDims model_dims(const ModelSpec& spec, const RatingsTable& table) {
  ModelDims d{table.n_subjects(), table.n_raters(), table.n_times(), 0};
  d.p = (spec.intercept ? 1 : 0) +
        (spec.effective_time_coding() == TimeCoding::reference ? d.K - 1 : 0) +
        table.n_covariates();
  return d;
}

double rho_lower_bound(int d) { return d < 2 ? -1.0 : -1.0 / (d - 1); }

Eigen::MatrixXd build_covariance(CovStructure structure, const Eigen::VectorXd& sigmas,
                                 double rho, int d) {
  if (d < 1) throw InputError("covariance dimension must be positive");
  const Eigen::Index expected = structure == CovStructure::common ? 1 : d;
  if (sigmas.size() != expected)
    throw DimensionMismatch("expected " + std::to_string(expected) + " standard deviations, got " +
                            std::to_string(sigmas.size()));
  if (d >= 2 && !(rho > rho_lower_bound(d) && rho < 1))
    throw NotPositiveDefinite("exchangeable correlation " + std::to_string(rho) +
                              " is outside (" + std::to_string(rho_lower_bound(d)) + ", 1)");
  for (Eigen::Index m = 0; m < sigmas.size(); ++m)
    if (!(sigmas[m] > 0)) throw NotPositiveDefinite("standard deviations must be positive");
  Eigen::MatrixXd S(d, d);
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < d; ++c) {
      const double sr = sigmas[structure == CovStructure::common ? 0 : r];
      const double sc = sigmas[structure == CovStructure::common ? 0 : c];
      S(r, c) = (r == c ? 1.0 : rho) * sr * sc;
    }
  return S;
}

// ---------------------------------------------------------------------------
// ParamLayout

ParamLayout::ParamLayout(const ModelSpec& spec, ModelDims dims) : kind_(spec.kind), dims_(dims) {
  const auto I = static_cast<std::size_t>(dims.I), J = static_cast<std::size_t>(dims.J),
             K = static_cast<std::size_t>(dims.K);
  std::size_t next = 0;
  auto take = [&](Block& b, std::size_t n) {
    b.offset = next;
    b.size = n;
    next += n;
  };
  auto idx = [](std::initializer_list<std::size_t> ix) {
    std::string s = "[";
    bool first = true;
    for (auto v : ix) {
      if (!first) s += ",";
      s += std::to_string(v + 1);
      first = false;
    }
    return s + "]";
  };

  take(beta, static_cast<std::size_t>(dims.p));
  for (std::size_t n = 0; n < beta.size; ++n) names_.push_back("beta" + idx({n}));
  take(u, I);
  for (std::size_t i = 0; i < I; ++i) names_.push_back("u" + idx({i}));

  switch (kind_) {
    case ModelKind::IN:
      take(v, J);
      for (std::size_t j = 0; j < J; ++j) names_.push_back("v" + idx({j}));
      take(w, K);
      for (std::size_t k = 0; k < K; ++k) names_.push_back("w" + idx({k}));
      break;
    case ModelKind::PN:
      take(v, J * K);
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t k = 0; k < K; ++k) names_.push_back("v" + idx({j, k}));
      take(w, 0);
      break;
    case ModelKind::FN:
      take(v, I * J);
      for (std::size_t i = 0; i < I; ++i)
        for (std::size_t j = 0; j < J; ++j) names_.push_back("v" + idx({i, j}));
      take(w, I * J * K);
      for (std::size_t i = 0; i < I; ++i)
        for (std::size_t j = 0; j < J; ++j)
          for (std::size_t k = 0; k < K; ++k) names_.push_back("w" + idx({i, j, k}));
      break;
  }

  take(sigma_u, 1);
  names_.push_back("sigma_u");

  std::size_t n_sigma_v = 1, n_sigma_w = 1;
  if (kind_ == ModelKind::PN) {
    n_sigma_v = spec.cov_T == CovStructure::common ? 1 : K;
    n_sigma_w = 0;
  } else if (kind_ == ModelKind::FN) {
    n_sigma_v = spec.cov_R == CovStructure::common ? 1 : J;
    n_sigma_w = spec.cov_T == CovStructure::common     ? 1
                : spec.cov_T == CovStructure::separate ? K
                                                       : J * K;
  }
  take(sigma_v, n_sigma_v);
  if (n_sigma_v == 1)
    names_.push_back("sigma_v");
  else
    for (std::size_t m = 0; m < n_sigma_v; ++m) names_.push_back("sigma_v" + idx({m}));
  take(sigma_w, n_sigma_w);
  if (n_sigma_w == 1)
    names_.push_back("sigma_w");
  else if (n_sigma_w == J * K && kind_ == ModelKind::FN && spec.cov_T == CovStructure::unstructured)
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t k = 0; k < K; ++k) names_.push_back("sigma_w" + idx({j, k}));
  else
    for (std::size_t m = 0; m < n_sigma_w; ++m) names_.push_back("sigma_w" + idx({m}));

  take(rho_R, kind_ == ModelKind::FN && J >= 2 ? 1 : 0);
  if (rho_R.size) names_.push_back("rho_R");
  take(rho_T, kind_ != ModelKind::IN && K >= 2 ? 1 : 0);
  if (rho_T.size) names_.push_back("rho_T");
  dim_ = next;
}

int ParamLayout::rater_block_dim() const { return kind_ == ModelKind::FN ? dims_.J : 1; }
int ParamLayout::time_block_dim() const { return kind_ == ModelKind::IN ? 1 : dims_.K; }

std::vector<std::size_t> ParamLayout::hyperparameter_indices() const {
  std::vector<std::size_t> out;
  for (const Block* b : {&sigma_u, &sigma_v, &sigma_w, &rho_R, &rho_T})
    for (std::size_t n = 0; n < b->size; ++n) out.push_back(b->offset + n);
  return out;
}

void ParamLayout::check(const ParamVector& p) const {
  auto expect = [](Eigen::Index got, std::size_t want, const char* name) {
    if (static_cast<std::size_t>(got) != want)
      throw DimensionMismatch(std::string(name) + " has " + std::to_string(got) +
                              " entries, expected " + std::to_string(want));
  };
  expect(p.beta.size(), beta.size, "beta");
  expect(p.u.size(), u.size, "u");
  expect(p.v.size(), v.size, "v");
  expect(p.w.size(), w.size, "w");
  expect(p.sigma_v.size(), sigma_v.size, "sigma_v");
  expect(p.sigma_w.size(), sigma_w.size, "sigma_w");
  if (static_cast<std::size_t>(p.rho_R.has_value()) != rho_R.size)
    throw DimensionMismatch(rho_R.size ? "rho_R is required" : "rho_R is not a parameter here");
  if (static_cast<std::size_t>(p.rho_T.has_value()) != rho_T.size)
    throw DimensionMismatch(rho_T.size ? "rho_T is required" : "rho_T is not a parameter here");
}

Eigen::VectorXd ParamLayout::flatten(const ParamVector& p) const {
  check(p);
  Eigen::VectorXd out(static_cast<Eigen::Index>(dim_));
  auto put = [&](const Block& b, const Eigen::VectorXd& x) {
    out.segment(static_cast<Eigen::Index>(b.offset), static_cast<Eigen::Index>(b.size)) = x;
  };
  put(beta, p.beta);
  put(u, p.u);
  put(v, p.v);
  put(w, p.w);
  out[static_cast<Eigen::Index>(sigma_u.offset)] = p.sigma_u;
  put(sigma_v, p.sigma_v);
  put(sigma_w, p.sigma_w);
  if (rho_R.size) out[static_cast<Eigen::Index>(rho_R.offset)] = *p.rho_R;
  if (rho_T.size) out[static_cast<Eigen::Index>(rho_T.offset)] = *p.rho_T;
  return out;
}

ParamVector ParamLayout::unflatten(std::span<const double> flat) const {
  if (flat.size() != dim_)
    throw DimensionMismatch("flat parameter vector has " + std::to_string(flat.size()) +
                            " entries, layout expects " + std::to_string(dim_));
  auto get = [&](const Block& b) {
    return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(
        flat.data() + b.offset, static_cast<Eigen::Index>(b.size)));
  };
  ParamVector p;
  p.beta = get(beta);
  p.u = get(u);
  p.v = get(v);
  p.w = get(w);
  p.sigma_u = flat[sigma_u.offset];
  p.sigma_v = get(sigma_v);
  p.sigma_w = get(sigma_w);
  if (rho_R.size) p.rho_R = flat[rho_R.offset];
  if (rho_T.size) p.rho_T = flat[rho_T.offset];
  return p;
}

// ---------------------------------------------------------------------------
// Link helpers

double bernoulli_log_lik(Link link, int y, double eta) {
  if (link == Link::logit) return y ? -softplus(-eta) : -softplus(eta);
  return y ? log_normal_cdf(eta) : log_normal_cdf(-eta);
}

double bernoulli_log_lik_deriv(Link link, int y, double eta) {
  if (link == Link::logit) return y - sigmoid(eta);
  return y ? inverse_mills(eta) : -inverse_mills(-eta);
}

double inverse_link(Link link, double eta) {
  if (link == Link::logit) return sigmoid(eta);
  return 0.5 * std::erfc(-eta * std::numbers::sqrt2 / 2);
}

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelSpec spec, const RatingsTable& table)
    : spec_(std::move(spec)), layout_(spec_, model_dims(spec_, table)) {
  spec_.priors.validate();
  X_ = design_matrix(table, spec_.intercept, spec_.effective_time_coding());
  if (spec_.kind == ModelKind::PN) {
    re_sign_ = -1.0;
    for (Eigen::Index c = spec_.intercept ? 1 : 0; c < X_.cols(); ++c) X_.col(c) *= -1.0;
  }
  const auto& d = layout_.dims();
  const std::size_t n = table.size();
  y_ = table.outcomes();
  subject_.resize(n);
  v_index_.resize(n);
  w_index_.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto& c = table.cell(r);
    subject_[r] = c.subject;
    switch (spec_.kind) {
      case ModelKind::IN:
        v_index_[r] = c.rater;
        w_index_[r] = c.time;
        break;
      case ModelKind::PN:
        v_index_[r] = c.rater * d.K + c.time;
        w_index_[r] = -1;
        break;
      case ModelKind::FN:
        v_index_[r] = c.subject * d.J + c.rater;
        w_index_[r] = (c.subject * d.J + c.rater) * d.K + c.time;
        break;
    }
  }
}

double Model::log_density(std::span<const double> z) const { return evaluate(z, nullptr); }

double Model::log_density_gradient(std::span<const double> z, std::span<double> grad) const {
  if (grad.size() != dim())
    throw DimensionMismatch("gradient buffer has wrong size");
  return evaluate(z, grad.data());
}

double Model::evaluate(std::span<const double> z, double* grad) const {
  const auto& L = layout_;
  const auto& d = L.dims();
  const auto& pr = spec_.priors;
  if (z.size() != L.dim())
    throw DimensionMismatch("parameter vector has " + std::to_string(z.size()) +
                            " entries, model expects " + std::to_string(L.dim()));
  using Vec = Eigen::VectorXd;
  using CMap = Eigen::Map<const Vec>;
  auto seg = [&](const ParamLayout::Block& b) {
    return CMap(z.data() + b.offset, static_cast<Eigen::Index>(b.size));
  };
  const auto beta = seg(L.beta);
  const auto zu = seg(L.u);
  const auto zv = seg(L.v);
  const auto zw = seg(L.w);
  const double s_u = z[L.sigma_u.offset];
  const Vec s_v = seg(L.sigma_v);
  const Vec s_w = seg(L.sigma_w);
  const double sigma_u = std::exp(s_u);
  const Vec sig_v = s_v.array().exp();
  const Vec sig_w = s_w.array().exp();
  const BlockCorr corr_R = BlockCorr::from_unconstrained(
      L.rater_block_dim(), L.rho_R.size ? z[L.rho_R.offset] : 0.0);
  const BlockCorr corr_T = BlockCorr::from_unconstrained(
      L.time_block_dim(), L.rho_T.size ? z[L.rho_T.offset] : 0.0);

  const bool common_R = spec_.cov_R == CovStructure::common;
  const bool common_T = spec_.cov_T == CovStructure::common;
  const bool separate_T = spec_.cov_T == CovStructure::separate;
  const int I = d.I, J = d.J, K = d.K;

  // Slot -> sigma index for each block family.
  auto pn_slot = [&](int k) { return common_T ? 0 : k; };
  auto fn_v_slot = [&](int j) { return common_R ? 0 : j; };
  auto fn_w_slot = [&](int j, int k) { return common_T ? 0 : separate_T ? k : j * K + k; };

  Vec u = sigma_u * zu;
  Vec v(zv.size()), w(zw.size());
  switch (spec_.kind) {
    case ModelKind::IN:
      v = sig_v[0] * zv;
      w = sig_w[0] * zw;
      break;
    case ModelKind::PN:
      for (int j = 0; j < J; ++j)
        forward_block(corr_T, zv.data() + j * K, v.data() + j * K,
                      [&](int k) { return sig_v[pn_slot(k)]; });
      break;
    case ModelKind::FN:
      for (int i = 0; i < I; ++i) {
        forward_block(corr_R, zv.data() + i * J, v.data() + i * J,
                      [&](int j) { return sig_v[fn_v_slot(j)]; });
        for (int j = 0; j < J; ++j)
          forward_block(corr_T, zw.data() + (i * J + j) * K, w.data() + (i * J + j) * K,
                        [&](int k) { return sig_w[fn_w_slot(j, k)]; });
      }
      break;
  }

  const std::size_t n = y_.size();
  Vec eta = X_ * beta;
  Vec resid(static_cast<Eigen::Index>(n));
  double lp = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const auto rr = static_cast<Eigen::Index>(r);
    double re = u[subject_[r]] + v[v_index_[r]];
    if (w_index_[r] >= 0) re += w[w_index_[r]];
    eta[rr] += re_sign_ * re;
    lp += bernoulli_log_lik(spec_.link, y_[r], eta[rr]);
    if (grad) resid[rr] = bernoulli_log_lik_deriv(spec_.link, y_[r], eta[rr]);
  }

  // Standard-normal scores of every random effect.
  const double n_scores = static_cast<double>(zu.size() + zv.size() + zw.size());
  lp += -0.5 * (zu.squaredNorm() + zv.squaredNorm() + zw.squaredNorm()) - 0.5 * n_scores * kLog2Pi;

  const double bs2 = pr.beta_sigma * pr.beta_sigma;
  lp += -0.5 * (beta.array() - pr.beta_mean).square().sum() / bs2 -
        static_cast<double>(beta.size()) * (std::log(pr.beta_sigma) + 0.5 * kLog2Pi);

  // Inverse-gamma on sigma^2, carried to log sigma.
  const double ig_const = pr.gamma_a * std::log(pr.gamma_b) - std::lgamma(pr.gamma_a) + std::log(2.0);
  auto sigma_prior = [&](double s) { return ig_const - 2 * pr.gamma_a * s - pr.gamma_b * std::exp(-2 * s); };
  auto sigma_prior_ds = [&](double s) { return -2 * pr.gamma_a + 2 * pr.gamma_b * std::exp(-2 * s); };
  lp += sigma_prior(s_u);
  for (Eigen::Index m = 0; m < s_v.size(); ++m) lp += sigma_prior(s_v[m]);
  for (Eigen::Index m = 0; m < s_w.size(); ++m) lp += sigma_prior(s_w[m]);

  lp += rho_log_prior(pr, pr.rho_R_eta, corr_R) + rho_log_jacobian(corr_R);
  lp += rho_log_prior(pr, pr.rho_T_eta, corr_T) + rho_log_jacobian(corr_T);

  if (!std::isfinite(lp)) throw NonFiniteDensity("log density is not finite");
  if (!grad) return lp;

  Eigen::Map<Vec> g(grad, static_cast<Eigen::Index>(L.dim()));
  g.setZero();
  auto gseg = [&](const ParamLayout::Block& b) {
    return g.segment(static_cast<Eigen::Index>(b.offset), static_cast<Eigen::Index>(b.size));
  };

  gseg(L.beta) = X_.transpose() * resid - (beta.array() - pr.beta_mean).matrix() / bs2;

  Vec gu = Vec::Zero(u.size()), gv = Vec::Zero(v.size()), gw = Vec::Zero(w.size());
  for (std::size_t r = 0; r < n; ++r) {
    const double e = re_sign_ * resid[static_cast<Eigen::Index>(r)];
    gu[subject_[r]] += e;
    gv[v_index_[r]] += e;
    if (w_index_[r] >= 0) gw[w_index_[r]] += e;
  }

  gseg(L.u) = sigma_u * gu - zu;
  double g_su = gu.dot(u) + sigma_prior_ds(s_u);
  Vec g_sig_v = Vec::Zero(sig_v.size()), g_sig_w = Vec::Zero(sig_w.size());
  double g_tR = 0, g_tT = 0;
  Vec gzv = -zv, gzw = -zw;

  switch (spec_.kind) {
    case ModelKind::IN:
      gzv += sig_v[0] * gv;
      gzw += sig_w[0] * gw;
      g_sig_v[0] = gv.dot(zv);
      g_sig_w[0] = gw.dot(zw);
      break;
    case ModelKind::PN:
      for (int j = 0; j < J; ++j)
        backprop_block(corr_T, zv.data() + j * K, gv.data() + j * K, gzv.data() + j * K,
                       g_sig_v.data(), g_tT, [&](int k) { return sig_v[pn_slot(k)]; }, pn_slot);
      break;
    case ModelKind::FN:
      for (int i = 0; i < I; ++i) {
        backprop_block(corr_R, zv.data() + i * J, gv.data() + i * J, gzv.data() + i * J,
                       g_sig_v.data(), g_tR, [&](int j) { return sig_v[fn_v_slot(j)]; }, fn_v_slot);
        for (int j = 0; j < J; ++j) {
          const auto off = (i * J + j) * K;
          backprop_block(corr_T, zw.data() + off, gw.data() + off, gzw.data() + off,
                         g_sig_w.data(), g_tT, [&](int k) { return sig_w[fn_w_slot(j, k)]; },
                         [&](int k) { return fn_w_slot(j, k); });
        }
      }
      break;
  }
  gseg(L.v) = gzv;
  gseg(L.w) = gzw;
  g[static_cast<Eigen::Index>(L.sigma_u.offset)] = g_su;
  for (Eigen::Index m = 0; m < s_v.size(); ++m)
    g[static_cast<Eigen::Index>(L.sigma_v.offset) + m] = sig_v[m] * g_sig_v[m] + sigma_prior_ds(s_v[m]);
  for (Eigen::Index m = 0; m < s_w.size(); ++m)
    g[static_cast<Eigen::Index>(L.sigma_w.offset) + m] = sig_w[m] * g_sig_w[m] + sigma_prior_ds(s_w[m]);
  if (L.rho_R.size)
    g[static_cast<Eigen::Index>(L.rho_R.offset)] =
        g_tR + rho_log_prior_dt(pr, pr.rho_R_eta, corr_R) + (corr_R.sm - corr_R.sp);
  if (L.rho_T.size)
    g[static_cast<Eigen::Index>(L.rho_T.offset)] =
        g_tT + rho_log_prior_dt(pr, pr.rho_T_eta, corr_T) + (corr_T.sm - corr_T.sp);
  return lp;
}

ParamVector Model::constrain(std::span<const double> z) const {
  const auto& L = layout_;
  const auto& d = L.dims();
  if (z.size() != L.dim()) throw DimensionMismatch("parameter vector has wrong size");
  ParamVector p = L.unflatten(z);  // beta and the raw scores
  p.sigma_u = std::exp(z[L.sigma_u.offset]);
  p.sigma_v = p.sigma_v.array().exp();
  p.sigma_w = p.sigma_w.array().exp();
  const BlockCorr cR = BlockCorr::from_unconstrained(L.rater_block_dim(),
                                                     L.rho_R.size ? z[L.rho_R.offset] : 0.0);
  const BlockCorr cT = BlockCorr::from_unconstrained(L.time_block_dim(),
                                                     L.rho_T.size ? z[L.rho_T.offset] : 0.0);
  if (L.rho_R.size) p.rho_R = cR.rho;
  if (L.rho_T.size) p.rho_T = cT.rho;
  p.u *= p.sigma_u;
  const Eigen::VectorXd zv = p.v, zw = p.w;
  const int I = d.I, J = d.J, K = d.K;
  const bool common_R = spec_.cov_R == CovStructure::common;
  const bool common_T = spec_.cov_T == CovStructure::common;
  const bool separate_T = spec_.cov_T == CovStructure::separate;
  switch (spec_.kind) {
    case ModelKind::IN:
      p.v *= p.sigma_v[0];
      p.w *= p.sigma_w[0];
      break;
    case ModelKind::PN:
      for (int j = 0; j < J; ++j)
        forward_block(cT, zv.data() + j * K, p.v.data() + j * K,
                      [&](int k) { return p.sigma_v[common_T ? 0 : k]; });
      break;
    case ModelKind::FN:
      for (int i = 0; i < I; ++i) {
        forward_block(cR, zv.data() + i * J, p.v.data() + i * J,
                      [&](int j) { return p.sigma_v[common_R ? 0 : j]; });
        for (int j = 0; j < J; ++j)
          forward_block(cT, zw.data() + (i * J + j) * K, p.w.data() + (i * J + j) * K,
                        [&](int k) { return p.sigma_w[common_T ? 0 : separate_T ? k : j * K + k]; });
      }
      break;
  }
  return p;
}

Eigen::VectorXd Model::unconstrain(const ParamVector& params) const {
  const auto& L = layout_;
  const auto& d = L.dims();
  L.check(params);
  check_positive(params.sigma_u, "sigma_u");
  for (Eigen::Index m = 0; m < params.sigma_v.size(); ++m) check_positive(params.sigma_v[m], "sigma_v");
  for (Eigen::Index m = 0; m < params.sigma_w.size(); ++m) check_positive(params.sigma_w[m], "sigma_w");
  const BlockCorr cR = BlockCorr::from_rho(L.rater_block_dim(), params.rho_R.value_or(0.0));
  const BlockCorr cT = BlockCorr::from_rho(L.time_block_dim(), params.rho_T.value_or(0.0));

  ParamVector q = params;
  q.u /= params.sigma_u;
  const int I = d.I, J = d.J, K = d.K;
  const bool common_R = spec_.cov_R == CovStructure::common;
  const bool common_T = spec_.cov_T == CovStructure::common;
  const bool separate_T = spec_.cov_T == CovStructure::separate;
  switch (spec_.kind) {
    case ModelKind::IN:
      q.v /= params.sigma_v[0];
      q.w /= params.sigma_w[0];
      break;
    case ModelKind::PN:
      for (int j = 0; j < J; ++j)
        inverse_block(cT, params.v.data() + j * K, q.v.data() + j * K,
                      [&](int k) { return params.sigma_v[common_T ? 0 : k]; });
      break;
    case ModelKind::FN:
      for (int i = 0; i < I; ++i) {
        inverse_block(cR, params.v.data() + i * J, q.v.data() + i * J,
                      [&](int j) { return params.sigma_v[common_R ? 0 : j]; });
        for (int j = 0; j < J; ++j)
          inverse_block(cT, params.w.data() + (i * J + j) * K, q.w.data() + (i * J + j) * K,
                        [&](int k) { return params.sigma_w[common_T ? 0 : separate_T ? k : j * K + k]; });
      }
      break;
  }
  q.sigma_u = std::log(params.sigma_u);
  q.sigma_v = params.sigma_v.array().log();
  q.sigma_w = params.sigma_w.array().log();
  if (L.rho_R.size) q.rho_R = cR.t;
  if (L.rho_T.size) q.rho_T = cT.t;
  return L.flatten(q);
}

double Model::log_abs_det_jacobian(std::span<const double> z) const {
  const auto& L = layout_;
  const auto& d = L.dims();
  if (z.size() != L.dim()) throw DimensionMismatch("parameter vector has wrong size");
  const ParamVector p = constrain(z);
  const BlockCorr cR = BlockCorr::from_unconstrained(L.rater_block_dim(),
                                                     L.rho_R.size ? z[L.rho_R.offset] : 0.0);
  const BlockCorr cT = BlockCorr::from_unconstrained(L.time_block_dim(),
                                                     L.rho_T.size ? z[L.rho_T.offset] : 0.0);
  double lj = d.I * std::log(p.sigma_u);
  const bool common_R = spec_.cov_R == CovStructure::common;
  const bool common_T = spec_.cov_T == CovStructure::common;
  const bool separate_T = spec_.cov_T == CovStructure::separate;
  switch (spec_.kind) {
    case ModelKind::IN:
      lj += d.J * std::log(p.sigma_v[0]) + d.K * std::log(p.sigma_w[0]);
      break;
    case ModelKind::PN:
      for (int j = 0; j < d.J; ++j) {
        for (int k = 0; k < d.K; ++k) lj += std::log(p.sigma_v[common_T ? 0 : k]);
        lj += 0.5 * cT.log_det();
      }
      break;
    case ModelKind::FN:
      for (int i = 0; i < d.I; ++i)
        for (int j = 0; j < d.J; ++j) {
          lj += std::log(p.sigma_v[common_R ? 0 : j]);
          for (int k = 0; k < d.K; ++k)
            lj += std::log(p.sigma_w[common_T ? 0 : separate_T ? k : j * d.K + k]);
          lj += 0.5 * cT.log_det();
        }
      lj += d.I * 0.5 * cR.log_det();
      break;
  }
  lj += z[L.sigma_u.offset];
  for (std::size_t m = 0; m < L.sigma_v.size; ++m) lj += z[L.sigma_v.offset + m];
  for (std::size_t m = 0; m < L.sigma_w.size; ++m) lj += z[L.sigma_w.offset + m];
  lj += rho_log_jacobian(cR) + rho_log_jacobian(cT);
  return lj;
}

Eigen::VectorXd Model::linear_predictor(const ParamVector& params) const {
  layout_.check(params);
  Eigen::VectorXd eta = X_ * params.beta;
  for (std::size_t r = 0; r < y_.size(); ++r) {
    double re = params.u[subject_[r]] + params.v[v_index_[r]];
    if (w_index_[r] >= 0) re += params.w[w_index_[r]];
    eta[static_cast<Eigen::Index>(r)] += re_sign_ * re;
  }
  return eta;
}

Eigen::VectorXd Model::pointwise_log_likelihood(const ParamVector& params) const {
  Eigen::VectorXd eta = linear_predictor(params);
  for (std::size_t r = 0; r < y_.size(); ++r) {
    const auto rr = static_cast<Eigen::Index>(r);
    eta[rr] = bernoulli_log_lik(spec_.link, y_[r], eta[rr]);
  }
  return eta;
}

double Model::log_likelihood(const ParamVector& params) const {
  return pointwise_log_likelihood(params).sum();
}

double Model::log_posterior(const ParamVector& params) const {
  const auto& L = layout_;
  const auto& d = L.dims();
  const auto& pr = spec_.priors;
  L.check(params);
  check_positive(params.sigma_u, "sigma_u");
  for (Eigen::Index m = 0; m < params.sigma_v.size(); ++m) check_positive(params.sigma_v[m], "sigma_v");
  for (Eigen::Index m = 0; m < params.sigma_w.size(); ++m) check_positive(params.sigma_w[m], "sigma_w");
  const BlockCorr cR = BlockCorr::from_rho(L.rater_block_dim(), params.rho_R.value_or(0.0));
  const BlockCorr cT = BlockCorr::from_rho(L.time_block_dim(), params.rho_T.value_or(0.0));

  double lp = log_likelihood(params);

  const BlockCorr scalar = BlockCorr::from_rho(1, 0.0);
  for (int i = 0; i < d.I; ++i)
    lp += block_log_normal(scalar, params.u.data() + i, [&](int) { return params.sigma_u; });

  const bool common_R = spec_.cov_R == CovStructure::common;
  const bool common_T = spec_.cov_T == CovStructure::common;
  const bool separate_T = spec_.cov_T == CovStructure::separate;
  const int J = d.J, K = d.K;
  switch (spec_.kind) {
    case ModelKind::IN:
      for (int j = 0; j < J; ++j)
        lp += block_log_normal(scalar, params.v.data() + j, [&](int) { return params.sigma_v[0]; });
      for (int k = 0; k < K; ++k)
        lp += block_log_normal(scalar, params.w.data() + k, [&](int) { return params.sigma_w[0]; });
      break;
    case ModelKind::PN:
      for (int j = 0; j < J; ++j)
        lp += block_log_normal(cT, params.v.data() + j * K,
                               [&](int k) { return params.sigma_v[common_T ? 0 : k]; });
      break;
    case ModelKind::FN:
      for (int i = 0; i < d.I; ++i) {
        lp += block_log_normal(cR, params.v.data() + i * J,
                               [&](int j) { return params.sigma_v[common_R ? 0 : j]; });
        for (int j = 0; j < J; ++j)
          lp += block_log_normal(cT, params.w.data() + (i * J + j) * K,
                                 [&](int k) { return params.sigma_w[common_T ? 0 : separate_T ? k : j * K + k]; });
      }
      break;
  }

  auto sigma_prior = [&](double s) {
    return inverse_gamma_log_density(s * s, pr.gamma_a, pr.gamma_b) + std::log(2 * s);
  };
  lp += sigma_prior(params.sigma_u);
  for (Eigen::Index m = 0; m < params.sigma_v.size(); ++m) lp += sigma_prior(params.sigma_v[m]);
  for (Eigen::Index m = 0; m < params.sigma_w.size(); ++m) lp += sigma_prior(params.sigma_w[m]);

  const double bs = pr.beta_sigma;
  for (Eigen::Index m = 0; m < params.beta.size(); ++m) {
    const double r = (params.beta[m] - pr.beta_mean) / bs;
    lp += -0.5 * r * r - std::log(bs) - 0.5 * kLog2Pi;
  }
  lp += rho_log_prior(pr, pr.rho_R_eta, cR) + rho_log_prior(pr, pr.rho_T_eta, cT);
  if (!std::isfinite(lp)) throw NonFiniteDensity("log posterior is not finite");
  return lp;
}

// ---------------------------------------------------------------------------
// Free-function surface

Eigen::VectorXd linear_predictor(const ModelSpec& spec, const ParamVector& params,
                                 const RatingsTable& table) {
  return Model(spec, table).linear_predictor(params);
}

double log_posterior(const ModelSpec& spec, const ParamVector& params, const RatingsTable& table) {
  return Model(spec, table).log_posterior(params);
}

Eigen::VectorXd grad_log_posterior(const ModelSpec& spec, const ParamVector& params,
                                   const RatingsTable& table) {
  Model m(spec, table);
  const Eigen::VectorXd z = m.unconstrain(params);
  Eigen::VectorXd g(z.size());
  m.log_density_gradient(std::span<const double>(z.data(), static_cast<std::size_t>(z.size())),
                         std::span<double>(g.data(), static_cast<std::size_t>(g.size())));
  return g;
}

namespace {

// A throwaway two-subject table with the requested lattice, used only to
// build a Model for transforms that do not touch the data.
RatingsTable lattice_table(ModelDims dims) {
  RatingsTable::Builder b;
  for (int i = 0; i < dims.I; ++i)
    for (int j = 0; j < dims.J; ++j)
      for (int k = 0; k < dims.K; ++k)
        b.add(std::to_string(i), std::to_string(j), std::to_string(k), 0);
  return std::move(b).build();
}

ModelSpec transform_spec(const ModelSpec& spec, ModelDims dims) {
  // Covariates are not part of the lattice, so carry p through a free design:
  // keep intercept/time coding and add nothing else. Callers with covariates
  // should use Model directly.
  ModelSpec s = spec;
  const int base = (s.intercept ? 1 : 0) +
                   (s.effective_time_coding() == TimeCoding::reference ? dims.K - 1 : 0);
  if (base != dims.p)
    throw DimensionMismatch("constrain/unconstrain free functions need p = " +
                            std::to_string(base) + " for this spec; use Model for covariates");
  return s;
}

}  // namespace

ParamVector constrain(const ModelSpec& spec, ModelDims dims, std::span<const double> z) {
  return Model(transform_spec(spec, dims), lattice_table(dims)).constrain(z);
}

Eigen::VectorXd unconstrain(const ModelSpec& spec, ModelDims dims, const ParamVector& params) {
  return Model(transform_spec(spec, dims), lattice_table(dims)).unconstrain(params);
}

}  // namespace relikit
