#include "relikit/io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include <openssl/evp.h>

#include "relikit/errors.hpp"

namespace relikit {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// JSON has no NaN; null stands in for it both ways.
Json num(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }
double num(const Json& j) { return j.is_null() ? kNaN : j.get<double>(); }

Json vec(const Eigen::VectorXd& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(num(v[i]));
  return a;
}

Eigen::VectorXd vec(const Json& j) {
  if (j.is_number()) return Eigen::VectorXd::Constant(1, j.get<double>());
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = num(j[i]);
  return v;
}

template <class T>
void read_opt(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  return out;
}

}  // namespace

std::string format_double(double x) {
  if (std::isnan(x)) return "NaN";
  if (std::isinf(x)) return x > 0 ? "Inf" : "-Inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
  if (s == "NaN" || s == "nan" || s == "NA") return kNaN;
  if (s == "Inf" || s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-Inf" || s == "-inf") return -std::numeric_limits<double>::infinity();
  double x = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), x);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw InputError("not a number: '" + s + "'");
  return x;
}

Json spec_to_json(const ModelSpec& spec) {
  const PriorConfig& p = spec.priors;
  Json j;
  j["model"] = std::string("B") + std::string(to_string(spec.kind));
  j["link"] = to_string(spec.link);
  j["cov_R"] = to_string(spec.cov_R);
  j["cov_T"] = to_string(spec.cov_T);
  j["fixed_eff_intercept"] = spec.intercept;
  j["time_coding"] = spec.effective_time_coding() == TimeCoding::reference ? "reference" : "none";
  j["gamma_a"] = p.gamma_a;
  j["gamma_b"] = p.gamma_b;
  j["beta_mean"] = p.beta_mean;
  j["beta_sigma"] = p.beta_sigma;
  j["rho_R_eta"] = p.rho_R_eta;
  j["rho_T_eta"] = p.rho_T_eta;
  j["beta_a"] = p.beta_a;
  j["beta_b"] = p.beta_b;
  j["rho_prior"] = to_string(p.rho_prior);
  return j;
}

ModelSpec spec_from_json(const Json& j) {
  ModelSpec s;
  if (j.contains("model")) s.kind = parse_model_kind(j.at("model").get<std::string>());
  if (j.contains("link")) s.link = parse_link(j.at("link").get<std::string>());
  if (j.contains("cov_R")) s.cov_R = parse_cov_structure(j.at("cov_R").get<std::string>());
  if (j.contains("cov_T")) s.cov_T = parse_cov_structure(j.at("cov_T").get<std::string>());
  read_opt(j, "fixed_eff_intercept", s.intercept);
  if (j.contains("time_coding")) {
    const auto t = j.at("time_coding").get<std::string>();
    if (t == "reference") s.time_coding = TimeCoding::reference;
    else if (t == "none") s.time_coding = TimeCoding::none;
    else throw InputError("unknown time coding '" + t + "'");
  }
  PriorConfig& p = s.priors;
  read_opt(j, "gamma_a", p.gamma_a);
  read_opt(j, "gamma_b", p.gamma_b);
  read_opt(j, "beta_mean", p.beta_mean);
  read_opt(j, "beta_sigma", p.beta_sigma);
  read_opt(j, "rho_R_eta", p.rho_R_eta);
  read_opt(j, "rho_T_eta", p.rho_T_eta);
  read_opt(j, "beta_a", p.beta_a);
  read_opt(j, "beta_b", p.beta_b);
  if (j.contains("rho_prior")) p.rho_prior = parse_rho_prior(j.at("rho_prior").get<std::string>());
  p.validate();
  return s;
}

Json sampler_to_json(const SamplerConfig& c) {
  return Json{{"niters", c.niters},
              {"nwarmup", c.nwarmup},
              {"nchains", c.nchains},
              {"seed", c.seed},
              {"target_accept", c.target_accept},
              {"max_tree_depth", c.max_tree_depth},
              {"init_radius", c.init_radius}};
}

SamplerConfig sampler_from_json(const Json& j, SamplerConfig c) {
  read_opt(j, "niters", c.niters);
  read_opt(j, "nwarmup", c.nwarmup);
  read_opt(j, "nchains", c.nchains);
  read_opt(j, "seed", c.seed);
  read_opt(j, "target_accept", c.target_accept);
  read_opt(j, "max_tree_depth", c.max_tree_depth);
  read_opt(j, "init_radius", c.init_radius);
  c.validate();
  return c;
}

void write_draws_csv(const PosteriorDraws& draws, std::ostream& out) {
  out << "chain,iteration,divergent";
  for (const auto& n : draws.names) out << ',' << (n.find(',') != std::string::npos ? '"' + n + '"' : n);
  out << '\n';
  for (int c = 0; c < draws.nchains; ++c)
    for (int i = 0; i < draws.niters; ++i) {
      const auto r = draws.row(c, i);
      out << c + 1 << ',' << i + 1 << ',' << static_cast<int>(draws.divergent[r]);
      for (std::size_t d = 0; d < draws.dim(); ++d)
        out << ',' << format_double(draws.draws(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(d)));
      out << '\n';
    }
}

void write_draws_csv(const PosteriorDraws& draws, const std::filesystem::path& path) {
  auto out = open_out(path);
  write_draws_csv(draws, out);
}

PosteriorDraws read_draws_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw InputError("empty draws file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv_line(line);
  if (header.size() < 4 || header[0] != "chain" || header[1] != "iteration" || header[2] != "divergent")
    throw MissingColumn("chain,iteration,divergent");
  PosteriorDraws d;
  d.names.assign(header.begin() + 3, header.end());
  std::vector<std::vector<double>> rows;
  std::vector<int> chain_of;
  int max_chain = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size())
      throw DimensionMismatch("draws line " + std::to_string(line_no) + " has " + std::to_string(f.size()) +
                              " fields, expected " + std::to_string(header.size()));
    const int chain = static_cast<int>(parse_double(f[0]));
    if (chain < 1) throw InputError("chain numbers start at 1");
    if (chain < max_chain) throw InputError("draws must be grouped by chain in increasing order");
    max_chain = chain;
    chain_of.push_back(chain);
    d.divergent.push_back(static_cast<std::uint8_t>(parse_double(f[2]) != 0));
    std::vector<double> v;
    for (std::size_t c = 3; c < f.size(); ++c) v.push_back(parse_double(f[c]));
    rows.push_back(std::move(v));
  }
  if (rows.empty()) throw InputError("draws file has no rows");
  d.nchains = max_chain;
  std::vector<int> per_chain(static_cast<std::size_t>(max_chain), 0);
  for (int c : chain_of) ++per_chain[static_cast<std::size_t>(c - 1)];
  d.niters = per_chain[0];
  for (int n : per_chain)
    if (n != d.niters) throw DimensionMismatch("every chain needs the same number of draws");
  d.draws.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d.names.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < d.names.size(); ++c)
      d.draws(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  return d;
}

PosteriorDraws read_draws_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  return read_draws_csv(in);
}

Json diagnostics_to_json(const Diagnostics& d, const PosteriorDraws& draws) {
  Json params = Json::array();
  double max_rhat = 0, min_ess = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < d.names.size(); ++i) {
    const double r = d.rhat[static_cast<Eigen::Index>(i)];
    const double e = d.ess_bulk[static_cast<Eigen::Index>(i)];
    params.push_back({{"name", d.names[i]}, {"rhat", num(r)}, {"ess_bulk", num(e)}});
    if (std::isfinite(r)) max_rhat = std::max(max_rhat, r);
    if (std::isfinite(e)) min_ess = std::min(min_ess, e);
  }
  Json chains = Json::array();
  for (std::size_t c = 0; c < draws.chains.size(); ++c) {
    const ChainInfo& ci = draws.chains[c];
    chains.push_back({{"chain", c + 1},
                      {"stepsize", num(ci.stepsize)},
                      {"divergences", ci.divergences},
                      {"warmup_divergences", ci.warmup_divergences},
                      {"mean_accept_stat", num(ci.mean_accept_stat)},
                      {"mean_tree_depth", num(ci.mean_tree_depth)},
                      {"n_leapfrog", ci.n_leapfrog}});
  }
  return Json{{"divergences", draws.divergence_count()},
              {"divergence_rate", num(d.divergence_rate)},
              {"max_rhat", num(max_rhat)},
              {"min_ess_bulk", num(min_ess)},
              {"chains", chains},
              {"parameters", params}};
}

Json loo_to_json(const LooResult& loo, bool pointwise) {
  Json j{{"elpd_loo", num(loo.elpd_loo)},
         {"p_loo", num(loo.p_loo)},
         {"looic", num(loo.looic)},
         {"n_bad_k", loo.n_bad_k},
         {"max_pareto_k", num(loo.pareto_k.size() ? loo.pareto_k.maxCoeff() : kNaN)}};
  if (pointwise) {
    j["pareto_k"] = vec(loo.pareto_k);
    j["elpd_pointwise"] = vec(loo.elpd_pointwise);
  }
  return j;
}

Json predictive_kappa_to_json(const PredictiveKappa& k, bool keep_draws) {
  Json j{{"n_draws", k.n_draws},
         {"n_dropped", k.n_dropped},
         {"interrater", {{"mean", num(k.mean_inter)}, {"lower", num(k.lower_inter)}, {"upper", num(k.upper_inter)}}},
         {"intrarater", {{"mean", num(k.mean_intra)}, {"lower", num(k.lower_intra)}, {"upper", num(k.upper_intra)}}}};
  if (keep_draws) {
    Json a = Json::array(), b = Json::array();
    for (double v : k.inter) a.push_back(num(v));
    for (double v : k.intra) b.push_back(num(v));
    j["interrater"]["draws"] = a;
    j["intrarater"]["draws"] = b;
  }
  return j;
}

Json kappa_to_json(const KappaEstimate& k) {
  Json j{{"kappa", num(k.kappa)}, {"p_o", num(k.p_o)}, {"p_c", num(k.p_c)}, {"n_items", k.n_items}};
  j["mode"] = k.mode ? Json(std::string(to_string(*k.mode))) : Json(nullptr);
  j["method"] = to_string(k.method);
  return j;
}

Json summaries_to_json(const std::vector<ParameterSummary>& rows) {
  Json a = Json::array();
  for (const auto& r : rows)
    a.push_back({{"name", r.name}, {"mean", num(r.mean)}, {"sd", num(r.sd)}, {"q2.5", num(r.lower)}, {"q97.5", num(r.upper)}});
  return a;
}

void write_summary_csv(const std::vector<ParameterSummary>& rows, std::ostream& out) {
  out << "name,mean,sd,q2.5,q97.5\n";
  for (const auto& r : rows)
    out << r.name << ',' << format_double(r.mean) << ',' << format_double(r.sd) << ','
        << format_double(r.lower) << ',' << format_double(r.upper) << '\n';
}

Json params_to_json(const ParamVector& p) {
  Json j{{"beta", vec(p.beta)}, {"sigma_u", p.sigma_u}, {"sigma_v", vec(p.sigma_v)}, {"sigma_w", vec(p.sigma_w)}};
  j["rho_R"] = p.rho_R ? Json(*p.rho_R) : Json(nullptr);
  j["rho_T"] = p.rho_T ? Json(*p.rho_T) : Json(nullptr);
  return j;
}

ParamVector params_from_json(const Json& j) {
  ParamVector p;
  p.beta = j.contains("beta") ? vec(j.at("beta")) : Eigen::VectorXd::Zero(1);
  read_opt(j, "sigma_u", p.sigma_u);
  if (j.contains("sigma_v")) p.sigma_v = vec(j.at("sigma_v"));
  if (j.contains("sigma_w")) p.sigma_w = vec(j.at("sigma_w"));
  if (j.contains("rho_R") && !j.at("rho_R").is_null()) p.rho_R = j.at("rho_R").get<double>();
  if (j.contains("rho_T") && !j.at("rho_T").is_null()) p.rho_T = j.at("rho_T").get<double>();
  return p;
}

Json scenario_to_json(const ScenarioConfig& s) {
  return Json{{"reference", to_string(s.reference)},
              {"sim_kind", to_string(s.sim_kind)},
              {"dims", {{"I", s.dims.I}, {"J", s.dims.J}, {"K", s.dims.K}}},
              {"generating", params_to_json(s.generating)},
              {"link", to_string(s.link)},
              {"n_replicates", s.n_replicates},
              {"true_kappa_reps", s.true_kappa_reps},
              {"seed", s.seed}};
}

ScenarioConfig scenario_from_json(const Json& j) {
  const DatasetReference ref =
      j.contains("reference") ? parse_dataset_reference(j.at("reference").get<std::string>()) : DatasetReference::custom;
  const ModelKind kind = parse_model_kind(j.at("sim_kind").get<std::string>());
  ScenarioConfig s;
  if (ref != DatasetReference::custom) s = ScenarioConfig::reference_scenario(ref, kind);
  s.reference = ref;
  s.sim_kind = kind;
  if (j.contains("dims")) {
    const Json& d = j.at("dims");
    s.dims = {d.at("I").get<int>(), d.at("J").get<int>(), d.at("K").get<int>()};
  } else if (ref == DatasetReference::custom) {
    throw InputError("a custom scenario needs dims");
  }
  if (j.contains("link")) s.link = parse_link(j.at("link").get<std::string>());
  if (j.contains("generating")) {
    s.generating = params_from_json(j.at("generating"));
    if (!j.at("generating").contains("beta"))
      s.generating.beta[0] = calibrate_intercept(kind, s.generating, s.link);
  } else if (ref == DatasetReference::custom) {
    throw InputError("a custom scenario needs generating parameters");
  }
  read_opt(j, "n_replicates", s.n_replicates);
  read_opt(j, "true_kappa_reps", s.true_kappa_reps);
  read_opt(j, "seed", s.seed);
  s.validate();
  return s;
}

Json study_config_to_json(const StudyConfig& c) {
  Json sc = Json::array();
  for (const auto& s : c.scenarios) sc.push_back(scenario_to_json(s));
  return Json{{"reference", to_string(c.reference)},
              {"scenarios", sc},
              {"sampler", sampler_to_json(c.sampler)},
              {"ppk_draws", c.ppk_draws},
              {"seed", c.seed}};
}

StudyConfig study_config_from_json(const Json& j) {
  StudyConfig c;
  if (j.contains("reference")) c.reference = parse_dataset_reference(j.at("reference").get<std::string>());
  if (j.contains("scenarios")) {
    for (const auto& s : j.at("scenarios")) {
      Json sj = s;
      if (!sj.contains("reference")) sj["reference"] = to_string(c.reference);
      c.scenarios.push_back(scenario_from_json(sj));
    }
  } else {
    c = StudyConfig::reference_study(c.reference);
  }
  for (auto& s : c.scenarios) {
    if (j.contains("n_replicates")) s.n_replicates = j.at("n_replicates").get<int>();
    if (j.contains("true_kappa_reps")) s.true_kappa_reps = j.at("true_kappa_reps").get<int>();
    if (j.contains("link")) s.link = parse_link(j.at("link").get<std::string>());
  }
  if (j.contains("sampler")) c.sampler = sampler_from_json(j.at("sampler"), c.sampler);
  read_opt(j, "ppk_draws", c.ppk_draws);
  read_opt(j, "seed", c.seed);
  c.validate();
  return c;
}

Json study_header_json(const StudyConfig& c) {
  Json j = study_config_to_json(c);
  j["type"] = "study";
  return j;
}

Json replicate_to_json(const ReplicateRecord& r) {
  auto arr = [](const std::array<double, 3>& a) { return Json::array({num(a[0]), num(a[1]), num(a[2])}); };
  Json j{{"type", "replicate"},
         {"sim_kind", to_string(r.sim_kind)},
         {"replicate", r.replicate},
         {"ok", r.ok}};
  if (!r.ok) {
    j["error"] = r.error;
    return j;
  }
  j["looic"] = arr(r.looic);
  j["p_loo"] = arr(r.p_loo);
  j["selected"] = to_string(r.selected);
  j["freq_inter"] = num(r.freq_inter);
  j["freq_intra"] = num(r.freq_intra);
  j["bayes_inter"] = arr(r.bayes_inter);
  j["bayes_intra"] = arr(r.bayes_intra);
  j["divergences"] = r.divergences;
  return j;
}

ReplicateRecord replicate_from_json(const Json& j) {
  auto arr = [](const Json& a) { return std::array<double, 3>{num(a[0]), num(a[1]), num(a[2])}; };
  ReplicateRecord r;
  r.sim_kind = parse_model_kind(j.at("sim_kind").get<std::string>());
  r.replicate = j.at("replicate").get<int>();
  r.ok = j.at("ok").get<bool>();
  if (!r.ok) {
    r.error = j.value("error", "");
    return r;
  }
  r.looic = arr(j.at("looic"));
  r.p_loo = arr(j.at("p_loo"));
  r.selected = parse_model_kind(j.at("selected").get<std::string>());
  r.freq_inter = num(j.at("freq_inter"));
  r.freq_intra = num(j.at("freq_intra"));
  r.bayes_inter = arr(j.at("bayes_inter"));
  r.bayes_intra = arr(j.at("bayes_intra"));
  r.divergences = j.at("divergences").get<std::array<std::size_t, 3>>();
  return r;
}

Json study_result_to_json(const StudyResult& r) {
  Json scen = Json::array();
  for (std::size_t s = 0; s < r.sim_kinds.size(); ++s) {
    const auto row = r.selection.row(static_cast<Eigen::Index>(s));
    scen.push_back({{"sim_kind", to_string(r.sim_kinds[s])},
                    {"true_inter", num(r.truths[s].inter)},
                    {"true_intra", num(r.truths[s].intra)},
                    {"failures", r.failures[s]},
                    {"selection", {{"BIN", num(row[0])}, {"BPN", num(row[1])}, {"BFN", num(row[2])}}}});
  }
  Json cells = Json::array();
  for (const auto& c : r.kappa_table)
    cells.push_back({{"sim_kind", to_string(c.sim_kind)},
                     {"mode", to_string(c.mode)},
                     {"estimator", c.estimator},
                     {"truth", num(c.truth)},
                     {"mean", num(c.mean)},
                     {"rmse", num(c.rmse)},
                     {"n", c.n}});
  return Json{{"reference", to_string(r.reference)}, {"scenarios", scen}, {"kappa_table", cells}};
}

void write_selection_csv(const StudyResult& r, std::ostream& out) {
  out << "sim_kind,BIN,BPN,BFN,n_ok,failures\n";
  for (std::size_t s = 0; s < r.sim_kinds.size(); ++s) {
    const auto row = r.selection.row(static_cast<Eigen::Index>(s));
    std::size_t n_ok = 0;
    for (const auto& rec : r.records)
      if (rec.sim_kind == r.sim_kinds[s] && rec.ok) ++n_ok;
    out << to_string(r.sim_kinds[s]) << ',' << format_double(row[0]) << ',' << format_double(row[1]) << ','
        << format_double(row[2]) << ',' << n_ok << ',' << r.failures[s] << '\n';
  }
}

void write_kappa_table_csv(const StudyResult& r, std::ostream& out) {
  out << "sim_kind,mode,estimator,truth,mean,rmse,n\n";
  for (const auto& c : r.kappa_table)
    out << to_string(c.sim_kind) << ',' << to_string(c.mode) << ',' << c.estimator << ','
        << format_double(c.truth) << ',' << format_double(c.mean) << ',' << format_double(c.rmse) << ','
        << c.n << '\n';
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("SHA-256 initialisation failed");
  }
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return hex.str();
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

void write_json_file(const Json& j, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

}  // namespace relikit
