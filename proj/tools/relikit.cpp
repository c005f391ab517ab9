#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "relikit/agreement.hpp"
#include "relikit/data.hpp"
#include "relikit/errors.hpp"
#include "relikit/io.hpp"
#include "relikit/model.hpp"
#include "relikit/posterior.hpp"
#include "relikit/rng.hpp"
#include "relikit/sampler.hpp"
#include "relikit/select.hpp"
#include "relikit/sim.hpp"

namespace fs = std::filesystem;
using namespace relikit;

namespace {

enum Exit { ok = 0, input_error = 1, numerical_error = 2 };

struct Common {
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

struct SpecFlags {
  std::optional<std::string> model;
  std::string link = "logit";
  std::string cov_R = "common";
  std::string cov_T = "common";
  bool intercept = true;
  std::optional<std::string> time_coding;
  PriorConfig priors;
};

struct SchemaFlags {
  CsvSchema schema;
  std::vector<std::string> covariates;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--seed", c.seed, "Master seed (drawn from entropy when omitted)");
  app->add_option("--threads", c.threads, "Worker threads (default: RELIKIT_THREADS or 1)")
      ->check(CLI::PositiveNumber);
}

void add_schema(CLI::App* app, SchemaFlags& s) {
  app->add_option("--subject-col", s.schema.subject, "Subject column")->capture_default_str();
  app->add_option("--rater-col", s.schema.rater, "Rater column")->capture_default_str();
  app->add_option("--time-col", s.schema.time, "Time column")->capture_default_str();
  app->add_option("--outcome-col", s.schema.outcome, "Binary outcome column")->capture_default_str();
  app->add_option("--covariates", s.covariates, "Covariate columns (default: every other column)");
}

void add_spec(CLI::App* app, SpecFlags& f) {
  app->add_option("--model", f.model, "Model: bin, bpn or bfn");
  app->add_option("--link", f.link, "logit or probit")->capture_default_str();
  app->add_option("--cov-R", f.cov_R, "Rater block: common, separate, unstructured")->capture_default_str();
  app->add_option("--cov-T", f.cov_T, "Time block: common, separate, unstructured")->capture_default_str();
  app->add_option("--fixed-eff-intercept", f.intercept, "Include an intercept")->capture_default_str();
  app->add_option("--time-coding", f.time_coding, "Time fixed effects: none or reference");
  app->add_option("--gamma-a", f.priors.gamma_a, "Inverse-gamma shape")->capture_default_str();
  app->add_option("--gamma-b", f.priors.gamma_b, "Inverse-gamma scale")->capture_default_str();
  app->add_option("--beta-mean", f.priors.beta_mean, "Fixed-effect prior mean")->capture_default_str();
  app->add_option("--beta-sigma", f.priors.beta_sigma, "Fixed-effect prior sd")->capture_default_str();
  app->add_option("--rho-R-eta", f.priors.rho_R_eta, "LKJ shape, rater block")->capture_default_str();
  app->add_option("--rho-T-eta", f.priors.rho_T_eta, "LKJ shape, time block")->capture_default_str();
  app->add_option("--beta-a", f.priors.beta_a, "Beta prior a for (rho + 1) / 2")->capture_default_str();
  app->add_option("--beta-b", f.priors.beta_b, "Beta prior b for (rho + 1) / 2")->capture_default_str();
}

void add_sampler(CLI::App* app, SamplerConfig& s) {
  app->add_option("--niters", s.niters, "Post-warmup iterations per chain")->capture_default_str();
  app->add_option("--nwarmup", s.nwarmup, "Warmup iterations per chain")->capture_default_str();
  app->add_option("--nchains", s.nchains, "Chains")->capture_default_str();
  app->add_option("--target-accept", s.target_accept, "Target acceptance statistic")->capture_default_str();
  app->add_option("--max-tree-depth", s.max_tree_depth, "Maximum tree depth")->capture_default_str();
}

ModelSpec make_spec(const SpecFlags& f, std::string_view rho_prior) {
  ModelSpec s;
  s.kind = parse_model_kind(f.model.value_or("bin"));
  s.link = parse_link(f.link);
  s.cov_R = parse_cov_structure(f.cov_R);
  s.cov_T = parse_cov_structure(f.cov_T);
  s.intercept = f.intercept;
  if (f.time_coding) {
    if (*f.time_coding == "none") s.time_coding = TimeCoding::none;
    else if (*f.time_coding == "reference") s.time_coding = TimeCoding::reference;
    else throw InputError("unknown time coding '" + *f.time_coding + "'");
  }
  s.priors = f.priors;
  s.priors.rho_prior = parse_rho_prior(rho_prior);
  s.priors.validate();
  return s;
}

RatingsTable load_data(const std::string& path, SchemaFlags s) {
  if (!s.covariates.empty()) s.schema.covariates = s.covariates;
  return load_csv(path, s.schema);
}

int resolve_threads(const Common& c) {
  if (c.threads) return *c.threads;
  if (const char* env = std::getenv("RELIKIT_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
    throw InputError(std::string("RELIKIT_THREADS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

std::uint64_t resolve_seed(const Common& c) { return c.seed ? *c.seed : entropy_seed(); }

void warn_short_warmup(const SamplerConfig& s) {
  if (s.nwarmup < 500)
    std::cerr << "warning: nwarmup = " << s.nwarmup << " is short; consider at least 500\n";
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw InputError("cannot create output directory " + dir.string());
}

class Manifest {
 public:
  Manifest(std::string command, int argc, char** argv)
      : command_(std::move(command)), start_(std::chrono::steady_clock::now()) {
    for (int i = 0; i < argc; ++i) argv_.push_back(argv[i]);
  }
  void config(Json c) { config_ = std::move(c); }
  void seed(std::uint64_t s) { seed_ = s; }
  void input(const fs::path& p) { inputs_[p.string()] = sha256_file(p); }
  void output(const fs::path& p) { outputs_.push_back(p); }

  void write(const fs::path& dir) const {
    Json j;
    j["command"] = command_;
    j["argv"] = argv_;
    j["config"] = config_;
    j["seed"] = seed_ ? Json(*seed_) : Json(nullptr);
    j["version"] = RELIKIT_VERSION;
    j["wall_time_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    j["inputs"] = inputs_;
    Json outs = Json::object();
    for (const auto& p : outputs_) outs[p.filename().string()] = sha256_file(p);
    j["outputs"] = outs;
    write_json_file(j, dir / "manifest.json");
  }

 private:
  std::string command_;
  std::vector<std::string> argv_;
  Json config_ = Json::object();
  std::optional<std::uint64_t> seed_;
  Json inputs_ = Json::object();
  std::vector<fs::path> outputs_;
  std::chrono::steady_clock::time_point start_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

// Table-1 style rows for one fit.
std::vector<ParameterSummary> table1_rows(const ModelSpec& spec, const PosteriorDraws& draws,
                                          const std::vector<ParameterSummary>& corr) {
  std::vector<ParameterSummary> rows;
  auto add_param = [&](const std::string& label, const std::string& prefix) {
    for (std::size_t d = 0; d < draws.dim(); ++d) {
      const std::string& n = draws.names[d];
      if (n == prefix || n.rfind(prefix + "[", 0) == 0) {
        std::vector<double> col(draws.n_draws());
        for (std::size_t r = 0; r < col.size(); ++r)
          col[r] = draws.draws(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(d));
        rows.push_back(summarize_values(label + n.substr(prefix.size()), col));
      }
    }
  };
  auto add_corr = [&](const std::string& label, const std::string& name) {
    for (const auto& c : corr)
      if (c.name == name) {
        ParameterSummary s = c;
        s.name = label;
        rows.push_back(s);
      }
  };
  add_param("sigma_S", "sigma_u");
  if (spec.kind == ModelKind::PN) {
    add_param("sigma_T", "sigma_v");
  } else {
    add_param("sigma_R", "sigma_v");
    add_param("sigma_T", "sigma_w");
  }
  add_corr("Corr_R", "corr_R");
  add_corr("Corr_T", "corr_T");
  if (spec.kind == ModelKind::FN) {
    add_corr("Corr_R_as_printed", "corr_R_as_printed");
    add_corr("Corr_T_as_printed", "corr_T_as_printed");
    add_corr("rho_R", "rho_R");
  }
  if (spec.kind != ModelKind::IN) add_corr("rho_T", "rho_T");
  return rows;
}

int cmd_fit(const std::string& data_path, const SpecFlags& flags, const std::string& rho_prior,
            SchemaFlags schema, SamplerConfig sampler, const Common& common, const std::string& out_dir,
            std::size_t ppk_draws, bool keep_draws, int argc, char** argv) {
  if (!flags.model) throw InputError("--model is required");
  if (data_path.empty()) throw InputError("a data file is required");
  if (out_dir.empty()) throw InputError("an output directory is required (-o)");
  const ModelSpec spec = make_spec(flags, rho_prior);
  sampler.seed = resolve_seed(common);
  sampler.threads = resolve_threads(common);
  sampler.validate();
  warn_short_warmup(sampler);

  Manifest manifest("fit", argc, argv);
  manifest.seed(sampler.seed);
  manifest.config({{"spec", spec_to_json(spec)}, {"sampler", sampler_to_json(sampler)}, {"ppk_draws", ppk_draws}});
  manifest.input(data_path);

  const RatingsTable table = load_data(data_path, schema);
  const DesignSummary design = validate(table);
  if (!design.is_complete_block)
    std::cerr << "note: " << design.missing_cells.size() << " lattice cells are unobserved\n";
  const Model model(spec, table);
  const PosteriorDraws draws = sample(model, sampler);
  if (draws.divergence_count() > 0)
    std::cerr << "warning: " << draws.divergence_count() << " divergent transitions after warmup\n";

  const fs::path out(out_dir);
  ensure_dir(out);
  write_draws_csv(draws, out / "draws.csv");
  manifest.output(out / "draws.csv");

  const Diagnostics diag = diagnostics(draws);
  write_json_file(diagnostics_to_json(diag, draws), out / "diagnostics.json");
  manifest.output(out / "diagnostics.json");

  const auto params = summarize(draws);
  const auto corr = correlation_summaries(spec, model.layout(), draws);
  std::optional<LooResult> loo;
  if (draws.n_draws() >= min_loo_draws) {
    loo = psis_loo(pointwise_loglik(model, draws));
    if (loo->n_bad_k > 0)
      std::cerr << "warning: " << loo->n_bad_k << " observations have Pareto k > " << bad_k_threshold << "\n";
  } else {
    std::cerr << "warning: fewer than " << min_loo_draws << " draws; LOO skipped\n";
  }

  std::vector<ParameterSummary> table1 = table1_rows(spec, draws, corr);
  std::ostringstream csv;
  write_summary_csv(table1, csv);
  if (loo) {
    csv << "p_loo," << format_double(loo->p_loo) << ",NaN,NaN,NaN\n";
    csv << "LOOIC," << format_double(loo->looic) << ",NaN,NaN,NaN\n";
  }
  write_text(out / "summary.csv", csv.str());
  manifest.output(out / "summary.csv");

  std::ostringstream pcsv;
  write_summary_csv(params, pcsv);
  write_text(out / "parameters.csv", pcsv.str());
  manifest.output(out / "parameters.csv");

  Json summary{{"model", std::string("B") + std::string(to_string(spec.kind))},
               {"n_obs", table.size()},
               {"dims", {{"I", design.I}, {"J", design.J}, {"K", design.K}}},
               {"table1", summaries_to_json(table1)},
               {"correlations", summaries_to_json(corr)},
               {"parameters", summaries_to_json(params)}};
  summary["loo"] = loo ? loo_to_json(*loo) : Json(nullptr);
  write_json_file(summary, out / "summary.json");
  manifest.output(out / "summary.json");

  std::size_t n_ppk = ppk_draws == 0 ? draws.n_draws() : std::min(ppk_draws, draws.n_draws());
  PosteriorDraws thinned = draws;
  if (n_ppk < draws.n_draws()) {
    thinned.nchains = 1;
    thinned.niters = static_cast<int>(n_ppk);
    thinned.draws.resize(static_cast<Eigen::Index>(n_ppk), draws.draws.cols());
    thinned.divergent.clear();
    for (std::size_t i = 0; i < n_ppk; ++i) {
      const std::size_t r = i * draws.n_draws() / n_ppk;
      thinned.draws.row(static_cast<Eigen::Index>(i)) = draws.draws.row(static_cast<Eigen::Index>(r));
      thinned.divergent.push_back(draws.divergent[r]);
    }
  }
  const PredictiveKappa ppk =
      posterior_predictive_kappa(model, table, thinned, derive_seed(sampler.seed, 0x70706b), sampler.threads);
  Json pj = predictive_kappa_to_json(ppk, keep_draws);
  Json freq = Json::object();
  for (AgreementMode mode : {AgreementMode::interrater, AgreementMode::intrarater}) {
    const char* key = mode == AgreementMode::interrater ? "interrater" : "intrarater";
    try {
      freq[key] = kappa_to_json(agreement_kappa(table, mode, KappaMethod::conger));
    } catch (const Error&) {
      freq[key] = nullptr;
    }
  }
  pj["frequentist"] = freq;
  pj["model"] = summary["model"];
  write_json_file(pj, out / "ppkappa.json");
  manifest.output(out / "ppkappa.json");

  manifest.write(out);
  return ok;
}

int cmd_kappa(const std::string& data_path, const std::string& mode, const std::string& method,
              SchemaFlags schema, const std::string& out_file) {
  const RatingsTable table = load_data(data_path, schema);
  const KappaMethod m = parse_kappa_method(method);
  Json result;
  if (mode == "both") {
    result = Json::array();
    for (AgreementMode a : {AgreementMode::interrater, AgreementMode::intrarater})
      result.push_back(kappa_to_json(agreement_kappa(table, a, m)));
  } else {
    result = kappa_to_json(agreement_kappa(table, parse_agreement_mode(mode), m));
  }
  if (!out_file.empty()) write_json_file(result, out_file);
  std::cout << result.dump(2) << '\n';
  return ok;
}

int cmd_loo(const std::string& data_path, const std::string& draws_path, const SpecFlags& flags,
            const std::string& rho_prior, SchemaFlags schema, const std::vector<std::string>& compare,
            bool pointwise, const std::string& out_file) {
  Json result;
  if (!compare.empty()) {
    std::vector<std::pair<ModelKind, double>> looics;
    Json fits = Json::array();
    std::optional<RatingsTable> table;
    for (const auto& entry : compare) {
      const auto eq = entry.find('=');
      if (eq == std::string::npos) throw InputError("--compare entries look like KIND=LOOIC or KIND=draws.csv");
      const ModelKind kind = parse_model_kind(entry.substr(0, eq));
      const std::string rhs = entry.substr(eq + 1);
      double looic;
      Json fit{{"model", std::string("B") + std::string(to_string(kind))}};
      if (fs::is_regular_file(rhs)) {
        if (data_path.empty()) throw InputError("comparing draws files needs the data file");
        if (!table) table = load_data(data_path, schema);
        SpecFlags f = flags;
        f.model = std::string(to_string(kind));
        const Model model(make_spec(f, rho_prior), *table);
        const LooResult loo = psis_loo(pointwise_loglik(model, read_draws_csv(fs::path(rhs))));
        looic = loo.looic;
        fit["loo"] = loo_to_json(loo, pointwise);
      } else {
        try {
          looic = parse_double(rhs);
        } catch (const InputError&) {
          throw InputError("'" + rhs + "' is neither a number nor a readable draws file");
        }
        fit["loo"] = {{"looic", looic}};
      }
      looics.emplace_back(kind, looic);
      fits.push_back(fit);
    }
    const ModelKind best = select_model(looics);
    result = {{"fits", fits}, {"selected", std::string("B") + std::string(to_string(best))}};
  } else {
    if (!flags.model) throw InputError("--model is required");
    if (draws_path.empty() || data_path.empty()) throw InputError("loo needs --draws and a data file");
    const RatingsTable table = load_data(data_path, schema);
    const Model model(make_spec(flags, rho_prior), table);
    const LooResult loo = psis_loo(pointwise_loglik(model, read_draws_csv(fs::path(draws_path))));
    result = loo_to_json(loo, pointwise);
    result["model"] = std::string("B") + std::string(to_string(model.spec().kind));
    if (loo.n_bad_k > 0)
      std::cerr << "warning: " << loo.n_bad_k << " observations have Pareto k > " << bad_k_threshold << "\n";
  }
  if (!out_file.empty()) write_json_file(result, out_file);
  std::cout << result.dump(2) << '\n';
  return ok;
}

int cmd_simulate(const std::string& config_path, const std::string& reference, const std::string& sim_kind,
                 const std::optional<std::string>& link, int true_kappa_reps, const Common& common,
                 const std::string& out_dir, int argc, char** argv) {
  if (out_dir.empty()) throw InputError("an output directory is required (-o)");
  Manifest manifest("simulate", argc, argv);
  ScenarioConfig sc;
  if (!config_path.empty()) {
    manifest.input(config_path);
    sc = scenario_from_json(read_json_file(config_path));
  } else {
    sc = ScenarioConfig::reference_scenario(parse_dataset_reference(reference), parse_model_kind(sim_kind));
  }
  if (link) sc.link = parse_link(*link);
  if (common.seed) sc.seed = *common.seed;
  else if (config_path.empty() || !read_json_file(config_path).contains("seed")) sc.seed = entropy_seed();
  manifest.seed(sc.seed);
  manifest.config(scenario_to_json(sc));

  const fs::path out(out_dir);
  ensure_dir(out);
  const RatingsTable data = simulate_dataset(sc.sim_kind, sc.generating, sc.dims, sc.link, sc.seed);
  write_csv(data, out / "data.csv");
  manifest.output(out / "data.csv");
  write_json_file(scenario_to_json(sc), out / "scenario.json");
  manifest.output(out / "scenario.json");
  if (true_kappa_reps > 0) {
    const TrueKappa tk = true_kappa(sc.sim_kind, sc.generating, sc.dims, sc.link, true_kappa_reps,
                                    derive_seed(sc.seed, 1), resolve_threads(common));
    write_json_file({{"interrater", tk.inter}, {"intrarater", tk.intra}, {"n_used", tk.n_used},
                     {"n_degenerate", tk.n_degenerate}, {"reps", true_kappa_reps}},
                    out / "true_kappa.json");
    manifest.output(out / "true_kappa.json");
  }
  manifest.write(out);
  return ok;
}

struct StudyFlags {
  std::string config_path;
  std::string reference = "gait";
  std::optional<int> replicates;
  std::optional<int> true_kappa_reps;
  std::optional<std::size_t> ppk_draws;
  std::optional<std::string> link;
  bool paper_scale = false;
  bool resume = false;
  bool print_config = false;
  std::string out_dir;
  SamplerConfig sampler;
  std::vector<std::string> sampler_set;  // sampler flags given on the command line
};

StudyConfig build_study_config(const StudyFlags& f, const Common& common, bool& seed_from_entropy) {
  StudyConfig c;
  std::optional<Json> file;
  if (!f.config_path.empty()) {
    file = read_json_file(f.config_path);
    c = study_config_from_json(*file);
  } else {
    c = StudyConfig::reference_study(parse_dataset_reference(f.reference));
  }
  for (auto& s : c.scenarios) {
    if (f.paper_scale) {
      s.n_replicates = paper_replicates;
      s.true_kappa_reps = paper_true_kappa_reps;
    }
    if (f.replicates) s.n_replicates = *f.replicates;
    if (f.true_kappa_reps) s.true_kappa_reps = *f.true_kappa_reps;
    if (f.link) s.link = parse_link(*f.link);
  }
  for (const auto& name : f.sampler_set) {
    if (name == "niters") c.sampler.niters = f.sampler.niters;
    if (name == "nwarmup") c.sampler.nwarmup = f.sampler.nwarmup;
    if (name == "nchains") c.sampler.nchains = f.sampler.nchains;
    if (name == "target_accept") c.sampler.target_accept = f.sampler.target_accept;
    if (name == "max_tree_depth") c.sampler.max_tree_depth = f.sampler.max_tree_depth;
  }
  if (f.ppk_draws) c.ppk_draws = *f.ppk_draws;
  seed_from_entropy = false;
  if (common.seed) c.seed = *common.seed;
  else if (!file || !file->contains("seed")) {
    c.seed = entropy_seed();
    seed_from_entropy = true;
  }
  c.threads = resolve_threads(common);
  c.validate();
  return c;
}

int cmd_study(const StudyFlags& f, const Common& common, int argc, char** argv) {
  if (f.print_config) {
    bool entropy = false;
    Json j = study_config_to_json(build_study_config(f, common, entropy));
    if (entropy) j.erase("seed");
    std::cout << j.dump(2) << '\n';
    return ok;
  }
  if (f.out_dir.empty()) throw InputError("an output directory is required (-o)");
  const fs::path out(f.out_dir);
  ensure_dir(out);
  const fs::path ckpt = out / "replicates.jsonl";

  Manifest manifest("study", argc, argv);
  if (!f.config_path.empty()) manifest.input(f.config_path);
  bool entropy = false;
  StudyConfig config;
  if (f.resume && fs::exists(ckpt) && !common.seed && f.config_path.empty()) {
    // Pick the seed and settings up from the checkpoint header.
    std::ifstream in(ckpt);
    std::string line;
    std::getline(in, line);
    Json header = Json::parse(line);
    header.erase("type");
    config = study_config_from_json(header);
    config.threads = resolve_threads(common);
  } else {
    config = build_study_config(f, common, entropy);
  }
  if (fs::exists(ckpt) && !f.resume)
    throw InputError(ckpt.string() + " exists; pass --resume to continue it or choose another directory");
  config.checkpoint = ckpt;
  warn_short_warmup(config.sampler);
  manifest.seed(config.seed);
  manifest.config(study_config_to_json(config));

  std::size_t total = 0, finished = 0;
  for (const auto& s : config.scenarios) total += static_cast<std::size_t>(s.n_replicates);
  const StudyResult result = run_study(config, [&](const ReplicateRecord& r) {
    ++finished;
    std::cerr << "[" << to_string(config.reference) << " " << to_string(r.sim_kind) << " #" << r.replicate + 1
              << "] " << (r.ok ? "selected B" + std::string(to_string(r.selected)) : "failed: " + r.error)
              << " (" << finished << " new, " << total << " total)\n";
  });

  write_json_file(study_result_to_json(result), out / "study.json");
  manifest.output(out / "study.json");
  std::ostringstream sel, kap;
  write_selection_csv(result, sel);
  write_kappa_table_csv(result, kap);
  write_text(out / "selection.csv", sel.str());
  manifest.output(out / "selection.csv");
  write_text(out / "kappa_table.csv", kap.str());
  manifest.output(out / "kappa_table.csv");
  manifest.output(ckpt);
  manifest.write(out);
  return ok;
}

std::string fixed(double x, int digits = 2) {
  if (!std::isfinite(x)) return "-";
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << x;
  return s.str();
}

void report_fit(const fs::path& dir, std::ostream& out) {
  const Json s = read_json_file(dir / "summary.json");
  out << "Fit " << s.at("model").get<std::string>() << " (" << dir.string() << ")\n";
  out << std::left << std::setw(20) << "Parameter" << std::right << std::setw(10) << "Mean" << std::setw(18)
      << "95% interval" << '\n';
  auto num = [](const Json& j) { return j.is_null() ? std::nan("") : j.get<double>(); };
  for (const auto& r : s.at("table1"))
    out << std::left << std::setw(20) << r.at("name").get<std::string>() << std::right << std::setw(10)
        << fixed(num(r.at("mean"))) << std::setw(18)
        << ("(" + fixed(num(r.at("q2.5"))) + ", " + fixed(num(r.at("q97.5"))) + ")") << '\n';
  if (!s.at("loo").is_null()) {
    out << std::left << std::setw(20) << "p_LOO" << std::right << std::setw(10) << fixed(num(s["loo"]["p_loo"])) << '\n';
    out << std::left << std::setw(20) << "LOOIC" << std::right << std::setw(10) << fixed(num(s["loo"]["looic"])) << '\n';
  }
  if (fs::exists(dir / "ppkappa.json")) {
    const Json k = read_json_file(dir / "ppkappa.json");
    out << "\nConger kappa        Frequentist     " << s.at("model").get<std::string>() << " (95% interval)\n";
    for (const char* mode : {"interrater", "intrarater"}) {
      const Json& f = k.at("frequentist").at(mode);
      const Json& b = k.at(mode);
      out << std::left << std::setw(20) << mode << std::setw(16) << (f.is_null() ? "-" : fixed(num(f.at("kappa"))))
          << fixed(num(b.at("mean"))) << " (" << fixed(num(b.at("lower"))) << ", " << fixed(num(b.at("upper")))
          << ")\n";
    }
  }
}

void report_study(const fs::path& dir, std::ostream& out) {
  const Json s = read_json_file(dir / "study.json");
  auto num = [](const Json& j) { return j.is_null() ? std::nan("") : j.get<double>(); };
  out << "Study " << s.at("reference").get<std::string>() << " (" << dir.string() << ")\n";
  out << "LOOIC-selected proportions\n";
  out << std::left << std::setw(12) << "Simulated" << std::right << std::setw(8) << "BIN" << std::setw(8) << "BPN"
      << std::setw(8) << "BFN" << std::setw(10) << "failed" << '\n';
  for (const auto& r : s.at("scenarios")) {
    const Json& sel = r.at("selection");
    out << std::left << std::setw(12) << r.at("sim_kind").get<std::string>() << std::right << std::setw(8)
        << fixed(100 * num(sel.at("BIN")), 1) << std::setw(8) << fixed(100 * num(sel.at("BPN")), 1) << std::setw(8)
        << fixed(100 * num(sel.at("BFN")), 1) << std::setw(10) << r.at("failures").get<std::size_t>() << '\n';
  }
  out << "\nKappa: mean (RMSE)\n";
  out << std::left << std::setw(12) << "Simulated" << std::setw(12) << "Mode" << std::right << std::setw(8) << "True";
  for (auto e : estimator_names) out << std::setw(16) << e;
  out << '\n';
  const Json& cells = s.at("kappa_table");
  for (std::size_t i = 0; i + estimator_names.size() <= cells.size(); i += estimator_names.size()) {
    out << std::left << std::setw(12) << cells[i].at("sim_kind").get<std::string>() << std::setw(12)
        << cells[i].at("mode").get<std::string>() << std::right << std::setw(8) << fixed(num(cells[i].at("truth")), 3);
    for (std::size_t e = 0; e < estimator_names.size(); ++e) {
      const Json& c = cells[i + e];
      out << std::setw(16) << (fixed(num(c.at("mean")), 3) + " (" + fixed(num(c.at("rmse")), 3) + ")");
    }
    out << '\n';
  }
}

int cmd_report(const std::vector<std::string>& dirs) {
  bool first = true;
  for (const auto& d : dirs) {
    const fs::path dir(d);
    if (!first) std::cout << '\n';
    first = false;
    if (fs::exists(dir / "summary.json")) report_fit(dir, std::cout);
    else if (fs::exists(dir / "study.json")) report_study(dir, std::cout);
    else throw InputError(d + " holds neither fit nor study output");
  }
  return ok;
}

int cmd_print_config(const std::string& what) {
  Json j;
  if (what == "fit") {
    ModelSpec spec;
    j = {{"spec", spec_to_json(spec)}, {"sampler", sampler_to_json(SamplerConfig{})}};
    j["spec"]["model"] = nullptr;
    j["sampler"].erase("seed");
  } else if (what == "study") {
    j = study_config_to_json(StudyConfig::reference_study(DatasetReference::gait));
    j.erase("seed");
  } else {
    throw InputError("print-config takes 'fit' or 'study'");
  }
  std::cout << j.dump(2) << '\n';
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian and frequentist interrater and intrarater reliability for binary ratings"};
  app.set_version_flag("--version", RELIKIT_VERSION);
  app.require_subcommand(1);

  Common common;
  SpecFlags spec;
  SchemaFlags schema;
  std::string rho_prior = "lkj";
  SamplerConfig sampler;
  std::string data_path, out_dir, draws_path, out_file;

  auto* fit = app.add_subcommand("fit", "Fit BIN, BPN or BFN to a long-format CSV");
  fit->add_option("data", data_path, "Ratings CSV");
  add_spec(fit, spec);
  fit->add_option("--rho-prior", rho_prior, "lkj or beta")->capture_default_str();
  add_sampler(fit, sampler);
  add_schema(fit, schema);
  add_common(fit, common);
  fit->add_option("-o,--out", out_dir, "Output directory");
  std::size_t ppk_draws = 0;
  bool keep_draws = false, fit_print_config = false;
  fit->add_option("--ppk-draws", ppk_draws, "Posterior-predictive replicates (0 = one per draw)")->capture_default_str();
  fit->add_flag("--keep-draws", keep_draws, "Keep per-draw predictive kappas");
  fit->add_flag("--print-config", fit_print_config, "Print the resolved configuration and exit");

  std::string mode = "interrater", method = "conger";
  auto* kappa = app.add_subcommand("kappa", "Frequentist kappa of a ratings CSV");
  kappa->add_option("data", data_path, "Ratings CSV")->required();
  kappa->add_option("--mode", mode, "interrater, intrarater or both")->capture_default_str();
  kappa->add_option("--method", method, "cohen, scott, fleiss or conger")->capture_default_str();
  kappa->add_option("-o,--out", out_file, "Also write the JSON here");
  add_schema(kappa, schema);

  std::vector<std::string> compare;
  bool pointwise = false;
  auto* loo = app.add_subcommand("loo", "PSIS-LOO of a saved fit, or LOOIC model comparison");
  loo->add_option("data", data_path, "Ratings CSV");
  loo->add_option("--draws", draws_path, "draws.csv from fit");
  loo->add_option("--compare", compare, "KIND=LOOIC or KIND=draws.csv, two or more");
  loo->add_flag("--pointwise", pointwise, "Include Pareto k and elpd per observation");
  loo->add_option("-o,--out", out_file, "Also write the JSON here");
  add_spec(loo, spec);
  loo->add_option("--rho-prior", rho_prior, "lkj or beta")->capture_default_str();
  add_schema(loo, schema);

  std::string config_path, reference = "gait", sim_kind = "in";
  std::optional<std::string> sim_link;
  int tk_reps = 0;
  auto* simulate = app.add_subcommand("simulate", "Simulate one dataset from a scenario");
  simulate->add_option("--config", config_path, "Scenario JSON");
  simulate->add_option("--reference", reference, "gait or radiograph")->capture_default_str();
  simulate->add_option("--sim-kind", sim_kind, "Generating model: in, pn or fn")->capture_default_str();
  simulate->add_option("--link", sim_link, "logit or probit (default probit)");
  simulate->add_option("--true-kappa", tk_reps, "Also estimate the true kappas from this many datasets");
  simulate->add_option("-o,--out", out_dir, "Output directory");
  add_common(simulate, common);

  StudyFlags sf;
  auto* study = app.add_subcommand("study", "Simulation study: model selection and kappa accuracy");
  study->add_option("--config", sf.config_path, "Study JSON");
  study->add_option("--reference", sf.reference, "gait or radiograph")->capture_default_str();
  study->add_option("--replicates", sf.replicates, "Replicates per generating model (default 30)");
  study->add_option("--true-kappa-reps", sf.true_kappa_reps, "Datasets behind each true kappa (default 2000)");
  study->add_option("--ppk-draws", sf.ppk_draws, "Posterior-predictive replicates per fit (default 1000)");
  study->add_option("--link", sf.link, "logit or probit (default probit)");
  study->add_flag("--paper-scale", sf.paper_scale, "148 replicates and 10000 true-kappa datasets");
  study->add_flag("--resume", sf.resume, "Continue from replicates.jsonl in the output directory");
  study->add_flag("--print-config", sf.print_config, "Print the resolved configuration and exit");
  study->add_option("-o,--out", sf.out_dir, "Output directory");
  add_sampler(study, sf.sampler);
  add_common(study, common);

  std::vector<std::string> report_dirs;
  auto* report = app.add_subcommand("report", "Text tables from fit or study output directories");
  report->add_option("dirs", report_dirs, "Output directories")->required();

  std::string what = "fit";
  auto* print_config = app.add_subcommand("print-config", "Print default configuration as JSON");
  print_config->add_option("what", what, "fit or study")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return input_error;
  }

  try {
    if (*fit) {
      if (fit_print_config) {
        Json j{{"spec", spec_to_json(make_spec(spec, rho_prior))}, {"sampler", sampler_to_json(sampler)}};
        j["spec"]["model"] = spec.model ? j["spec"]["model"] : Json(nullptr);
        j["sampler"].erase("seed");
        std::cout << j.dump(2) << '\n';
        return ok;
      }
      return cmd_fit(data_path, spec, rho_prior, schema, sampler, common, out_dir, ppk_draws, keep_draws, argc, argv);
    }
    if (*kappa) return cmd_kappa(data_path, mode, method, schema, out_file);
    if (*loo) return cmd_loo(data_path, draws_path, spec, rho_prior, schema, compare, pointwise, out_file);
    if (*simulate)
      return cmd_simulate(config_path, reference, sim_kind, sim_link, tk_reps, common, out_dir, argc, argv);
    if (*study) {
      for (const char* n : {"niters", "nwarmup", "nchains", "target_accept", "max_tree_depth"}) {
        std::string flag = std::string("--") + n;
        for (auto& ch : flag)
          if (ch == '_') ch = '-';
        if (study->count(flag) > 0) sf.sampler_set.push_back(n);
      }
      return cmd_study(sf, common, argc, argv);
    }
    if (*report) return cmd_report(report_dirs);
    if (*print_config) return cmd_print_config(what);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return input_error;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return numerical_error;
  } catch (const DegenerateAgreement& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return numerical_error;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed JSON: " << e.what() << '\n';
    return input_error;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return input_error;
  }
  return input_error;
}
