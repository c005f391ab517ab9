#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "relikit/model.hpp"
#include "relikit/posterior.hpp"
#include "relikit/sampler.hpp"
#include "relikit/select.hpp"
#include "relikit/sim.hpp"

namespace relikit {

using Json = nlohmann::json;

/// Shortest decimal text that reads back to the same double; "NaN"/"Inf"
/// for non-finite values.
std::string format_double(double x);
double parse_double(const std::string& s);

/// Model specification with R-style argument names (fixed_eff_intercept,
/// gamma_a, ...). Missing keys keep their defaults.
Json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const Json& j);

Json sampler_to_json(const SamplerConfig& c);
SamplerConfig sampler_from_json(const Json& j, SamplerConfig base = {});

/// Draws as CSV: chain, iteration and divergent columns, then one column per
/// parameter. Chains and iterations are 1-based.
void write_draws_csv(const PosteriorDraws& draws, std::ostream& out);
void write_draws_csv(const PosteriorDraws& draws, const std::filesystem::path& path);
PosteriorDraws read_draws_csv(std::istream& in);
PosteriorDraws read_draws_csv(const std::filesystem::path& path);

Json diagnostics_to_json(const Diagnostics& d, const PosteriorDraws& draws);
Json loo_to_json(const LooResult& loo, bool pointwise = false);
Json predictive_kappa_to_json(const PredictiveKappa& k, bool keep_draws = false);
Json kappa_to_json(const KappaEstimate& k);

Json summaries_to_json(const std::vector<ParameterSummary>& rows);
void write_summary_csv(const std::vector<ParameterSummary>& rows, std::ostream& out);

Json params_to_json(const ParamVector& p);
ParamVector params_from_json(const Json& j);

Json scenario_to_json(const ScenarioConfig& s);
ScenarioConfig scenario_from_json(const Json& j);
Json study_config_to_json(const StudyConfig& c);
/// Accepts a full configuration or a short one naming only a reference
/// ({"reference": "gait", "n_replicates": 30, ...}).
StudyConfig study_config_from_json(const Json& j);
/// Identity line written at the top of a study checkpoint.
Json study_header_json(const StudyConfig& c);

Json replicate_to_json(const ReplicateRecord& r);
ReplicateRecord replicate_from_json(const Json& j);
Json study_result_to_json(const StudyResult& r);
/// Scenario x selected-model proportions.
void write_selection_csv(const StudyResult& r, std::ostream& out);
/// One row per (scenario, mode, estimator): truth, mean and RMSE.
void write_kappa_table_csv(const StudyResult& r, std::ostream& out);

/// Hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

Json read_json_file(const std::filesystem::path& path);
/// Pretty-printed JSON with a trailing newline.
void write_json_file(const Json& j, const std::filesystem::path& path);

}  // namespace relikit
