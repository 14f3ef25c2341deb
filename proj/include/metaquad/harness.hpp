#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "metaquad/metalearn.hpp"
#include "metaquad/runtime_adapt.hpp"

namespace metaquad::harness {

using json = nlohmann::json;
namespace fs = std::filesystem;

/// Raised for malformed or unresolvable configuration and missing inputs.
/// `kind` ends up in the CLI error report.
class PipelineError : public Error {
public:
    PipelineError(std::string kind, const std::string& what, json details = json::object())
        : Error(what), kind_(std::move(kind)), details_(std::move(details)) {}
    const std::string& kind() const noexcept { return kind_; }
    const json& details() const noexcept { return details_; }

private:
    std::string kind_;
    json details_;
};

// ---------------------------------------------------------------- config ---

/// Reads a JSON file; string entries under "vehicle", "meta", "corpus", "adapt",
/// "trajectory", "training" and "scenarios" are taken as paths relative to the file and
/// spliced in, so the returned document is self-contained.
json load_config(const fs::path& path);
json resolve_config(const json& cfg, const fs::path& base_dir);

/// FNV-1a (64 bit) over the compact dump of `cfg`, as 16 hex digits.
/// nlohmann orders object keys, so the dump is canonical.
std::string config_hash(const json& cfg);

struct TrajectorySpec {
    std::vector<Waypoint> waypoints;
    double average_speed = 0.5;
};

Trajectory build_trajectory(const TrajectorySpec& spec, double dt);

VehicleConfig vehicle_from_json(const json& j);
json to_json(const VehicleConfig& v);
FaultSpec fault_from_json(const json& j);
json to_json(const FaultSpec& f);
TrajectorySpec trajectory_from_json(const json& j);
json to_json(const TrajectorySpec& t);
/// Accepts explicit entries and {"positions", "endpoint_speeds", "average_speeds"}
/// sweeps, which expand to one trajectory per average speed (the interior speed
/// hint equals the average speed).
std::vector<TrajectorySpec> trajectories_from_json(const json& j);
MetaConfig meta_config_from_json(const json& j);
json to_json(const MetaConfig& m);
AdaptConfig adapt_config_from_json(const json& j);
json to_json(const AdaptConfig& a);

struct CorpusConfig {
    VehicleConfig vehicle;
    std::vector<NamedFault> faults;
    std::vector<TrajectorySpec> trajectories;
};
CorpusConfig corpus_config_from_json(const json& j);

struct Scenario {
    std::string name;
    FaultSpec fault;
    TrajectorySpec trajectory;
    VehicleConfig vehicle;
    AdaptConfig adapt;
};
Scenario scenario_from_json(const json& j);

// -------------------------------------------------------------------- io ---

void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

std::string run_log_csv(const RunLog& log);
std::string adapt_trace_csv(const AdaptTrace& trace);
std::string trajectory_csv(const Trajectory& traj);
std::string dataset_csv(const nn::TaskDataset& data);
std::string trace_csv(const std::vector<double>& trace);

nn::TaskDataset parse_dataset_csv(const std::string& text, const std::string& label = {});

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
    std::vector<double> column(const std::string& name) const;
};
CsvTable parse_csv(const std::string& text);

/// Corpus directory written by run_generate_corpus.
FaultTaskSet load_corpus(const fs::path& dir);

// ----------------------------------------------------------------- plots ---

struct PlotSeries {
    std::string label;
    std::string color;
    std::vector<double> x;
    std::vector<double> y;
    bool dashed = false;
};

/// Minimal line chart: frame, min/max tick labels, legend.
std::string svg_line_plot(const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<PlotSeries>& series,
                          bool equal_aspect = false);

/// Top-view path plot and deviation-over-time plot, read back from an
/// evaluation directory's CSVs.
void render_evaluation_plots(const fs::path& dir);

// --------------------------------------------------------------- metrics ---

struct MetricsReport {
    std::string scenario;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::size_t window_first = 0; ///< first step of the averaging window
    std::size_t steps = 0;
    double average_deviation_baseline = 0.0;
    double average_deviation_adapted = 0.0;
    double average_deviation_baseline_all = 0.0;
    double average_deviation_adapted_all = 0.0;
    double max_deviation_baseline = 0.0;
    double max_deviation_adapted = 0.0;
    std::size_t relearn_count = 0;
    std::vector<std::size_t> relearn_steps;
    double first_quartile_mean = 0.0; ///< adapted arm, first 25% after warm-up
    double final_quartile_mean = 0.0; ///< adapted arm, last 25%
    bool deviation_series_identical = false;

    double ratio() const {
        return average_deviation_baseline > 0.0 ? average_deviation_adapted / average_deviation_baseline : 0.0;
    }
    bool converges() const { return final_quartile_mean <= first_quartile_mean; }
};

json to_json(const MetricsReport& r);

/// (first-quartile mean, final-quartile mean) of the deviation over [first, end).
std::pair<double, double> quartile_means(const RunLog& log, std::size_t first);

/// Subset of JSON Schema (type, required, properties, items, enum, minimum,
/// additionalProperties=false) sufficient for the shipped schemas. Returns the
/// list of violations, empty when valid.
std::vector<std::string> validate_schema(const json& instance, const json& schema);

fs::path schema_dir();

// ------------------------------------------------------------- pipelines ---

/// Runs every trajectory under every fault and writes tasks/<name>.csv plus
/// manifest.json. Returns the manifest.
json run_generate_corpus(const json& cfg, std::uint64_t seed, const fs::path& out);

/// Meta-trains on a corpus directory; writes checkpoint.json and trace.csv.
json run_meta_train(const json& cfg, const fs::path& corpus_dir, std::uint64_t seed,
                    const fs::path& out);

struct Evaluation {
    MetricsReport report;
    RunLog baseline;
    AdaptiveRun adapted;
};

/// Both arms on one scenario, no files written.
Evaluation evaluate_scenario(const Scenario& s, const nn::Predictor& model, std::uint64_t seed,
                             const std::string& hash);

/// Writes report.json, baseline_run.csv, adapted_run.csv, adapt_trace.csv,
/// desired.csv, path.svg and deviation.svg into `out`.
json run_evaluate(const json& cfg, const fs::path& checkpoint, std::uint64_t seed, const fs::path& out);

struct SuiteResult {
    json summary;
    std::string table; ///< console rendering of summary.csv
};

/// Evaluates every scenario of the suite concurrently, one directory each,
/// and writes summary.csv. A suite either names a checkpoint or carries a
/// "training" block (corpus + meta) that is run first.
SuiteResult run_suite(const json& cfg, std::uint64_t seed, const fs::path& out,
                      const std::optional<fs::path>& checkpoint = std::nullopt);

} // namespace metaquad::harness
