#include "metaquad/harness.hpp"

#include <cstdio>
#include <future>
#include <set>

namespace metaquad::harness {

namespace {

json with_seed(const json& cfg, std::uint64_t seed, const char* what) {
    if (!cfg.is_object()) {
        throw PipelineError("config_error", std::string(what) + " config must be a JSON object");
    }
    json eff = cfg;
    eff["seed"] = seed;
    return eff;
}

// Library errors raised while running a stage are reported under `kind`.
template <class F>
auto stage(const char* kind, F&& f) {
    try {
        return f();
    } catch (const PipelineError&) {
        throw;
    } catch (const Error& e) {
        throw PipelineError(kind, e.what());
    }
}

nn::Checkpoint read_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) {
        throw PipelineError("io_error", "checkpoint not found: " + path.string(), {{"path", path.string()}});
    }
    try {
        return nn::checkpoint_from_json(read_text(path));
    } catch (const PipelineError&) {
        throw;
    } catch (const std::exception& e) {
        throw PipelineError("format_error", "invalid checkpoint " + path.string() + ": " + e.what(),
                            {{"path", path.string()}});
    }
}

void check_model(const nn::Predictor& model) {
    const auto topo = model.params.topology();
    if (topo.size() < 2 || topo.front() != 6 || topo.back() != 3) {
        throw PipelineError("config_error", "checkpoint topology does not map 6 inputs to 3 outputs");
    }
}

struct ScenarioRun {
    Scenario scenario;
    Trajectory traj;
    Evaluation eval;
    json report;
};

ScenarioRun run_scenario(const json& eff, const nn::Checkpoint& ckpt, std::uint64_t seed) {
    ScenarioRun r;
    r.scenario = scenario_from_json(eff);
    r.traj = stage("config_error", [&] { return build_trajectory(r.scenario.trajectory, r.scenario.vehicle.sim.step_dt); });
    r.eval = evaluate_scenario(r.scenario, ckpt.predictor, seed, config_hash(eff));
    r.report = to_json(r.eval.report);
    r.report["checkpoint_config_hash"] = ckpt.config_hash;
    return r;
}

void write_scenario(const fs::path& dir, const ScenarioRun& r) {
    write_text(dir / "baseline_run.csv", run_log_csv(r.eval.baseline));
    write_text(dir / "adapted_run.csv", run_log_csv(r.eval.adapted.log));
    write_text(dir / "adapt_trace.csv", adapt_trace_csv(r.eval.adapted.trace));
    write_text(dir / "desired.csv", trajectory_csv(r.traj));
    write_text(dir / "report.json", r.report.dump(2) + "\n");
    render_evaluation_plots(dir);
}

std::string num(double x, const char* spec = "%.17g") {
    char buf[40];
    std::snprintf(buf, sizeof buf, spec, x);
    return buf;
}

} // namespace

json run_generate_corpus(const json& cfg, std::uint64_t seed, const fs::path& out) {
    const json eff = with_seed(cfg, seed, "corpus");
    const CorpusConfig c = corpus_config_from_json(eff);
    std::vector<Trajectory> trajs;
    for (const auto& t : c.trajectories) {
        trajs.push_back(stage("config_error", [&] { return build_trajectory(t, c.vehicle.sim.step_dt); }));
    }
    const FaultTaskSet set =
        stage("corpus_error", [&] { return generate_training_corpus(c.faults, trajs, c.vehicle); });

    json tasks = json::array();
    for (const auto& t : set.tasks) {
        const std::string file = "tasks/" + t.name + ".csv";
        write_text(out / file, dataset_csv(t.data));
        tasks.push_back({{"name", t.name},
                         {"file", file},
                         {"fault", to_json(t.fault)},
                         {"samples", t.data.size()},
                         {"trajectories", t.trajectories}});
    }
    json skips = json::array();
    for (const auto& s : set.skips) {
        skips.push_back({{"fault_index", s.fault_index},
                         {"fault", c.faults[s.fault_index].name},
                         {"trajectory_index", s.trajectory_index},
                         {"reason", s.reason}});
    }
    json traj_info = json::array();
    for (std::size_t i = 0; i < trajs.size(); ++i) {
        traj_info.push_back({{"index", i},
                             {"spec", to_json(c.trajectories[i])},
                             {"samples", trajs[i].size()},
                             {"duration", trajs[i].duration()}});
    }
    json manifest = {{"format", "metaquad-corpus"},
                     {"version", 1},
                     {"config_hash", config_hash(eff)},
                     {"seed", seed},
                     {"config", eff},
                     {"data", {{"tasks", tasks}, {"skips", skips}, {"trajectories", traj_info}}}};
    write_text(out / "manifest.json", manifest.dump(2) + "\n");
    return manifest;
}

json run_meta_train(const json& cfg, const fs::path& corpus_dir, std::uint64_t seed, const fs::path& out) {
    json eff = with_seed(cfg, seed, "meta");
    eff.erase("corpus_dir");
    const MetaConfig m = meta_config_from_json(eff);
    const FaultTaskSet corpus = load_corpus(corpus_dir);
    stage("corpus_error", [&] { corpus.validate(); return 0; });
    const json manifest = json::parse(read_text(corpus_dir / "manifest.json"));

    const PredictorTraining pt = stage("training_error", [&] { return meta_train_predictor(corpus, m); });

    nn::Checkpoint ckpt;
    ckpt.predictor = pt.predictor;
    ckpt.seed = seed;
    ckpt.config_hash = config_hash({{"meta", eff}, {"corpus", manifest.value("config_hash", "")}});
    write_text(out / "checkpoint.json", nn::checkpoint_to_json(ckpt));
    write_text(out / "trace.csv", trace_csv(pt.trace));
    return {{"checkpoint", "checkpoint.json"},
            {"trace", "trace.csv"},
            {"config_hash", ckpt.config_hash},
            {"seed", seed},
            {"iterations", pt.trace.size()},
            {"initial_loss", pt.trace.empty() ? 0.0 : pt.trace.front()},
            {"final_loss", pt.trace.empty() ? 0.0 : pt.trace.back()}};
}

Evaluation evaluate_scenario(const Scenario& s, const nn::Predictor& model, std::uint64_t seed,
                             const std::string& hash) {
    check_model(model);
    const Trajectory traj = stage("config_error", [&] { return build_trajectory(s.trajectory, s.vehicle.sim.step_dt); });
    AdaptConfig adapt = s.adapt;
    adapt.seed = seed;
    if (traj.size() <= adapt.K + 1) {
        throw PipelineError("config_error", "scenario '" + s.name + "': trajectory shorter than the warm-up");
    }

    Evaluation ev;
    try {
        ev.baseline = simulate_tracking(QuadState::at_rest(traj[0].pos), traj, s.fault, s.vehicle);
    } catch (const DivergenceError& e) {
        throw PipelineError("divergence", "baseline arm diverged at step " + std::to_string(e.step()),
                            {{"scenario", s.name}, {"arm", "baseline"}, {"step", e.step()}});
    }
    try {
        ev.adapted = run_adaptive_tracking(model, traj, s.fault, s.vehicle, adapt);
    } catch (const DivergenceError& e) {
        throw PipelineError("divergence", "adapted arm diverged at step " + std::to_string(e.step()),
                            {{"scenario", s.name}, {"arm", "adapted"}, {"step", e.step()}});
    } catch (const Error& e) {
        throw PipelineError("adaptation_error", e.what(), {{"scenario", s.name}, {"arm", "adapted"}});
    }

    MetricsReport& r = ev.report;
    r.scenario = s.name;
    r.config_hash = hash;
    r.seed = seed;
    r.window_first = adapt.K;
    r.steps = ev.baseline.size();
    r.average_deviation_baseline = ev.baseline.average_deviation(adapt.K);
    r.average_deviation_adapted = ev.adapted.log.average_deviation(adapt.K);
    r.average_deviation_baseline_all = ev.baseline.average_deviation(0);
    r.average_deviation_adapted_all = ev.adapted.log.average_deviation(0);
    r.max_deviation_baseline = ev.baseline.max_deviation(adapt.K);
    r.max_deviation_adapted = ev.adapted.log.max_deviation(adapt.K);
    r.relearn_count = ev.adapted.trace.relearn_count;
    r.relearn_steps = ev.adapted.trace.relearn_steps;
    std::tie(r.first_quartile_mean, r.final_quartile_mean) = quartile_means(ev.adapted.log, adapt.K);
    r.deviation_series_identical = ev.baseline.size() == ev.adapted.log.size();
    for (std::size_t i = 0; r.deviation_series_identical && i < ev.baseline.size(); ++i) {
        r.deviation_series_identical = ev.baseline.samples[i].deviation == ev.adapted.log.samples[i].deviation;
    }
    return ev;
}

json run_evaluate(const json& cfg, const fs::path& checkpoint, std::uint64_t seed, const fs::path& out) {
    const json eff = with_seed(cfg, seed, "scenario");
    const nn::Checkpoint ckpt = read_checkpoint(checkpoint);
    const ScenarioRun r = run_scenario(eff, ckpt, seed);
    write_scenario(out, r);
    return r.report;
}

SuiteResult run_suite(const json& cfg, std::uint64_t seed, const fs::path& out,
                      const std::optional<fs::path>& checkpoint) {
    const json eff = with_seed(cfg, seed, "suite");
    for (const auto& [key, _] : eff.items()) {
        if (key != "name" && key != "scenarios" && key != "checkpoint" && key != "training" && key != "seed") {
            throw PipelineError("config_error", "suite: unknown key '" + key + "'");
        }
    }
    if (!eff.contains("scenarios") || !eff["scenarios"].is_array() || eff["scenarios"].empty()) {
        throw PipelineError("config_error", "suite has no scenarios");
    }
    std::vector<json> scenarios;
    std::set<std::string> names;
    for (const auto& s : eff["scenarios"]) {
        json se = with_seed(s, seed, "scenario");
        se.erase("checkpoint");
        const std::string name = scenario_from_json(se).name;
        if (!names.insert(name).second) {
            throw PipelineError("config_error", "suite: duplicate scenario name '" + name + "'");
        }
        scenarios.push_back(std::move(se));
    }

    fs::path ckpt_path;
    if (checkpoint) {
        ckpt_path = *checkpoint;
    } else if (eff.contains("training")) {
        const json& t = eff["training"];
        if (!t.is_object() || !t.contains("corpus") || !t.contains("meta")) {
            throw PipelineError("config_error", "suite.training needs 'corpus' and 'meta'");
        }
        run_generate_corpus(t["corpus"], seed, out / "corpus");
        run_meta_train(t["meta"], out / "corpus", seed, out / "model");
        ckpt_path = out / "model" / "checkpoint.json";
    } else {
        throw PipelineError("config_error", "suite needs a checkpoint or a training block");
    }
    const nn::Checkpoint ckpt = read_checkpoint(ckpt_path);

    std::vector<std::future<ScenarioRun>> jobs;
    for (const auto& se : scenarios) {
        jobs.push_back(std::async(std::launch::async, [&, se] {
            ScenarioRun r = run_scenario(se, ckpt, seed);
            write_scenario(out / r.scenario.name, r);
            return r;
        }));
    }
    std::vector<ScenarioRun> runs;
    std::exception_ptr failure;
    for (auto& j : jobs) {
        try {
            runs.push_back(j.get());
        } catch (...) {
            if (!failure) {
                failure = std::current_exception();
            }
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }

    std::string csv = "scenario,average_deviation_baseline,average_deviation_adapted,ratio,relearn_count,"
                      "max_deviation_baseline,max_deviation_adapted,average_deviation_baseline_all,"
                      "average_deviation_adapted_all,converges\n";
    std::string table;
    char line[256];
    std::snprintf(line, sizeof line, "%-16s %12s %12s %7s %8s %10s\n", "scenario", "baseline[cm]", "adapted[cm]",
                  "ratio", "relearns", "converges");
    table += line;
    json rows = json::array();
    for (const auto& r : runs) {
        const MetricsReport& m = r.eval.report;
        csv += m.scenario + "," + num(m.average_deviation_baseline) + "," + num(m.average_deviation_adapted) + "," +
               num(m.ratio()) + "," + std::to_string(m.relearn_count) + "," + num(m.max_deviation_baseline) + "," +
               num(m.max_deviation_adapted) + "," + num(m.average_deviation_baseline_all) + "," +
               num(m.average_deviation_adapted_all) + "," + (m.converges() ? "1" : "0") + "\n";
        std::snprintf(line, sizeof line, "%-16s %12.2f %12.2f %7.3f %8zu %10s\n", m.scenario.c_str(),
                      100.0 * m.average_deviation_baseline, 100.0 * m.average_deviation_adapted, m.ratio(),
                      m.relearn_count, m.converges() ? "yes" : "no");
        table += line;
        rows.push_back(r.report);
    }
    write_text(out / "summary.csv", csv);
    json summary = {{"suite", eff.value("name", "suite")},
                    {"config_hash", config_hash(eff)},
                    {"checkpoint_config_hash", ckpt.config_hash},
                    {"seed", seed},
                    {"summary", "summary.csv"},
                    {"scenarios", rows}};
    write_text(out / "summary.json", summary.dump(2) + "\n");
    return {summary, table};
}

} // namespace metaquad::harness
