// metaquad: corpus generation, meta-training, evaluation and suites from JSON configs.
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "metaquad/harness.hpp"

namespace hs = metaquad::harness;
using hs::json;

namespace {

int exit_code(const std::string& kind) {
    if (kind == "usage_error") return 2;
    if (kind == "config_error") return 3;
    if (kind == "io_error" || kind == "format_error") return 4;
    if (kind == "divergence") return 5;
    return 1;
}

int fail(const std::string& verb, const std::string& kind, const std::string& message,
         const json& details = json::object()) {
    json err = {{"status", "error"}, {"command", verb}, {"error", {{"kind", kind}, {"message", message}}}};
    if (!details.empty()) {
        err["error"]["details"] = details;
    }
    std::cerr << err.dump() << std::endl;
    return exit_code(kind);
}

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "JSON config file")->required();
    cmd->add_option("--seed", c.seed, "seed (overrides the config's seed)");
    cmd->add_option("--out", c.out, "output directory")->required();
}

// --seed wins, then the config's own "seed", then 0.
std::uint64_t pick_seed(const Common& c, const json& cfg) {
    if (c.seed) {
        return *c.seed;
    }
    if (cfg.is_object() && cfg.contains("seed") && cfg["seed"].is_number_unsigned()) {
        return cfg["seed"].get<std::uint64_t>();
    }
    return 0;
}

// Path given on the command line, else a key in the config relative to the config file.
std::optional<hs::fs::path> pick_path(const std::string& flag, const json& cfg, const char* key,
                                      const std::string& config_path) {
    if (!flag.empty()) {
        return hs::fs::path(flag);
    }
    if (cfg.is_object() && cfg.contains(key) && cfg[key].is_string()) {
        return hs::fs::path(config_path).parent_path() / cfg[key].get<std::string>();
    }
    return std::nullopt;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"metaquad: meta-learned reference correction for faulty quadrotors"};
    app.require_subcommand(1);

    Common gen, train, eval, suite;
    std::string corpus_dir, checkpoint, suite_checkpoint;
    auto* c_gen = app.add_subcommand("generate-corpus", "fly the training trajectories under every fault");
    add_common(c_gen, gen);
    auto* c_train = app.add_subcommand("meta-train", "meta-train the predictor on a corpus");
    add_common(c_train, train);
    c_train->add_option("--corpus", corpus_dir, "corpus directory (else the config's corpus_dir)");
    auto* c_eval = app.add_subcommand("evaluate", "baseline and adapted arms on one scenario");
    add_common(c_eval, eval);
    c_eval->add_option("--checkpoint", checkpoint, "checkpoint file (else the config's checkpoint)");
    auto* c_suite = app.add_subcommand("suite", "evaluate every scenario of a suite");
    add_common(c_suite, suite);
    c_suite->add_option("--checkpoint", suite_checkpoint, "checkpoint file (else the suite's checkpoint/training)");

    std::string verb = "metaquad";
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        for (auto* sub : app.get_subcommands()) {
            verb = sub->get_name();
        }
        return fail(verb, "usage_error", e.what());
    }
    verb = app.get_subcommands().front()->get_name();

    try {
        json result;
        if (*c_gen) {
            const json cfg = hs::load_config(gen.config);
            result = hs::run_generate_corpus(cfg, pick_seed(gen, cfg), gen.out);
            result = {{"manifest", (hs::fs::path(gen.out) / "manifest.json").string()},
                      {"config_hash", result["config_hash"]},
                      {"tasks", result["data"]["tasks"].size()},
                      {"skips", result["data"]["skips"].size()}};
        } else if (*c_train) {
            const json cfg = hs::load_config(train.config);
            const auto dir = pick_path(corpus_dir, cfg, "corpus_dir", train.config);
            if (!dir) {
                return fail(verb, "usage_error", "no corpus: pass --corpus or set corpus_dir in the config");
            }
            result = hs::run_meta_train(cfg, *dir, pick_seed(train, cfg), train.out);
        } else if (*c_eval) {
            const json cfg = hs::load_config(eval.config);
            const auto ckpt = pick_path(checkpoint, cfg, "checkpoint", eval.config);
            if (!ckpt) {
                return fail(verb, "usage_error", "no checkpoint: pass --checkpoint or set checkpoint in the config");
            }
            json scenario = cfg;
            scenario.erase("checkpoint");
            const json report = hs::run_evaluate(scenario, *ckpt, pick_seed(eval, cfg), eval.out);
            result = {{"report", (hs::fs::path(eval.out) / "report.json").string()},
                      {"scenario", report["scenario"]},
                      {"average_deviation_baseline", report["average_deviation_baseline"]},
                      {"average_deviation_adapted", report["average_deviation_adapted"]},
                      {"ratio", report["ratio"]},
                      {"relearn_count", report["relearn_count"]}};
        } else if (*c_suite) {
            const json cfg = hs::load_config(suite.config);
            const auto ckpt = pick_path(suite_checkpoint, cfg, "checkpoint", suite.config);
            json body = cfg;
            body.erase("checkpoint");
            const hs::SuiteResult r = hs::run_suite(body, pick_seed(suite, cfg), suite.out, ckpt);
            std::fputs(r.table.c_str(), stderr);
            result = {{"summary", (hs::fs::path(suite.out) / "summary.csv").string()},
                      {"config_hash", r.summary["config_hash"]},
                      {"scenarios", r.summary["scenarios"].size()}};
        }
        result["status"] = "ok";
        result["command"] = verb;
        std::cout << result.dump() << std::endl;
        return 0;
    } catch (const hs::PipelineError& e) {
        return fail(verb, e.kind(), e.what(), e.details());
    } catch (const metaquad::DivergenceError& e) {
        return fail(verb, "divergence", e.what(), {{"step", e.step()}});
    } catch (const std::exception& e) {
        return fail(verb, "error", e.what());
    }
}
