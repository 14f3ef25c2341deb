// One PASS/FAIL line per acceptance criterion. Criteria 7, 8 and 10 drive the
// metaquad CLI twice over the shipped configs; everything else runs in-process.
// Usage: acceptance [work_dir]   (default: a temporary directory, removed afterwards)
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include <unistd.h>

#include "metaquad/harness.hpp"
#include "support/oracles.hpp"
#include "support/sinusoid.hpp"

#ifndef METAQUAD_CLI
#error "METAQUAD_CLI must name the CLI executable"
#endif

using namespace metaquad;
namespace hs = metaquad::harness;
namespace fs = std::filesystem;
using hs::json;
namespace ts = testsupport;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
    bool pass = true;
    std::string detail;
};

int failures = 0;

void report(int n, const std::string& what, double budget_s, const std::function<Outcome()>& body) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    const bool in_time = secs < budget_s;
    const bool ok = o.pass && in_time;
    failures += ok ? 0 : 1;
    char t[64];
    std::snprintf(t, sizeof t, "%.1f s of %.0f s", secs, budget_s);
    std::cout << (ok ? "PASS" : "FAIL") << " criterion " << n << ": " << what << " [" << o.detail << "; " << t
              << (in_time ? "" : ", over budget") << "]" << std::endl;
}

std::string fmt(const char* f, double v) {
    char b[64];
    std::snprintf(b, sizeof b, f, v);
    return b;
}

json config(const std::string& rel) { return hs::load_config(ts::source_path("config/" + rel)); }

// worst per-coordinate relative error, with an absolute floor for near-zero coordinates
double worst_rel(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double floor) {
    double w = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) w = std::max(w, ts::rel_err(a[i], b[i], floor));
    return w;
}

// ---------------------------------------------------------------- CLI runs ---

struct CliRun {
    fs::path root;
    double seconds = 0.0;
    std::string error;
};

bool cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string("\"") + METAQUAD_CLI + "\" " + args + " >\"" + log.string() + ".out\" 2>\"" +
                            log.string() + ".err\"";
    return std::system(cmd.c_str()) == 0;
}

const std::vector<std::string> kScenarios{"nominal", "f1_star", "f2_star", "zero_gain"};

CliRun run_pipelines(const fs::path& root) {
    CliRun r{root, 0.0, {}};
    fs::remove_all(root);
    fs::create_directories(root / "logs");
    const auto t0 = Clock::now();
    const std::string cfg = ts::source_path("config/");
    const std::string ck = (root / "model" / "checkpoint.json").string();
    std::vector<std::pair<std::string, std::string>> steps{
        {"generate-corpus", "generate-corpus --config " + cfg + "corpus.json --seed 0 --out " + (root / "corpus").string()},
        {"meta-train", "meta-train --config " + cfg + "meta.json --corpus " + (root / "corpus").string() +
                           " --seed 0 --out " + (root / "model").string()}};
    for (const auto& s : kScenarios) {
        steps.push_back({"evaluate-" + s, "evaluate --config " + cfg + "scenarios/" + s + ".json --checkpoint " + ck +
                                              " --seed 0 --out " + (root / "eval" / s).string()});
    }
    steps.push_back({"suite", "suite --config " + cfg + "suite.json --checkpoint " + ck + " --seed 0 --out " +
                                  (root / "suite").string()});
    for (const auto& [name, args] : steps) {
        if (!cli(args, root / "logs" / name)) {
            r.error = name + " failed: " + hs::read_text(root / "logs" / (name + ".err"));
            break;
        }
    }
    r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    return r;
}

json eval_report(const CliRun& r, const std::string& scenario) {
    return json::parse(hs::read_text(r.root / "eval" / scenario / "report.json"));
}

std::map<std::string, std::string> csv_files(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file() && e.path().extension() == ".csv") {
            out[fs::relative(e.path(), root).string()] = hs::read_text(e.path());
        }
    }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    const bool keep = argc > 1;
    const fs::path work = keep ? fs::path(argv[1]) : fs::temp_directory_path() / ("metaquad_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(work);

    // -------------------------------------------------------------------- 1
    report(1, "loss gradient matches central finite differences (h=1e-5) within 1e-5 relative", 10.0, [] {
        double worst = 0.0;
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            for (const std::vector<int>& topo : {std::vector<int>{2, 5, 3}, nn::kPredictorTopology}) {
                const auto p = nn::MlpParams<double>::random(topo, seed);
                const auto d = ts::random_dataset(topo.front(), topo.back(), 10, 1000 + seed, 0.5);
                const auto dx = ts::extend(d);
                const auto fd = ts::fd_gradient_ext(p, [&](const nn::MlpParams<long double>& q) { return nn::loss(q, dx); });
                worst = std::max(worst, worst_rel(nn::grad(p, d).flat(), fd, 1e-6));
            }
        }
        return Outcome{worst <= 1e-5, "10 seeds x {2-5-3, 6-40-40-3}, long-double FD oracle, worst rel err " + fmt("%.2e", worst)};
    });

    // -------------------------------------------------------------------- 2
    report(2, "second-order meta-gradient matches finite differences within 1e-4; alpha=0 gives the plain gradient",
           30.0, [] {
               double worst = 0.0;
               bool exact = true;
               const double alpha = 0.01;
               for (std::uint64_t seed = 0; seed < 10; ++seed) {
                   const auto p = nn::MlpParams<double>::random(nn::kPredictorTopology, 50 + seed);
                   const auto s = ts::random_dataset(6, 3, 20, 2000 + seed, 0.5);
                   const auto q = ts::random_dataset(6, 3, 20, 3000 + seed, 0.5);
                   const auto fd = ts::fd_gradient(p, [&](const nn::MlpParams<double>& th) {
                       return nn::loss(nn::adapt(th, s, alpha, 1), q);
                   });
                   worst = std::max(worst, worst_rel(nn::meta_grad(p, s, q, alpha, 1).flat(), fd, 1e-6));
                   exact = exact && nn::meta_grad(p, s, q, 0.0, 1).flat() == nn::grad(p, q).flat();
               }
               return Outcome{worst <= 1e-4 && exact, "10 instances, worst rel err " + fmt("%.2e", worst) +
                                                          (exact ? ", alpha=0 exact" : ", alpha=0 NOT exact")};
           });

    // -------------------------------------------------------------------- 3
    report(3, "sinusoid family: 5-step adapted query loss <= 0.2 x unadapted over 20 held-out tasks", 300.0, [] {
        const auto fam = ts::make_sine_family(200, 100, 20, 1);
        const auto cfg = ts::sine_meta_config();
        const auto r = meta_train(fam.train, cfg);
        const auto e = ts::evaluate_sine(r.params, fam.held_out, 10, 100, cfg.alpha, 5, 7);
        const double ratio = e.adapted / e.unadapted;
        return Outcome{ratio <= 0.2, "unadapted " + fmt("%.3f", e.unadapted) + ", adapted " + fmt("%.3f", e.adapted) +
                                         ", ratio " + fmt("%.3f", ratio)};
    });

    // -------------------------------------------------------------------- 4
    report(4, "hover drift < 1e-9 m per RK4 step, free fall = -g dt, nominal slalom <= 2 cm average deviation", 60.0,
           [] {
               const VehicleConfig v = hs::vehicle_from_json(config("vehicle.json"));
               const double dt = v.sim.control_dt;
               const QuadState rest = QuadState::at_rest(Vec3(0, 0, 1));
               const QuadState h = plant_step(rest, Vec4::Constant(v.params.hover_thrust_per_rotor()), v.params, dt);
               const double drift = (h.position - rest.position).norm();
               const QuadState f = plant_step(rest, Vec4::Zero(), v.params, dt);
               const double ff_err = std::abs(f.velocity.z() + v.params.gravity * dt);
               const auto spec = hs::trajectory_from_json(config("scenarios/slalom.json"));
               const auto tr = hs::build_trajectory(spec, v.sim.step_dt);
               const auto log = simulate_tracking(QuadState::at_rest(tr[0].pos), tr, FaultSpec{}, v);
               const double avg = log.average_deviation(), avg_post = log.average_deviation(20);
               return Outcome{drift < 1e-9 && ff_err < 1e-12 && avg <= 0.02 && avg_post <= 0.02,
                              "drift " + fmt("%.1e", drift) + " m, free-fall err " + fmt("%.1e", ff_err) +
                                  " m/s, nominal avg " + fmt("%.2f", 100 * avg) + " cm (post-warm-up " +
                                  fmt("%.2f", 100 * avg_post) + " cm)"};
           });

    // -------------------------------------------------------------------- 5
    report(5, "min-jerk boundary conditions to 1e-9, (10,-15,6) from the linear-system oracle, perturbations never lower the jerk cost",
           10.0, [] {
               std::mt19937_64 rng(55);
               std::uniform_real_distribution<double> u(-2, 2);
               std::uniform_int_distribution<int> steps(10, 200);
               double bc = 0.0;
               for (int trial = 0; trial < 200; ++trial) {
                   const double dt = 0.02, T = steps(rng) * dt;
                   const Vec3 p0(u(rng), u(rng), u(rng)), v0(u(rng), u(rng), u(rng)), a0(u(rng), u(rng), u(rng));
                   const Vec3 p1(u(rng), u(rng), u(rng)), v1(u(rng), u(rng), u(rng)), a1(u(rng), u(rng), u(rng));
                   const auto tr = min_jerk_segment(p0, v0, a0, p1, v1, a1, T, dt);
                   const auto& a = tr.samples.front();
                   const auto& b = tr.samples.back();
                   bc = std::max({bc, (a.pos - p0).norm(), (a.vel - v0).norm(), (a.acc - a0).norm(),
                                  (b.pos - p1).norm(), (b.vel - v1).norm(), (b.acc - a1).norm()});
               }
               const auto c = min_jerk_coefficients(0, 0, 0, 1, 0, 0, 1.0);
               const auto o = ts::quintic_by_linear_system(0, 0, 0, 1, 0, 0, 1.0);
               const bool coeffs = (c - o).cwiseAbs().maxCoeff() < 1e-9 && std::abs(o[3] - 10) < 1e-9 &&
                                   std::abs(o[4] + 15) < 1e-9 && std::abs(o[5] - 6) < 1e-9;
               int lowered = 0;
               for (int trial = 0; trial < 1000; ++trial) {
                   const double T = 0.5 + (u(rng) + 2.0);
                   const auto q5 = min_jerk_coefficients(u(rng), u(rng), u(rng), u(rng), u(rng), u(rng), T);
                   const ts::Poly base(q5.data(), q5.data() + 6);
                   const ts::Poly tmt{T, -1.0};
                   const ts::Poly bump = ts::mul(ts::mul(ts::Poly{0, 0, 0, 1}, ts::mul(tmt, ts::mul(tmt, tmt))),
                                                 ts::Poly{u(rng), u(rng), u(rng)});
                   const ts::Poly pert = ts::add(base, bump, std::pow(10.0, -1.0 - 2.0 * (trial % 4)));
                   const ts::Poly j0 = ts::deriv(ts::deriv(ts::deriv(base)));
                   const ts::Poly j1 = ts::deriv(ts::deriv(ts::deriv(pert)));
                   const double J0 = ts::integral(ts::mul(j0, j0), T), J1 = ts::integral(ts::mul(j1, j1), T);
                   lowered += J1 < J0 - 1e-9 * std::max(1.0, J0) ? 1 : 0;
               }
               return Outcome{bc <= 1e-9 && coeffs && lowered == 0,
                              "worst boundary err " + fmt("%.1e", bc) + ", coefficients " + (coeffs ? "ok" : "WRONG") +
                                  ", " + std::to_string(lowered) + "/1000 perturbations lowered the cost"};
           });

    // -------------------------------------------------------------------- 6
    report(6, "closest point and k-means match brute force exactly over 1000 randomized trials each", 30.0, [] {
        std::mt19937_64 rng(66);
        std::normal_distribution<double> g(0.0, 1.0);
        std::uniform_int_distribution<int> grid(-2, 2);
        int cp_bad = 0;
        for (int trial = 0; trial < 1000; ++trial) {
            const auto tr = ts::slalom(0.2 + 0.6 * std::abs(g(rng)) / 3.0, 0.3 + 0.1 * (trial % 5), 0.02);
            Vec3 p;
            switch (trial % 3) {
            case 0: p = Vec3(4 + 3 * g(rng), g(rng), 1 + 0.3 * g(rng)); break;
            case 1: p = tr[static_cast<std::size_t>(trial) % tr.size()].pos; break;  // member point
            default: {
                const std::size_t k = static_cast<std::size_t>(trial) % (tr.size() - 1);
                p = 0.5 * (tr[k].pos + tr[k + 1].pos);  // near-equidistant neighbours
            }
            }
            cp_bad += closest_point_on_traj(tr, p).index == ts::brute_closest(tr, p) ? 0 : 1;
        }
        int km_bad = 0;
        for (int trial = 0; trial < 1000; ++trial) {
            const int dim = 1 + trial % 6, n = 5 + trial % 60;
            const std::size_t K = 1 + static_cast<std::size_t>(trial) % std::min(n, 20);
            Eigen::MatrixXd pts(dim, n);
            for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = trial % 3 == 0 ? grid(rng) : g(rng);
            const auto km = kmeans(pts, K, static_cast<std::uint64_t>(trial));
            bool ok = km.iterations < 100 && km.assignment == ts::brute_assign(pts, km.centroids);
            std::vector<std::size_t> counts(K, 0);
            for (auto a : km.assignment) ++counts[a];
            if (std::find(counts.begin(), counts.end(), 0u) == counts.end()) {
                ok = ok && km.centroids == ts::brute_means(pts, km.assignment, K);
            }
            ok = ok && nearest_to_centroids(pts, km.centroids) == ts::brute_nearest_unique(pts, km.centroids);
            km_bad += ok ? 0 : 1;
        }
        return Outcome{cp_bad == 0 && km_bad == 0, "closest-point mismatches " + std::to_string(cp_bad) +
                                                       "/1000, k-means mismatches " + std::to_string(km_bad) + "/1000"};
    });

    // --------------------------------------------------------------- 7, 8, 10
    const CliRun run_a = run_pipelines(work / "run_a");

    report(7, "test fault F1* (eta2=0.7): adapted <= 0.4 x baseline, baseline >= 3 x nominal", 600.0, [&] {
        if (!run_a.error.empty()) return Outcome{false, run_a.error};
        const json f1 = eval_report(run_a, "f1_star"), nom = eval_report(run_a, "nominal");
        const double base = f1["average_deviation_baseline"], adapted = f1["average_deviation_adapted"];
        const double nominal = nom["average_deviation_baseline"];
        const double ratio = adapted / base;
        return Outcome{ratio <= 0.4 && base >= 3.0 * nominal,
                       "baseline " + fmt("%.2f", 100 * base) + " cm, adapted " + fmt("%.2f", 100 * adapted) +
                           " cm, ratio " + fmt("%.3f", ratio) + ", nominal " + fmt("%.2f", 100 * nominal) +
                           " cm (x" + fmt("%.1f", base / nominal) + "); full CLI pipeline " +
                           fmt("%.1f", run_a.seconds) + " s"};
    });

    report(8, "test fault F2* (eta4=0.6): adapted <= 0.4 x baseline, relearn count >= 1, final-quartile mean <= first-quartile mean",
           600.0, [&] {
               if (!run_a.error.empty()) return Outcome{false, run_a.error};
               const json f2 = eval_report(run_a, "f2_star");
               const double base = f2["average_deviation_baseline"], adapted = f2["average_deviation_adapted"];
               const double q1 = f2["convergence"]["first_quartile_mean"], q4 = f2["convergence"]["final_quartile_mean"];
               const int relearns = f2["relearn_count"];
               const double ratio = adapted / base;
               return Outcome{ratio <= 0.4 && relearns >= 1 && q4 <= q1,
                              "baseline " + fmt("%.2f", 100 * base) + " cm, adapted " + fmt("%.2f", 100 * adapted) +
                                  " cm, ratio " + fmt("%.3f", ratio) + ", relearns " + std::to_string(relearns) +
                                  ", quartiles " + fmt("%.2f", 100 * q1) + " -> " + fmt("%.2f", 100 * q4) + " cm"};
           });

    // -------------------------------------------------------------------- 9
    report(9, "zero correction gains reproduce the baseline RunLog bit-identically", 60.0, [&] {
        if (!run_a.error.empty()) return Outcome{false, run_a.error};
        const auto ckpt = nn::load_checkpoint((run_a.root / "model" / "checkpoint.json").string());
        const hs::Scenario s = hs::scenario_from_json(config("scenarios/zero_gain.json"));
        const auto tr = hs::build_trajectory(s.trajectory, s.vehicle.sim.step_dt);
        const auto base = simulate_tracking(QuadState::at_rest(tr[0].pos), tr, s.fault, s.vehicle);
        const auto run = run_adaptive_tracking(ckpt.predictor, tr, s.fault, s.vehicle, s.adapt);
        bool same = base.size() == run.log.size();
        for (std::size_t k = 0; same && k < base.size(); ++k) {
            const auto &a = base.samples[k], &b = run.log.samples[k];
            same = a.state.to_vector() == b.state.to_vector() && a.reference.pos == b.reference.pos &&
                   a.reference.vel == b.reference.vel && a.deviation == b.deviation;
        }
        const fs::path dir = run_a.root / "eval" / "zero_gain";
        const bool files = hs::read_text(dir / "baseline_run.csv") == hs::read_text(dir / "adapted_run.csv");
        return Outcome{same && files, std::to_string(base.size()) + " samples" +
                                          (same ? " identical in-process" : " DIFFER in-process") +
                                          (files ? ", CLI run CSVs byte-identical" : ", CLI run CSVs differ") +
                                          ", relearns during the run " + std::to_string(run.trace.relearn_count)};
    });

    // ------------------------------------------------------------------- 10
    report(10, "every CLI pipeline rerun with identical config and seed yields byte-identical CSV outputs", 600.0, [&] {
        if (!run_a.error.empty()) return Outcome{false, run_a.error};
        const CliRun run_b = run_pipelines(work / "run_b");
        if (!run_b.error.empty()) return Outcome{false, run_b.error};
        const auto a = csv_files(run_a.root), b = csv_files(run_b.root);
        int differ = 0;
        for (const auto& [name, text] : a) {
            const auto it = b.find(name);
            differ += it == b.end() || it->second != text ? 1 : 0;
        }
        const bool ckpt_same = hs::read_text(run_a.root / "model" / "checkpoint.json") ==
                               hs::read_text(run_b.root / "model" / "checkpoint.json");
        return Outcome{differ == 0 && a.size() == b.size() && ckpt_same,
                       std::to_string(a.size()) + " CSV files compared, " + std::to_string(differ) + " differ; checkpoint " +
                           (ckpt_same ? "identical" : "differs") + "; rerun " + fmt("%.1f", run_b.seconds) + " s"};
    });

    if (!keep) {
        std::error_code ec;
        fs::remove_all(work, ec);
    }
    std::cout << (failures == 0 ? "all acceptance criteria passed" : std::to_string(failures) + " criteria failed")
              << std::endl;
    return failures == 0 ? 0 : 1;
}
