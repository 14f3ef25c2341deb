#include "metaquad/harness.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace metaquad::harness {

namespace {

[[noreturn]] void config_error(const std::string& what) { throw PipelineError("config_error", what); }

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) {
        config_error(where + ": expected an object");
    }
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [key, _] : j.items()) {
        if (!ok.count(key)) {
            config_error(where + ": unknown key '" + key + "'");
        }
    }
}

double get_number(const json& j, const char* key, double fallback, const std::string& where) {
    if (!j.contains(key)) {
        return fallback;
    }
    const json& v = j.at(key);
    if (!v.is_number()) {
        config_error(where + "." + key + ": expected a number");
    }
    const double x = v.get<double>();
    if (!std::isfinite(x)) {
        config_error(where + "." + key + ": not finite");
    }
    return x;
}

template <class Int>
Int get_count(const json& j, const char* key, Int fallback, const std::string& where) {
    if (!j.contains(key)) {
        return fallback;
    }
    const json& v = j.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
        config_error(where + "." + key + ": expected a non-negative integer");
    }
    return static_cast<Int>(v.get<long long>());
}

template <int N>
Eigen::Matrix<double, N, 1> get_vec(const json& j, const char* key, const Eigen::Matrix<double, N, 1>& fallback,
                                    const std::string& where) {
    if (!j.contains(key)) {
        return fallback;
    }
    const json& v = j.at(key);
    if (!v.is_array() || v.size() != N) {
        config_error(where + "." + key + ": expected an array of " + std::to_string(N) + " numbers");
    }
    Eigen::Matrix<double, N, 1> out;
    for (int i = 0; i < N; ++i) {
        if (!v[i].is_number()) {
            config_error(where + "." + key + ": expected numbers");
        }
        out[i] = v[i].get<double>();
    }
    return out;
}

Vec3 vec3_of(const json& v, const std::string& where) {
    if (!v.is_array() || v.size() != 3) {
        config_error(where + ": expected [x, y, z]");
    }
    Vec3 out;
    for (int i = 0; i < 3; ++i) {
        if (!v[i].is_number()) {
            config_error(where + ": expected numbers");
        }
        out[i] = v[i].get<double>();
    }
    return out;
}

template <class V>
json arr(const V& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        a.push_back(v[i]);
    }
    return a;
}

// Wraps library-level validation errors so the CLI reports them as config errors.
template <class F>
void validated(const std::string& where, F&& f) {
    try {
        f();
    } catch (const PipelineError&) {
        throw;
    } catch (const Error& e) {
        config_error(where + ": " + e.what());
    }
}

} // namespace

json resolve_config(const json& cfg, const fs::path& base_dir) {
    if (!cfg.is_object()) {
        return cfg;
    }
    json out = cfg;
    for (const char* key : {"vehicle", "meta", "corpus", "training", "adapt", "trajectory"}) {
        if (out.contains(key) && out[key].is_string()) {
            out[key] = load_config(base_dir / out[key].get<std::string>());
        } else if (out.contains(key) && out[key].is_object()) {
            out[key] = resolve_config(out[key], base_dir);
        }
    }
    if (out.contains("scenarios") && out["scenarios"].is_array()) {
        for (auto& s : out["scenarios"]) {
            s = s.is_string() ? load_config(base_dir / s.get<std::string>()) : resolve_config(s, base_dir);
        }
    }
    return out;
}

json load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw PipelineError("io_error", "cannot open config: " + path.string(), {{"path", path.string()}});
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw PipelineError("config_error", "invalid JSON in " + path.string() + ": " + e.what(),
                            {{"path", path.string()}});
    }
    return resolve_config(j, path.parent_path());
}

std::string config_hash(const json& cfg) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : cfg.dump()) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
    return buf;
}

Trajectory build_trajectory(const TrajectorySpec& spec, double dt) {
    if (spec.waypoints.size() < 2) {
        config_error("trajectory: need at least two waypoints");
    }
    if (!(spec.average_speed > 0.0)) {
        config_error("trajectory: average_speed must be positive");
    }
    const auto T = segment_durations(spec.waypoints, spec.average_speed, dt);
    return multi_waypoint(spec.waypoints, T, dt);
}

VehicleConfig vehicle_from_json(const json& j) {
    check_keys(j, "vehicle", {"params", "gains", "sim"});
    VehicleConfig v;
    if (j.contains("params")) {
        const json& p = j["params"];
        const std::string w = "vehicle.params";
        check_keys(p, w, {"mass", "arm_length", "inertia_diag", "thrust_coeff", "drag_torque_coeff", "gravity",
                          "max_rotor_thrust"});
        v.params.mass = get_number(p, "mass", v.params.mass, w);
        v.params.arm_length = get_number(p, "arm_length", v.params.arm_length, w);
        v.params.inertia_diag = get_vec<3>(p, "inertia_diag", v.params.inertia_diag, w);
        v.params.thrust_coeff = get_number(p, "thrust_coeff", v.params.thrust_coeff, w);
        v.params.drag_torque_coeff = get_number(p, "drag_torque_coeff", v.params.drag_torque_coeff, w);
        v.params.gravity = get_number(p, "gravity", v.params.gravity, w);
        v.params.max_rotor_thrust = get_number(p, "max_rotor_thrust", v.params.max_rotor_thrust, w);
    }
    if (j.contains("gains")) {
        const json& g = j["gains"];
        const std::string w = "vehicle.gains";
        check_keys(g, w, {"pos_kp", "pos_kd", "pos_ki", "att_kp", "att_kd", "att_ki", "max_tilt",
                          "pos_integral_limit", "att_integral_limit"});
        auto& G = v.gains;
        G.pos_kp = get_vec<3>(g, "pos_kp", G.pos_kp, w);
        G.pos_kd = get_vec<3>(g, "pos_kd", G.pos_kd, w);
        G.pos_ki = get_vec<3>(g, "pos_ki", G.pos_ki, w);
        G.att_kp = get_vec<3>(g, "att_kp", G.att_kp, w);
        G.att_kd = get_vec<3>(g, "att_kd", G.att_kd, w);
        G.att_ki = get_vec<3>(g, "att_ki", G.att_ki, w);
        G.max_tilt = get_number(g, "max_tilt", G.max_tilt, w);
        G.pos_integral_limit = get_number(g, "pos_integral_limit", G.pos_integral_limit, w);
        G.att_integral_limit = get_number(g, "att_integral_limit", G.att_integral_limit, w);
    }
    if (j.contains("sim")) {
        const json& s = j["sim"];
        check_keys(s, "vehicle.sim", {"control_dt", "step_dt"});
        v.sim.control_dt = get_number(s, "control_dt", v.sim.control_dt, "vehicle.sim");
        v.sim.step_dt = get_number(s, "step_dt", v.sim.step_dt, "vehicle.sim");
    }
    validated("vehicle", [&] {
        v.params.validate();
        (void)v.sim.substeps();
    });
    return v;
}

json to_json(const VehicleConfig& v) {
    const auto& p = v.params;
    const auto& g = v.gains;
    return {{"params",
             {{"mass", p.mass},
              {"arm_length", p.arm_length},
              {"inertia_diag", arr(p.inertia_diag)},
              {"thrust_coeff", p.thrust_coeff},
              {"drag_torque_coeff", p.drag_torque_coeff},
              {"gravity", p.gravity},
              {"max_rotor_thrust", p.max_rotor_thrust}}},
            {"gains",
             {{"pos_kp", arr(g.pos_kp)},
              {"pos_kd", arr(g.pos_kd)},
              {"pos_ki", arr(g.pos_ki)},
              {"att_kp", arr(g.att_kp)},
              {"att_kd", arr(g.att_kd)},
              {"att_ki", arr(g.att_ki)},
              {"max_tilt", g.max_tilt},
              {"pos_integral_limit", g.pos_integral_limit},
              {"att_integral_limit", g.att_integral_limit}}},
            {"sim", {{"control_dt", v.sim.control_dt}, {"step_dt", v.sim.step_dt}}}};
}

FaultSpec fault_from_json(const json& j) {
    check_keys(j, "fault", {"name", "rotor_effectiveness", "roll_bias"});
    FaultSpec f;
    f.rotor_effectiveness = get_vec<4>(j, "rotor_effectiveness", f.rotor_effectiveness, "fault");
    f.roll_bias = get_number(j, "roll_bias", 0.0, "fault");
    validated("fault", [&] { f.validate(); });
    return f;
}

json to_json(const FaultSpec& f) {
    return {{"rotor_effectiveness", arr(f.rotor_effectiveness)}, {"roll_bias", f.roll_bias}};
}

TrajectorySpec trajectory_from_json(const json& j) {
    check_keys(j, "trajectory", {"waypoints", "average_speed"});
    TrajectorySpec t;
    if (!j.contains("waypoints") || !j["waypoints"].is_array()) {
        config_error("trajectory: missing waypoints");
    }
    for (const auto& w : j["waypoints"]) {
        check_keys(w, "trajectory.waypoint", {"pos", "speed"});
        if (!w.contains("pos")) {
            config_error("trajectory.waypoint: missing pos");
        }
        t.waypoints.push_back({vec3_of(w["pos"], "trajectory.waypoint.pos"),
                               get_number(w, "speed", 0.0, "trajectory.waypoint")});
    }
    t.average_speed = get_number(j, "average_speed", t.average_speed, "trajectory");
    if (t.waypoints.size() < 2) {
        config_error("trajectory: need at least two waypoints");
    }
    if (!(t.average_speed > 0.0)) {
        config_error("trajectory: average_speed must be positive");
    }
    return t;
}

json to_json(const TrajectorySpec& t) {
    json w = json::array();
    for (const auto& p : t.waypoints) {
        w.push_back({{"pos", arr(p.pos)}, {"speed", p.speed}});
    }
    return {{"waypoints", w}, {"average_speed", t.average_speed}};
}

std::vector<TrajectorySpec> trajectories_from_json(const json& j) {
    if (!j.is_array()) {
        config_error("trajectories: expected an array");
    }
    std::vector<TrajectorySpec> out;
    for (const auto& e : j) {
        if (!e.contains("positions")) {
            out.push_back(trajectory_from_json(e));
            continue;
        }
        check_keys(e, "trajectory sweep", {"positions", "endpoint_speeds", "average_speeds"});
        const json& pos = e["positions"];
        if (!pos.is_array() || pos.size() < 2) {
            config_error("trajectory sweep: need at least two positions");
        }
        Eigen::Vector2d ends = Eigen::Vector2d::Zero();
        if (e.contains("endpoint_speeds")) {
            ends = get_vec<2>(e, "endpoint_speeds", ends, "trajectory sweep");
        }
        if (!e.contains("average_speeds") || !e["average_speeds"].is_array() || e["average_speeds"].empty()) {
            config_error("trajectory sweep: average_speeds must be a non-empty array");
        }
        for (const auto& v : e["average_speeds"]) {
            if (!v.is_number() || !(v.get<double>() > 0.0)) {
                config_error("trajectory sweep: average speeds must be positive numbers");
            }
            TrajectorySpec t;
            t.average_speed = v.get<double>();
            for (std::size_t i = 0; i < pos.size(); ++i) {
                const double hint = i == 0 ? ends[0] : (i + 1 == pos.size() ? ends[1] : t.average_speed);
                t.waypoints.push_back({vec3_of(pos[i], "trajectory sweep.positions"), hint});
            }
            out.push_back(std::move(t));
        }
    }
    return out;
}

MetaConfig meta_config_from_json(const json& j) {
    check_keys(j, "meta", {"alpha", "beta", "inner_steps", "meta_iterations", "support_size", "query_size",
                           "task_batch", "seed", "optimizer", "mode", "topology", "adam_beta1", "adam_beta2",
                           "adam_epsilon"});
    MetaConfig m;
    const std::string w = "meta";
    m.alpha = get_number(j, "alpha", m.alpha, w);
    m.beta = get_number(j, "beta", m.beta, w);
    m.inner_steps = get_count(j, "inner_steps", m.inner_steps, w);
    m.meta_iterations = get_count(j, "meta_iterations", m.meta_iterations, w);
    m.support_size = get_count(j, "support_size", m.support_size, w);
    m.query_size = get_count(j, "query_size", m.query_size, w);
    m.task_batch = get_count(j, "task_batch", m.task_batch, w);
    m.seed = get_count<std::uint64_t>(j, "seed", m.seed, w);
    m.adam_beta1 = get_number(j, "adam_beta1", m.adam_beta1, w);
    m.adam_beta2 = get_number(j, "adam_beta2", m.adam_beta2, w);
    m.adam_epsilon = get_number(j, "adam_epsilon", m.adam_epsilon, w);
    if (j.contains("optimizer")) {
        const std::string o = j["optimizer"].is_string() ? j["optimizer"].get<std::string>() : "";
        if (o == "sgd") {
            m.optimizer = OuterOptimizer::GradientDescent;
        } else if (o == "adam") {
            m.optimizer = OuterOptimizer::Adam;
        } else {
            config_error("meta.optimizer: expected \"sgd\" or \"adam\"");
        }
    }
    if (j.contains("mode")) {
        const std::string o = j["mode"].is_string() ? j["mode"].get<std::string>() : "";
        if (o == "second_order") {
            m.mode = nn::MetaGradMode::SecondOrder;
        } else if (o == "first_order") {
            m.mode = nn::MetaGradMode::FirstOrder;
        } else {
            config_error("meta.mode: expected \"second_order\" or \"first_order\"");
        }
    }
    if (j.contains("topology")) {
        const json& t = j["topology"];
        if (!t.is_array()) {
            config_error("meta.topology: expected an array");
        }
        m.topology.clear();
        for (const auto& n : t) {
            if (!n.is_number_integer() || n.get<int>() < 1) {
                config_error("meta.topology: layer sizes must be positive integers");
            }
            m.topology.push_back(n.get<int>());
        }
        if (m.topology.front() != 6 || m.topology.back() != 3) {
            config_error("meta.topology: predictor maps 6 inputs to 3 outputs");
        }
    }
    validated(w, [&] { m.validate(); });
    return m;
}

json to_json(const MetaConfig& m) {
    return {{"alpha", m.alpha},
            {"beta", m.beta},
            {"inner_steps", m.inner_steps},
            {"meta_iterations", m.meta_iterations},
            {"support_size", m.support_size},
            {"query_size", m.query_size},
            {"task_batch", m.task_batch},
            {"seed", m.seed},
            {"optimizer", m.optimizer == OuterOptimizer::Adam ? "adam" : "sgd"},
            {"mode", m.mode == nn::MetaGradMode::SecondOrder ? "second_order" : "first_order"},
            {"topology", m.topology},
            {"adam_beta1", m.adam_beta1},
            {"adam_beta2", m.adam_beta2},
            {"adam_epsilon", m.adam_epsilon}};
}

AdaptConfig adapt_config_from_json(const json& j) {
    check_keys(j, "adapt", {"K", "delta", "gains", "alpha", "inner_steps", "history_cap", "seed",
                            "integral_limit", "axis_mask", "relearn_from_meta"});
    AdaptConfig a;
    const std::string w = "adapt";
    a.K = get_count(j, "K", a.K, w);
    a.delta = get_number(j, "delta", a.delta, w);
    if (j.contains("gains")) {
        const json& g = j["gains"];
        check_keys(g, "adapt.gains", {"kp", "kd", "ki"});
        a.gains.kp = get_number(g, "kp", a.gains.kp, "adapt.gains");
        a.gains.kd = get_number(g, "kd", a.gains.kd, "adapt.gains");
        a.gains.ki = get_number(g, "ki", a.gains.ki, "adapt.gains");
    }
    a.alpha = get_number(j, "alpha", a.alpha, w);
    a.inner_steps = get_count(j, "inner_steps", a.inner_steps, w);
    a.history_cap = get_count(j, "history_cap", a.history_cap, w);
    a.seed = get_count<std::uint64_t>(j, "seed", a.seed, w);
    a.integral_limit = get_number(j, "integral_limit", a.integral_limit, w);
    a.axis_mask = get_vec<3>(j, "axis_mask", a.axis_mask, w);
    if (j.contains("relearn_from_meta")) {
        if (!j["relearn_from_meta"].is_boolean()) {
            config_error("adapt.relearn_from_meta: expected a boolean");
        }
        a.relearn_from_meta = j["relearn_from_meta"].get<bool>();
    }
    validated(w, [&] { a.validate(); });
    return a;
}

json to_json(const AdaptConfig& a) {
    return {{"K", a.K},
            {"delta", a.delta},
            {"gains", {{"kp", a.gains.kp}, {"kd", a.gains.kd}, {"ki", a.gains.ki}}},
            {"alpha", a.alpha},
            {"inner_steps", a.inner_steps},
            {"history_cap", a.history_cap},
            {"seed", a.seed},
            {"integral_limit", a.integral_limit},
            {"axis_mask", arr(a.axis_mask)},
            {"relearn_from_meta", a.relearn_from_meta}};
}

CorpusConfig corpus_config_from_json(const json& j) {
    check_keys(j, "corpus", {"vehicle", "faults", "trajectories", "seed"});
    CorpusConfig c;
    if (j.contains("vehicle")) {
        c.vehicle = vehicle_from_json(j["vehicle"]);
    }
    if (!j.contains("faults") || !j["faults"].is_array() || j["faults"].empty()) {
        config_error("corpus: faults must be a non-empty array");
    }
    std::set<std::string> names;
    for (const auto& f : j["faults"]) {
        const std::string name = f.contains("name") && f["name"].is_string() ? f["name"].get<std::string>() : "";
        if (name.empty() || name.find_first_of("/\\. ") != std::string::npos) {
            config_error("corpus: every fault needs a plain name");
        }
        if (!names.insert(name).second) {
            config_error("corpus: duplicate fault name '" + name + "'");
        }
        c.faults.push_back({name, fault_from_json(f)});
    }
    if (!j.contains("trajectories")) {
        config_error("corpus: missing trajectories");
    }
    c.trajectories = trajectories_from_json(j["trajectories"]);
    if (c.trajectories.empty()) {
        config_error("corpus: no trajectories");
    }
    return c;
}

Scenario scenario_from_json(const json& j) {
    check_keys(j, "scenario", {"name", "fault", "trajectory", "vehicle", "adapt", "seed", "checkpoint"});
    Scenario s;
    if (!j.contains("name") || !j["name"].is_string() || j["name"].get<std::string>().empty()) {
        config_error("scenario: missing name");
    }
    s.name = j["name"].get<std::string>();
    if (s.name.find_first_of("/\\ ") != std::string::npos || s.name == "." || s.name == "..") {
        config_error("scenario: name must be usable as a directory name");
    }
    s.fault = j.contains("fault") ? fault_from_json(j["fault"]) : FaultSpec{};
    if (!j.contains("trajectory")) {
        config_error("scenario '" + s.name + "': missing trajectory");
    }
    s.trajectory = trajectory_from_json(j["trajectory"]);
    if (j.contains("vehicle")) {
        s.vehicle = vehicle_from_json(j["vehicle"]);
    }
    if (j.contains("adapt")) {
        s.adapt = adapt_config_from_json(j["adapt"]);
    }
    return s;
}

} // namespace metaquad::harness
