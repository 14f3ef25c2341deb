#include "metaquad/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>

#ifndef METAQUAD_SCHEMA_DIR
#define METAQUAD_SCHEMA_DIR "schemas"
#endif

namespace metaquad::harness {

namespace {

// Shortest text that parses back to the same double.
void put(std::string& out, double x) {
    char buf[32];
    for (int prec = 15; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, x);
        if (std::strtod(buf, nullptr) == x) {
            break;
        }
    }
    out += buf;
}

void put(std::string& out, std::size_t n) { out += std::to_string(n); }

template <class... T>
void row(std::string& out, const T&... v) {
    bool first = true;
    ((out += first ? "" : ",", first = false, put(out, v)), ...);
    out += '\n';
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream ss(line);
    while (std::getline(ss, cur, sep)) {
        out.push_back(cur);
    }
    if (!line.empty() && line.back() == sep) {
        out.emplace_back();
    }
    return out;
}

} // namespace

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) {
            throw PipelineError("io_error", "cannot create directory " + path.parent_path().string() + ": " +
                                                ec.message(),
                                {{"path", path.parent_path().string()}});
        }
    }
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) {
        throw PipelineError("io_error", "cannot write " + path.string(), {{"path", path.string()}});
    }
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw PipelineError("io_error", "cannot read " + path.string(), {{"path", path.string()}});
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string run_log_csv(const RunLog& log) {
    std::string out = "k,t,px,py,pz,vx,vy,vz,ref_x,ref_y,ref_z,des_x,des_y,des_z,deviation\n";
    for (const auto& s : log.samples) {
        const auto& p = s.state.position;
        const auto& v = s.state.velocity;
        const auto& r = s.reference.pos;
        const auto& d = s.desired.pos;
        row(out, s.k, s.t, p.x(), p.y(), p.z(), v.x(), v.y(), v.z(), r.x(), r.y(), r.z(), d.x(), d.y(), d.z(),
            s.deviation);
    }
    return out;
}

std::string adapt_trace_csv(const AdaptTrace& trace) {
    std::string out = "k,s,relearn,pred_err,dev_x,dev_y,dev_z,corr_x,corr_y,corr_z\n";
    for (const auto& s : trace.steps) {
        const auto& d = s.predicted_deviation;
        const auto& c = s.correction;
        row(out, s.k, std::size_t{s.valid}, std::size_t{s.relearn}, s.prediction_error, d.x(), d.y(), d.z(), c.x(),
            c.y(), c.z());
    }
    return out;
}

std::string trajectory_csv(const Trajectory& traj) {
    std::string out = "k,t,des_x,des_y,des_z,des_vx,des_vy,des_vz,des_ax,des_ay,des_az\n";
    for (std::size_t k = 0; k < traj.size(); ++k) {
        const auto& s = traj[k];
        row(out, k, static_cast<double>(k) * traj.dt, s.pos.x(), s.pos.y(), s.pos.z(), s.vel.x(), s.vel.y(),
            s.vel.z(), s.acc.x(), s.acc.y(), s.acc.z());
    }
    return out;
}

std::string dataset_csv(const nn::TaskDataset& data) {
    std::string out = "in_px,in_py,in_pz,in_vx,in_vy,in_vz,out_px,out_py,out_pz\n";
    for (Eigen::Index i = 0; i < data.size(); ++i) {
        const auto x = data.inputs.col(i);
        const auto y = data.targets.col(i);
        row(out, x[0], x[1], x[2], x[3], x[4], x[5], y[0], y[1], y[2]);
    }
    return out;
}

std::string trace_csv(const std::vector<double>& trace) {
    std::string out = "iteration,adapted_query_loss\n";
    for (std::size_t i = 0; i < trace.size(); ++i) {
        row(out, i, trace[i]);
    }
    return out;
}

CsvTable parse_csv(const std::string& text) {
    CsvTable t;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) {
        throw PipelineError("format_error", "empty CSV");
    }
    t.header = split(line, ',');
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        const auto cells = split(line, ',');
        if (cells.size() != t.header.size()) {
            throw PipelineError("format_error", "CSV line " + std::to_string(lineno) + ": expected " +
                                                    std::to_string(t.header.size()) + " fields");
        }
        std::vector<double> r;
        r.reserve(cells.size());
        for (const auto& c : cells) {
            char* end = nullptr;
            const double x = std::strtod(c.c_str(), &end);
            if (c.empty() || end != c.c_str() + c.size()) {
                throw PipelineError("format_error", "CSV line " + std::to_string(lineno) + ": bad number '" + c + "'");
            }
            r.push_back(x);
        }
        t.rows.push_back(std::move(r));
    }
    return t;
}

std::vector<double> CsvTable::column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
        throw PipelineError("format_error", "CSV has no column '" + name + "'");
    }
    const auto c = static_cast<std::size_t>(it - header.begin());
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) {
        out.push_back(r[c]);
    }
    return out;
}

nn::TaskDataset parse_dataset_csv(const std::string& text, const std::string& label) {
    const CsvTable t = parse_csv(text);
    if (t.header.size() != 9) {
        throw PipelineError("format_error", "dataset CSV must have 9 columns");
    }
    const auto n = static_cast<Eigen::Index>(t.rows.size());
    Eigen::MatrixXd x(6, n), y(3, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = t.rows[static_cast<std::size_t>(i)];
        for (int a = 0; a < 6; ++a) {
            x(a, i) = r[static_cast<std::size_t>(a)];
        }
        for (int a = 0; a < 3; ++a) {
            y(a, i) = r[static_cast<std::size_t>(6 + a)];
        }
    }
    return nn::TaskDataset(std::move(x), std::move(y), label);
}

FaultTaskSet load_corpus(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path)) {
        throw PipelineError("io_error", "corpus not found: " + dir.string(), {{"path", dir.string()}});
    }
    json m;
    try {
        m = json::parse(read_text(manifest_path));
    } catch (const json::exception& e) {
        throw PipelineError("format_error", "invalid corpus manifest " + manifest_path.string() + ": " + e.what(),
                            {{"path", manifest_path.string()}});
    }
    if (m.value("format", "") != "metaquad-corpus") {
        throw PipelineError("format_error", "not a corpus manifest: " + manifest_path.string(),
                            {{"path", manifest_path.string()}});
    }
    FaultTaskSet set;
    try {
        for (const auto& t : m.at("data").at("tasks")) {
            FaultTask task;
            task.name = t.at("name").get<std::string>();
            task.fault = fault_from_json(t.at("fault"));
            task.data = parse_dataset_csv(read_text(dir / t.at("file").get<std::string>()), task.name);
            if (task.data.size() != t.at("samples").get<Eigen::Index>()) {
                throw PipelineError("format_error", "corpus task '" + task.name + "' sample count mismatch");
            }
            task.trajectories = t.at("trajectories").get<std::vector<std::size_t>>();
            set.tasks.push_back(std::move(task));
        }
        for (const auto& s : m.at("data").at("skips")) {
            set.skips.push_back({s.at("fault_index").get<std::size_t>(), s.at("trajectory_index").get<std::size_t>(),
                                 s.at("reason").get<std::string>()});
        }
    } catch (const json::exception& e) {
        throw PipelineError("format_error", "invalid corpus manifest " + manifest_path.string() + ": " + e.what(),
                            {{"path", manifest_path.string()}});
    }
    return set;
}

// ---------------------------------------------------------------- plots ---

namespace {

std::string fmt(double x, const char* spec = "%.3g") {
    char buf[32];
    std::snprintf(buf, sizeof buf, spec, x);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        default: out += c;
        }
    }
    return out;
}

} // namespace

std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<PlotSeries>& series, bool equal_aspect) {
    const double W = 720, H = 480, L = 70, R = 170, T = 40, B = 55;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series) {
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) {
                x0 = std::min(x0, s.x[i]);
                x1 = std::max(x1, s.x[i]);
                y0 = std::min(y0, s.y[i]);
                y1 = std::max(y1, s.y[i]);
            }
        }
    }
    if (!(x0 <= x1)) {
        x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    }
    if (x1 - x0 < 1e-12) {
        x0 -= 0.5, x1 += 0.5;
    }
    if (y1 - y0 < 1e-12) {
        y0 -= 0.5, y1 += 0.5;
    }
    const double pad_y = 0.05 * (y1 - y0);
    y0 -= pad_y, y1 += pad_y;
    const double pw = W - L - R, ph = H - T - B;
    double sx = pw / (x1 - x0), sy = ph / (y1 - y0);
    if (equal_aspect) {
        const double s = std::min(sx, sy);
        // widen the tighter axis so one metre looks the same both ways
        const double cx = 0.5 * (x0 + x1), cy = 0.5 * (y0 + y1);
        x0 = cx - 0.5 * pw / s, x1 = cx + 0.5 * pw / s;
        y0 = cy - 0.5 * ph / s, y1 = cy + 0.5 * ph / s;
        sx = sy = s;
    }
    auto X = [&](double x) { return L + (x - x0) * sx; };
    auto Y = [&](double y) { return T + ph - (y - y0) * sy; };

    std::string o;
    o += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(W, "%.0f") + "\" height=\"" + fmt(H, "%.0f") +
         "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o += "<text x=\"" + fmt(L + pw / 2, "%.1f") + "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" +
         escape(title) + "</text>\n";
    o += "<rect x=\"" + fmt(L, "%.1f") + "\" y=\"" + fmt(T, "%.1f") + "\" width=\"" + fmt(pw, "%.1f") +
         "\" height=\"" + fmt(ph, "%.1f") + "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double fx = x0 + (x1 - x0) * i / 4.0, fy = y0 + (y1 - y0) * i / 4.0;
        o += "<line x1=\"" + fmt(X(fx), "%.1f") + "\" y1=\"" + fmt(T, "%.1f") + "\" x2=\"" + fmt(X(fx), "%.1f") +
             "\" y2=\"" + fmt(T + ph, "%.1f") + "\" stroke=\"#ddd\"/>\n";
        o += "<line x1=\"" + fmt(L, "%.1f") + "\" y1=\"" + fmt(Y(fy), "%.1f") + "\" x2=\"" + fmt(L + pw, "%.1f") +
             "\" y2=\"" + fmt(Y(fy), "%.1f") + "\" stroke=\"#ddd\"/>\n";
        o += "<text x=\"" + fmt(X(fx), "%.1f") + "\" y=\"" + fmt(T + ph + 16, "%.1f") +
             "\" text-anchor=\"middle\">" + fmt(fx) + "</text>\n";
        o += "<text x=\"" + fmt(L - 6, "%.1f") + "\" y=\"" + fmt(Y(fy) + 4, "%.1f") + "\" text-anchor=\"end\">" +
             fmt(fy) + "</text>\n";
    }
    o += "<text x=\"" + fmt(L + pw / 2, "%.1f") + "\" y=\"" + fmt(H - 14, "%.1f") + "\" text-anchor=\"middle\">" +
         escape(x_label) + "</text>\n";
    o += "<text transform=\"translate(18," + fmt(T + ph / 2, "%.1f") +
         ") rotate(-90)\" text-anchor=\"middle\">" + escape(y_label) + "</text>\n";
    o += "<clipPath id=\"plot\"><rect x=\"" + fmt(L, "%.1f") + "\" y=\"" + fmt(T, "%.1f") + "\" width=\"" +
         fmt(pw, "%.1f") + "\" height=\"" + fmt(ph, "%.1f") + "\"/></clipPath>\n";
    for (std::size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        o += "<polyline clip-path=\"url(#plot)\" fill=\"none\" stroke=\"" + s.color + "\" stroke-width=\"1.6\"";
        if (s.dashed) {
            o += " stroke-dasharray=\"6,4\"";
        }
        o += " points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) {
                o += fmt(X(s.x[i]), "%.2f") + "," + fmt(Y(s.y[i]), "%.2f") + " ";
            }
        }
        o += "\"/>\n";
        const double ly = T + 14 + 20.0 * static_cast<double>(si);
        o += "<line x1=\"" + fmt(L + pw + 12, "%.1f") + "\" y1=\"" + fmt(ly, "%.1f") + "\" x2=\"" +
             fmt(L + pw + 36, "%.1f") + "\" y2=\"" + fmt(ly, "%.1f") + "\" stroke=\"" + s.color +
             "\" stroke-width=\"2\"" + (s.dashed ? " stroke-dasharray=\"6,4\"" : "") + "/>\n";
        o += "<text x=\"" + fmt(L + pw + 42, "%.1f") + "\" y=\"" + fmt(ly + 4, "%.1f") + "\">" + escape(s.label) +
             "</text>\n";
    }
    o += "</svg>\n";
    return o;
}

void render_evaluation_plots(const fs::path& dir) {
    const CsvTable base = parse_csv(read_text(dir / "baseline_run.csv"));
    const CsvTable adapted = parse_csv(read_text(dir / "adapted_run.csv"));
    const CsvTable desired = parse_csv(read_text(dir / "desired.csv"));

    const std::vector<PlotSeries> path{
        {"desired", "#000000", desired.column("des_x"), desired.column("des_y"), false},
        {"baseline", "#d62728", base.column("px"), base.column("py"), false},
        {"adapted", "#2ca02c", adapted.column("px"), adapted.column("py"), false},
        {"updated reference", "#c000c0", adapted.column("ref_x"), adapted.column("ref_y"), true},
    };
    write_text(dir / "path.svg", svg_line_plot("Path (top view)", "x [m]", "y [m]", path, true));

    auto cm = [](std::vector<double> v) {
        for (auto& x : v) {
            x *= 100.0;
        }
        return v;
    };
    const std::vector<PlotSeries> dev{
        {"baseline", "#d62728", base.column("t"), cm(base.column("deviation")), false},
        {"adapted", "#2ca02c", adapted.column("t"), cm(adapted.column("deviation")), false},
    };
    write_text(dir / "deviation.svg", svg_line_plot("Deviation over time", "t [s]", "deviation [cm]", dev));
}

// -------------------------------------------------------------- metrics ---

std::pair<double, double> quartile_means(const RunLog& log, std::size_t first) {
    const std::size_t n = log.size();
    if (first >= n) {
        return {0.0, 0.0};
    }
    const std::size_t len = std::max<std::size_t>(1, (n - first) / 4);
    double a = 0.0, b = 0.0;
    for (std::size_t i = first; i < first + len; ++i) {
        a += log.samples[i].deviation;
    }
    for (std::size_t i = n - len; i < n; ++i) {
        b += log.samples[i].deviation;
    }
    return {a / static_cast<double>(len), b / static_cast<double>(len)};
}

json to_json(const MetricsReport& r) {
    return {{"format", "metaquad-metrics"},
            {"version", 1},
            {"scenario", r.scenario},
            {"config_hash", r.config_hash},
            {"seed", r.seed},
            {"steps", r.steps},
            {"window",
             {{"first_step", r.window_first},
              {"last_step", r.steps == 0 ? 0 : r.steps - 1},
              {"description", "post-warm-up samples k >= K; *_all columns average every sample"}}},
            {"average_deviation_baseline", r.average_deviation_baseline},
            {"average_deviation_adapted", r.average_deviation_adapted},
            {"average_deviation_baseline_all", r.average_deviation_baseline_all},
            {"average_deviation_adapted_all", r.average_deviation_adapted_all},
            {"max_deviation", r.max_deviation_adapted},
            {"max_deviation_baseline", r.max_deviation_baseline},
            {"max_deviation_adapted", r.max_deviation_adapted},
            {"ratio", r.ratio()},
            {"relearn_count", r.relearn_count},
            {"relearn_steps", r.relearn_steps},
            {"convergence",
             {{"first_quartile_mean", r.first_quartile_mean},
              {"final_quartile_mean", r.final_quartile_mean},
              {"holds", r.converges()}}},
            {"deviation_series_identical", r.deviation_series_identical},
            {"series",
             {{"baseline", "baseline_run.csv"},
              {"adapted", "adapted_run.csv"},
              {"trace", "adapt_trace.csv"},
              {"desired", "desired.csv"}}}};
}

namespace {

bool type_matches(const json& v, const std::string& t) {
    if (t == "object") return v.is_object();
    if (t == "array") return v.is_array();
    if (t == "string") return v.is_string();
    if (t == "boolean") return v.is_boolean();
    if (t == "integer") return v.is_number_integer();
    if (t == "number") return v.is_number();
    if (t == "null") return v.is_null();
    return false;
}

void check(const json& v, const json& schema, const std::string& at, std::vector<std::string>& errs) {
    if (schema.contains("type")) {
        const json& t = schema["type"];
        bool ok = false;
        if (t.is_array()) {
            for (const auto& e : t) {
                ok = ok || type_matches(v, e.get<std::string>());
            }
        } else {
            ok = type_matches(v, t.get<std::string>());
        }
        if (!ok) {
            errs.push_back(at + ": expected type " + t.dump());
            return;
        }
    }
    if (schema.contains("enum")) {
        const json& e = schema["enum"];
        if (std::find(e.begin(), e.end(), v) == e.end()) {
            errs.push_back(at + ": value not in enum");
        }
    }
    if (schema.contains("const") && v != schema["const"]) {
        errs.push_back(at + ": expected " + schema["const"].dump());
    }
    if (v.is_number() && schema.contains("minimum") && v.get<double>() < schema["minimum"].get<double>()) {
        errs.push_back(at + ": below minimum");
    }
    if (v.is_object()) {
        if (schema.contains("required")) {
            for (const auto& k : schema["required"]) {
                if (!v.contains(k.get<std::string>())) {
                    errs.push_back(at + ": missing '" + k.get<std::string>() + "'");
                }
            }
        }
        const json props = schema.value("properties", json::object());
        for (const auto& [k, sub] : v.items()) {
            if (props.contains(k)) {
                check(sub, props[k], at + "." + k, errs);
            } else if (schema.contains("additionalProperties") && schema["additionalProperties"] == false) {
                errs.push_back(at + ": unexpected '" + k + "'");
            }
        }
    }
    if (v.is_array() && schema.contains("items")) {
        for (std::size_t i = 0; i < v.size(); ++i) {
            check(v[i], schema["items"], at + "[" + std::to_string(i) + "]", errs);
        }
    }
}

} // namespace

std::vector<std::string> validate_schema(const json& instance, const json& schema) {
    std::vector<std::string> errs;
    check(instance, schema, "$", errs);
    return errs;
}

fs::path schema_dir() {
    if (const char* env = std::getenv("METAQUAD_SCHEMA_DIR")) {
        return env;
    }
    return METAQUAD_SCHEMA_DIR;
}

} // namespace metaquad::harness
