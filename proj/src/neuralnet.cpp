#include "metaquad/neuralnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace metaquad::nn {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "metaquad-mlp";

std::vector<double> to_std(const Eigen::VectorXd& v) {
    return {v.data(), v.data() + v.size()};
}

Eigen::VectorXd to_eigen(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

} // namespace

FeatureScaling FeatureScaling::from_rms(const TaskDataset& data, int group) {
    if (data.empty()) {
        throw Error("FeatureScaling: empty dataset");
    }
    if (group < 1) {
        throw Error("FeatureScaling: group size must be positive");
    }
    const double n = static_cast<double>(data.size());
    auto grouped_rms = [&](const Eigen::MatrixXd& m) {
        Eigen::VectorXd scale(m.rows());
        for (Eigen::Index r = 0; r < m.rows(); r += group) {
            const Eigen::Index len = std::min<Eigen::Index>(group, m.rows() - r);
            double rms = std::sqrt(m.middleRows(r, len).squaredNorm() / (n * static_cast<double>(len)));
            if (!(rms > 0.0)) rms = 1.0;
            scale.segment(r, len).setConstant(rms);
        }
        return scale;
    };
    FeatureScaling s;
    s.input_scale = grouped_rms(data.inputs);
    s.output_scale = grouped_rms(data.targets);
    return s;
}

TaskDataset FeatureScaling::normalize(const TaskDataset& data) const {
    TaskDataset out = data;
    out.inputs = input_scale.asDiagonal().inverse() * data.inputs;
    out.targets = output_scale.asDiagonal().inverse() * data.targets;
    return out;
}

void FeatureScaling::validate(int inputs, int outputs) const {
    if (input_scale.size() != inputs || output_scale.size() != outputs) {
        throw Error("FeatureScaling: size does not match network topology");
    }
    if (!(input_scale.array() > 0.0).all() || !(output_scale.array() > 0.0).all() ||
        !input_scale.allFinite() || !output_scale.allFinite()) {
        throw Error("FeatureScaling: scales must be positive and finite");
    }
}

Eigen::VectorXd Predictor::evaluate(const Eigen::VectorXd& input) const {
    const Eigen::VectorXd x = input.cwiseQuotient(scaling.input_scale);
    return forward(params, x).cwiseProduct(scaling.output_scale);
}

std::string checkpoint_to_json(const Checkpoint& ckpt) {
    const auto& p = ckpt.predictor;
    json j;
    j["format"] = kFormat;
    j["version"] = Checkpoint::kVersion;
    j["topology"] = p.params.topology();
    j["activation"] = "tanh";
    j["seed"] = ckpt.seed;
    j["config_hash"] = ckpt.config_hash;
    j["input_scale"] = to_std(p.scaling.input_scale);
    j["output_scale"] = to_std(p.scaling.output_scale);
    j["params"] = to_std(p.params.flat());
    return j.dump(1);
}

Checkpoint checkpoint_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw Error(std::string("checkpoint: invalid JSON: ") + e.what());
    }
    try {
        if (j.at("format").get<std::string>() != kFormat) {
            throw Error("checkpoint: unknown format tag");
        }
        if (j.at("version").get<int>() != Checkpoint::kVersion) {
            throw Error("checkpoint: unsupported version");
        }
        if (j.at("activation").get<std::string>() != "tanh") {
            throw Error("checkpoint: unsupported activation");
        }
        Checkpoint ckpt;
        const auto topology = j.at("topology").get<std::vector<int>>();
        const auto flat = j.at("params").get<std::vector<double>>();
        ckpt.predictor.params = MlpParams<double>::from_flat(topology, to_eigen(flat));
        ckpt.predictor.scaling.input_scale = to_eigen(j.at("input_scale").get<std::vector<double>>());
        ckpt.predictor.scaling.output_scale = to_eigen(j.at("output_scale").get<std::vector<double>>());
        ckpt.predictor.scaling.validate(topology.front(), topology.back());
        if (!ckpt.predictor.params.all_finite()) {
            throw Error("checkpoint: non-finite parameters");
        }
        ckpt.seed = j.at("seed").get<std::uint64_t>();
        ckpt.config_hash = j.value("config_hash", std::string{});
        return ckpt;
    } catch (const json::exception& e) {
        throw Error(std::string("checkpoint: malformed field: ") + e.what());
    }
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot write checkpoint: " + path);
    }
    out << checkpoint_to_json(ckpt) << '\n';
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot read checkpoint: " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return checkpoint_from_json(ss.str());
}

} // namespace metaquad::nn
