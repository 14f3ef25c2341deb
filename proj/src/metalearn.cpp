#include "metaquad/metalearn.hpp"

#include <cmath>
#include <numeric>
#include <random>

namespace metaquad {

void MetaConfig::validate() const {
    if (!(alpha > 0.0) || !(beta > 0.0)) {
        throw Error("MetaConfig: alpha and beta must be positive");
    }
    if (inner_steps < 1 || meta_iterations < 0 || support_size < 1 || query_size < 1 ||
        task_batch < 0) {
        throw Error("MetaConfig: counts must be at least 1");
    }
    if (topology.size() < 2) {
        throw Error("MetaConfig: invalid topology");
    }
}

void FaultTaskSet::validate() const {
    if (tasks.size() < 2) {
        throw Error("FaultTaskSet: need at least two tasks");
    }
    bool nominal = false;
    for (const auto& t : tasks) {
        if (t.data.empty()) {
            throw Error("FaultTaskSet: task '" + t.name + "' has no samples");
        }
        nominal = nominal || t.fault.is_nominal();
    }
    if (!nominal) {
        throw Error("FaultTaskSet: the fault-free task is missing");
    }
}

std::vector<nn::TaskDataset> FaultTaskSet::datasets() const {
    std::vector<nn::TaskDataset> out;
    out.reserve(tasks.size());
    for (const auto& t : tasks) {
        out.push_back(t.data);
    }
    return out;
}

nn::TaskDataset build_dataset(const RunLog& run) {
    if (run.size() < 2) {
        throw Error("build_dataset: run needs at least two samples");
    }
    const Eigen::Index m = static_cast<Eigen::Index>(run.size() - 1);
    Eigen::MatrixXd x(6, m);
    Eigen::MatrixXd y(3, m);
    for (Eigen::Index k = 0; k < m; ++k) {
        const RunSample& now = run.samples[static_cast<std::size_t>(k)];
        const RunSample& next = run.samples[static_cast<std::size_t>(k) + 1];
        x.col(k) << next.desired.pos - now.state.position, next.desired.vel - now.state.velocity;
        y.col(k) = next.state.position - now.state.position;
    }
    return {std::move(x), std::move(y)};
}

FaultTaskSet generate_training_corpus(std::span<const NamedFault> faults,
                                      std::span<const Trajectory> trajectories,
                                      const VehicleConfig& vehicle) {
    if (faults.empty()) {
        throw Error("generate_training_corpus: empty fault list");
    }
    if (trajectories.empty()) {
        throw Error("generate_training_corpus: empty trajectory list");
    }
    FaultTaskSet set;
    for (std::size_t f = 0; f < faults.size(); ++f) {
        FaultTask task{faults[f].name, faults[f].fault, {}, {}};
        task.data.label = faults[f].name;
        for (std::size_t j = 0; j < trajectories.size(); ++j) {
            try {
                const Trajectory& traj = trajectories[j];
                const RunLog log = simulate_tracking(QuadState::at_rest(traj[0].pos), traj,
                                                     faults[f].fault, vehicle);
                task.data = nn::TaskDataset::concat(task.data, build_dataset(log));
                task.data.label = faults[f].name;
                task.trajectories.push_back(j);
            } catch (const DivergenceError& e) {
                set.skips.push_back({f, j, e.what()});
            }
        }
        set.tasks.push_back(std::move(task));
    }
    return set;
}

namespace {

struct AdamState {
    nn::MlpParams<double> m;
    nn::MlpParams<double> v;
    int t = 0;
};

void adam_update(nn::MlpParams<double>& theta, const nn::MlpParams<double>& g, AdamState& st,
                 const MetaConfig& cfg) {
    ++st.t;
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, st.t);
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, st.t);
    for (std::size_t l = 0; l < theta.layers.size(); ++l) {
        auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
            m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad;
            v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * grad.cwiseAbs2();
            param.array() -= cfg.beta * (m.array() / c1) /
                             ((v.array() / c2).sqrt() + cfg.adam_epsilon);
        };
        update(theta.layers[l].weight, g.layers[l].weight, st.m.layers[l].weight, st.v.layers[l].weight);
        update(theta.layers[l].bias, g.layers[l].bias, st.m.layers[l].bias, st.v.layers[l].bias);
    }
}

} // namespace

MetaTrainResult meta_train(std::span<const nn::TaskDataset> tasks, const MetaConfig& cfg,
                           const nn::MlpParams<double>& init) {
    cfg.validate();
    if (tasks.empty()) {
        throw Error("meta_train: no tasks");
    }
    const auto needed = static_cast<Eigen::Index>(cfg.support_size + cfg.query_size);
    for (const auto& t : tasks) {
        if (t.size() < needed) {
            throw Error("meta_train: task '" + t.label + "' has fewer samples than support + query");
        }
    }

    std::mt19937_64 rng(cfg.seed);
    MetaTrainResult result{init, {}};
    result.trace.reserve(static_cast<std::size_t>(cfg.meta_iterations));
    AdamState adam{init.zeros_like(), init.zeros_like(), 0};

    std::vector<std::vector<std::size_t>> pools(tasks.size());
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        pools[i].resize(static_cast<std::size_t>(tasks[i].size()));
        std::iota(pools[i].begin(), pools[i].end(), std::size_t{0});
    }
    std::vector<std::size_t> task_order(tasks.size());
    std::iota(task_order.begin(), task_order.end(), std::size_t{0});
    const std::size_t per_iteration =
        cfg.task_batch == 0 ? tasks.size() : std::min<std::size_t>(tasks.size(), cfg.task_batch);

    for (int it = 0; it < cfg.meta_iterations; ++it) {
        if (per_iteration < tasks.size()) {
            for (std::size_t i = 0; i < per_iteration; ++i) {
                std::uniform_int_distribution<std::size_t> pick(i, tasks.size() - 1);
                std::swap(task_order[i], task_order[pick(rng)]);
            }
        }
        nn::MlpParams<double> total = result.params.zeros_like();
        double loss_sum = 0.0;
        for (std::size_t n = 0; n < per_iteration; ++n) {
            const std::size_t i = task_order[n];
            auto& pool = pools[i];
            // Partial Fisher-Yates: the first support+query entries are a
            // uniformly drawn set of distinct samples.
            for (std::size_t s = 0; s < static_cast<std::size_t>(needed); ++s) {
                std::uniform_int_distribution<std::size_t> pick(s, pool.size() - 1);
                std::swap(pool[s], pool[pick(rng)]);
            }
            const std::span<const std::size_t> sup(pool.data(), static_cast<std::size_t>(cfg.support_size));
            const std::span<const std::size_t> qry(pool.data() + cfg.support_size,
                                                   static_cast<std::size_t>(cfg.query_size));
            const auto mg = nn::meta_grad_with_loss(result.params, tasks[i].subset(sup),
                                                    tasks[i].subset(qry), cfg.alpha,
                                                    cfg.inner_steps, cfg.mode);
            total += mg.grad;
            loss_sum += mg.adapted_query_loss;
        }
        const double mean_loss = loss_sum / static_cast<double>(per_iteration);
        if (!std::isfinite(mean_loss) || !total.all_finite()) {
            throw Error("meta_train: non-finite loss at iteration " + std::to_string(it));
        }
        if (cfg.optimizer == OuterOptimizer::Adam) {
            adam_update(result.params, total, adam, cfg);
        } else {
            result.params.add_scaled(total, -cfg.beta);
        }
        result.trace.push_back(mean_loss);
    }
    return result;
}

MetaTrainResult meta_train(std::span<const nn::TaskDataset> tasks, const MetaConfig& cfg) {
    return meta_train(tasks, cfg, nn::MlpParams<double>::random(cfg.topology, cfg.seed));
}

PredictorTraining meta_train_predictor(const FaultTaskSet& corpus, const MetaConfig& cfg) {
    corpus.validate();
    nn::TaskDataset pooled;
    for (const auto& t : corpus.tasks) {
        pooled = nn::TaskDataset::concat(pooled, t.data);
    }
    PredictorTraining out;
    out.predictor.scaling = nn::FeatureScaling::from_rms(pooled);
    std::vector<nn::TaskDataset> scaled;
    for (const auto& t : corpus.tasks) {
        scaled.push_back(out.predictor.scaling.normalize(t.data));
    }
    MetaTrainResult r = meta_train(scaled, cfg);
    out.predictor.params = std::move(r.params);
    out.trace = std::move(r.trace);
    return out;
}

} // namespace metaquad
