#pragma once
// Sinusoid regression task family: y = A sin(x - phase), A in [0.1, 5],
// phase in [0, pi], x uniform in [-5, 5].
#include <cmath>
#include <random>
#include <vector>

#include "metaquad/metalearn.hpp"

namespace testsupport {

struct SineTask {
    double amplitude = 1.0;
    double phase = 0.0;
};

inline SineTask draw_sine_task(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> amp(0.1, 5.0), ph(0.0, M_PI);
    return {amp(rng), ph(rng)};
}

inline metaquad::nn::TaskDataset sine_samples(const SineTask& t, int n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> xs(-5.0, 5.0);
    Eigen::MatrixXd x(1, n), y(1, n);
    for (int i = 0; i < n; ++i) {
        x(0, i) = xs(rng);
        y(0, i) = t.amplitude * std::sin(x(0, i) - t.phase);
    }
    return {std::move(x), std::move(y), "sine"};
}

struct SineFamily {
    std::vector<metaquad::nn::TaskDataset> train;
    std::vector<SineTask> held_out;
};

inline SineFamily make_sine_family(int n_train, int points, int n_held_out, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    SineFamily f;
    for (int i = 0; i < n_train; ++i) {
        f.train.push_back(sine_samples(draw_sine_task(rng), points, rng));
    }
    for (int i = 0; i < n_held_out; ++i) {
        f.held_out.push_back(draw_sine_task(rng));
    }
    return f;
}

inline metaquad::MetaConfig sine_meta_config() {
    metaquad::MetaConfig cfg;
    cfg.topology = {1, 40, 40, 1};
    cfg.support_size = 10;
    cfg.query_size = 10;
    cfg.inner_steps = 1;
    cfg.task_batch = 10;
    cfg.meta_iterations = 10000;
    return cfg;
}

struct SineEvaluation {
    double unadapted = 0.0; ///< mean query loss at theta_meta
    double adapted = 0.0;   ///< mean query loss after the fine-tune
};

/// K-shot fine-tune on each held-out task, scored on a fresh query set.
inline SineEvaluation evaluate_sine(const metaquad::nn::MlpParams<double>& theta,
                                    const std::vector<SineTask>& tasks, int shots, int query,
                                    double alpha, int steps, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    SineEvaluation e;
    for (const auto& t : tasks) {
        const auto support = sine_samples(t, shots, rng);
        const auto q = sine_samples(t, query, rng);
        e.unadapted += metaquad::nn::loss(theta, q);
        e.adapted += metaquad::nn::loss(metaquad::nn::adapt(theta, support, alpha, steps), q);
    }
    e.unadapted /= static_cast<double>(tasks.size());
    e.adapted /= static_cast<double>(tasks.size());
    return e;
}

} // namespace testsupport
