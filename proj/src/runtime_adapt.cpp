#include "metaquad/runtime_adapt.hpp"

#include <limits>
#include <random>

namespace metaquad {

namespace {

Eigen::VectorXd relative_input(const Vec3& ref_p, const Vec3& ref_v, const Vec3& p, const Vec3& v) {
    Eigen::VectorXd x(6);
    x << ref_p - p, ref_v - v;
    return x;
}

double prediction_miss(const nn::Predictor& model, const Vec3& p, const Vec3& v, const Vec3& r_next,
                       const Vec3& r_v_next, const Vec3& p_actual_next) {
    return (predict_next(model, p, v, r_next, r_v_next) - p_actual_next).norm();
}

Vec3 clamp_norm(const Vec3& v, double limit) {
    const double n = v.norm();
    return n > limit ? Vec3(v * (limit / n)) : v;
}

// Summed coordinate by coordinate in a fixed order, so exact ties stay exact
// and the smallest-index rule decides them (a vectorised reduction would not).
double sq_distance(const Eigen::MatrixXd& a, Eigen::Index i, const Eigen::MatrixXd& b, Eigen::Index j) {
    double s = 0.0;
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        const double d = a(r, i) - b(r, j);
        s += d * d;
    }
    return s;
}

std::vector<std::size_t> assign_points(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centroids) {
    std::vector<std::size_t> out(static_cast<std::size_t>(points.cols()));
    for (Eigen::Index i = 0; i < points.cols(); ++i) {
        Eigen::Index best = 0;
        double best_d2 = sq_distance(points, i, centroids, 0);
        for (Eigen::Index c = 1; c < centroids.cols(); ++c) {
            const double d2 = sq_distance(points, i, centroids, c);
            if (d2 < best_d2) {
                best_d2 = d2;
                best = c;
            }
        }
        out[static_cast<std::size_t>(i)] = static_cast<std::size_t>(best);
    }
    return out;
}

} // namespace

void CorrectionGains::validate() const {
    if (!(kp >= 0.0) || !(kd >= 0.0) || !(ki >= 0.0)) {
        throw Error("CorrectionGains: gains must be non-negative");
    }
}

void AdaptConfig::validate() const {
    gains.validate();
    if (K < 1) {
        throw Error("AdaptConfig: K must be at least 1");
    }
    if (!(delta > 0.0)) {
        throw Error("AdaptConfig: delta must be positive");
    }
    if (!(alpha >= 0.0) || inner_steps < 0) {
        throw Error("AdaptConfig: invalid fine-tuning settings");
    }
    if (history_cap != 0 && history_cap < K) {
        throw Error("AdaptConfig: history_cap must be at least K");
    }
    if (!(integral_limit >= 0.0)) {
        throw Error("AdaptConfig: integral_limit must be non-negative");
    }
}

void OnlineHistory::push(const OnlineSample& s) {
    samples_.push_back(s);
    while (cap_ != 0 && samples_.size() > cap_) {
        samples_.pop_front();
    }
}

nn::TaskDataset OnlineHistory::applied_reference_dataset() const {
    const auto n = static_cast<Eigen::Index>(samples_.size());
    Eigen::MatrixXd x(6, n);
    Eigen::MatrixXd y(3, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const OnlineSample& s = samples_[static_cast<std::size_t>(i)];
        x.col(i) = relative_input(s.ref_pos, s.ref_vel, s.pos, s.vel);
        y.col(i) = s.next_pos - s.pos;
    }
    return {std::move(x), std::move(y), "online"};
}

nn::TaskDataset OnlineHistory::desired_reference_dataset(std::size_t n) const {
    if (n > samples_.size()) {
        throw Error("OnlineHistory: not enough samples");
    }
    const auto m = static_cast<Eigen::Index>(n);
    Eigen::MatrixXd x(6, m);
    Eigen::MatrixXd y(3, m);
    for (Eigen::Index i = 0; i < m; ++i) {
        const OnlineSample& s = samples_[static_cast<std::size_t>(i)];
        x.col(i) = relative_input(s.desired_pos, s.desired_vel, s.pos, s.vel);
        y.col(i) = s.next_pos - s.pos;
    }
    return {std::move(x), std::move(y), "warm-up"};
}

nn::Predictor fine_tune(const nn::Predictor& start, const nn::TaskDataset& data, double alpha,
                        int inner_steps) {
    nn::Predictor out = start;
    out.params = nn::adapt(start.params, start.scaling.normalize(data), alpha, inner_steps);
    return out;
}

nn::Predictor initial_adapt(const nn::Predictor& theta_meta, const OnlineHistory& first_K,
                            std::size_t K, double alpha, int inner_steps) {
    if (K < 1 || first_K.size() < K) {
        throw Error("warm-up incomplete");
    }
    return fine_tune(theta_meta, first_K.desired_reference_dataset(K), alpha, inner_steps);
}

Vec3 predict_next(const nn::Predictor& model, const Vec3& p, const Vec3& v, const Vec3& ref_p_next,
                  const Vec3& ref_v_next) {
    const Eigen::VectorXd dp = model.evaluate(relative_input(ref_p_next, ref_v_next, p, v));
    return p + Vec3(dp.head<3>());
}

Vec3 predicted_deviation(const Trajectory& traj, const Vec3& p_pred) {
    return closest_point_on_traj(traj, p_pred).pos - p_pred;
}

Vec3 correction(const CorrectionGains& gains, const Vec3& d_pred, const std::vector<Vec3>& dev_history,
                const Vec3& integrator) {
    const Vec3 d_last = dev_history.empty() ? Vec3::Zero() : dev_history.back();
    return gains.kp * d_pred + gains.kd * (d_pred - d_last) + gains.ki * (integrator + d_pred);
}

ReferencePoint updated_reference(const Trajectory& traj, std::size_t k, const Vec3& c,
                                 const Vec3& prev_ref, double dt) {
    if (k + 1 >= traj.size()) {
        throw Error("updated_reference: step index out of range");
    }
    if (!(dt > 0.0)) {
        throw Error("updated_reference: dt must be positive");
    }
    const Vec3 r = traj[k + 1].pos + c;
    return {r, (r - prev_ref) / dt};
}

bool validate(const nn::Predictor& model, const Vec3& p, const Vec3& v, const Vec3& r_next,
              const Vec3& r_v_next, const Vec3& p_actual_next, double delta) {
    return !(prediction_miss(model, p, v, r_next, r_v_next, p_actual_next) > delta);
}

KMeansResult kmeans(const Eigen::MatrixXd& points, std::size_t K, std::uint64_t seed,
                    int max_iterations) {
    const auto n = static_cast<std::size_t>(points.cols());
    if (K < 1 || n < K) {
        throw Error("kmeans: need at least K points");
    }
    std::mt19937_64 rng(seed);
    const auto kk = static_cast<Eigen::Index>(K);

    // k-means++ seeding.
    KMeansResult res;
    res.centroids.resize(points.rows(), kk);
    std::uniform_int_distribution<std::size_t> first(0, n - 1);
    res.centroids.col(0) = points.col(static_cast<Eigen::Index>(first(rng)));
    Eigen::VectorXd d2 = (points.colwise() - res.centroids.col(0)).colwise().squaredNorm().transpose();
    for (Eigen::Index c = 1; c < kk; ++c) {
        const double total = d2.sum();
        std::size_t pick = 0;
        if (total > 0.0) {
            const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
            double acc = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += d2[static_cast<Eigen::Index>(i)];
                if (u < acc) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
        }
        res.centroids.col(c) = points.col(static_cast<Eigen::Index>(pick));
        d2 = d2.cwiseMin((points.colwise() - res.centroids.col(c)).colwise().squaredNorm().transpose());
    }

    res.assignment = assign_points(points, res.centroids);
    for (int it = 0; it < max_iterations; ++it) {
        res.iterations = it + 1;
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(points.rows(), kk);
        std::vector<std::size_t> counts(K, 0);
        for (std::size_t i = 0; i < n; ++i) {
            sums.col(static_cast<Eigen::Index>(res.assignment[i])) += points.col(static_cast<Eigen::Index>(i));
            ++counts[res.assignment[i]];
        }
        for (std::size_t c = 0; c < K; ++c) {
            const auto ci = static_cast<Eigen::Index>(c);
            if (counts[c] > 0) {
                res.centroids.col(ci) = sums.col(ci) / static_cast<double>(counts[c]);
                continue;
            }
            std::size_t far = 0;
            double far_d2 = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                const auto ii = static_cast<Eigen::Index>(i);
                const double dist =
                    (points.col(ii) - res.centroids.col(static_cast<Eigen::Index>(res.assignment[i]))).squaredNorm();
                if (dist > far_d2) {
                    far_d2 = dist;
                    far = i;
                }
            }
            res.centroids.col(ci) = points.col(static_cast<Eigen::Index>(far));
        }
        std::vector<std::size_t> next = assign_points(points, res.centroids);
        if (next == res.assignment) {
            break;
        }
        res.assignment = std::move(next);
    }
    return res;
}

std::vector<std::size_t> nearest_to_centroids(const Eigen::MatrixXd& points,
                                              const Eigen::MatrixXd& centroids) {
    const auto n = static_cast<std::size_t>(points.cols());
    const auto K = static_cast<std::size_t>(centroids.cols());
    if (n < K) {
        throw Error("nearest_to_centroids: fewer points than centroids");
    }
    std::vector<bool> taken(n, false);
    std::vector<std::size_t> out;
    out.reserve(K);
    for (std::size_t j = 0; j < K; ++j) {
        std::size_t best = n;
        double best_d2 = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
            if (taken[i]) {
                continue;
            }
            const double d2 = sq_distance(points, static_cast<Eigen::Index>(i), centroids, static_cast<Eigen::Index>(j));
            if (d2 < best_d2 || best == n) {
                best_d2 = d2;
                best = i;
            }
        }
        taken[best] = true;
        out.push_back(best);
    }
    return out;
}

PrunedData prune_history(const OnlineHistory& hist, std::size_t K, std::uint64_t seed) {
    if (K < 1 || hist.size() < K) {
        throw Error("prune_history: history shorter than K");
    }
    const nn::TaskDataset all = hist.applied_reference_dataset();
    const KMeansResult km = kmeans(all.inputs, K, seed);
    PrunedData out;
    out.indices = nearest_to_centroids(all.inputs, km.centroids);
    out.data = all.subset(out.indices);
    return out;
}

AdaptiveRun run_adaptive_tracking(const nn::Predictor& theta_meta, const Trajectory& traj,
                                  const FaultSpec& fault, const VehicleConfig& vehicle,
                                  const AdaptConfig& cfg) {
    cfg.validate();
    const std::size_t K = cfg.K;
    if (traj.size() <= K + 1) {
        throw Error("run_adaptive_tracking: trajectory must be longer than K steps");
    }
    if (std::abs(vehicle.sim.step_dt - traj.dt) > 1e-12) {
        throw Error("run_adaptive_tracking: trajectory step differs from the simulator reference step");
    }
    Simulator sim(QuadState::at_rest(traj[0].pos), vehicle.params, vehicle.gains, fault, vehicle.sim);

    AdaptiveRun run;
    run.log.samples.reserve(traj.size());
    run.log.samples.push_back(make_run_sample(traj, 0, sim.state(), {traj[0].pos, traj[0].vel}));
    run.trace.steps.push_back({});

    OnlineHistory history(cfg.history_cap);
    std::vector<Vec3> deviations;
    Vec3 integrator = Vec3::Zero();
    auto record_deviation = [&](const Vec3& p) {
        const Vec3 d = predicted_deviation(traj, p);
        deviations.push_back(d);
        integrator = clamp_norm(integrator + d, cfg.integral_limit);
    };
    record_deviation(sim.state().position);

    nn::Predictor model = theta_meta;
    Vec3 prev_ref = traj[0].pos;

    for (std::size_t k = 0; k + 1 < traj.size(); ++k) {
        const QuadState now = sim.state();
        AdaptStep step;
        step.k = k + 1;

        ReferencePoint ref;
        if (k < K) {
            ref = nominal_reference(traj, k);
        } else {
            if (k == K) {
                model = initial_adapt(theta_meta, history, K, cfg.alpha, cfg.inner_steps);
            }
            const Vec3 p_pred = predict_next(model, now.position, now.velocity, traj[k + 1].pos, traj[k + 1].vel);
            step.predicted_deviation = predicted_deviation(traj, p_pred);
            step.correction = cfg.axis_mask.cwiseProduct(
                correction(cfg.gains, step.predicted_deviation, deviations, integrator));
            ref = updated_reference(traj, k, step.correction, prev_ref, traj.dt);
        }

        try {
            sim.advance(ref);
        } catch (const DivergenceError&) {
            throw DivergenceError("adaptive run diverged", k);
        }
        const QuadState& next = sim.state();

        history.push({traj[k + 1].pos, traj[k + 1].vel, ref.pos, ref.vel, now.position, now.velocity,
                      next.position});
        record_deviation(next.position);
        prev_ref = ref.pos;

        if (k >= K) {
            step.prediction_error =
                prediction_miss(model, now.position, now.velocity, ref.pos, ref.vel, next.position);
            step.valid = !(step.prediction_error > cfg.delta);
            if (!step.valid) {
                const PrunedData pruned = prune_history(history, K, cfg.seed + k);
                const nn::Predictor& anchor = cfg.relearn_from_meta ? theta_meta : model;
                model = fine_tune(anchor, pruned.data, cfg.alpha, cfg.inner_steps);
                step.relearn = true;
                ++run.trace.relearn_count;
                run.trace.relearn_steps.push_back(k + 1);
                run.trace.last_training_indices = pruned.indices;
            }
        }
        run.log.samples.push_back(make_run_sample(traj, k + 1, next, ref));
        run.trace.steps.push_back(step);
    }
    return run;
}

} // namespace metaquad
