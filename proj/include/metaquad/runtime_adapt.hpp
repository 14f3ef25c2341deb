#pragma once

#include <cstdint>
#include <deque>
#include <vector>

#include "metaquad/neuralnet.hpp"
#include "metaquad/quadrotor_sim.hpp"
#include "metaquad/trajgen.hpp"

namespace metaquad {

struct CorrectionGains {
    double kp = 0.8;
    double kd = 0.3;
    double ki = 0.05;

    void validate() const;
    bool all_zero() const { return kp == 0.0 && kd == 0.0 && ki == 0.0; }
};

struct AdaptConfig {
    std::size_t K = 20;              ///< samples for (re)adaptation
    double delta = 0.02;             ///< validation threshold, m
    CorrectionGains gains;
    double alpha = 0.001;            ///< fine-tuning step size (smaller than the meta inner step)
    int inner_steps = 5;             ///< fine-tuning gradient steps
    std::size_t history_cap = 500;   ///< online history length bound
    std::uint64_t seed = 0;          ///< k-means++ seeding
    double integral_limit = 2.0;     ///< bound on the norm of the deviation sum, m
    Vec3 axis_mask = Vec3::Ones();   ///< per-axis switch for the correction
    bool relearn_from_meta = true;   ///< re-adapt from theta_meta (else from current theta*)

    void validate() const;
};

/// One online transition k -> k+1. Desired values feed the initial
/// adaptation set; applied reference values feed the pruning history.
struct OnlineSample {
    Vec3 desired_pos;  ///< p_des(k+1)
    Vec3 desired_vel;  ///< v_des(k+1)
    Vec3 ref_pos;      ///< r(k+1)
    Vec3 ref_vel;      ///< r_v(k+1)
    Vec3 pos;          ///< p(k)
    Vec3 vel;          ///< v(k)
    Vec3 next_pos;     ///< p(k+1)
};

/// Aligned online history, oldest first, bounded by a cap.
class OnlineHistory {
public:
    explicit OnlineHistory(std::size_t cap = 0) : cap_(cap) {}

    /// Appends a sample and drops the oldest entries beyond the cap (0 = unbounded).
    void push(const OnlineSample& s);

    std::size_t size() const noexcept { return samples_.size(); }
    std::size_t cap() const noexcept { return cap_; }
    const OnlineSample& operator[](std::size_t i) const { return samples_[i]; }
    const std::deque<OnlineSample>& samples() const noexcept { return samples_; }

    /// Inputs  [r(k+1); r_v(k+1)] - [p(k); v(k)] and outputs p(k+1) - p(k), one column per entry.
    nn::TaskDataset applied_reference_dataset() const;
    /// Same with the desired trajectory in place of the applied reference, first n entries.
    nn::TaskDataset desired_reference_dataset(std::size_t n) const;

private:
    std::size_t cap_;
    std::deque<OnlineSample> samples_;
};

/// Fine-tunes theta_meta with `inner_steps` gradient steps on the first K
/// warm-up samples. Throws "warm-up incomplete" when fewer than K exist.
nn::Predictor initial_adapt(const nn::Predictor& theta_meta, const OnlineHistory& first_K,
                            std::size_t K, double alpha, int inner_steps);

/// Gradient-descent fine-tuning on a physical-unit dataset.
nn::Predictor fine_tune(const nn::Predictor& start, const nn::TaskDataset& data, double alpha,
                        int inner_steps);

/// p(k+1) = f([ref_p_next; ref_v_next] - [p; v]) + p
Vec3 predict_next(const nn::Predictor& model, const Vec3& p, const Vec3& v,
                  const Vec3& ref_p_next, const Vec3& ref_v_next);

/// Vector from the predicted position to its closest trajectory sample.
Vec3 predicted_deviation(const Trajectory& traj, const Vec3& p_pred);

/// c = kp*d_pred + kd*(d_pred - d(k)) + ki*(sum_{t<=k} d(t) + d_pred), where
/// d(k) is the newest history entry (zero when empty) and `integrator` holds
/// the running deviation sum.
Vec3 correction(const CorrectionGains& gains, const Vec3& d_pred, const std::vector<Vec3>& dev_history,
                const Vec3& integrator);

/// r(k+1) = p_des(k+1) + c,  r_v(k+1) = (r(k+1) - r(k)) / dt.
ReferencePoint updated_reference(const Trajectory& traj, std::size_t k, const Vec3& c,
                                 const Vec3& prev_ref, double dt);

/// Validity flag: false iff the prediction under the applied reference misses
/// the realised position by strictly more than delta.
bool validate(const nn::Predictor& model, const Vec3& p, const Vec3& v, const Vec3& r_next,
              const Vec3& r_v_next, const Vec3& p_actual_next, double delta);

struct KMeansResult {
    Eigen::MatrixXd centroids;          ///< d x K
    std::vector<std::size_t> assignment;
    int iterations = 0;
};

/// Lloyd iterations from k-means++ seeding. Stops at an assignment fixpoint or
/// after max_iterations; an empty cluster is reseeded at the point farthest
/// from its current centroid.
KMeansResult kmeans(const Eigen::MatrixXd& points, std::size_t K, std::uint64_t seed,
                    int max_iterations = 100);

/// For each centroid in order, the nearest point column not yet chosen
/// (ties resolve to the smallest index).
std::vector<std::size_t> nearest_to_centroids(const Eigen::MatrixXd& points,
                                              const Eigen::MatrixXd& centroids);

struct PrunedData {
    nn::TaskDataset data;
    std::vector<std::size_t> indices; ///< selected history positions
};

/// K representative history samples: k-means over the applied-reference inputs,
/// then the sample nearest each centroid.
PrunedData prune_history(const OnlineHistory& hist, std::size_t K, std::uint64_t seed);

struct AdaptStep {
    std::size_t k = 0;
    bool valid = true;
    bool relearn = false;
    double prediction_error = 0.0;
    Vec3 predicted_deviation = Vec3::Zero();
    Vec3 correction = Vec3::Zero();
};

struct AdaptTrace {
    std::vector<AdaptStep> steps;
    std::size_t relearn_count = 0;
    std::vector<std::size_t> relearn_steps;
    std::vector<std::size_t> last_training_indices; ///< history positions of the latest pruned set
};

struct AdaptiveRun {
    RunLog log;
    AdaptTrace trace;
};

/// Full online loop: K warm-up steps on the desired reference, initial
/// adaptation, then predict / correct / fly / validate each step, pruning and
/// re-adapting whenever validation fails.
AdaptiveRun run_adaptive_tracking(const nn::Predictor& theta_meta, const Trajectory& traj,
                                  const FaultSpec& fault, const VehicleConfig& vehicle,
                                  const AdaptConfig& cfg);

} // namespace metaquad
