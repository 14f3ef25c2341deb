#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "metaquad/neuralnet.hpp"
#include "metaquad/quadrotor_sim.hpp"

namespace metaquad {

enum class OuterOptimizer { GradientDescent, Adam };

struct MetaConfig {
    double alpha = 0.01;   ///< inner step size
    double beta = 0.001;   ///< outer step size
    int inner_steps = 1;
    int meta_iterations = 10000;
    int support_size = 20;
    int query_size = 20;
    int task_batch = 0;    ///< tasks per outer step; 0 uses every task
    std::uint64_t seed = 0;
    OuterOptimizer optimizer = OuterOptimizer::GradientDescent;
    nn::MetaGradMode mode = nn::MetaGradMode::SecondOrder;
    std::vector<int> topology = nn::kPredictorTopology;

    // Adam moments, used only with OuterOptimizer::Adam.
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;

    void validate() const;
};

struct NamedFault {
    std::string name;
    FaultSpec fault;
};

struct FaultTask {
    std::string name;
    FaultSpec fault;
    nn::TaskDataset data;
    std::vector<std::size_t> trajectories; ///< indices of trajectories that contributed
};

struct CorpusSkip {
    std::size_t fault_index = 0;
    std::size_t trajectory_index = 0;
    std::string reason;
};

struct FaultTaskSet {
    std::vector<FaultTask> tasks;
    std::vector<CorpusSkip> skips;

    /// At least two non-empty tasks, one of which is fault-free.
    void validate() const;
    std::vector<nn::TaskDataset> datasets() const;
};

/// Training pairs from a logged run:
///   x = [p_des(k+1); v_des(k+1)] - [p(k); v(k)],  y = p(k+1) - p(k)
/// for k = 0 .. T-2.
nn::TaskDataset build_dataset(const RunLog& run);

/// Flies every trajectory under every fault without reference override and
/// pools the resulting pairs per fault. Diverged runs are recorded and skipped.
FaultTaskSet generate_training_corpus(std::span<const NamedFault> faults,
                                      std::span<const Trajectory> trajectories,
                                      const VehicleConfig& vehicle);

struct MetaTrainResult {
    nn::MlpParams<double> params;
    std::vector<double> trace; ///< mean adapted query loss per outer iteration
};

/// MAML outer loop: theta <- theta - beta * sum_i meta_grad_i(theta). Each
/// iteration draws disjoint support and query sets from every task.
MetaTrainResult meta_train(std::span<const nn::TaskDataset> tasks, const MetaConfig& cfg,
                           const nn::MlpParams<double>& init);

/// Same, starting from MlpParams::random(cfg.topology, cfg.seed).
MetaTrainResult meta_train(std::span<const nn::TaskDataset> tasks, const MetaConfig& cfg);

/// Fits RMS feature scaling on the pooled corpus, meta-trains on the scaled
/// tasks and returns the resulting predictor together with the loss trace.
struct PredictorTraining {
    nn::Predictor predictor;
    std::vector<double> trace;
};
PredictorTraining meta_train_predictor(const FaultTaskSet& corpus, const MetaConfig& cfg);

} // namespace metaquad
