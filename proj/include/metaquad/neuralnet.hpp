#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "metaquad/common.hpp"

namespace metaquad::nn {

/// Default predictor topology: relative reference (6) -> 40 -> 40 -> displacement (3).
inline const std::vector<int> kPredictorTopology{6, 40, 40, 3};

template <typename Scalar>
struct Layer {
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> weight; ///< out x in
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> bias;
};

/// Weights and biases of a fully connected network with tanh hidden layers and
/// an identity output layer. Also used as the gradient type, so it carries the
/// usual vector-space operations.
template <typename Scalar>
class MlpParams {
public:
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

    MlpParams() = default;

    /// All-zero parameters for the given layer sizes (input first).
    explicit MlpParams(const std::vector<int>& topology) : topology_(topology) {
        if (topology.size() < 2) {
            throw Error("MlpParams: topology needs at least an input and an output layer");
        }
        for (std::size_t l = 0; l + 1 < topology.size(); ++l) {
            if (topology[l] <= 0 || topology[l + 1] <= 0) {
                throw Error("MlpParams: layer sizes must be positive");
            }
            layers.push_back({Matrix::Zero(topology[l + 1], topology[l]),
                              Vector::Zero(topology[l + 1])});
        }
    }

    /// Uniform fan-in scaled initialisation: every entry of layer l drawn from
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    static MlpParams random(const std::vector<int>& topology, std::uint64_t seed) {
        MlpParams p(topology);
        std::mt19937_64 rng(seed);
        for (auto& layer : p.layers) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(layer.weight.cols()));
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (Eigen::Index i = 0; i < layer.weight.size(); ++i) {
                layer.weight.data()[i] = static_cast<Scalar>(dist(rng));
            }
            for (Eigen::Index i = 0; i < layer.bias.size(); ++i) {
                layer.bias[i] = static_cast<Scalar>(dist(rng));
            }
        }
        return p;
    }

    MlpParams zeros_like() const { return MlpParams(topology_); }

    const std::vector<int>& topology() const noexcept { return topology_; }
    int input_size() const { return topology_.front(); }
    int output_size() const { return topology_.back(); }

    std::size_t size() const {
        std::size_t n = 0;
        for (const auto& layer : layers) {
            n += static_cast<std::size_t>(layer.weight.size() + layer.bias.size());
        }
        return n;
    }

    /// Parameters as one vector: per layer, column-major weights then bias.
    Vector flat() const {
        Vector out(static_cast<Eigen::Index>(size()));
        Eigen::Index offset = 0;
        for (const auto& layer : layers) {
            out.segment(offset, layer.weight.size()) = layer.weight.reshaped();
            offset += layer.weight.size();
            out.segment(offset, layer.bias.size()) = layer.bias;
            offset += layer.bias.size();
        }
        return out;
    }

    static MlpParams from_flat(const std::vector<int>& topology, const Vector& values) {
        MlpParams p(topology);
        if (static_cast<std::size_t>(values.size()) != p.size()) {
            throw Error("MlpParams: flat parameter count does not match topology");
        }
        Eigen::Index offset = 0;
        for (auto& layer : p.layers) {
            layer.weight.reshaped() = values.segment(offset, layer.weight.size());
            offset += layer.weight.size();
            layer.bias = values.segment(offset, layer.bias.size());
            offset += layer.bias.size();
        }
        return p;
    }

    bool same_shape(const MlpParams& other) const { return topology_ == other.topology_; }

    bool all_finite() const {
        for (const auto& layer : layers) {
            if (!layer.weight.allFinite() || !layer.bias.allFinite()) {
                return false;
            }
        }
        return true;
    }

    /// this += scale * other
    MlpParams& add_scaled(const MlpParams& other, Scalar scale) {
        check_shape(other);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            layers[l].weight += scale * other.layers[l].weight;
            layers[l].bias += scale * other.layers[l].bias;
        }
        return *this;
    }

    MlpParams& operator+=(const MlpParams& other) { return add_scaled(other, Scalar(1)); }
    MlpParams& operator-=(const MlpParams& other) { return add_scaled(other, Scalar(-1)); }
    MlpParams& operator*=(Scalar s) {
        for (auto& layer : layers) {
            layer.weight *= s;
            layer.bias *= s;
        }
        return *this;
    }

    friend MlpParams operator+(MlpParams a, const MlpParams& b) { return a += b; }
    friend MlpParams operator-(MlpParams a, const MlpParams& b) { return a -= b; }
    friend MlpParams operator*(Scalar s, MlpParams a) { return a *= s; }

    Scalar dot(const MlpParams& other) const {
        check_shape(other);
        Scalar acc(0);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            acc += layers[l].weight.cwiseProduct(other.layers[l].weight).sum();
            acc += layers[l].bias.dot(other.layers[l].bias);
        }
        return acc;
    }

    Scalar squared_norm() const { return dot(*this); }
    Scalar norm() const { return std::sqrt(squared_norm()); }

    std::vector<Layer<Scalar>> layers;

private:
    void check_shape(const MlpParams& other) const {
        if (!same_shape(other)) {
            throw Error("MlpParams: shape mismatch");
        }
    }

    std::vector<int> topology_;
};

/// Supervised samples stored column-wise: inputs is in x M, targets out x M.
template <typename Scalar>
struct Dataset {
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

    Matrix inputs;
    Matrix targets;
    std::string label;

    Dataset() = default;
    Dataset(Matrix x, Matrix y, std::string name = {})
        : inputs(std::move(x)), targets(std::move(y)), label(std::move(name)) {
        if (inputs.cols() != targets.cols()) {
            throw Error("Dataset: input and target counts differ");
        }
    }

    Eigen::Index size() const noexcept { return inputs.cols(); }
    bool empty() const noexcept { return inputs.cols() == 0; }

    /// Columns selected by index, in the given order.
    template <typename IndexRange>
    Dataset subset(const IndexRange& idx) const {
        Dataset out;
        out.label = label;
        out.inputs.resize(inputs.rows(), static_cast<Eigen::Index>(idx.size()));
        out.targets.resize(targets.rows(), static_cast<Eigen::Index>(idx.size()));
        Eigen::Index c = 0;
        for (auto i : idx) {
            out.inputs.col(c) = inputs.col(static_cast<Eigen::Index>(i));
            out.targets.col(c) = targets.col(static_cast<Eigen::Index>(i));
            ++c;
        }
        return out;
    }

    static Dataset concat(const Dataset& a, const Dataset& b) {
        if (a.empty()) return b;
        if (b.empty()) return a;
        Dataset out;
        out.label = a.label;
        out.inputs.resize(a.inputs.rows(), a.size() + b.size());
        out.inputs << a.inputs, b.inputs;
        out.targets.resize(a.targets.rows(), a.size() + b.size());
        out.targets << a.targets, b.targets;
        return out;
    }
};

using TaskDataset = Dataset<double>;

namespace detail {

template <typename Scalar>
void check_dataset(const MlpParams<Scalar>& params, const Dataset<Scalar>& data) {
    if (data.empty()) {
        throw Error("empty dataset");
    }
    if (data.inputs.rows() != params.input_size() || data.targets.rows() != params.output_size()) {
        throw Error("dataset dimensions do not match network topology");
    }
}

/// Post-activation values per layer; acts[0] is the input batch.
template <typename Scalar>
std::vector<typename MlpParams<Scalar>::Matrix> forward_all(const MlpParams<Scalar>& params,
                                                            const typename MlpParams<Scalar>::Matrix& x) {
    std::vector<typename MlpParams<Scalar>::Matrix> acts;
    acts.reserve(params.layers.size() + 1);
    acts.push_back(x);
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& layer = params.layers[l];
        typename MlpParams<Scalar>::Matrix z = layer.weight * acts.back();
        z.colwise() += layer.bias;
        if (l + 1 < params.layers.size()) {
            z = z.array().tanh().matrix();
        }
        acts.push_back(std::move(z));
    }
    return acts;
}

} // namespace detail

/// Network output for a batch of column inputs.
template <typename Scalar>
typename MlpParams<Scalar>::Matrix forward_batch(const MlpParams<Scalar>& params,
                                                 const typename MlpParams<Scalar>::Matrix& inputs) {
    return detail::forward_all(params, inputs).back();
}

template <typename Scalar>
typename MlpParams<Scalar>::Vector forward(const MlpParams<Scalar>& params,
                                           const typename MlpParams<Scalar>::Vector& input) {
    typename MlpParams<Scalar>::Matrix x = input;
    return forward_batch(params, x).col(0);
}

/// Sum over samples of the squared l2 prediction error.
template <typename Scalar>
Scalar loss(const MlpParams<Scalar>& params, const Dataset<Scalar>& data) {
    detail::check_dataset(params, data);
    return (forward_batch(params, data.inputs) - data.targets).squaredNorm();
}

template <typename Scalar>
struct LossAndGrad {
    Scalar loss;
    MlpParams<Scalar> grad;
};

/// Loss and its exact reverse-mode gradient.
template <typename Scalar>
LossAndGrad<Scalar> loss_and_grad(const MlpParams<Scalar>& params, const Dataset<Scalar>& data) {
    using Matrix = typename MlpParams<Scalar>::Matrix;
    detail::check_dataset(params, data);
    const auto acts = detail::forward_all(params, data.inputs);
    const std::size_t L = params.layers.size();

    Matrix residual = acts[L] - data.targets;
    LossAndGrad<Scalar> out{residual.squaredNorm(), params.zeros_like()};

    Matrix delta = Scalar(2) * residual;
    for (std::size_t l = L; l-- > 0;) {
        out.grad.layers[l].weight.noalias() = delta * acts[l].transpose();
        out.grad.layers[l].bias = delta.rowwise().sum();
        if (l > 0) {
            Matrix back = params.layers[l].weight.transpose() * delta;
            delta = back.cwiseProduct((Scalar(1) - acts[l].array().square()).matrix());
        }
    }
    return out;
}

template <typename Scalar>
MlpParams<Scalar> grad(const MlpParams<Scalar>& params, const Dataset<Scalar>& data) {
    return loss_and_grad(params, data).grad;
}

/// Exact Hessian-vector product H(params) * direction of the loss, by
/// forward-mode differentiation (R-operator) of the reverse pass.
template <typename Scalar>
MlpParams<Scalar> hessian_vector_product(const MlpParams<Scalar>& params, const Dataset<Scalar>& data,
                                         const MlpParams<Scalar>& direction) {
    using Matrix = typename MlpParams<Scalar>::Matrix;
    detail::check_dataset(params, data);
    if (!params.same_shape(direction)) {
        throw Error("hessian_vector_product: direction shape mismatch");
    }
    const auto acts = detail::forward_all(params, data.inputs);
    const std::size_t L = params.layers.size();

    // Directional derivatives of every activation.
    std::vector<Matrix> r_acts(L + 1);
    r_acts[0] = Matrix::Zero(acts[0].rows(), acts[0].cols());
    for (std::size_t l = 0; l < L; ++l) {
        Matrix rz = direction.layers[l].weight * acts[l] + params.layers[l].weight * r_acts[l];
        rz.colwise() += direction.layers[l].bias;
        if (l + 1 < L) {
            rz = rz.cwiseProduct((Scalar(1) - acts[l + 1].array().square()).matrix());
        }
        r_acts[l + 1] = std::move(rz);
    }

    MlpParams<Scalar> out = params.zeros_like();
    Matrix delta = Scalar(2) * (acts[L] - data.targets);
    Matrix r_delta = Scalar(2) * r_acts[L];
    for (std::size_t l = L; l-- > 0;) {
        out.layers[l].weight.noalias() = r_delta * acts[l].transpose();
        out.layers[l].weight.noalias() += delta * r_acts[l].transpose();
        out.layers[l].bias = r_delta.rowwise().sum();
        if (l > 0) {
            const Matrix back = params.layers[l].weight.transpose() * delta;
            const Matrix r_back = direction.layers[l].weight.transpose() * delta +
                                  params.layers[l].weight.transpose() * r_delta;
            const Matrix slope = (Scalar(1) - acts[l].array().square()).matrix();
            const Matrix r_slope = Scalar(-2) * acts[l].cwiseProduct(r_acts[l]);
            delta = back.cwiseProduct(slope);
            r_delta = r_back.cwiseProduct(slope) + back.cwiseProduct(r_slope);
        }
    }
    return out;
}

/// `steps` plain gradient-descent updates with step size alpha.
template <typename Scalar>
MlpParams<Scalar> adapt(const MlpParams<Scalar>& params, const Dataset<Scalar>& data, Scalar alpha,
                        int steps) {
    MlpParams<Scalar> theta = params;
    for (int s = 0; s < steps; ++s) {
        theta.add_scaled(grad(theta, data), -alpha);
    }
    return theta;
}

enum class MetaGradMode {
    SecondOrder, ///< exact gradient through the inner updates
    FirstOrder,  ///< FOMAML: inner-update Jacobian replaced by identity (approximation)
};

template <typename Scalar>
struct MetaGradResult {
    MlpParams<Scalar> grad;
    Scalar adapted_query_loss; ///< query loss at the adapted parameters
};

/// Gradient with respect to params of loss(query, params') where params' is
/// obtained from params by `inner_steps` gradient steps of size alpha on the
/// support set.
template <typename Scalar>
MetaGradResult<Scalar> meta_grad_with_loss(const MlpParams<Scalar>& params, const Dataset<Scalar>& support,
                                           const Dataset<Scalar>& query, Scalar alpha, int inner_steps,
                                           MetaGradMode mode = MetaGradMode::SecondOrder) {
    if (alpha < Scalar(0)) {
        throw Error("meta_grad: alpha must be non-negative");
    }
    if (inner_steps < 1) {
        throw Error("meta_grad: inner_steps must be at least 1");
    }
    detail::check_dataset(params, support);
    detail::check_dataset(params, query);

    std::vector<MlpParams<Scalar>> trajectory;
    trajectory.reserve(static_cast<std::size_t>(inner_steps));
    MlpParams<Scalar> theta = params;
    for (int s = 0; s < inner_steps; ++s) {
        trajectory.push_back(theta);
        theta.add_scaled(grad(theta, support), -alpha);
    }
    LossAndGrad<Scalar> outer = loss_and_grad(theta, query);
    MlpParams<Scalar> g = std::move(outer.grad);
    if (mode == MetaGradMode::SecondOrder && alpha != Scalar(0)) {
        // Backpropagate through each update theta_{j+1} = theta_j - alpha * grad_j.
        for (std::size_t j = trajectory.size(); j-- > 0;) {
            g.add_scaled(hessian_vector_product(trajectory[j], support, g), -alpha);
        }
    }
    return {std::move(g), outer.loss};
}

template <typename Scalar>
MlpParams<Scalar> meta_grad(const MlpParams<Scalar>& params, const Dataset<Scalar>& support,
                            const Dataset<Scalar>& query, Scalar alpha, int inner_steps,
                            MetaGradMode mode = MetaGradMode::SecondOrder) {
    return meta_grad_with_loss(params, support, query, alpha, inner_steps, mode).grad;
}

/// Per-feature divisors applied before and after the network. The network is
/// trained on inputs / input_scale and targets / output_scale.
struct FeatureScaling {
    Eigen::VectorXd input_scale;
    Eigen::VectorXd output_scale;

    static FeatureScaling identity(int inputs, int outputs) {
        return {Eigen::VectorXd::Ones(inputs), Eigen::VectorXd::Ones(outputs)};
    }

    /// Root-mean-square over consecutive groups of `group` features (3 keeps
    /// the position and velocity blocks isotropic). All-zero groups get 1.
    static FeatureScaling from_rms(const TaskDataset& data, int group = 3);

    TaskDataset normalize(const TaskDataset& data) const;
    void validate(int inputs, int outputs) const;
};

/// Network parameters plus the fixed feature scaling that maps physical
/// quantities in and out of the network.
struct Predictor {
    MlpParams<double> params;
    FeatureScaling scaling;

    /// Physical-unit output for a physical-unit input.
    Eigen::VectorXd evaluate(const Eigen::VectorXd& input) const;
};

struct Checkpoint {
    static constexpr int kVersion = 1;

    Predictor predictor;
    std::uint64_t seed = 0;
    std::string config_hash;
};

/// JSON checkpoint: format tag, version, topology, activation, seed, scaling
/// and the flat parameter list. Loading validates the shape.
std::string checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const std::string& text);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

} // namespace metaquad::nn
