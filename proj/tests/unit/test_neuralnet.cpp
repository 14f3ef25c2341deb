#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include <json.hpp>

#include "metaquad/neuralnet.hpp"
#include "support/oracles.hpp"

using namespace metaquad;
using namespace metaquad::nn;
using testsupport::fd_gradient;
using testsupport::random_dataset;
using testsupport::rel_err;

namespace {

// worst coordinate error, relative with a floor tied to the gradient scale
double worst_rel(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const double floor = 1e-4 * std::max(a.cwiseAbs().maxCoeff(), 1e-12);
    double w = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) w = std::max(w, rel_err(a[i], b[i], floor));
    return w;
}

TaskDataset exact_fit_data(const MlpParams<double>& p, int n, std::uint64_t seed) {
    TaskDataset d = random_dataset(p.input_size(), p.output_size(), n, seed);
    d.targets = forward_batch(p, d.inputs);
    return d;
}

} // namespace

TEST_CASE("forward") {
    SUBCASE("zero network") {
        MlpParams<double> p(kPredictorTopology);
        Eigen::VectorXd x(6);
        x << 1, -2, 3, 0.5, 7, -1;
        CHECK(forward(p, x).norm() == 0.0);
        CHECK(p.size() == 6 * 40 + 40 + 40 * 40 + 40 + 40 * 3 + 3);
    }
    SUBCASE("hand computation on 1-1-1") {
        MlpParams<double> p({1, 1, 1});
        p.layers[0].weight(0, 0) = 2.0;
        p.layers[0].bias[0] = -0.5;
        p.layers[1].weight(0, 0) = 3.0;
        p.layers[1].bias[0] = 0.25;
        Eigen::VectorXd x(1);
        x << 0.75;
        // 3 * tanh(2 * 0.75 - 0.5) + 0.25 = 3 * tanh(1) + 0.25
        CHECK(forward(p, x)[0] == doctest::Approx(3.0 * 0.7615941559557649 + 0.25).epsilon(1e-14));
    }
    SUBCASE("batch equals per-sample") {
        const auto p = MlpParams<double>::random(kPredictorTopology, 3);
        const auto d = random_dataset(6, 3, 17, 4);
        const Eigen::MatrixXd out = forward_batch(p, d.inputs);
        for (Eigen::Index i = 0; i < d.size(); ++i) {
            const Eigen::VectorXd xi = d.inputs.col(i);
            CHECK((forward(p, xi) - out.col(i)).norm() < 1e-14);
        }
    }
}

TEST_CASE("parameter container") {
    const auto p = MlpParams<double>::random({2, 3, 2}, 11);
    const auto q = MlpParams<double>::from_flat(p.topology(), p.flat());
    CHECK(q.flat() == p.flat());
    CHECK((2.0 * p - p).flat() == p.flat());
    CHECK(p.dot(p) == doctest::Approx(p.flat().squaredNorm()));
    CHECK_THROWS(MlpParams<double>::from_flat(p.topology(), Eigen::VectorXd::Zero(3)));
    CHECK_THROWS(p + MlpParams<double>({2, 4, 2}));
    CHECK_THROWS(MlpParams<double>({3}));
    CHECK_THROWS(MlpParams<double>({3, 0, 1}));
    // fan-in bound
    const auto r = MlpParams<double>::random(kPredictorTopology, 5);
    CHECK(r.layers[0].weight.cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(6.0));
    CHECK(r.layers[1].weight.cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(40.0));
    CHECK(MlpParams<double>::random(kPredictorTopology, 5).flat() == r.flat());
    CHECK(MlpParams<double>::random(kPredictorTopology, 6).flat() != r.flat());
}

TEST_CASE("loss") {
    MlpParams<double> zero(kPredictorTopology);
    SUBCASE("zero params, zero targets") {
        TaskDataset d(Eigen::MatrixXd::Random(6, 4), Eigen::MatrixXd::Zero(3, 4));
        CHECK(loss(zero, d) == 0.0);
    }
    SUBCASE("zero params, single unit target") {
        Eigen::MatrixXd y(3, 1);
        y << 1, 0, 0;
        TaskDataset d(Eigen::MatrixXd::Random(6, 1), y);
        CHECK(loss(zero, d) == 1.0);
    }
    SUBCASE("matches the plain-loop oracle") {
        for (std::uint64_t s = 0; s < 5; ++s) {
            const auto p = MlpParams<double>::random(kPredictorTopology, 100 + s);
            const auto d = random_dataset(6, 3, 25, 200 + s);
            CHECK(loss(p, d) == doctest::Approx(testsupport::loss_oracle(p, d)).epsilon(1e-12));
            CHECK(loss(p, d) >= 0.0);
        }
    }
    SUBCASE("additive over concatenation") {
        const auto p = MlpParams<double>::random(kPredictorTopology, 1);
        const auto a = random_dataset(6, 3, 7, 2), b = random_dataset(6, 3, 9, 3);
        const auto ab = TaskDataset::concat(a, b);
        CHECK(ab.size() == 16);
        CHECK(loss(p, ab) == doctest::Approx(loss(p, a) + loss(p, b)).epsilon(1e-12));
        CHECK((grad(p, ab) - (grad(p, a) + grad(p, b))).norm() < 1e-10);
    }
    SUBCASE("errors") {
        CHECK_THROWS(loss(zero, TaskDataset{}));
        CHECK_THROWS(loss(zero, random_dataset(5, 3, 4, 1)));
        CHECK_THROWS(TaskDataset(Eigen::MatrixXd::Zero(6, 3), Eigen::MatrixXd::Zero(3, 4)));
    }
}

TEST_CASE("gradient") {
    SUBCASE("finite differences, debug topology") {
        const auto p = MlpParams<double>::random({2, 5, 3, 2}, 21);
        const auto d = random_dataset(2, 2, 8, 22);
        const auto dx = testsupport::extend(d);
        const auto fd = testsupport::fd_gradient_ext(p, [&](const MlpParams<long double>& q) { return loss(q, dx); });
        const Eigen::VectorXd g = grad(p, d).flat();
        for (Eigen::Index i = 0; i < g.size(); ++i) CHECK(rel_err(g[i], fd[i], 1e-6) < 1e-5);
    }
    SUBCASE("finite differences, predictor topology") {
        const auto p = MlpParams<double>::random(kPredictorTopology, 31);
        const auto d = random_dataset(6, 3, 10, 32, 0.5);
        const auto dx = testsupport::extend(d);
        const auto fd = testsupport::fd_gradient_ext(p, [&](const MlpParams<long double>& q) { return loss(q, dx); });
        const Eigen::VectorXd g = grad(p, d).flat();
        for (Eigen::Index i = 0; i < g.size(); ++i) CHECK(rel_err(g[i], fd[i], 1e-6) < 1e-5);
    }
    SUBCASE("vanishes at an exact fit") {
        const auto p = MlpParams<double>::random(kPredictorTopology, 41);
        const auto d = exact_fit_data(p, 20, 42);
        CHECK(loss(p, d) < 1e-28);
        CHECK(grad(p, d).norm() < 1e-12);
    }
    SUBCASE("loss_and_grad agrees with loss") {
        const auto p = MlpParams<double>::random(kPredictorTopology, 51);
        const auto d = random_dataset(6, 3, 10, 52);
        CHECK(loss_and_grad(p, d).loss == loss(p, d));
    }
}

TEST_CASE("hessian-vector product matches differences of gradients") {
    const auto p = MlpParams<double>::random({3, 6, 4, 2}, 61);
    const auto d = random_dataset(3, 2, 9, 62);
    const auto v = MlpParams<double>::random({3, 6, 4, 2}, 63);
    const double h = 1e-5;
    const Eigen::VectorXd fd = (grad(p + h * v, d).flat() - grad(p - h * v, d).flat()) / (2.0 * h);
    CHECK(worst_rel(hessian_vector_product(p, d, v).flat(), fd) < 1e-6);
    CHECK_THROWS(hessian_vector_product(p, d, MlpParams<double>({3, 6, 2})));
}

TEST_CASE("meta-gradient") {
    SUBCASE("alpha = 0 reduces to the query gradient") {
        const auto p = MlpParams<double>::random(kPredictorTopology, 71);
        const auto s = random_dataset(6, 3, 20, 72), q = random_dataset(6, 3, 20, 73);
        CHECK(meta_grad(p, s, q, 0.0, 1).flat() == grad(p, q).flat());
        CHECK(meta_grad(p, s, q, 0.0, 3).flat() == grad(p, q).flat());
    }
    SUBCASE("finite differences through the inner update") {
        const std::vector<int> topo = kPredictorTopology;
        const auto p = MlpParams<double>::random(topo, 81);
        const auto s = random_dataset(6, 3, 12, 82, 0.5), q = random_dataset(6, 3, 12, 83, 0.5);
        const double alpha = 0.01;
        for (int steps : {1, 2}) {
            const auto fd = fd_gradient(p, [&](const MlpParams<double>& th) {
                return loss(adapt(th, s, alpha, steps), q);
            });
            CHECK(worst_rel(meta_grad(p, s, q, alpha, steps).flat(), fd) < 1e-4);
        }
    }
    SUBCASE("stationary at an exact fit") {
        const auto p = MlpParams<double>::random(kPredictorTopology, 91);
        const auto d = exact_fit_data(p, 20, 92);
        CHECK(meta_grad(p, d, d, 0.01, 1).norm() < 1e-10);
    }
    SUBCASE("first order differs from second order; both descend") {
        const auto p = MlpParams<double>::random(kPredictorTopology, 101);
        const auto s = random_dataset(6, 3, 20, 102), q = random_dataset(6, 3, 20, 103);
        const double alpha = 0.01;
        const auto so = meta_grad_with_loss(p, s, q, alpha, 1, MetaGradMode::SecondOrder);
        const auto fo = meta_grad_with_loss(p, s, q, alpha, 1, MetaGradMode::FirstOrder);
        CHECK(so.adapted_query_loss == fo.adapted_query_loss);
        CHECK((so.grad - fo.grad).norm() > 1e-8 * so.grad.norm());
        const double base = loss(adapt(p, s, alpha, 1), q);
        for (const auto* g : {&so.grad, &fo.grad}) {
            const MlpParams<double> stepped = p - (1e-4 / g->norm()) * *g;
            CHECK(loss(adapt(stepped, s, alpha, 1), q) < base);
        }
    }
    SUBCASE("errors") {
        const auto p = MlpParams<double>::random(kPredictorTopology, 1);
        const auto d = random_dataset(6, 3, 4, 2);
        CHECK_THROWS(meta_grad(p, d, d, -0.1, 1));
        CHECK_THROWS(meta_grad(p, d, d, 0.1, 0));
        CHECK_THROWS(meta_grad(p, TaskDataset{}, d, 0.1, 1));
    }
}

TEST_CASE("adapt") {
    const auto p = MlpParams<double>::random(kPredictorTopology, 111);
    const auto d = random_dataset(6, 3, 20, 112, 0.3);
    CHECK(adapt(p, d, 0.01, 0).flat() == p.flat());
    CHECK(loss(adapt(p, d, 0.001, 5), d) < loss(p, d));
}

TEST_CASE("feature scaling") {
    Eigen::MatrixXd x(6, 2), y(3, 2);
    x << 3, 0, 4, 0, 0, 0, 0, 0, 0, 0, 0, 0;
    y << 1, 1, 1, 1, 1, 1;
    const TaskDataset d(x, y);
    const auto sc = FeatureScaling::from_rms(d);
    // first group: rms over 3 features x 2 samples of {3,0,4,0,0,0}
    CHECK(sc.input_scale[0] == doctest::Approx(std::sqrt(25.0 / 6.0)));
    CHECK(sc.input_scale[1] == sc.input_scale[0]);
    CHECK(sc.input_scale[3] == 1.0);
    CHECK(sc.output_scale[2] == doctest::Approx(1.0));
    const auto n = sc.normalize(d);
    CHECK(n.inputs(0, 0) == doctest::Approx(3.0 / sc.input_scale[0]));
    CHECK_THROWS(sc.validate(5, 3));
    FeatureScaling bad = FeatureScaling::identity(6, 3);
    bad.input_scale[1] = 0.0;
    CHECK_THROWS(bad.validate(6, 3));
}

TEST_CASE("predictor works in physical units") {
    Predictor pr{MlpParams<double>::random(kPredictorTopology, 121), FeatureScaling::identity(6, 3)};
    pr.scaling.input_scale.setConstant(2.0);
    pr.scaling.output_scale.setConstant(0.5);
    Eigen::VectorXd x(6);
    x << 0.2, -0.4, 0.6, 1.0, 2.0, -1.0;
    const Eigen::VectorXd manual = 0.5 * forward(pr.params, Eigen::VectorXd(x / 2.0));
    CHECK((pr.evaluate(x) - manual).norm() < 1e-15);
}

TEST_CASE("checkpoint round trip") {
    Checkpoint c;
    c.predictor.params = MlpParams<double>::random(kPredictorTopology, 131);
    c.predictor.scaling = FeatureScaling::identity(6, 3);
    c.predictor.scaling.input_scale[4] = 0.123456789012345678;
    c.seed = 77;
    c.config_hash = "0123456789abcdef";
    const std::string text = checkpoint_to_json(c);
    const Checkpoint r = checkpoint_from_json(text);
    CHECK(r.predictor.params.flat() == c.predictor.params.flat());
    CHECK(r.predictor.params.topology() == c.predictor.params.topology());
    CHECK(r.predictor.scaling.input_scale == c.predictor.scaling.input_scale);
    CHECK(r.seed == 77);
    CHECK(r.config_hash == c.config_hash);
    CHECK(checkpoint_to_json(r) == text);

    CHECK_THROWS(checkpoint_from_json("{}"));
    CHECK_THROWS(checkpoint_from_json("not json"));
    auto j = nlohmann::json::parse(text);
    j["params"].erase(j["params"].begin());
    CHECK_THROWS(checkpoint_from_json(j.dump()));
    CHECK_THROWS(load_checkpoint("/nonexistent/checkpoint.json"));
}
