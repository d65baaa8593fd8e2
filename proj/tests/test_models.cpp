#include "metalearn/models.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace metalearn;

namespace {

std::vector<Sample> random_regression_data(RngStream& rng, int n, int in_dim, int out_dim) {
    std::vector<Sample> data;
    for (int i = 0; i < n; ++i) data.push_back({rng.normal_vec(in_dim), rng.normal_vec(out_dim)});
    return data;
}

std::vector<Sample> random_class_data(RngStream& rng, int n, int in_dim, int n_classes) {
    std::vector<Sample> data;
    for (int i = 0; i < n; ++i) {
        Vec y(1);
        y[0] = static_cast<double>(rng.uniform_index(n_classes));
        data.push_back({rng.normal_vec(in_dim), y});
    }
    return data;
}

}  // namespace

TEST(LinearModel, ExactFitLossZero) {
    LinearModel m(1);
    std::vector<Sample> data{{make_vec({1.0}), make_vec({2.0})}};
    EXPECT_DOUBLE_EQ(m.mse_loss(make_vec({2.0}), data), 0.0);
}

TEST(LinearModel, UnnormalizedLossValue) {
    LinearModel m(1);
    std::vector<Sample> data{{make_vec({1.0}), make_vec({2.0})}};
    EXPECT_DOUBLE_EQ(m.mse_loss(make_vec({0.0}), data), 4.0);
}

TEST(LinearModel, GradAndHvpClosedForm) {
    LinearModel m(1);
    std::vector<Sample> data{{make_vec({1.0}), make_vec({2.0})}};
    EXPECT_DOUBLE_EQ(m.grad(make_vec({0.0}), data)[0], -4.0);  // 2 X'(X phi - y)
    EXPECT_DOUBLE_EQ(m.hvp(make_vec({0.0}), data, make_vec({3.0}))[0], 6.0);  // 2 X'X v
}

TEST(LinearModel, MultiOutputAgainstColumnwise) {
    RngStream rng(3);
    LinearModel m(3, 2);
    auto data = random_regression_data(rng, 6, 3, 2);
    const Vec phi = rng.normal_vec(6);
    // column c of the weight matrix solves an independent scalar-output problem
    LinearModel single(3, 1);
    double total = 0;
    for (int c = 0; c < 2; ++c) {
        std::vector<Sample> dc;
        for (const auto& s : data) dc.push_back({s.x, make_vec({s.y[c]})});
        total += single.mse_loss(phi.segment(3 * c, 3), dc);
    }
    EXPECT_NEAR(m.mse_loss(phi, data), total, 1e-12);
}

TEST(LinearModel, DimensionMismatchThrows) {
    LinearModel m(2);
    std::vector<Sample> data{{make_vec({1.0}), make_vec({2.0})}};
    EXPECT_THROW(m.mse_loss(make_vec({1.0, 2.0}), data), std::invalid_argument);
    EXPECT_THROW(m.mse_loss(make_vec({1.0}), data), std::invalid_argument);
}

TEST(Mlp, ParamCountMatchesArchitecture) {
    Mlp mlp(1, {40, 40}, 1);
    EXPECT_EQ(mlp.param_count(), 40 * 2 + 40 * 41 + 41);
    Mlp ctx_mlp(1, {8}, 1, Activation::tanh, 3);
    EXPECT_EQ(ctx_mlp.param_count(), 8 * 5 + 9);
}

TEST(Mlp, GradientMatchesFiniteDifferences) {
    // gradient-consistency invariant: >= 20 random instances, rel err < 1e-4
    double worst = 0;
    for (int inst = 0; inst < 20; ++inst) {
        RngStream rng(100 + inst);
        Mlp mlp(2, {7, 5}, 2, inst % 2 ? Activation::tanh : Activation::relu);
        auto data = random_regression_data(rng, 6, 2, 2);
        MlpObjective obj(mlp, data, LossKind::mse_mean);
        const Vec phi = mlp.init_params(rng);
        worst = std::max(worst, relative_error(obj.grad(phi), finite_diff_grad(obj, phi)));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Mlp, HvpMatchesFiniteDifferences) {
    double worst = 0;
    for (int inst = 0; inst < 20; ++inst) {
        RngStream rng(200 + inst);
        Mlp mlp(2, {6, 4}, 1, Activation::tanh);
        auto data = random_regression_data(rng, 5, 2, 1);
        MlpObjective obj(mlp, data, LossKind::mse_mean);
        const Vec phi = mlp.init_params(rng);
        const Vec v = rng.normal_vec(mlp.param_count());
        worst = std::max(worst, relative_error(obj.hvp(phi, v), finite_diff_hvp(obj, phi, v)));
    }
    EXPECT_LT(worst, 1e-3);
}

TEST(Mlp, HvpLinearInDirection) {
    RngStream rng(31);
    Mlp mlp(2, {6}, 1);
    auto data = random_regression_data(rng, 4, 2, 1);
    MlpObjective obj(mlp, data, LossKind::mse_mean);
    const Vec phi = mlp.init_params(rng);
    const Vec v = rng.normal_vec(mlp.param_count());
    const Vec w = rng.normal_vec(mlp.param_count());
    const Vec lhs = obj.hvp(phi, 1.5 * v - 2.5 * w);
    const Vec rhs = 1.5 * obj.hvp(phi, v) - 2.5 * obj.hvp(phi, w);
    EXPECT_LT(relative_error(lhs, rhs), 1e-10);
}

TEST(Mlp, NoHiddenLayerIsAffine) {
    RngStream rng(5);
    Mlp mlp(3, {}, 2);
    const Vec phi = mlp.init_params(rng);
    const Vec x1 = rng.normal_vec(3), x2 = rng.normal_vec(3);
    // affine: f(a x1 + (1-a) x2) = a f(x1) + (1-a) f(x2)
    const double a = 0.3;
    const Vec lhs = mlp.forward(phi, a * x1 + (1 - a) * x2);
    const Vec rhs = a * mlp.forward(phi, x1) + (1 - a) * mlp.forward(phi, x2);
    EXPECT_LT((lhs - rhs).norm(), 1e-12);
}

TEST(Mlp, ZeroHiddenWeightsDegenerateToConstant) {
    Mlp mlp(1, {4}, 1, Activation::tanh);
    Vec phi = Vec::Zero(mlp.param_count());
    // output layer picks up only its bias when the hidden activations vanish
    phi[mlp.param_count() - 1] = 0.7;
    EXPECT_DOUBLE_EQ(mlp.forward(phi, make_vec({-3.0}))[0], 0.7);
    EXPECT_DOUBLE_EQ(mlp.forward(phi, make_vec({11.0}))[0], 0.7);
}

TEST(Mlp, ZeroContextDimMatchesPlainBitExactly) {
    RngStream rng(8);
    Mlp plain(2, {5, 3}, 1);
    Mlp with_ctx(2, {5, 3}, 1, Activation::tanh, 0);
    const Vec phi = plain.init_params(rng);
    const Vec x = rng.normal_vec(2);
    EXPECT_EQ(plain.forward(phi, x)[0], with_ctx.forward(phi, x, Vec())[0]);
}

TEST(Mlp, ContextGradientMatchesFiniteDifferences) {
    RngStream rng(21);
    Mlp mlp(1, {6}, 1, Activation::tanh, 2);
    auto data = random_regression_data(rng, 5, 1, 1);
    const Vec phi = mlp.init_params(rng);
    const Vec ctx = rng.normal_vec(2);
    const Vec got = mlp.gradients(phi, data, LossKind::mse_mean, ctx).ctx;
    const Vec want = fd_gradient(
        [&](const Vec& c) { return mlp.loss(phi, data, LossKind::mse_mean, c); }, ctx);
    EXPECT_LT(relative_error(got, want), 1e-6);
}

TEST(Mlp, MixedHvpMatchesFiniteDifferences) {
    // d/dtheta <grad_ctx L, u> probed by central differences on the context
    RngStream rng(22);
    Mlp mlp(1, {6}, 1, Activation::tanh, 2);
    auto data = random_regression_data(rng, 5, 1, 1);
    const Vec phi = mlp.init_params(rng);
    const Vec u = rng.normal_vec(2);
    const Vec zero_ctx = Vec::Zero(2);
    const Vec got = mlp.hvp(phi, data, LossKind::mse_mean, Vec(), u, zero_ctx).params;
    const double h = 1e-5;
    const Vec gp = mlp.gradients(phi, data, LossKind::mse_mean, Vec(h * u)).params;
    const Vec gm = mlp.gradients(phi, data, LossKind::mse_mean, Vec(-h * u)).params;
    const Vec want = (gp - gm) / (2 * h);
    EXPECT_LT(relative_error(got, want), 1e-4);
}

TEST(CrossEntropy, UniformLogitsGiveLogCardinality) {
    SoftmaxClassifier clf(2, {4}, 16);
    // zero parameters produce all-zero logits
    const Vec phi = Vec::Zero(clf.param_count());
    std::vector<Sample> data{{make_vec({0.3, -0.2}), make_vec({5.0})}};
    EXPECT_NEAR(clf.cross_entropy_loss(phi, data), std::log(16.0), 1e-12);
}

TEST(CrossEntropy, LargeMarginLossVanishes) {
    // a single linear layer with a huge bias on the correct class
    Mlp mlp(1, {}, 3);
    Vec phi = Vec::Zero(mlp.param_count());
    phi[3 * 1 + 0] = 200.0;  // bias of class 0
    std::vector<Sample> data{{make_vec({0.0}), make_vec({0.0})}};
    EXPECT_LT(mlp.loss(phi, data, LossKind::cross_entropy), 1e-12);
    EXPECT_TRUE(std::isfinite(mlp.loss(phi, data, LossKind::cross_entropy)));
}

TEST(CrossEntropy, NeverInfiniteForFiniteLogits) {
    Mlp mlp(1, {}, 3);
    Vec phi = Vec::Zero(mlp.param_count());
    phi[3] = 1e30;  // extreme but finite weight
    std::vector<Sample> data{{make_vec({1.0}), make_vec({1.0})}};
    EXPECT_TRUE(std::isfinite(mlp.loss(phi, data, LossKind::cross_entropy)));
}

TEST(CrossEntropy, GradientAndHvpMatchFiniteDifferences) {
    double worst_g = 0, worst_h = 0;
    for (int inst = 0; inst < 10; ++inst) {
        RngStream rng(300 + inst);
        Mlp mlp(2, {5}, 4, Activation::tanh);
        auto data = random_class_data(rng, 6, 2, 4);
        MlpObjective obj(mlp, data, LossKind::cross_entropy);
        const Vec phi = mlp.init_params(rng);
        worst_g = std::max(worst_g, relative_error(obj.grad(phi), finite_diff_grad(obj, phi)));
        const Vec v = rng.normal_vec(mlp.param_count());
        worst_h = std::max(worst_h, relative_error(obj.hvp(phi, v), finite_diff_hvp(obj, phi, v)));
    }
    EXPECT_LT(worst_g, 1e-4);
    EXPECT_LT(worst_h, 1e-3);
}

TEST(SoftmaxClassifier, ProbabilitiesNormalizedAndPositive) {
    RngStream rng(17);
    SoftmaxClassifier clf(2, {8}, 16);
    const Vec phi = clf.init_params(rng);
    for (int i = 0; i < 50; ++i) {
        const Vec p = clf.probabilities(phi, rng.normal_vec(2));
        EXPECT_NEAR(p.sum(), 1.0, 1e-12);
        EXPECT_GT(p.minCoeff(), 0.0);
    }
}

TEST(SoftmaxClassifier, DecisionIsArgmax) {
    SoftmaxClassifier clf(1, {}, 3);
    Vec phi = Vec::Zero(clf.param_count());
    phi[3 + 2] = 5.0;  // bias favors class 2
    EXPECT_EQ(clf.decide(phi, make_vec({0.4})), 2);
}

TEST(CrossEntropy, InvalidClassIndexThrows) {
    Mlp mlp(1, {}, 3);
    const Vec phi = Vec::Zero(mlp.param_count());
    std::vector<Sample> bad{{make_vec({1.0}), make_vec({7.0})}};
    EXPECT_THROW(mlp.loss(phi, bad, LossKind::cross_entropy), std::invalid_argument);
}
