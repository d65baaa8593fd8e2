#include "metalearn/meta_algorithms.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "metalearn/models.hpp"
#include "metalearn/ridge_meta.hpp"

using namespace metalearn;

namespace {

TaskObjectives scalar_quadratic_task(double c_tr, double c_va) {
    // L_tr = 0.5 (phi - c_tr)^2, L_va = 0.5 (phi - c_va)^2
    Mat one = Mat::Identity(1, 1);
    return {quadratic_objective(one, make_vec({c_tr})), quadratic_objective(one, make_vec({c_va}))};
}

TaskObjectives random_quadratic_task(RngStream& rng, int d) {
    Mat a = Mat::Zero(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) a(i, j) = rng.normal();
    a = (a * a.transpose() + 0.3 * Mat::Identity(d, d)).eval();
    Mat b = Mat::Zero(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) b(i, j) = rng.normal();
    b = (b * b.transpose() + 0.3 * Mat::Identity(d, d)).eval();
    return {quadratic_objective(a, rng.normal_vec(d)), quadratic_objective(b, rng.normal_vec(d))};
}

TaskObjectives random_mlp_task(RngStream& rng, Mlp& mlp_out) {
    Mlp mlp(1, {5, 4}, 1, Activation::tanh);
    std::vector<Sample> tr, va;
    for (int i = 0; i < 6; ++i) tr.push_back({rng.normal_vec(1), rng.normal_vec(1)});
    for (int i = 0; i < 6; ++i) va.push_back({rng.normal_vec(1), rng.normal_vec(1)});
    mlp_out = mlp;
    return {std::make_shared<MlpObjective>(mlp, tr, LossKind::mse_mean),
            std::make_shared<MlpObjective>(mlp, va, LossKind::mse_mean)};
}

RidgeTask random_ridge_task(RngStream& rng, int n_tr, int n_va, int d, double lambda) {
    RidgeTask t;
    t.x_tr = Mat::Zero(n_tr, d);
    t.y_tr = Mat::Zero(n_tr, 1);
    t.x_va = Mat::Zero(n_va, d);
    t.y_va = Mat::Zero(n_va, 1);
    for (int i = 0; i < n_tr; ++i) {
        t.x_tr.row(i) = rng.normal_vec(d).transpose();
        t.y_tr(i, 0) = rng.normal();
    }
    for (int i = 0; i < n_va; ++i) {
        t.x_va.row(i) = rng.normal_vec(d).transpose();
        t.y_va(i, 0) = rng.normal();
    }
    t.lambda = lambda;
    return t;
}

TaskObjectives ridge_objectives(const RidgeTask& t) {
    LinearModel model(static_cast<int>(t.x_tr.cols()), 1, /*normalized=*/false);
    std::vector<Sample> tr, va;
    for (int i = 0; i < t.x_tr.rows(); ++i)
        tr.push_back({t.x_tr.row(i).transpose(), make_vec({t.y_tr(i, 0)})});
    for (int i = 0; i < t.x_va.rows(); ++i)
        va.push_back({t.x_va.row(i).transpose(), make_vec({t.y_va(i, 0)})});
    return {std::make_shared<LinearObjective>(model, tr), std::make_shared<LinearObjective>(model, va)};
}

}  // namespace

// ---------------------------------------------------------------------------
// inner adaptation

TEST(InnerAdaptGd, OneStepQuadraticClosedForm) {
    auto task = scalar_quadratic_task(0.0, 2.0);
    InnerConfig cfg;
    cfg.alpha = 0.5;
    cfg.n_steps = 1;
    EXPECT_DOUBLE_EQ(inner_adapt_gd(*task.tr, make_vec({1.0}), cfg)[0], 0.5);
}

TEST(InnerAdaptGd, ZeroStepSizeIsIdentity) {
    auto task = scalar_quadratic_task(0.0, 2.0);
    InnerConfig cfg;
    cfg.alpha = 0.0;
    cfg.n_steps = 5;
    EXPECT_DOUBLE_EQ(inner_adapt_gd(*task.tr, make_vec({1.0}), cfg)[0], 1.0);
}

TEST(InnerAdaptGd, MatchesHandIteratedRecursion) {
    RngStream rng(41);
    auto task = random_quadratic_task(rng, 3);
    InnerConfig cfg;
    cfg.alpha = 0.07;
    cfg.n_steps = 3;
    Vec theta = rng.normal_vec(3);
    Vec phi = theta;
    for (int s = 0; s < 3; ++s) phi -= cfg.alpha * task.tr->grad(phi);
    EXPECT_LT((inner_adapt_gd(*task.tr, theta, cfg) - phi).norm(), 1e-14);
}

TEST(InnerAdaptGd, NonFiniteGradientThrows) {
    auto bad = std::make_shared<FunctionalObjective>(
        1, [](const Vec&) { return 1.0; },
        [](const Vec&) { return make_vec({std::numeric_limits<double>::quiet_NaN()}); });
    InnerConfig cfg;
    EXPECT_THROW(inner_adapt_gd(*bad, make_vec({0.0}), cfg), numeric_error);
}

// ---------------------------------------------------------------------------
// MAML / FOMAML

TEST(MamlMetaGradient, ScalarQuadraticClosedForm) {
    auto task = scalar_quadratic_task(0.0, 2.0);
    InnerConfig cfg;
    cfg.alpha = 0.5;
    // phi = 0.5, meta-grad = (1 - 0.5) * (0.5 - 2) = -0.75
    EXPECT_DOUBLE_EQ(maml_meta_gradient(task, make_vec({1.0}), cfg)[0], -0.75);
}

TEST(MamlMetaGradient, ZeroAlphaReducesToJointGradient) {
    auto task = scalar_quadratic_task(0.0, 2.0);
    InnerConfig cfg;
    cfg.alpha = 0.0;
    const Vec theta = make_vec({1.0});
    EXPECT_DOUBLE_EQ(maml_meta_gradient(task, theta, cfg)[0], task.va->grad(theta)[0]);
}

TEST(MamlMetaGradient, MatchesFiniteDifferenceHypergradient) {
    // universal hypergradient invariant, >= 10 random small instances
    double worst = 0;
    InnerConfig cfg;
    cfg.alpha = 0.05;
    for (int inst = 0; inst < 10; ++inst) {
        RngStream rng(500 + inst);
        Mlp mlp(1, {5, 4}, 1);
        auto task = random_mlp_task(rng, mlp);
        const Vec theta = mlp.init_params(rng);
        const Vec got = maml_meta_gradient(task, theta, cfg);
        const Vec want =
            fd_gradient([&](const Vec& th) { return maml_meta_objective(task, th, cfg); }, theta);
        worst = std::max(worst, relative_error(got, want));
    }
    EXPECT_LT(worst, 1e-3);
}

TEST(FomamlMetaGradient, ScalarQuadraticClosedForm) {
    auto task = scalar_quadratic_task(0.0, 2.0);
    InnerConfig cfg;
    cfg.alpha = 0.5;
    EXPECT_DOUBLE_EQ(fomaml_meta_gradient(task, make_vec({1.0}), cfg)[0], -1.5);
}

TEST(FomamlMetaGradient, EqualsMamlUnderAffineInnerLoss) {
    // zero training Hessian makes the Jacobian the identity
    RngStream rng(7);
    const int d = 4;
    const Vec slope = rng.normal_vec(d);
    auto affine_tr = std::make_shared<FunctionalObjective>(
        d, [slope](const Vec& p) { return slope.dot(p); }, [slope](const Vec&) { return slope; },
        [d](const Vec&, const Vec&) { return Vec(Vec::Zero(d)); });
    Mat b = Mat::Identity(d, d) * 2.0;
    TaskObjectives task{affine_tr, quadratic_objective(b, rng.normal_vec(d))};
    InnerConfig cfg;
    cfg.alpha = 0.3;
    const Vec theta = rng.normal_vec(d);
    const Vec ma = maml_meta_gradient(task, theta, cfg);
    const Vec fo = fomaml_meta_gradient(task, theta, cfg);
    EXPECT_LT((ma - fo).norm(), 1e-12);
}

TEST(FomamlMetaGradient, ZeroAlphaIsValidationGradient) {
    auto task = scalar_quadratic_task(0.3, -1.1);
    InnerConfig cfg;
    cfg.alpha = 0.0;
    const Vec theta = make_vec({0.7});
    EXPECT_DOUBLE_EQ(fomaml_meta_gradient(task, theta, cfg)[0], task.va->grad(theta)[0]);
}

// ---------------------------------------------------------------------------
// Reptile

TEST(Reptile, DirectSubstitution) {
    EXPECT_DOUBLE_EQ(reptile_outer_update(make_vec({1.0}), {make_vec({0.5})}, 0.1)[0], 0.95);
}

TEST(Reptile, OneStepIdentity) {
    // with one inner step the update is exactly theta - beta*alpha*mean grad
    RngStream rng(13);
    const int d = 3, k = 4;
    const double alpha = 0.2, beta = 0.4;
    std::vector<TaskObjectives> tasks;
    for (int i = 0; i < k; ++i) tasks.push_back(random_quadratic_task(rng, d));
    const Vec theta = rng.normal_vec(d);
    InnerConfig inner;
    inner.alpha = alpha;
    inner.n_steps = 1;
    std::vector<Vec> adapted;
    Vec mean_grad = Vec::Zero(d);
    for (const auto& t : tasks) {
        adapted.push_back(inner_adapt_gd(*t.tr, theta, inner));
        mean_grad += t.tr->grad(theta);
    }
    mean_grad /= k;
    const Vec got = reptile_outer_update(theta, adapted, beta);
    const Vec want = theta - beta * alpha * mean_grad;
    EXPECT_LT((got - want).norm(), 1e-12);
}

TEST(Reptile, FullStepIsPlainAverage) {
    std::vector<Vec> adapted{make_vec({1.0}), make_vec({3.0})};
    EXPECT_DOUBLE_EQ(reptile_outer_update(make_vec({-7.0}), adapted, 1.0)[0], 2.0);
}

// ---------------------------------------------------------------------------
// iMAML

TEST(ImamlInnerSolve, ScalarClosedForm) {
    // unnormalized ridge loss (phi - 2)^2 with lambda = 2, theta = 0 -> phi = 1
    LinearModel model(1);
    std::vector<Sample> data{{make_vec({1.0}), make_vec({2.0})}};
    LinearObjective obj(model, data);
    InnerConfig cfg;
    cfg.lambda = 2.0;
    EXPECT_NEAR(imaml_inner_solve(obj, make_vec({0.0}), cfg)[0], 1.0, 1e-8);
}

TEST(ImamlInnerSolve, LargeLambdaPinsToTheta) {
    LinearModel model(1);
    std::vector<Sample> data{{make_vec({1.0}), make_vec({2.0})}};
    LinearObjective obj(model, data);
    InnerConfig cfg;
    cfg.lambda = 1e8;
    const Vec theta = make_vec({0.25});
    EXPECT_LT(std::abs(imaml_inner_solve(obj, theta, cfg)[0] - theta[0]), 1e-6);
}

TEST(ImamlInnerSolve, MatchesRidgeClosedForm) {
    RngStream rng(23);
    for (int inst = 0; inst < 5; ++inst) {
        auto t = random_ridge_task(rng, 8, 4, 3, 1.5);
        auto objs = ridge_objectives(t);
        InnerConfig cfg;
        cfg.lambda = t.lambda;
        const Vec theta = rng.normal_vec(3);
        const Vec closed = ridge_inner_closed_form_vec(t, theta);
        const Vec iterative = imaml_inner_solve(*objs.tr, theta, cfg);
        EXPECT_LT((closed - iterative).norm(), 1e-8);
    }
}

TEST(ImamlInnerSolve, FirstOrderOptimalityAtSolution) {
    RngStream rng(29);
    auto task = random_quadratic_task(rng, 4);
    InnerConfig cfg;
    cfg.lambda = 0.7;
    const Vec theta = rng.normal_vec(4);
    const Vec phi = imaml_inner_solve(*task.tr, theta, cfg);
    EXPECT_LE((task.tr->grad(phi) + cfg.lambda * (phi - theta)).norm(), cfg.tol_inner);
}

TEST(ImamlMetaGradient, IsotropicHessianScalesInverse) {
    // Hessian h I with h = 1, lambda = 1 halves the validation gradient
    Mat h = Mat::Identity(2, 2);
    TaskObjectives task{quadratic_objective(h, Vec::Zero(2)),
                        quadratic_objective(2.0 * h, make_vec({3.0, -1.0}))};
    InnerConfig cfg;
    cfg.lambda = 1.0;
    const Vec theta = make_vec({0.5, 0.8});
    const Vec phi = imaml_inner_solve(*task.tr, theta, cfg);
    const Vec got = imaml_meta_gradient(task, theta, cfg);
    const Vec want = task.va->grad(phi) / 2.0;
    EXPECT_LT((got - want).norm(), 1e-7);
}

TEST(ImamlMetaGradient, LargeLambdaReducesToValidationGradient) {
    RngStream rng(31);
    auto task = random_quadratic_task(rng, 3);
    InnerConfig cfg;
    cfg.lambda = 1e8;
    const Vec theta = rng.normal_vec(3);
    const Vec got = imaml_meta_gradient(task, theta, cfg);
    EXPECT_LT(relative_error(got, task.va->grad(theta)), 1e-6);
}

TEST(ImamlMetaGradient, MatchesFiniteDifferenceThroughInnerSolver) {
    double worst = 0;
    for (int inst = 0; inst < 10; ++inst) {
        RngStream rng(600 + inst);
        auto t = random_ridge_task(rng, 8, 5, 3, 2.0);
        auto task = ridge_objectives(t);
        InnerConfig cfg;
        cfg.lambda = t.lambda;
        cfg.tol_inner = 1e-11;
        const Vec theta = rng.normal_vec(3);
        const Vec got = imaml_meta_gradient(task, theta, cfg);
        const Vec want =
            fd_gradient([&](const Vec& th) { return imaml_meta_objective(task, th, cfg); }, theta, 1e-5);
        worst = std::max(worst, relative_error(got, want));
    }
    EXPECT_LT(worst, 1e-3);
}

TEST(ImamlMetaGradient, NeumannRouteExpectationAgreesWithCg) {
    // the randomized estimator is checked through its exact expectation,
    // enumerated over the truncation level N'
    RngStream rng(37);
    auto t = random_ridge_task(rng, 8, 5, 3, 4.0);
    auto task = ridge_objectives(t);
    InnerConfig cfg;
    cfg.lambda = 4.0;
    const Vec theta = rng.normal_vec(3);
    const Vec via_cg = imaml_meta_gradient(task, theta, cfg);

    const Vec phi = imaml_inner_solve(*task.tr, theta, cfg);
    const Vec b = task.va->grad(phi);
    auto map = [&](const Vec& v, std::uint64_t) { return Vec(task.tr->hvp(phi, v) + cfg.lambda * v); };
    double l_g = cfg.lambda;
    RngStream probe(5);
    for (int i = 0; i < 20; ++i) {
        Vec v = probe.normal_vec(3).normalized();
        l_g = std::max(l_g, v.dot(map(v, 0)));
    }
    l_g *= 1.1;
    const int n_total = 256;
    Vec expectation = Vec::Zero(3);
    RngStream dummy(0);
    for (int n_prime = 0; n_prime < n_total; ++n_prime)
        expectation += neumann_apply_fixed(map, b, l_g, n_total, n_prime, dummy);
    expectation *= cfg.lambda / n_total;
    EXPECT_LT(relative_error(expectation, via_cg), 1e-6);

    // and the sampled path is reproducible under a fixed stream
    cfg.inverse = InnerConfig::InverseMethod::neumann;
    cfg.neumann_n = 8;
    RngStream na(91), nb(91);
    const Vec da = imaml_meta_gradient(task, theta, cfg, &na);
    const Vec db = imaml_meta_gradient(task, theta, cfg, &nb);
    EXPECT_EQ((da - db).norm(), 0.0);
}

// ---------------------------------------------------------------------------
// Prox-MAML

TEST(ProxMaml, DirectSubstitution) {
    EXPECT_DOUBLE_EQ(prox_maml_outer_update(make_vec({1.0}), {make_vec({0.5})}, 0.1, 2.0)[0], 0.9);
}

TEST(ProxMaml, FixedPointAtMeanEqualsTheta) {
    const Vec theta = make_vec({1.3, -0.4});
    std::vector<Vec> adapted{theta, theta};
    const Vec out = prox_maml_outer_update(theta, adapted, 0.7, 3.0);
    EXPECT_LT((out - theta).norm(), 1e-15);
}

TEST(ProxMaml, UnitBetaLambdaLandsOnMean) {
    const Vec theta = make_vec({2.0});
    std::vector<Vec> adapted{make_vec({0.5}), make_vec({1.5})};
    EXPECT_DOUBLE_EQ(prox_maml_outer_update(theta, adapted, 0.5, 2.0)[0], 1.0);
}

// ---------------------------------------------------------------------------
// Evolution strategies

TEST(EsGradient, UnbiasedOnQuadratic) {
    // L(phi) = phi^2 at phi = 1: gradient 2, unbiased since Gaussian odd
    // moments vanish
    auto loss = [](const Vec& p) { return p[0] * p[0]; };
    RngStream rng(71);
    const int n = 100000;
    const double delta = 0.1;
    // accumulate per-draw terms to estimate the standard error
    double mean = 0, m2 = 0;
    RngStream draw = rng.derived(1);
    for (int i = 0; i < n; ++i) {
        const Vec u = draw.normal_vec(1);
        const double term = (u[0] / delta) * loss(make_vec({1.0 + delta * u[0]}));
        mean += term;
        m2 += term * term;
    }
    mean /= n;
    const double se = std::sqrt((m2 / n - mean * mean) / n);
    EXPECT_LT(std::abs(mean - 2.0), 4.0 * se);
    // and the library path reproduces the same estimator
    RngStream draw2 = rng.derived(1);
    const Vec est = es_gradient(loss, make_vec({1.0}), n, delta, draw2);
    EXPECT_NEAR(est[0], mean, 1e-9);
}

TEST(EsGradient, ConstantLossAveragesToZero) {
    auto loss = [](const Vec&) { return 3.0; };
    RngStream rng(72);
    const Vec est = es_gradient(loss, Vec::Zero(2), 200000, 0.5, rng);
    EXPECT_LT(est.norm(), 0.05);
}

TEST(EsGradient, DeterministicUnderFixedSeed) {
    auto loss = [](const Vec& p) { return p.squaredNorm(); };
    RngStream a(5), b(5);
    const Vec ga = es_gradient(loss, make_vec({1.0, 2.0}), 50, 0.1, a);
    const Vec gb = es_gradient(loss, make_vec({1.0, 2.0}), 50, 0.1, b);
    EXPECT_EQ(ga[0], gb[0]);
    EXPECT_EQ(ga[1], gb[1]);
}

TEST(EsHessian, SymmetricByConstruction) {
    auto loss = [](const Vec& p) { return p[0] * p[0] * p[1] + std::sin(p[1]); };
    RngStream rng(73);
    const Mat h = es_hessian(loss, make_vec({0.4, -0.2}), 64, 0.3, rng);
    EXPECT_LT((h - h.transpose()).norm(), 1e-14);
}

TEST(EsHessian, RecoversQuadraticCurvature) {
    const double curv = 3.0;
    auto loss = [curv](const Vec& p) { return 0.5 * curv * p[0] * p[0]; };
    RngStream rng(74);
    const Mat h = es_hessian(loss, make_vec({1.0}), 300000, 0.25, rng);
    EXPECT_NEAR(h(0, 0), curv, 0.4);
}

TEST(EsHessian, SingleDrawReproducible) {
    auto loss = [](const Vec& p) { return p.squaredNorm(); };
    RngStream a(6), b(6);
    const Mat ha = es_hessian(loss, make_vec({1.0}), 1, 0.2, a);
    const Mat hb = es_hessian(loss, make_vec({1.0}), 1, 0.2, b);
    EXPECT_EQ(ha(0, 0), hb(0, 0));
}

TEST(EsMaml, FirstOrderDirectionNearExactFomaml) {
    // loss levels near zero at the probe points keep the level-term variance
    // of the estimator low at small delta
    Mat a = Mat::Identity(2, 2);
    TaskObjectives task{quadratic_objective(a, make_vec({0.001, 0.001})),
                        quadratic_objective(a, make_vec({0.008, -0.006}))};
    InnerConfig inner;
    inner.alpha = 0.1;
    OuterConfig outer;
    outer.beta = 1.0;
    outer.es_n_points = 100000;
    outer.es_delta = 1e-3;
    RngStream rng(75);
    const Vec theta = make_vec({0.0, 0.0});
    const Vec next = es_maml_outer_update(theta, {task}, inner, outer, EsVariant::first_order, rng);
    const Vec es_dir = theta - next;
    const Vec exact_dir = outer.beta * fomaml_meta_gradient(task, theta, inner);
    const double cosine = es_dir.dot(exact_dir) / (es_dir.norm() * exact_dir.norm());
    EXPECT_GT(cosine, std::cos(0.05));  // within 5% angular error
}

TEST(EsMaml, ZeroAlphaFirstOrderIsEsValidationGradient) {
    RngStream rng(76);
    auto task = random_quadratic_task(rng, 2);
    InnerConfig inner;
    inner.alpha = 0.0;
    OuterConfig outer;
    outer.beta = 0.5;
    outer.es_n_points = 64;
    outer.es_delta = 0.1;
    RngStream root(921);
    const Vec theta = rng.normal_vec(2);
    const Vec next = es_maml_outer_update(theta, {task}, inner, outer, EsVariant::first_order, root);
    // replicate the stream discipline of the update
    auto tr_loss = [&](const Vec& p) { return task.tr->loss(p); };
    auto va_loss = [&](const Vec& p) { return task.va->loss(p); };
    RngStream r_inner = root.derived({std::uint64_t(0), 0});
    (void)es_gradient(tr_loss, theta, outer.es_n_points, outer.es_delta, r_inner);
    RngStream r_va = root.derived({std::uint64_t(0), 1});
    const Vec g_va = es_gradient(va_loss, theta, outer.es_n_points, outer.es_delta, r_va);
    EXPECT_LT((next - (theta - outer.beta * g_va)).norm(), 1e-14);
}

TEST(EsMaml, DeterministicUnderFixedStream) {
    RngStream rng(77);
    auto task = random_quadratic_task(rng, 2);
    InnerConfig inner;
    inner.alpha = 0.05;
    OuterConfig outer;
    outer.es_n_points = 32;
    outer.es_delta = 0.2;
    const Vec theta = rng.normal_vec(2);
    const Vec a = es_maml_outer_update(theta, {task}, inner, outer, EsVariant::hessian, RngStream(3));
    const Vec b = es_maml_outer_update(theta, {task}, inner, outer, EsVariant::hessian, RngStream(3));
    EXPECT_EQ(a[0], b[0]);
    EXPECT_EQ(a[1], b[1]);
}

// ---------------------------------------------------------------------------
// Sharp-MAML

TEST(SharpMaml, ZeroRadiiReproduceFomamlBitExactly) {
    RngStream rng(81);
    Mlp mlp(1, {4}, 1);
    auto task = random_mlp_task(rng, mlp);
    InnerConfig inner;
    inner.alpha = 0.05;
    OuterConfig outer;
    outer.sharp_alpha_in = 0.0;
    outer.sharp_alpha_ot = 0.0;
    const Vec theta = mlp.init_params(rng);
    const Vec sharp = sharp_maml_meta_gradient(task, theta, inner, outer);
    const Vec fo = fomaml_meta_gradient(task, theta, inner);
    for (int i = 0; i < theta.size(); ++i) EXPECT_EQ(sharp[i], fo[i]);
}

TEST(SharpMaml, InnerPerturbationHasExactRadius) {
    RngStream rng(82);
    auto task = random_quadratic_task(rng, 3);
    InnerConfig inner;
    inner.alpha = 0.1;
    OuterConfig outer;
    outer.sharp_alpha_in = 0.37;
    outer.sharp_alpha_ot = 0.11;
    const Vec theta = rng.normal_vec(3);
    const SharpMamlPoint pt = sharp_maml_adapt(task, theta, inner, outer);
    EXPECT_NEAR(pt.eps_inner.norm(), 0.37, 1e-12);
    EXPECT_NEAR(pt.eps_outer.norm(), 0.11, 1e-12);
}

TEST(SharpMaml, ZeroGradientGuardGivesZeroPerturbation) {
    // training gradient vanishes at the minimizer
    Mat a = Mat::Identity(2, 2);
    const Vec c = make_vec({0.4, -0.6});
    TaskObjectives task{quadratic_objective(a, c), quadratic_objective(a, Vec::Zero(2))};
    InnerConfig inner;
    inner.alpha = 0.1;
    OuterConfig outer;
    outer.sharp_alpha_in = 0.5;
    outer.sharp_alpha_ot = 0.0;
    const SharpMamlPoint pt = sharp_maml_adapt(task, c, inner, outer);
    EXPECT_EQ(pt.eps_inner.norm(), 0.0);
}

TEST(SharpMaml, ScalarQuadraticSymbolicOracle) {
    // L_tr = 0.5 (phi - 1)^2, L_va = 0.5 (phi - 3)^2, theta = 2
    auto task = scalar_quadratic_task(1.0, 3.0);
    InnerConfig inner;
    inner.alpha = 0.25;
    OuterConfig outer;
    outer.sharp_alpha_in = 0.2;
    outer.sharp_alpha_ot = 0.1;
    const double theta = 2.0;
    // worked symbolically: grad_tr(2) = 1 > 0 so eps_k = +0.2
    const double eps_k = 0.2;
    const double phi_tilde = theta - 0.25 * (theta + eps_k - 1.0);
    const double gva = phi_tilde - 3.0;  // negative, so eps = -0.1
    const double eps = 0.1 * (gva < 0 ? -1.0 : 1.0);
    const double phi_sm = theta + eps - 0.25 * (theta + eps + eps_k - 1.0);
    const double expected = phi_sm - 3.0;
    const Vec got = sharp_maml_meta_gradient(task, make_vec({theta}), inner, outer);
    EXPECT_NEAR(got[0], expected, 1e-14);
}

TEST(SharpMaml, MatchesFiniteDifferenceOfFrozenObjective) {
    double worst = 0;
    InnerConfig inner;
    inner.alpha = 0.05;
    OuterConfig outer;
    outer.sharp_alpha_in = 0.1;
    outer.sharp_alpha_ot = 0.05;
    for (int inst = 0; inst < 10; ++inst) {
        RngStream rng(700 + inst);
        Mlp mlp(1, {4}, 1);
        auto task = random_mlp_task(rng, mlp);
        const Vec theta = mlp.init_params(rng);
        const Vec got = sharp_maml_meta_gradient(task, theta, inner, outer);
        auto frozen = sharp_maml_frozen_objective(task, theta, inner, outer);
        const Vec want = fd_gradient(frozen, theta);
        worst = std::max(worst, relative_error(got, want));
    }
    EXPECT_LT(worst, 1e-3);
}

// ---------------------------------------------------------------------------
// CAVIA

namespace {

TaskDataset random_ctx_task(RngStream& rng, int n_tr, int n_va) {
    TaskDataset t;
    for (int i = 0; i < n_tr; ++i) t.train.push_back({rng.normal_vec(1), rng.normal_vec(1)});
    for (int i = 0; i < n_va; ++i) t.val.push_back({rng.normal_vec(1), rng.normal_vec(1)});
    return t;
}

}  // namespace

TEST(Cavia, ZeroContextWeightsAdaptToZero) {
    RngStream rng(91);
    Mlp mlp(1, {4}, 1, Activation::tanh, 2);
    auto task = random_ctx_task(rng, 5, 5);
    // zero parameters: the context columns carry no signal
    const Vec theta = Vec::Zero(mlp.param_count());
    InnerConfig cfg;
    cfg.alpha = 0.3;
    EXPECT_EQ(cavia_adapt(mlp, theta, task.train, LossKind::mse_mean, cfg).norm(), 0.0);
}

TEST(Cavia, ZeroAlphaAdaptsToZero) {
    RngStream rng(92);
    Mlp mlp(1, {4}, 1, Activation::tanh, 2);
    auto task = random_ctx_task(rng, 5, 5);
    const Vec theta = mlp.init_params(rng);
    InnerConfig cfg;
    cfg.alpha = 0.0;
    EXPECT_EQ(cavia_adapt(mlp, theta, task.train, LossKind::mse_mean, cfg).norm(), 0.0);
}

TEST(Cavia, LinearInContextClosedForm) {
    // single affine layer: f = w x + w_c c + b; the context gradient of the
    // mean squared loss is (2/N) sum (f_i - y_i) w_c
    RngStream rng(93);
    Mlp mlp(1, {}, 1, Activation::tanh, 1);
    auto task = random_ctx_task(rng, 4, 4);
    const Vec theta = mlp.init_params(rng);
    const double w_c = theta[1];  // weights ordered [x-weight, ctx-weight], then bias
    InnerConfig cfg;
    cfg.alpha = 0.2;
    double acc = 0;
    for (const auto& s : task.train) acc += (mlp.forward(theta, s.x, Vec::Zero(1))[0] - s.y[0]) * w_c;
    const double expected = -cfg.alpha * 2.0 * acc / static_cast<double>(task.train.size());
    EXPECT_NEAR(cavia_adapt(mlp, theta, task.train, LossKind::mse_mean, cfg)[0], expected, 1e-12);
}

TEST(Cavia, ZeroAlphaMetaGradientIsPlainGradient) {
    RngStream rng(94);
    Mlp mlp(1, {4}, 1, Activation::tanh, 2);
    auto task = random_ctx_task(rng, 5, 5);
    const Vec theta = mlp.init_params(rng);
    InnerConfig cfg;
    cfg.alpha = 0.0;
    const Vec got = cavia_meta_gradient(mlp, theta, task, LossKind::mse_mean, cfg);
    const Vec want = mlp.gradients(theta, task.val, LossKind::mse_mean, Vec::Zero(2)).params;
    EXPECT_EQ((got - want).norm(), 0.0);
}

TEST(Cavia, ContextIndependentModelDropsSecondTerm) {
    RngStream rng(95);
    Mlp mlp(1, {3}, 1, Activation::tanh, 1);
    auto task = random_ctx_task(rng, 4, 4);
    Vec theta = mlp.init_params(rng);
    // zero the context column of the first layer: the 3x2 weight block is
    // stored column-major with the context column second
    for (int i = 0; i < 3; ++i) theta[3 + i] = 0.0;
    InnerConfig cfg;
    cfg.alpha = 0.4;
    const Vec got = cavia_meta_gradient(mlp, theta, task, LossKind::mse_mean, cfg);
    const Vec want = mlp.gradients(theta, task.val, LossKind::mse_mean, Vec::Zero(1)).params;
    EXPECT_LT((got - want).norm(), 1e-13);
}

TEST(Cavia, MatchesFiniteDifferenceHypergradient) {
    double worst = 0;
    InnerConfig cfg;
    cfg.alpha = 0.1;
    for (int inst = 0; inst < 10; ++inst) {
        RngStream rng(800 + inst);
        Mlp mlp(1, {5}, 1, Activation::tanh, 2);
        auto task = random_ctx_task(rng, 5, 6);
        const Vec theta = mlp.init_params(rng);
        const Vec got = cavia_meta_gradient(mlp, theta, task, LossKind::mse_mean, cfg);
        const Vec want = fd_gradient(
            [&](const Vec& th) { return cavia_meta_objective(mlp, th, task, LossKind::mse_mean, cfg); }, theta);
        worst = std::max(worst, relative_error(got, want));
    }
    EXPECT_LT(worst, 1e-3);
}

// ---------------------------------------------------------------------------
// Modular meta-learning

TEST(ModularAssign, PicksArgmin) {
    auto loss = [](const Assignment& a) { return a.slots[0] == 0 ? 0.3 : 0.1; };
    const Assignment got = modular_assign(loss, 2, 1, AssignMethod::exhaustive);
    EXPECT_EQ(got.slots[0], 1);
}

TEST(ModularAssign, TieBreakPrefersLowestIndex) {
    auto loss = [](const Assignment&) { return 1.0; };
    const Assignment got = modular_assign(loss, 3, 2, AssignMethod::exhaustive);
    EXPECT_EQ(got.slots, (std::vector<int>{0, 0}));
}

TEST(ModularAssign, BudgetExceededThrows) {
    auto loss = [](const Assignment&) { return 0.0; };
    EXPECT_THROW(modular_assign(loss, 8, 5, AssignMethod::exhaustive), std::invalid_argument);
}

TEST(ModularAssign, ExhaustiveDominatesEveryAlternative) {
    RngStream rng(101);
    for (int inst = 0; inst < 5; ++inst) {
        std::vector<double> table(9);
        RngStream r = rng.derived(inst);
        for (double& v : table) v = r.uniform();
        auto loss = [&table](const Assignment& a) { return table[a.slots[0] * 3 + a.slots[1]]; };
        const Assignment best = modular_assign(loss, 3, 2, AssignMethod::exhaustive);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) EXPECT_LE(loss(best), loss(Assignment{{i, j}}));
    }
}

TEST(ModularAssign, AnnealingNeverBeatsExhaustiveAndUsuallyTies) {
    int ties = 0;
    const int trials = 50;
    for (int trial = 0; trial < trials; ++trial) {
        RngStream r(1000 + trial);
        std::vector<double> table(9);
        for (double& v : table) v = r.uniform();
        auto loss = [&table](const Assignment& a) { return table[a.slots[0] * 3 + a.slots[1]]; };
        const Assignment best = modular_assign(loss, 3, 2, AssignMethod::exhaustive);
        const Assignment ann = modular_assign(loss, 3, 2, AssignMethod::simulated_annealing, r.derived(7));
        EXPECT_GE(loss(ann), loss(best) - 1e-15);
        if (std::abs(loss(ann) - loss(best)) < 1e-15) ++ties;
    }
    EXPECT_GE(ties, static_cast<int>(0.8 * trials));
}

namespace {

// composed model for modular tests: per-layer scalar block, quadratic loss in
// the concatenated parameters
struct QuadraticComposedTask {
    Vec target_tr;
    Vec target_va;
    const ModuleSet* mset;

    Vec compose(const Assignment& a) const {
        Vec out(mset->layer_count);
        for (int l = 0; l < mset->layer_count; ++l) out[l] = mset->modules[a.slots[l]][0];
        return out;
    }
    ModularTask hooks() const {
        auto self = *this;
        ModularTask t;
        t.train_loss = [self](const Assignment& a) { return (self.compose(a) - self.target_tr).squaredNorm(); };
        t.val_grad_blocks = [self](const Assignment& a) {
            const Vec composed = self.compose(a);
            std::vector<Vec> blocks;
            for (int l = 0; l < self.mset->layer_count; ++l)
                blocks.push_back(make_vec({2.0 * (composed[l] - self.target_va[l])}));
            return blocks;
        };
        return t;
    }
};

}  // namespace

TEST(ModularOuterStep, UnselectedModuleUnchanged) {
    ModuleSet mset;
    mset.modules = {make_vec({0.0}), make_vec({5.0})};
    mset.layer_count = 1;
    QuadraticComposedTask task{make_vec({0.1}), make_vec({0.2}), &mset};
    const ModuleSet out = modular_outer_step(mset, {task.hooks()}, 0.1, AssignMethod::exhaustive, RngStream(1));
    // module 0 is closer to the training target, so module 1 is never selected
    EXPECT_EQ(out.modules[1][0], 5.0);
    EXPECT_NE(out.modules[0][0], 0.0);
}

TEST(ModularOuterStep, SingleTaskSingleModuleIsPlainGradientStep) {
    ModuleSet mset;
    mset.modules = {make_vec({1.0})};
    mset.layer_count = 1;
    QuadraticComposedTask task{make_vec({0.0}), make_vec({3.0}), &mset};
    const double beta = 0.05;
    const ModuleSet out = modular_outer_step(mset, {task.hooks()}, beta, AssignMethod::exhaustive, RngStream(1));
    EXPECT_NEAR(out.modules[0][0], 1.0 - beta * 2.0 * (1.0 - 3.0), 1e-15);
}

TEST(ModularOuterStep, TwoTaskHandAccumulatedOracle) {
    ModuleSet mset;
    mset.modules = {make_vec({0.0}), make_vec({1.0})};
    mset.layer_count = 1;
    QuadraticComposedTask t1{make_vec({-0.1}), make_vec({0.5}), &mset};  // selects module 0
    QuadraticComposedTask t2{make_vec({0.9}), make_vec({2.0}), &mset};   // selects module 1
    const double beta = 0.1;
    const ModuleSet out =
        modular_outer_step(mset, {t1.hooks(), t2.hooks()}, beta, AssignMethod::exhaustive, RngStream(1));
    EXPECT_NEAR(out.modules[0][0], 0.0 - (beta / 2) * 2.0 * (0.0 - 0.5), 1e-15);
    EXPECT_NEAR(out.modules[1][0], 1.0 - (beta / 2) * 2.0 * (1.0 - 2.0), 1e-15);
}

// ---------------------------------------------------------------------------
// Joint learning and the meta-training loop

TEST(JointLearning, SingleTaskIsPlainSgdStep) {
    RngStream rng(111);
    auto task = random_quadratic_task(rng, 3);
    const Vec theta = rng.normal_vec(3);
    const Vec got = joint_learning_step(theta, {task}, 0.2);
    EXPECT_LT((got - (theta - 0.2 * task.tr->grad(theta))).norm(), 1e-15);
}

TEST(JointLearning, OppositeGradientsCancel) {
    const Vec slope = make_vec({1.0, -2.0});
    auto up = std::make_shared<FunctionalObjective>(
        2, [slope](const Vec& p) { return slope.dot(p); }, [slope](const Vec&) { return slope; });
    auto down = std::make_shared<FunctionalObjective>(
        2, [slope](const Vec& p) { return -slope.dot(p); }, [slope](const Vec&) { return Vec(-slope); });
    const Vec theta = make_vec({0.3, 0.4});
    const Vec got = joint_learning_step(theta, {{up, up}, {down, down}}, 0.5);
    EXPECT_EQ((got - theta).norm(), 0.0);
}

TEST(JointLearning, RandomBatchMatchesManualSum) {
    RngStream rng(112);
    std::vector<TaskObjectives> tasks;
    for (int i = 0; i < 4; ++i) tasks.push_back(random_quadratic_task(rng, 2));
    const Vec theta = rng.normal_vec(2);
    Vec g = Vec::Zero(2);
    for (const auto& t : tasks) g += t.tr->grad(theta);
    const Vec want = theta - 0.1 * g / 4.0;
    EXPECT_LT((joint_learning_step(theta, tasks, 0.1) - want).norm(), 1e-15);
}

TEST(MetaTrain, ZeroItersReturnsInitialState) {
    RngStream rng(113);
    std::vector<TaskObjectives> tasks{random_quadratic_task(rng, 2)};
    InnerConfig inner;
    OuterConfig outer;
    outer.n_meta_iters = 0;
    const Vec theta0 = rng.normal_vec(2);
    const auto res = meta_train_from(MetaAlgorithm::maml, theta0, tasks, inner, outer, RngStream(1));
    EXPECT_EQ((res.theta - theta0).norm(), 0.0);
    EXPECT_TRUE(res.loss_trace.empty());
}

TEST(MetaTrain, QuadraticFamilyLossDecreases) {
    RngStream rng(114);
    std::vector<TaskObjectives> tasks;
    for (int i = 0; i < 6; ++i) tasks.push_back(random_quadratic_task(rng, 3));
    InnerConfig inner;
    inner.alpha = 0.1;
    OuterConfig outer;
    outer.beta = 0.05;
    outer.n_meta_iters = 200;
    outer.meta_batch_size = 6;  // full batch: the trace is the exact meta-loss
    const Vec theta0 = rng.normal_vec(3);
    for (MetaAlgorithm algo : {MetaAlgorithm::maml, MetaAlgorithm::fomaml, MetaAlgorithm::reptile}) {
        const auto res = meta_train_from(algo, theta0, tasks, inner, outer, RngStream(2));
        EXPECT_LT(res.loss_trace.back(), res.loss_trace.front()) << to_string(algo);
    }
}

TEST(MetaTrain, IdenticalSeedsGiveIdenticalTraces) {
    RngStream rng(115);
    std::vector<TaskObjectives> tasks;
    for (int i = 0; i < 5; ++i) tasks.push_back(random_quadratic_task(rng, 2));
    InnerConfig inner;
    inner.alpha = 0.1;
    OuterConfig outer;
    outer.beta = 0.05;
    outer.n_meta_iters = 50;
    outer.meta_batch_size = 2;
    const Vec theta0 = rng.normal_vec(2);
    const auto a = meta_train_from(MetaAlgorithm::maml, theta0, tasks, inner, outer, RngStream(9));
    const auto b = meta_train_from(MetaAlgorithm::maml, theta0, tasks, inner, outer, RngStream(9));
    ASSERT_EQ(a.loss_trace.size(), b.loss_trace.size());
    for (std::size_t i = 0; i < a.loss_trace.size(); ++i) EXPECT_EQ(a.loss_trace[i], b.loss_trace[i]);
    EXPECT_EQ((a.theta - b.theta).norm(), 0.0);
}

TEST(MetaTrain, DivergenceGuardThrows) {
    RngStream rng(116);
    std::vector<TaskObjectives> tasks{random_quadratic_task(rng, 2)};
    InnerConfig inner;
    inner.alpha = 0.1;
    OuterConfig outer;
    outer.beta = 1e9;  // absurd stepsize forces blow-up
    outer.n_meta_iters = 200;
    EXPECT_THROW(meta_train_from(MetaAlgorithm::maml, rng.normal_vec(2), tasks, inner, outer, RngStream(3)),
                 numeric_error);
}
