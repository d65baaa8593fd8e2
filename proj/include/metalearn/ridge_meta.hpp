#pragma once

#include "metalearn/core.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

// Closed-form proximal meta-learning for linear ridge regression. The inner
// solution and the meta-solution are both analytic, which makes this module
// the exactness anchor the iterative solvers are checked against. Multi-output
// targets are handled column-wise as q independent ridge problems sharing X.

namespace metalearn {

struct RidgeTask {
    Mat x_tr;  // N_tr x d
    Mat y_tr;  // N_tr x q
    Mat x_va;  // N_va x d
    Mat y_va;  // N_va x q
    double lambda = 1.0;

    void validate() const {
        if (!(lambda > 0)) throw std::invalid_argument("RidgeTask: lambda must be positive");
        if (x_tr.cols() != x_va.cols()) throw std::invalid_argument("RidgeTask: input dimension mismatch");
        if (y_tr.cols() != y_va.cols()) throw std::invalid_argument("RidgeTask: target dimension mismatch");
        if (x_tr.rows() != y_tr.rows() || x_va.rows() != y_va.rows())
            throw std::invalid_argument("RidgeTask: row count mismatch");
    }
};

inline constexpr double kConditionWarnThreshold = 1e12;
inline constexpr double kRankRelTolerance = 1e-12;

struct RidgeSolution {
    Mat phi;  // d x q
    bool ill_conditioned = false;
    double condition_estimate = 0.0;
};

// phi = (X'X + (lambda/2) I)^{-1} (X'y + (lambda/2) theta), one SPD solve
// shared by all target columns.
inline RidgeSolution ridge_inner_closed_form(const RidgeTask& task, const Mat& theta) {
    task.validate();
    const int d = static_cast<int>(task.x_tr.cols());
    const int q = static_cast<int>(task.y_tr.cols());
    if (theta.rows() != d || theta.cols() != q) throw std::invalid_argument("ridge_inner: theta shape mismatch");
    const Mat a = task.x_tr.transpose() * task.x_tr + 0.5 * task.lambda * Mat::Identity(d, d);
    Eigen::SelfAdjointEigenSolver<Mat> es(a);
    RidgeSolution out;
    out.condition_estimate = es.eigenvalues().maxCoeff() / std::max(es.eigenvalues().minCoeff(), 1e-300);
    out.ill_conditioned = out.condition_estimate > kConditionWarnThreshold;
    const Mat rhs = task.x_tr.transpose() * task.y_tr + 0.5 * task.lambda * theta;
    out.phi = Eigen::LLT<Mat>(a).solve(rhs);
    return out;
}

// flattened-parameter convenience overload (column-major, matching LinearModel)
inline Vec ridge_inner_closed_form_vec(const RidgeTask& task, const Vec& theta) {
    const int d = static_cast<int>(task.x_tr.cols());
    const int q = static_cast<int>(task.y_tr.cols());
    Eigen::Map<const Mat> th(theta.data(), d, q);
    const Mat phi = ridge_inner_closed_form(task, th).phi;
    return Eigen::Map<const Vec>(phi.data(), phi.size());
}

struct RidgeMetaSolution {
    Mat theta;  // d x q
    bool rank_deficient = false;  // minimum-norm pseudo-inverse solution used
    int rank = 0;
};

// Stacks the preconditioned validation rows (lambda/2) (A_k)^{-1} x and the
// transformed targets y - y_tr' X_tr (A_k)^{-1} x across tasks, then returns
// the least-squares solution; rank decisions use a singular value
// factorization with relative tolerance 1e-12.
inline RidgeMetaSolution ridge_meta_closed_form(const std::vector<RidgeTask>& tasks) {
    if (tasks.empty()) throw std::invalid_argument("ridge_meta_closed_form: empty task list");
    const int d = static_cast<int>(tasks.front().x_tr.cols());
    const int q = static_cast<int>(tasks.front().y_tr.cols());
    int rows = 0;
    for (const RidgeTask& t : tasks) {
        t.validate();
        if (t.x_tr.cols() != d || t.y_tr.cols() != q)
            throw std::invalid_argument("ridge_meta_closed_form: inconsistent task dimensions");
        rows += static_cast<int>(t.x_va.rows());
    }
    Mat x_tilde(rows, d);
    Mat y_tilde(rows, q);
    int at = 0;
    for (const RidgeTask& t : tasks) {
        const Mat a = t.x_tr.transpose() * t.x_tr + 0.5 * t.lambda * Mat::Identity(d, d);
        const Eigen::LLT<Mat> llt(a);
        for (int i = 0; i < t.x_va.rows(); ++i) {
            const Vec x = t.x_va.row(i).transpose();
            const Vec w = llt.solve(x);
            x_tilde.row(at) = (0.5 * t.lambda) * w.transpose();
            const Vec pred = t.x_tr * w;  // (X_tr A^{-1} x)
            for (int c = 0; c < q; ++c) y_tilde(at, c) = t.y_va(i, c) - t.y_tr.col(c).dot(pred);
            ++at;
        }
    }
    Eigen::JacobiSVD<Mat> svd(x_tilde, Eigen::ComputeThinU | Eigen::ComputeThinV);
    svd.setThreshold(kRankRelTolerance);
    RidgeMetaSolution out;
    out.rank = static_cast<int>(svd.rank());
    out.rank_deficient = out.rank < d;
    out.theta = svd.solve(y_tilde);
    return out;
}

// meta-objective of the ridge family: sum of per-task validation losses of the
// closed-form inner solutions (the quantity the meta-solution minimizes)
inline double ridge_meta_objective(const std::vector<RidgeTask>& tasks, const Mat& theta) {
    double total = 0.0;
    for (const RidgeTask& t : tasks) {
        const Mat phi = ridge_inner_closed_form(t, theta).phi;
        total += (t.x_va * phi - t.y_va).squaredNorm();
    }
    return total;
}

}  // namespace metalearn
