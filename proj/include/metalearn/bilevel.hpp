#pragma once

#include "metalearn/core.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

// Generic stochastic bilevel solver: the implicit hypergradient, the
// randomized truncated-Neumann Hessian-inverse estimator, and the alternating
// SGD loop that couples them. Meta-learning algorithms are recoverable as
// instantiations of the problem structure.

namespace metalearn {

// Stochastic evaluators take a 64-bit sample key that selects the noise
// realization; deterministic problems ignore it. Key 0 is used by convention
// for population (noise-free) evaluations.
inline constexpr std::uint64_t kPopulationSample = 0;

struct BilevelProblem {
    int theta_dim = 0;
    int phi_dim = 0;

    std::function<double(const Vec&, const Vec&, std::uint64_t)> f_value;
    std::function<Vec(const Vec&, const Vec&, std::uint64_t)> f_grad_theta;
    std::function<Vec(const Vec&, const Vec&, std::uint64_t)> f_grad_phi;

    std::function<double(const Vec&, const Vec&, std::uint64_t)> g_value;
    std::function<Vec(const Vec&, const Vec&, std::uint64_t)> g_grad_phi;
    // v in phi-space -> phi-space
    std::function<Vec(const Vec&, const Vec&, const Vec&, std::uint64_t)> g_hvp_phiphi;
    // v in phi-space -> theta-space
    std::function<Vec(const Vec&, const Vec&, const Vec&, std::uint64_t)> g_hvp_thetaphi;

    // upper bound on the lower-level curvature; <= 0 requests estimation
    double smoothness_lg = 0.0;

    // optional tight lower-level solution, used for diagnostics and oracles
    std::function<Vec(const Vec&)> exact_lower_solution;
};

// ---------------------------------------------------------------------------
// Conjugate gradient on an SPD operator.

inline Vec cg_solve(const std::function<Vec(const Vec&)>& apply, const Vec& b, int max_iters, double tol) {
    Vec x = Vec::Zero(b.size());
    Vec r = b;
    Vec p = r;
    double rs = r.squaredNorm();
    const double stop = tol * tol * std::max(b.squaredNorm(), 1e-300);
    for (int it = 0; it < max_iters && rs > stop; ++it) {
        const Vec ap = apply(p);
        const double curvature = p.dot(ap);
        if (!(curvature > 0.0))
            throw numeric_error("cg_solve: non-positive curvature at iteration " + std::to_string(it));
        const double a = rs / curvature;
        x += a * p;
        r -= a * ap;
        const double rs_new = r.squaredNorm();
        p = r + (rs_new / rs) * p;
        rs = rs_new;
    }
    return x;
}

// ---------------------------------------------------------------------------
// Randomized truncated-Neumann estimate of [H]^{-1} v for H with spectrum in
// (0, L_g]. The truncation level N' is drawn uniformly from {0, ..., N-1}
// with the empty product equal to the identity, so the expectation over N'
// equals the truncated series (1/L_g) sum_{n=0}^{N-1} (I - H/L_g)^n v.

inline Vec neumann_apply_fixed(const std::function<Vec(const Vec&, std::uint64_t)>& hvp_sample, const Vec& v,
                               double l_g, int n_total, int n_prime, RngStream& rng) {
    if (n_total < 1) throw std::invalid_argument("neumann: N must be at least 1");
    if (n_prime < 0 || n_prime >= n_total) throw std::invalid_argument("neumann: N' out of range");
    if (!(l_g > 0)) throw std::invalid_argument("neumann: L_g must be positive");
    Vec w = v;
    for (int n = 1; n <= n_prime; ++n) w -= hvp_sample(w, rng.next_u64()) / l_g;
    return (static_cast<double>(n_total) / l_g) * w;
}

inline Vec neumann_inverse_apply(const std::function<Vec(const Vec&, std::uint64_t)>& hvp_sample, const Vec& v,
                                 double l_g, int n_total, RngStream& rng) {
    if (n_total < 1) throw std::invalid_argument("neumann: N must be at least 1");
    const int n_prime = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n_total)));
    return neumann_apply_fixed(hvp_sample, v, l_g, n_total, n_prime, rng);
}

// deterministic reference: (1/L_g) sum_{n=0}^{N-1} (I - H/L_g)^n v
inline Vec neumann_truncated_series(const std::function<Vec(const Vec&)>& hvp, const Vec& v, double l_g,
                                    int n_total) {
    Vec w = v;
    Vec acc = v;
    for (int n = 1; n < n_total; ++n) {
        w -= hvp(w) / l_g;
        acc += w;
    }
    return acc / l_g;
}

// ---------------------------------------------------------------------------
// Implicit hypergradient of the population objective at (theta, phi):
// grad_theta f - Hess_thetaphi g . [Hess_phiphi g]^{-1} grad_phi f.
// Dense solve for small lower problems, CG on HVPs otherwise.

inline constexpr int kDenseSolveMaxDim = 64;

inline Vec implicit_hypergradient(const BilevelProblem& problem, const Vec& theta, const Vec& phi,
                                  int cg_iters = 200, double cg_tol = 1e-12) {
    const Vec b = problem.f_grad_phi(theta, phi, kPopulationSample);
    const auto apply = [&](const Vec& v) { return problem.g_hvp_phiphi(theta, phi, v, kPopulationSample); };
    Vec x;
    if (problem.phi_dim <= kDenseSolveMaxDim) {
        Mat h(problem.phi_dim, problem.phi_dim);
        Vec e = Vec::Zero(problem.phi_dim);
        for (int j = 0; j < problem.phi_dim; ++j) {
            e[j] = 1.0;
            h.col(j) = apply(e);
            e[j] = 0.0;
        }
        Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (h + h.transpose()));
        const double min_eig = es.eigenvalues().minCoeff();
        const double max_eig = es.eigenvalues().cwiseAbs().maxCoeff();
        if (min_eig <= 1e-12 * std::max(max_eig, 1.0))
            throw numeric_error("implicit_hypergradient: singular lower Hessian, minimal eigenvalue ~ " +
                                std::to_string(min_eig));
        x = es.eigenvectors() * (es.eigenvalues().cwiseInverse().asDiagonal() *
                                 (es.eigenvectors().transpose() * b));
    } else {
        x = cg_solve(apply, b, cg_iters, cg_tol);
    }
    return problem.f_grad_theta(theta, phi, kPopulationSample) -
           problem.g_hvp_thetaphi(theta, phi, x, kPopulationSample);
}

// ---------------------------------------------------------------------------
// ALSET: T lower-level SGD steps per upper-level step, upper direction built
// from the biased Neumann-estimated hypergradient, stepsizes alpha/sqrt(I)
// and beta/sqrt(I).

struct AlsetConfig {
    int lower_steps_per_outer = 1;  // T
    int outer_iters = 100;          // I_max
    int neumann_n = 4;
    double alpha = 1.0;  // base upper stepsize
    double beta = 1.0;   // base lower stepsize
    double strong_convexity_mu = 1e-10;
    int rayleigh_probes = 10;
    double divergence_guard = 1e12;
    bool record_diagnostics = true;
};

struct AlsetDiagnostics {
    std::vector<double> hypergrad_sq_norm;  // ||grad L(theta^i)||^2 against the tight lower solution
    std::vector<double> lower_gap_sq;       // ||phi^i - phi*(theta^i)||^2
};

struct AlsetResult {
    std::vector<Vec> theta_trajectory;
    std::vector<Vec> phi_trajectory;
    AlsetDiagnostics diagnostics;
    Vec theta;
    Vec phi;
};

inline double estimate_smoothness_lg(const BilevelProblem& problem, const Vec& theta, const Vec& phi,
                                     RngStream& rng, int probes = 20) {
    double largest = 0.0;
    for (int i = 0; i < probes; ++i) {
        Vec v = rng.normal_vec(problem.phi_dim);
        v.normalize();
        largest = std::max(largest, v.dot(problem.g_hvp_phiphi(theta, phi, v, rng.next_u64())));
    }
    if (!(largest > 0)) throw numeric_error("estimate_smoothness_lg: no positive curvature found");
    return 1.1 * largest;
}

inline void check_lower_strong_convexity(const BilevelProblem& problem, const Vec& theta, const Vec& phi,
                                         double mu, int probes, RngStream& rng) {
    for (int i = 0; i < probes; ++i) {
        Vec v = rng.normal_vec(problem.phi_dim);
        v.normalize();
        const double quotient = v.dot(problem.g_hvp_phiphi(theta, phi, v, kPopulationSample));
        if (!(quotient > mu))
            throw numeric_error("alset: lower objective fails the strong-convexity probe, Rayleigh quotient " +
                                std::to_string(quotient));
    }
}

inline AlsetResult alset_solve(const BilevelProblem& problem, const Vec& theta0, const Vec& phi0,
                               const AlsetConfig& cfg, const RngStream& root) {
    if (cfg.lower_steps_per_outer < 1 || cfg.outer_iters < 1)
        throw std::invalid_argument("alset: T and I_max must be at least 1");
    AlsetResult out;
    out.theta = theta0;
    out.phi = phi0;

    RngStream setup = root.derived(0xA15E7);
    check_lower_strong_convexity(problem, theta0, phi0, cfg.strong_convexity_mu, cfg.rayleigh_probes, setup);
    const double l_g =
        problem.smoothness_lg > 0 ? problem.smoothness_lg : estimate_smoothness_lg(problem, theta0, phi0, setup);

    const double root_i = std::sqrt(static_cast<double>(cfg.outer_iters));
    const double alpha_i = cfg.alpha / root_i;
    const double beta_i = cfg.beta / root_i;

    for (int i = 0; i < cfg.outer_iters; ++i) {
        out.theta_trajectory.push_back(out.theta);
        out.phi_trajectory.push_back(out.phi);
        if (cfg.record_diagnostics && problem.exact_lower_solution) {
            const Vec phi_star = problem.exact_lower_solution(out.theta);
            out.diagnostics.lower_gap_sq.push_back((out.phi - phi_star).squaredNorm());
            out.diagnostics.hypergrad_sq_norm.push_back(
                implicit_hypergradient(problem, out.theta, phi_star).squaredNorm());
        }

        for (int t = 0; t < cfg.lower_steps_per_outer; ++t) {
            RngStream low = root.derived({static_cast<std::uint64_t>(i), 0, static_cast<std::uint64_t>(t)});
            out.phi -= beta_i * problem.g_grad_phi(out.theta, out.phi, low.next_u64());
        }

        RngStream up = root.derived({static_cast<std::uint64_t>(i), 1});
        const std::uint64_t xi = up.next_u64();
        const Vec g_theta = problem.f_grad_theta(out.theta, out.phi, xi);
        const Vec g_phi = problem.f_grad_phi(out.theta, out.phi, xi);

        RngStream nm = root.derived({static_cast<std::uint64_t>(i), 2});
        const auto hvp_sample = [&](const Vec& v, std::uint64_t key) {
            return problem.g_hvp_phiphi(out.theta, out.phi, v, key);
        };
        const Vec inv_applied = neumann_inverse_apply(hvp_sample, g_phi, l_g, cfg.neumann_n, nm);

        RngStream jac = root.derived({static_cast<std::uint64_t>(i), 3});
        const Vec h_f = g_theta - problem.g_hvp_thetaphi(out.theta, out.phi, inv_applied, jac.next_u64());
        out.theta -= alpha_i * h_f;

        if (!out.theta.allFinite() || out.theta.norm() > cfg.divergence_guard)
            throw numeric_error("alset: divergence at outer iteration " + std::to_string(i));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Meta-learning instantiations. The lower variable stacks the K per-task
// parameter vectors; task objectives are deterministic (full-batch), the
// stochasticity of ALSET then enters only through N'.

namespace detail {

inline Vec stack_block(const std::vector<Vec>& blocks) {
    int total = 0;
    for (const Vec& b : blocks) total += static_cast<int>(b.size());
    Vec out(total);
    int off = 0;
    for (const Vec& b : blocks) {
        out.segment(off, b.size()) = b;
        off += static_cast<int>(b.size());
    }
    return out;
}

}  // namespace detail

// MAML as a bilevel problem: lower objective is the local linear model of the
// training loss plus the (1/2a)||phi - theta||^2 proximal term, whose
// minimizer is the one-step gradient update with stepsize a.
inline BilevelProblem instantiate_maml(const std::vector<TaskObjectives>& tasks, double alpha) {
    if (tasks.empty()) throw std::invalid_argument("instantiate_maml: no tasks");
    if (!(alpha > 0)) throw std::invalid_argument("instantiate_maml: alpha must be positive");
    const int d = tasks.front().tr->dim();
    const int k = static_cast<int>(tasks.size());
    BilevelProblem p;
    p.theta_dim = d;
    p.phi_dim = d * k;
    p.smoothness_lg = 1.0 / (alpha * k);
    p.f_value = [tasks, d, k](const Vec&, const Vec& phi, std::uint64_t) {
        double s = 0;
        for (int i = 0; i < k; ++i) s += tasks[i].va->loss(phi.segment(i * d, d));
        return s / k;
    };
    p.f_grad_theta = [d](const Vec&, const Vec&, std::uint64_t) { return Vec(Vec::Zero(d)); };
    p.f_grad_phi = [tasks, d, k](const Vec&, const Vec& phi, std::uint64_t) {
        Vec g(d * k);
        for (int i = 0; i < k; ++i) g.segment(i * d, d) = tasks[i].va->grad(phi.segment(i * d, d)) / k;
        return g;
    };
    p.g_value = [tasks, alpha, d, k](const Vec& theta, const Vec& phi, std::uint64_t) {
        double s = 0;
        for (int i = 0; i < k; ++i) {
            const Vec diff = phi.segment(i * d, d) - theta;
            s += tasks[i].tr->grad(theta).dot(diff) + diff.squaredNorm() / (2 * alpha);
        }
        return s / k;
    };
    p.g_grad_phi = [tasks, alpha, d, k](const Vec& theta, const Vec& phi, std::uint64_t) {
        Vec g(d * k);
        for (int i = 0; i < k; ++i)
            g.segment(i * d, d) = (tasks[i].tr->grad(theta) + (phi.segment(i * d, d) - theta) / alpha) / k;
        return g;
    };
    p.g_hvp_phiphi = [alpha, k](const Vec&, const Vec&, const Vec& v, std::uint64_t) {
        return Vec(v / (alpha * k));
    };
    p.g_hvp_thetaphi = [tasks, alpha, d, k](const Vec& theta, const Vec&, const Vec& v, std::uint64_t) {
        Vec g = Vec::Zero(d);
        for (int i = 0; i < k; ++i) {
            const Vec vi = v.segment(i * d, d);
            g += tasks[i].tr->hvp(theta, vi) - vi / alpha;
        }
        return Vec(g / k);
    };
    p.exact_lower_solution = [tasks, alpha, d, k](const Vec& theta) {
        std::vector<Vec> blocks(k);
        for (int i = 0; i < k; ++i) blocks[i] = theta - alpha * tasks[i].tr->grad(theta);
        return detail::stack_block(blocks);
    };
    return p;
}

// iMAML as a bilevel problem: proximally regularized training losses below,
// validation losses above.
inline BilevelProblem instantiate_imaml(const std::vector<TaskObjectives>& tasks, double lambda,
                                        double inner_tol = 1e-10, int inner_max_iters = 100000) {
    if (tasks.empty()) throw std::invalid_argument("instantiate_imaml: no tasks");
    if (!(lambda > 0)) throw std::invalid_argument("instantiate_imaml: lambda must be positive");
    const int d = tasks.front().tr->dim();
    const int k = static_cast<int>(tasks.size());
    BilevelProblem p;
    p.theta_dim = d;
    p.phi_dim = d * k;
    p.f_value = [tasks, d, k](const Vec&, const Vec& phi, std::uint64_t) {
        double s = 0;
        for (int i = 0; i < k; ++i) s += tasks[i].va->loss(phi.segment(i * d, d));
        return s / k;
    };
    p.f_grad_theta = [d](const Vec&, const Vec&, std::uint64_t) { return Vec(Vec::Zero(d)); };
    p.f_grad_phi = [tasks, d, k](const Vec&, const Vec& phi, std::uint64_t) {
        Vec g(d * k);
        for (int i = 0; i < k; ++i) g.segment(i * d, d) = tasks[i].va->grad(phi.segment(i * d, d)) / k;
        return g;
    };
    p.g_value = [tasks, lambda, d, k](const Vec& theta, const Vec& phi, std::uint64_t) {
        double s = 0;
        for (int i = 0; i < k; ++i) {
            const Vec pi = phi.segment(i * d, d);
            s += tasks[i].tr->loss(pi) + 0.5 * lambda * (pi - theta).squaredNorm();
        }
        return s / k;
    };
    p.g_grad_phi = [tasks, lambda, d, k](const Vec& theta, const Vec& phi, std::uint64_t) {
        Vec g(d * k);
        for (int i = 0; i < k; ++i) {
            const Vec pi = phi.segment(i * d, d);
            g.segment(i * d, d) = (tasks[i].tr->grad(pi) + lambda * (pi - theta)) / k;
        }
        return g;
    };
    p.g_hvp_phiphi = [tasks, lambda, d, k](const Vec&, const Vec& phi, const Vec& v, std::uint64_t) {
        Vec g(d * k);
        for (int i = 0; i < k; ++i) {
            const Vec vi = v.segment(i * d, d);
            g.segment(i * d, d) = (tasks[i].tr->hvp(phi.segment(i * d, d), vi) + lambda * vi) / k;
        }
        return g;
    };
    p.g_hvp_thetaphi = [lambda, d, k](const Vec&, const Vec&, const Vec& v, std::uint64_t) {
        Vec g = Vec::Zero(d);
        for (int i = 0; i < k; ++i) g -= lambda * v.segment(i * d, d);
        return Vec(g / k);
    };
    p.exact_lower_solution = [tasks, lambda, d, k, inner_tol, inner_max_iters](const Vec& theta) {
        std::vector<Vec> blocks(k);
        for (int i = 0; i < k; ++i) {
            const auto& tr = *tasks[i].tr;
            auto value = [&tr, &theta, lambda](const Vec& x) {
                return tr.loss(x) + 0.5 * lambda * (x - theta).squaredNorm();
            };
            auto gradient = [&tr, &theta, lambda](const Vec& x) {
                return Vec(tr.grad(x) + lambda * (x - theta));
            };
            GdResult r = minimize_gd(value, gradient, theta, inner_tol, inner_max_iters, 1.0 / (1.0 + lambda));
            if (!r.converged)
                throw convergence_error("instantiate_imaml: tight lower solve failed, residual " +
                                        std::to_string(r.grad_norm));
            blocks[i] = r.x;
        }
        return detail::stack_block(blocks);
    };
    return p;
}

}  // namespace metalearn
