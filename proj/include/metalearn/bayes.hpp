#pragma once

#include "metalearn/core.hpp"
#include "metalearn/meta_algorithms.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

// Bayesian meta-learning: Gibbs posteriors over finite hypothesis sets, the
// variational free energy, Stein variational gradient descent, and BMAML
// (per-task SVGD inner loop, particle outer loop differentiated through one
// inner step).

namespace metalearn {

// ---------------------------------------------------------------------------
// Finite distributions

struct DiscreteDistribution {
    std::vector<double> probs;

    void validate() const {
        if (probs.empty()) throw std::invalid_argument("DiscreteDistribution: empty support");
        double s = 0;
        for (double p : probs) {
            if (p < 0) throw std::invalid_argument("DiscreteDistribution: negative mass");
            s += p;
        }
        if (std::abs(s - 1.0) > 1e-12) throw std::invalid_argument("DiscreteDistribution: not normalized");
    }
};

inline double log_sum_exp(const std::vector<double>& xs) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : xs) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double s = 0;
    for (double x : xs) s += std::exp(x - m);
    return m + std::log(s);
}

// p(phi) proportional to q(phi) exp(-beta L(phi)), normalized in log space
inline DiscreteDistribution gibbs_posterior(const DiscreteDistribution& prior, const std::vector<double>& losses,
                                            double beta) {
    if (beta < 0) throw std::invalid_argument("gibbs_posterior: beta must be nonnegative");
    if (losses.size() != prior.probs.size()) throw std::invalid_argument("gibbs_posterior: size mismatch");
    std::vector<double> logits(losses.size());
    bool any_mass = false;
    for (std::size_t i = 0; i < losses.size(); ++i) {
        if (prior.probs[i] > 0) {
            logits[i] = std::log(prior.probs[i]) - beta * losses[i];
            any_mass = true;
        } else {
            logits[i] = -std::numeric_limits<double>::infinity();
        }
    }
    if (!any_mass) throw std::invalid_argument("gibbs_posterior: prior has no mass");
    const double lse = log_sum_exp(logits);
    DiscreteDistribution out;
    out.probs.resize(losses.size());
    for (std::size_t i = 0; i < losses.size(); ++i)
        out.probs[i] = std::isfinite(logits[i]) ? std::exp(logits[i] - lse) : 0.0;
    return out;
}

// -E_q[log p(D|phi)] + KL(q || prior)
inline double variational_free_energy(const DiscreteDistribution& q, const std::vector<double>& log_lik,
                                      const DiscreteDistribution& prior) {
    if (q.probs.size() != log_lik.size() || q.probs.size() != prior.probs.size())
        throw std::invalid_argument("variational_free_energy: size mismatch");
    double f = 0;
    for (std::size_t i = 0; i < q.probs.size(); ++i) {
        const double qi = q.probs[i];
        if (qi == 0) continue;
        if (prior.probs[i] == 0) return std::numeric_limits<double>::infinity();
        f += qi * (-log_lik[i] + std::log(qi / prior.probs[i]));
    }
    return f;
}

// ---------------------------------------------------------------------------
// SVGD with an RBF kernel; bandwidth from the median heuristic
// h = med^2 / log(M+1), recomputed each step unless fixed.

struct ParticleSet {
    std::vector<Vec> particles;
    double bandwidth = -1.0;  // <= 0 selects the median heuristic

    int size() const { return static_cast<int>(particles.size()); }
    int dim() const { return particles.empty() ? 0 : static_cast<int>(particles.front().size()); }

    Vec mean() const {
        Vec m = Vec::Zero(dim());
        for (const Vec& p : particles) m += p;
        return m / static_cast<double>(std::max(size(), 1));
    }
};

struct MedianPair {
    double sq_distance = 1.0;
    int a = -1;  // particle indices of the median pair; -1 when fewer than two
    int b = -1;
};

inline MedianPair median_sq_distance_pair(const std::vector<Vec>& particles) {
    const int m = static_cast<int>(particles.size());
    MedianPair out;
    if (m < 2) return out;
    struct Entry {
        double d2;
        int a, b;
    };
    std::vector<Entry> d2;
    d2.reserve(m * (m - 1) / 2);
    for (int i = 0; i < m; ++i)
        for (int j = i + 1; j < m; ++j) d2.push_back({(particles[i] - particles[j]).squaredNorm(), i, j});
    const auto mid = d2.begin() + d2.size() / 2;
    std::nth_element(d2.begin(), mid, d2.end(), [](const Entry& x, const Entry& y) { return x.d2 < y.d2; });
    out.sq_distance = mid->d2;
    out.a = mid->a;
    out.b = mid->b;
    return out;
}

inline double median_sq_distance(const std::vector<Vec>& particles) {
    return median_sq_distance_pair(particles).sq_distance;
}

inline double svgd_bandwidth(const ParticleSet& set) {
    if (set.bandwidth > 0) return set.bandwidth;
    const double med2 = median_sq_distance(set.particles);
    const double h = med2 / std::log(static_cast<double>(set.size()) + 1.0);
    return h > 1e-12 ? h : 1.0;
}

using ScoreFn = std::function<Vec(const Vec&)>;  // gradient of the log target density

// theta_i + (alpha/M) sum_j [ k(theta_j, theta_i) score(theta_j)
//                             + (2/h)(theta_i - theta_j) k(theta_j, theta_i) ]
inline ParticleSet svgd_step(const ParticleSet& set, const ScoreFn& score, double alpha) {
    const int m = set.size();
    if (m == 0) throw std::invalid_argument("svgd_step: empty particle set");
    const double h = svgd_bandwidth(set);
    std::vector<Vec> scores(m);
    for (int j = 0; j < m; ++j) {
        scores[j] = score(set.particles[j]);
        if (!scores[j].allFinite()) throw numeric_error("svgd_step: non-finite score");
    }
    ParticleSet out = set;
    for (int i = 0; i < m; ++i) {
        Vec drift = Vec::Zero(set.dim());
        for (int j = 0; j < m; ++j) {
            const Vec diff = set.particles[i] - set.particles[j];
            const double k = std::exp(-diff.squaredNorm() / h);
            drift += k * scores[j] + (2.0 / h) * k * diff;
        }
        if (!drift.allFinite()) throw numeric_error("svgd_step: non-finite kernel drift");
        out.particles[i] = set.particles[i] + (alpha / m) * drift;
    }
    return out;
}

inline ParticleSet svgd_adapt(ParticleSet set, const ScoreFn& score, double alpha, int n_steps) {
    for (int s = 0; s < n_steps; ++s) set = svgd_step(set, score, alpha);
    return set;
}

// ---------------------------------------------------------------------------
// BMAML. The per-task posterior is Gaussian-likelihood from the (mean) MSE
// with a Gaussian prior centered at the particle mean:
//   log p(phi | D) = -(N/(2 sigma_n^2)) L(phi) - (gamma/2) ||phi - mu||^2 + const.

struct BmamlConfig {
    double sigma_n_sq = 0.1;  // observation noise of the Gaussian likelihood
    double prior_gamma = 1.0;
    int mc_samples_per_particle = 1;  // Monte-Carlo budget of the outer loss
};

struct BmamlTask {
    TaskObjectives obj;
    int n_tr = 0;
    int n_va = 0;
};

inline ScoreFn bmaml_task_score(const BmamlTask& task, const Vec& prior_mean, const BmamlConfig& cfg) {
    const double c_tr = static_cast<double>(task.n_tr) / (2.0 * cfg.sigma_n_sq);
    auto tr = task.obj.tr;
    const double gamma = cfg.prior_gamma;
    Vec mu = prior_mean;
    return [tr, c_tr, gamma, mu](const Vec& phi) { return Vec(-c_tr * tr->grad(phi) - gamma * (phi - mu)); };
}

// negative log of the particle-averaged validation likelihood (the
// Monte-Carlo estimate of the Bayesian meta-loss with one sample per particle)
inline double bmaml_outer_loss(const std::vector<Vec>& adapted, const BmamlTask& task, const BmamlConfig& cfg) {
    const double c_va = static_cast<double>(task.n_va) / (2.0 * cfg.sigma_n_sq);
    std::vector<double> a(adapted.size());
    for (std::size_t m = 0; m < adapted.size(); ++m) a[m] = -c_va * task.obj.va->loss(adapted[m]);
    return -log_sum_exp(a) + std::log(static_cast<double>(adapted.size()));
}

namespace detail {

// Vector-Jacobian product of one SVGD step: given upstream gradients g_m at
// the adapted particles, returns the gradients with respect to the starting
// particles. The median-heuristic bandwidth is differentiated through the
// median pair when median_pair.a >= 0; a fixed bandwidth contributes nothing.
inline std::vector<Vec> svgd_step_vjp(const std::vector<Vec>& theta, const std::vector<Vec>& g,
                                      const BmamlTask& task, const BmamlConfig& cfg, double alpha, double h,
                                      const MedianPair& median_pair) {
    const int m = static_cast<int>(theta.size());
    const int d = static_cast<int>(theta.front().size());
    const double c_tr = static_cast<double>(task.n_tr) / (2.0 * cfg.sigma_n_sq);
    const double gamma = cfg.prior_gamma;

    Vec mu = Vec::Zero(d);
    for (const Vec& t : theta) mu += t;
    mu /= m;

    std::vector<Vec> score(m);
    for (int j = 0; j < m; ++j) score[j] = -c_tr * task.obj.tr->grad(theta[j]) - gamma * (theta[j] - mu);

    Mat kappa(m, m);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) kappa(i, j) = std::exp(-(theta[i] - theta[j]).squaredNorm() / h);

    // sum over m of kappa(l, m) g_m, reused by several terms
    std::vector<Vec> kg(m, Vec::Zero(d));
    Vec g_total = Vec::Zero(d);
    for (int l = 0; l < m; ++l) {
        for (int j = 0; j < m; ++j) kg[l] += kappa(l, j) * g[j];
        g_total += kg[l];
    }

    std::vector<Vec> out(m);
    double dloss_dh = 0.0;
    const double scale = alpha / m;
    for (int l = 0; l < m; ++l) {
        // score-transport terms: Hessian of the training loss enters once per
        // particle through an HVP
        Vec t1 = -c_tr * task.obj.tr->hvp(theta[l], kg[l]) - gamma * kg[l] + (gamma / m) * g_total;
        Vec t2 = Vec::Zero(d);
        Vec t3 = Vec::Zero(d);
        Vec t4 = Vec::Zero(d);
        for (int j = 0; j < m; ++j) {
            const Vec r_lj = theta[l] - theta[j];
            const double k = kappa(l, j);
            // kernel sensitivity of the transported scores
            t2 += (-2.0 / h) * k * ((score[l].dot(g[j])) * r_lj - (score[j].dot(g[l])) * (-r_lj));
            // repulsion: linear factor
            t3 += (2.0 / h) * k * (g[l] - g[j]);
            // repulsion: kernel sensitivity
            t4 += (4.0 / (h * h)) * k * ((r_lj.dot(g[j])) * r_lj - ((-r_lj).dot(g[l])) * (-r_lj));
            // bandwidth sensitivity: d phi_l / dh dotted with the upstream
            const double r2 = r_lj.squaredNorm();
            const Vec dphi_dh =
                scale * k * ((r2 / (h * h)) * score[j] + (-2.0 / (h * h) + 2.0 * r2 / (h * h * h)) * r_lj);
            dloss_dh += dphi_dh.dot(g[l]);
        }
        out[l] = g[l] + scale * (t1 + t2 + t3 + t4);
    }
    if (median_pair.a >= 0 && dloss_dh != 0.0) {
        // h = ||theta_a - theta_b||^2 / log(M+1)
        const Vec diff = theta[median_pair.a] - theta[median_pair.b];
        const Vec dh_vec = (2.0 / std::log(static_cast<double>(m) + 1.0)) * diff;
        out[median_pair.a] += dloss_dh * dh_vec;
        out[median_pair.b] -= dloss_dh * dh_vec;
    }
    return out;
}

}  // namespace detail

// gradient of task_outer_loss(svgd_step(theta)) with respect to the meta
// particles, differentiated through one SVGD step with frozen bandwidth
inline std::vector<Vec> bmaml_meta_particle_gradient(const ParticleSet& meta, const BmamlTask& task,
                                                     const BmamlConfig& cfg, double alpha) {
    const int m = meta.size();
    MedianPair pair;
    double h = meta.bandwidth;
    if (h <= 0) {
        pair = median_sq_distance_pair(meta.particles);
        const double med_h = pair.sq_distance / std::log(static_cast<double>(m) + 1.0);
        if (med_h > 1e-12) {
            h = med_h;
        } else {
            h = 1.0;
            pair = MedianPair{};  // floored bandwidth: no sensitivity
        }
    } else {
        pair = MedianPair{};  // fixed bandwidth
    }
    const ScoreFn score = bmaml_task_score(task, meta.mean(), cfg);
    ParticleSet inner = meta;
    inner.bandwidth = h;
    const ParticleSet adapted = svgd_step(inner, score, alpha);

    const double c_va = static_cast<double>(task.n_va) / (2.0 * cfg.sigma_n_sq);
    std::vector<double> a(m);
    for (int i = 0; i < m; ++i) a[i] = -c_va * task.obj.va->loss(adapted.particles[i]);
    const double lse = log_sum_exp(a);
    std::vector<Vec> upstream(m);
    for (int i = 0; i < m; ++i)
        upstream[i] = std::exp(a[i] - lse) * c_va * task.obj.va->grad(adapted.particles[i]);

    return detail::svgd_step_vjp(meta.particles, upstream, task, cfg, alpha, h, pair);
}

struct BmamlTrainResult {
    ParticleSet particles;
    std::vector<double> loss_trace;
};

inline BmamlTrainResult bmaml_meta_train(const std::vector<BmamlTask>& tasks, ParticleSet init,
                                         const BmamlConfig& cfg, const InnerConfig& inner,
                                         const OuterConfig& outer, const RngStream& root, int iter_offset = 0) {
    if (tasks.empty()) throw std::invalid_argument("bmaml_meta_train: no tasks");
    outer.validate();
    BmamlTrainResult res;
    res.particles = std::move(init);
    const int n_tasks = static_cast<int>(tasks.size());
    const int batch_size = std::min(outer.meta_batch_size, n_tasks);
    const int m = res.particles.size();
    for (int it = iter_offset; it < iter_offset + outer.n_meta_iters; ++it) {
        RngStream iter_rng = root.derived({0xb3a1, static_cast<std::uint64_t>(it)});
        const std::vector<int> idx = iter_rng.sample_without_replacement(n_tasks, batch_size);

        double loss = 0;
        std::vector<std::vector<Vec>> grads;
        for (int t : idx) {
            const double h = svgd_bandwidth(res.particles);
            ParticleSet inner_set = res.particles;
            inner_set.bandwidth = h;
            const ScoreFn score = bmaml_task_score(tasks[t], res.particles.mean(), cfg);
            const ParticleSet adapted = svgd_step(inner_set, score, inner.alpha);
            loss += bmaml_outer_loss(adapted.particles, tasks[t], cfg);
            grads.push_back(bmaml_meta_particle_gradient(res.particles, tasks[t], cfg, inner.alpha));
        }
        loss /= batch_size;
        if (!std::isfinite(loss) || loss > outer.divergence_guard)
            throw numeric_error("bmaml_meta_train: divergence at iteration " + std::to_string(it));
        res.loss_trace.push_back(loss);

        for (int l = 0; l < m; ++l) {
            Vec g = Vec::Zero(res.particles.dim());
            for (const auto& gt : grads) g += gt[l];
            res.particles.particles[l] -= (outer.beta / batch_size) * g;
        }
    }
    return res;
}

}  // namespace metalearn
