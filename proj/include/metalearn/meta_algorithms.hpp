#pragma once

#include "metalearn/bilevel.hpp"
#include "metalearn/core.hpp"
#include "metalearn/models.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

// The frequentist meta-learning algorithm family as interchangeable
// strategies over (task batch, model): per-task inner adaptation plus an
// outer hyperparameter update.

namespace metalearn {

struct InnerConfig {
    double alpha = 0.01;  // inner gradient stepsize
    int n_steps = 1;
    double lambda = 1.0;  // proximal regularizer (iMAML, Prox-MAML)
    int cg_iters = 20;
    double cg_tol = 1e-8;
    int neumann_n = 8;
    double tol_inner = 1e-8;  // gradient-norm tolerance of the proximal solve
    int max_inner_iters = 10000;
    enum class InverseMethod { cg, neumann } inverse = InverseMethod::cg;

    void validate() const {
        if (alpha < 0) throw std::invalid_argument("InnerConfig: alpha must be nonnegative");
        if (n_steps < 0) throw std::invalid_argument("InnerConfig: n_steps must be nonnegative");
        if (lambda < 0) throw std::invalid_argument("InnerConfig: lambda must be nonnegative");
        if (cg_iters < 1 || neumann_n < 1) throw std::invalid_argument("InnerConfig: solver budgets must be positive");
    }
};

struct OuterConfig {
    double beta = 0.001;  // outer stepsize
    int meta_batch_size = 1;
    int n_meta_iters = 1000;
    double sharp_alpha_in = 0.0;  // inner-level perturbation radius
    double sharp_alpha_ot = 0.0;  // outer-level perturbation radius
    int es_n_points = 100;
    double es_delta = 1e-2;
    double divergence_guard = 1e12;

    void validate() const {
        if (!(beta > 0)) throw std::invalid_argument("OuterConfig: beta must be positive");
        if (meta_batch_size < 1) throw std::invalid_argument("OuterConfig: meta_batch_size must be positive");
        if (n_meta_iters < 0) throw std::invalid_argument("OuterConfig: n_meta_iters must be nonnegative");
        if (sharp_alpha_in < 0 || sharp_alpha_ot < 0)
            throw std::invalid_argument("OuterConfig: perturbation radii must be nonnegative");
        if (es_n_points < 1 || !(es_delta > 0)) throw std::invalid_argument("OuterConfig: bad ES settings");
    }
};

// ---------------------------------------------------------------------------
// Inner adaptation

inline Vec inner_adapt_gd(const Objective& obj, const Vec& theta, const InnerConfig& cfg) {
    Vec phi = theta;
    for (int s = 0; s < cfg.n_steps; ++s) {
        Vec g = obj.grad(phi);
        if (!g.allFinite())
            throw numeric_error("inner_adapt_gd: non-finite gradient at iteration " + std::to_string(s));
        phi -= cfg.alpha * g;
    }
    return phi;
}

// argmin of L_tr(phi) + (lambda/2) ||phi - theta||^2 to gradient-norm
// tolerance tol_inner
inline Vec imaml_inner_solve(const Objective& obj, const Vec& theta, const InnerConfig& cfg) {
    auto value = [&](const Vec& x) { return obj.loss(x) + 0.5 * cfg.lambda * (x - theta).squaredNorm(); };
    auto gradient = [&](const Vec& x) { return Vec(obj.grad(x) + cfg.lambda * (x - theta)); };
    GdResult r = minimize_gd(value, gradient, theta, cfg.tol_inner, cfg.max_inner_iters, 1.0 / (1.0 + cfg.lambda));
    if (!r.converged)
        throw convergence_error("imaml_inner_solve: residual " + std::to_string(r.grad_norm) + " after " +
                                std::to_string(cfg.max_inner_iters) + " iterations");
    return r.x;
}

// ---------------------------------------------------------------------------
// Per-task meta-gradients

// (I - alpha Hess L_tr(theta)) grad L_va(phi) at phi = theta - alpha grad L_tr(theta),
// realized as one HVP; no dense Hessian is ever formed.
inline Vec maml_meta_gradient(const TaskObjectives& task, const Vec& theta, const InnerConfig& cfg) {
    const Vec phi = theta - cfg.alpha * task.tr->grad(theta);
    const Vec g_va = task.va->grad(phi);
    return g_va - cfg.alpha * task.tr->hvp(theta, g_va);
}

inline Vec fomaml_meta_gradient(const TaskObjectives& task, const Vec& theta, const InnerConfig& cfg) {
    const Vec phi = theta - cfg.alpha * task.tr->grad(theta);
    return task.va->grad(phi);
}

// (I + (1/lambda) Hess L_tr(phi*))^{-1} grad L_va(phi*), the inverse applied
// matrix-free by CG or by the randomized Neumann estimator.
inline Vec imaml_meta_gradient(const TaskObjectives& task, const Vec& theta, const InnerConfig& cfg,
                               RngStream* neumann_rng = nullptr) {
    const Vec phi = imaml_inner_solve(*task.tr, theta, cfg);
    const Vec b = task.va->grad(phi);
    if (cfg.inverse == InnerConfig::InverseMethod::cg) {
        auto apply = [&](const Vec& v) { return Vec(v + task.tr->hvp(phi, v) / cfg.lambda); };
        return cg_solve(apply, b, cfg.cg_iters, cfg.cg_tol);
    }
    if (neumann_rng == nullptr) throw std::invalid_argument("imaml_meta_gradient: neumann inverse needs a stream");
    // (I + H/lambda)^{-1} = lambda (H + lambda I)^{-1}
    auto hvp_sample = [&](const Vec& v, std::uint64_t) { return Vec(task.tr->hvp(phi, v) + cfg.lambda * v); };
    // curvature of the proximal objective is bounded by lambda plus the loss
    // curvature; probe for a usable L_g
    double l_g = cfg.lambda;
    RngStream probe = neumann_rng->derived(0x1f);
    for (int i = 0; i < 20; ++i) {
        Vec v = probe.normal_vec(static_cast<int>(b.size())).normalized();
        l_g = std::max(l_g, v.dot(hvp_sample(v, 0)));
    }
    return cfg.lambda * neumann_inverse_apply(hvp_sample, b, 1.1 * l_g, cfg.neumann_n, *neumann_rng);
}

// ---------------------------------------------------------------------------
// Outer updates built from adapted parameters

inline Vec reptile_outer_update(const Vec& theta, const std::vector<Vec>& adapted, double beta) {
    if (adapted.empty()) throw std::invalid_argument("reptile_outer_update: no adapted parameters");
    Vec mean = Vec::Zero(theta.size());
    for (const Vec& p : adapted) mean += p;
    mean /= static_cast<double>(adapted.size());
    return (1.0 - beta) * theta + beta * mean;
}

inline Vec prox_maml_outer_update(const Vec& theta, const std::vector<Vec>& adapted, double beta, double lambda) {
    if (adapted.empty()) throw std::invalid_argument("prox_maml_outer_update: no adapted parameters");
    Vec mean = Vec::Zero(theta.size());
    for (const Vec& p : adapted) mean += p;
    mean /= static_cast<double>(adapted.size());
    return theta - beta * lambda * (theta - mean);
}

// ---------------------------------------------------------------------------
// Evolution-strategies estimators

using LossEvaluator = std::function<double(const Vec&)>;

// (1/n) sum_i (u_i / delta) L(phi + delta u_i), u_i standard normal
inline Vec es_gradient(const LossEvaluator& loss, const Vec& phi, int n, double delta, RngStream& rng) {
    if (n < 1) throw std::invalid_argument("es_gradient: n must be at least 1");
    if (!(delta > 0)) throw std::invalid_argument("es_gradient: delta must be positive");
    Vec acc = Vec::Zero(phi.size());
    for (int i = 0; i < n; ++i) {
        const Vec u = rng.normal_vec(static_cast<int>(phi.size()));
        acc += (loss(phi + delta * u) / delta) * u;
    }
    return acc / static_cast<double>(n);
}

// (1/delta^2) [ (1/n) sum L_i u_i u_i' - (1/n) sum L_i I ]; symmetric by construction
inline Mat es_hessian(const LossEvaluator& loss, const Vec& phi, int n, double delta, RngStream& rng) {
    if (n < 1) throw std::invalid_argument("es_hessian: n must be at least 1");
    if (!(delta > 0)) throw std::invalid_argument("es_hessian: delta must be positive");
    const int d = static_cast<int>(phi.size());
    Mat acc = Mat::Zero(d, d);
    double mean_loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const Vec u = rng.normal_vec(d);
        const double li = loss(phi + delta * u);
        acc += li * (u * u.transpose());
        mean_loss += li;
    }
    acc /= static_cast<double>(n);
    mean_loss /= static_cast<double>(n);
    return (acc - mean_loss * Mat::Identity(d, d)) / (delta * delta);
}

enum class EsVariant { hessian, first_order };

// One ES-MAML outer step: the inner update and all outer derivatives use the
// multi-point ES estimators in place of exact gradients. Gradient and Hessian
// estimators use independent draws.
inline Vec es_maml_outer_update(const Vec& theta, const std::vector<TaskObjectives>& tasks,
                                const InnerConfig& inner, const OuterConfig& outer, EsVariant variant,
                                const RngStream& root) {
    if (tasks.empty()) throw std::invalid_argument("es_maml_outer_update: no tasks");
    const int d = static_cast<int>(theta.size());
    Vec step = Vec::Zero(d);
    for (std::size_t k = 0; k < tasks.size(); ++k) {
        auto tr_loss = [&](const Vec& p) { return tasks[k].tr->loss(p); };
        auto va_loss = [&](const Vec& p) { return tasks[k].va->loss(p); };
        RngStream r_inner = root.derived({k, 0});
        const Vec g_tr = es_gradient(tr_loss, theta, outer.es_n_points, outer.es_delta, r_inner);
        const Vec phi = theta - inner.alpha * g_tr;
        RngStream r_va = root.derived({k, 1});
        const Vec g_va = es_gradient(va_loss, phi, outer.es_n_points, outer.es_delta, r_va);
        if (variant == EsVariant::first_order) {
            step += g_va;
        } else {
            RngStream r_h = root.derived({k, 2});
            const Mat h = es_hessian(tr_loss, theta, outer.es_n_points, outer.es_delta, r_h);
            step += g_va - inner.alpha * (h * g_va);
        }
    }
    return theta - (outer.beta / static_cast<double>(tasks.size())) * step;
}

// ---------------------------------------------------------------------------
// Sharp-MAML (first-order convention): perturbations are normalized ascent
// directions scaled by the configured radii and treated as constants; the
// returned vector is the plain validation gradient at the perturbed adapted
// point, so zero radii reproduce the FOMAML path bit for bit.

namespace detail {
inline Vec scaled_direction(const Vec& g, double radius) {
    const double n = g.norm();
    if (n == 0.0 || radius == 0.0) return Vec::Zero(g.size());
    return (radius / n) * g;
}
}  // namespace detail

struct SharpMamlPoint {
    Vec eps_inner;  // eps_k(theta)
    Vec eps_outer;  // eps(theta)
    Vec phi_sm;
};

inline SharpMamlPoint sharp_maml_adapt(const TaskObjectives& task, const Vec& theta, const InnerConfig& inner,
                                       const OuterConfig& outer) {
    SharpMamlPoint out;
    out.eps_inner = detail::scaled_direction(task.tr->grad(theta), outer.sharp_alpha_in);
    const Vec phi_tilde = theta - inner.alpha * task.tr->grad(theta + out.eps_inner);
    out.eps_outer = detail::scaled_direction(task.va->grad(phi_tilde), outer.sharp_alpha_ot);
    out.phi_sm = theta + out.eps_outer - inner.alpha * task.tr->grad(theta + out.eps_outer + out.eps_inner);
    return out;
}

inline Vec sharp_maml_meta_gradient(const TaskObjectives& task, const Vec& theta, const InnerConfig& inner,
                                    const OuterConfig& outer) {
    return task.va->grad(sharp_maml_adapt(task, theta, inner, outer).phi_sm);
}

// ---------------------------------------------------------------------------
// CAVIA: only a context input block is adapted per task; the network weights
// are the shared hyperparameter.

// one gradient step on the context from the all-zero initialization
inline Vec cavia_adapt(const Mlp& mlp, const Vec& theta, const std::vector<Sample>& train, LossKind kind,
                       const InnerConfig& cfg) {
    const Vec zero_ctx = Vec::Zero(mlp.context_dim());
    return Vec(-cfg.alpha * mlp.gradients(theta, train, kind, zero_ctx).ctx);
}

// grad_theta L_va(theta, ctx*) - alpha * Hess_{theta,ctx} L_tr(theta, 0) . grad_ctx L_va(theta, ctx*);
// the mixed second derivative is applied as an HVP in the context block.
inline Vec cavia_meta_gradient(const Mlp& mlp, const Vec& theta, const TaskDataset& task, LossKind kind,
                               const InnerConfig& cfg) {
    const Vec ctx = cavia_adapt(mlp, theta, task.train, kind, cfg);
    const Mlp::Grads g_va = mlp.gradients(theta, task.val, kind, ctx);
    if (cfg.alpha == 0.0) return g_va.params;
    const Vec zero_ctx = Vec::Zero(mlp.context_dim());
    const Vec mixed = mlp.hvp(theta, task.train, kind, Vec(), g_va.ctx, zero_ctx).params;
    return g_va.params - cfg.alpha * mixed;
}

// ---------------------------------------------------------------------------
// Modular meta-learning: a shared pool of M parameter blocks, one block
// chosen per layer slot.

struct ModuleSet {
    std::vector<Vec> modules;  // M structurally interchangeable blocks
    int layer_count = 1;
};

struct Assignment {
    std::vector<int> slots;  // module index per layer, 0-based

    bool operator==(const Assignment& o) const { return slots == o.slots; }
    bool operator<(const Assignment& o) const { return slots < o.slots; }
};

enum class AssignMethod { exhaustive, simulated_annealing };

inline constexpr int kExhaustiveBudget = 4096;

using AssignmentLoss = std::function<double(const Assignment&)>;

inline Assignment modular_assign(const AssignmentLoss& train_loss, int n_modules, int n_layers,
                                 AssignMethod method, RngStream rng = RngStream(0)) {
    if (n_modules < 1 || n_layers < 1) throw std::invalid_argument("modular_assign: empty module set");
    Assignment best{std::vector<int>(n_layers, 0)};
    if (method == AssignMethod::exhaustive) {
        double combos = std::pow(static_cast<double>(n_modules), n_layers);
        if (combos > kExhaustiveBudget)
            throw std::invalid_argument(
                "modular_assign: exhaustive budget exceeded (M^L > 4096); use simulated annealing");
        Assignment cur{std::vector<int>(n_layers, 0)};
        double best_loss = train_loss(cur);
        // lexicographic enumeration with strict improvement keeps the
        // lowest-index argmin on ties
        while (true) {
            int pos = n_layers - 1;
            while (pos >= 0 && cur.slots[pos] == n_modules - 1) cur.slots[pos--] = 0;
            if (pos < 0) break;
            ++cur.slots[pos];
            const double l = train_loss(cur);
            if (l < best_loss) {
                best_loss = l;
                best = cur;
            }
        }
        return best;
    }
    // simulated annealing: geometric schedule, single-layer reassignment
    // proposals, Metropolis acceptance
    const int n_proposals = 200;
    const double t0 = 1.0;
    const double decay = 0.95;
    Assignment cur = best;
    double cur_loss = train_loss(cur);
    double best_loss = cur_loss;
    if (n_modules == 1) return best;
    for (int t = 0; t < n_proposals; ++t) {
        const double temp = t0 * std::pow(decay, t);
        Assignment prop = cur;
        const int layer = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n_layers)));
        int repl = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n_modules - 1)));
        if (repl >= prop.slots[layer]) ++repl;  // propose a different module
        prop.slots[layer] = repl;
        const double prop_loss = train_loss(prop);
        const double delta = prop_loss - cur_loss;
        if (delta <= 0.0 || rng.uniform() < std::exp(-delta / temp)) {
            cur = prop;
            cur_loss = prop_loss;
            if (cur_loss < best_loss || (cur_loss == best_loss && cur < best)) {
                best_loss = cur_loss;
                best = cur;
            }
        }
    }
    return best;
}

// Hooks a concrete composed model exposes to the modular outer step.
struct ModularTask {
    AssignmentLoss train_loss;
    // validation-loss gradient with respect to the composed parameters, one
    // block per layer slot
    std::function<std::vector<Vec>(const Assignment&)> val_grad_blocks;
};

inline ModuleSet modular_outer_step(const ModuleSet& mset, const std::vector<ModularTask>& tasks, double beta,
                                    AssignMethod method, const RngStream& root) {
    if (tasks.empty()) throw std::invalid_argument("modular_outer_step: no tasks");
    const int m = static_cast<int>(mset.modules.size());
    std::vector<Vec> accum(m);
    for (int i = 0; i < m; ++i) accum[i] = Vec::Zero(mset.modules[i].size());
    for (std::size_t k = 0; k < tasks.size(); ++k) {
        const Assignment s = modular_assign(tasks[k].train_loss, m, mset.layer_count, method, root.derived(k));
        const std::vector<Vec> blocks = tasks[k].val_grad_blocks(s);
        for (int l = 0; l < mset.layer_count; ++l) accum[s.slots[l]] += blocks[l];
    }
    ModuleSet out = mset;
    const double scale = beta / static_cast<double>(tasks.size());
    for (int i = 0; i < m; ++i) out.modules[i] -= scale * accum[i];
    return out;
}

// ---------------------------------------------------------------------------
// Joint-learning baseline: one shared parameter, no inner adaptation.

inline Vec joint_learning_step(const Vec& theta, const std::vector<TaskObjectives>& tasks, double beta) {
    if (tasks.empty()) throw std::invalid_argument("joint_learning_step: no tasks");
    Vec g = Vec::Zero(theta.size());
    for (const auto& t : tasks) g += t.tr->grad(theta);
    return theta - (beta / static_cast<double>(tasks.size())) * g;
}

// ---------------------------------------------------------------------------
// Meta-objective evaluations (also the finite-difference oracle maps used by
// the gradient checks; they only touch losses and inner procedures, never the
// analytic outer-derivative path they certify).

inline double maml_meta_objective(const TaskObjectives& task, const Vec& theta, const InnerConfig& cfg) {
    return task.va->loss(theta - cfg.alpha * task.tr->grad(theta));
}

inline double imaml_meta_objective(const TaskObjectives& task, const Vec& theta, const InnerConfig& cfg) {
    return task.va->loss(imaml_inner_solve(*task.tr, theta, cfg));
}

inline double cavia_meta_objective(const Mlp& mlp, const Vec& theta, const TaskDataset& task, LossKind kind,
                                   const InnerConfig& cfg) {
    return mlp.loss(theta, task.val, kind, cavia_adapt(mlp, theta, task.train, kind, cfg));
}

// Sharp-MAML objective with the perturbations and the inner gradient frozen
// at the base point, matching the first-order convention of the update.
inline std::function<double(const Vec&)> sharp_maml_frozen_objective(const TaskObjectives& task, const Vec& theta,
                                                                     const InnerConfig& inner,
                                                                     const OuterConfig& outer) {
    const SharpMamlPoint pt = sharp_maml_adapt(task, theta, inner, outer);
    const Vec frozen_inner_grad = task.tr->grad(theta + pt.eps_outer + pt.eps_inner);
    const Vec eps_outer = pt.eps_outer;
    const double alpha = inner.alpha;
    auto va = task.va;
    return [va, eps_outer, frozen_inner_grad, alpha](const Vec& th) {
        return va->loss(th + eps_outer - alpha * frozen_inner_grad);
    };
}

// ---------------------------------------------------------------------------
// Meta-training loop (Algorithms 1-6 plus the joint baseline). Tasks are
// sampled without replacement within each outer iteration; the recorded trace
// is the batch meta-training loss before the update.

enum class MetaAlgorithm {
    joint,
    maml,
    fomaml,
    reptile,
    imaml,
    prox_maml,
    es_maml_first_order,
    es_maml_hessian,
    sharp_maml,
};

inline const char* to_string(MetaAlgorithm a) {
    switch (a) {
        case MetaAlgorithm::joint: return "joint";
        case MetaAlgorithm::maml: return "maml";
        case MetaAlgorithm::fomaml: return "fomaml";
        case MetaAlgorithm::reptile: return "reptile";
        case MetaAlgorithm::imaml: return "imaml";
        case MetaAlgorithm::prox_maml: return "prox_maml";
        case MetaAlgorithm::es_maml_first_order: return "es_maml_fo";
        case MetaAlgorithm::es_maml_hessian: return "es_maml_h";
        case MetaAlgorithm::sharp_maml: return "sharp_maml";
    }
    return "?";
}

struct MetaTrainResult {
    Vec theta;
    std::vector<double> loss_trace;  // batch meta-training loss per outer iteration
};

namespace detail {

inline double batch_meta_loss(MetaAlgorithm algo, const std::vector<TaskObjectives>& batch, const Vec& theta,
                              const InnerConfig& inner) {
    double s = 0.0;
    for (const auto& t : batch) {
        switch (algo) {
            case MetaAlgorithm::joint:
                s += t.tr->loss(theta);
                break;
            case MetaAlgorithm::imaml:
            case MetaAlgorithm::prox_maml:
                s += t.va->loss(imaml_inner_solve(*t.tr, theta, inner));
                break;
            default:
                s += t.va->loss(theta - inner.alpha * t.tr->grad(theta));
                break;
        }
    }
    return s / static_cast<double>(batch.size());
}

}  // namespace detail

inline void run_meta_train_loop(MetaAlgorithm algo, const std::vector<TaskObjectives>& bound,
                                const InnerConfig& inner, const OuterConfig& outer, const RngStream& root,
                                MetaTrainResult& res, int batch_size, int iter_offset = 0) {
    const int n_tasks = static_cast<int>(bound.size());
    for (int it = iter_offset; it < iter_offset + outer.n_meta_iters; ++it) {
        RngStream iter_rng = root.derived({0x5a7e, static_cast<std::uint64_t>(it)});
        const std::vector<int> idx = iter_rng.sample_without_replacement(n_tasks, batch_size);
        std::vector<TaskObjectives> batch;
        batch.reserve(idx.size());
        for (int i : idx) batch.push_back(bound[i]);

        const double loss = detail::batch_meta_loss(algo, batch, res.theta, inner);
        if (!std::isfinite(loss) || loss > outer.divergence_guard)
            throw numeric_error("meta_train: divergence at iteration " + std::to_string(it) + ", loss " +
                                std::to_string(loss));
        res.loss_trace.push_back(loss);

        switch (algo) {
            case MetaAlgorithm::joint:
                res.theta = joint_learning_step(res.theta, batch, outer.beta);
                break;
            case MetaAlgorithm::maml:
            case MetaAlgorithm::fomaml:
            case MetaAlgorithm::sharp_maml:
            case MetaAlgorithm::imaml: {
                Vec g = Vec::Zero(res.theta.size());
                for (const auto& t : batch) {
                    if (algo == MetaAlgorithm::maml)
                        g += maml_meta_gradient(t, res.theta, inner);
                    else if (algo == MetaAlgorithm::fomaml)
                        g += fomaml_meta_gradient(t, res.theta, inner);
                    else if (algo == MetaAlgorithm::sharp_maml)
                        g += sharp_maml_meta_gradient(t, res.theta, inner, outer);
                    else
                        g += imaml_meta_gradient(t, res.theta, inner);
                }
                res.theta -= (outer.beta / static_cast<double>(batch.size())) * g;
                break;
            }
            case MetaAlgorithm::reptile:
            case MetaAlgorithm::prox_maml: {
                std::vector<Vec> adapted;
                adapted.reserve(batch.size());
                for (const auto& t : batch) {
                    if (algo == MetaAlgorithm::reptile)
                        adapted.push_back(inner_adapt_gd(*t.tr, res.theta, inner));
                    else
                        adapted.push_back(imaml_inner_solve(*t.tr, res.theta, inner));
                }
                res.theta = (algo == MetaAlgorithm::reptile)
                                ? reptile_outer_update(res.theta, adapted, outer.beta)
                                : prox_maml_outer_update(res.theta, adapted, outer.beta, inner.lambda);
                break;
            }
            case MetaAlgorithm::es_maml_first_order:
            case MetaAlgorithm::es_maml_hessian: {
                const EsVariant v = (algo == MetaAlgorithm::es_maml_first_order) ? EsVariant::first_order
                                                                                 : EsVariant::hessian;
                res.theta = es_maml_outer_update(res.theta, batch, inner, outer, v,
                                                 iter_rng.derived(0xe5));
                break;
            }
        }
        if (!res.theta.allFinite()) throw numeric_error("meta_train: non-finite iterate at " + std::to_string(it));
    }
}

inline MetaTrainResult meta_train_from(MetaAlgorithm algo, const Vec& theta0,
                                       const std::vector<TaskObjectives>& tasks, const InnerConfig& inner,
                                       const OuterConfig& outer, const RngStream& root, int iter_offset = 0) {
    inner.validate();
    outer.validate();
    if (tasks.empty()) throw std::invalid_argument("meta_train_from: no tasks");
    MetaTrainResult res;
    res.theta = theta0;
    run_meta_train_loop(algo, tasks, inner, outer, root, res, std::min<int>(outer.meta_batch_size, tasks.size()),
                        iter_offset);
    return res;
}

inline MetaTrainResult meta_train(MetaAlgorithm algo, const MetaBatch& meta_batch, const ObjectiveBinder& bind,
                                  const Vec& theta0, const InnerConfig& inner, const OuterConfig& outer,
                                  const RngStream& root) {
    if (meta_batch.tasks.empty()) throw std::invalid_argument("meta_train: empty meta batch");
    std::vector<TaskObjectives> bound;
    bound.reserve(meta_batch.tasks.size());
    for (const auto& t : meta_batch.tasks) bound.push_back(bind(t));
    return meta_train_from(algo, theta0, bound, inner, outer, root);
}

// Adapt on a fresh task with the algorithm's own inner rule and report the
// validation loss; this is the meta-test protocol.
inline double adapted_validation_loss(MetaAlgorithm algo, const TaskObjectives& task, const Vec& theta,
                                      const InnerConfig& inner) {
    switch (algo) {
        case MetaAlgorithm::imaml:
        case MetaAlgorithm::prox_maml:
            return task.va->loss(imaml_inner_solve(*task.tr, theta, inner));
        default:
            return task.va->loss(inner_adapt_gd(*task.tr, theta, inner));
    }
}

}  // namespace metalearn
