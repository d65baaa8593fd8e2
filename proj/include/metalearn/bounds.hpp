#pragma once

#include "metalearn/bayes.hpp"
#include "metalearn/core.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

// Exactly computable generalization-theory quantities on enumerable and
// Gaussian environments: mutual-information bounds, Gibbs objects, task
// relatedness, and the minimum-excess-meta-risk decomposition. Everything is
// evaluated by exhaustive summation in nats; losses live in [0, 1] and the
// sub-Gaussian proxy is the Hoeffding value 1/4.

namespace metalearn {

inline constexpr double kSubGaussianSq = 0.25;           // sigma^2 for [0,1] losses
inline constexpr double kEnumerationBudget = 1e6;        // joint-state guard

inline double xlogx(double x) { return x > 0 ? x * std::log(x) : 0.0; }

// ---------------------------------------------------------------------------
// Dataset enumeration helpers: a dataset of N symbols from an alphabet of
// size |Z| is an index tuple, enumerated in lexicographic order.

namespace detail {

inline std::vector<std::vector<int>> enumerate_tuples(int alphabet, int length) {
    std::vector<std::vector<int>> out;
    std::vector<int> cur(length, 0);
    while (true) {
        out.push_back(cur);
        int pos = length - 1;
        while (pos >= 0 && cur[pos] == alphabet - 1) cur[pos--] = 0;
        if (pos < 0) break;
        ++cur[pos];
    }
    return out;
}

inline double tuple_probability(const std::vector<int>& tuple, const std::vector<double>& symbol_dist) {
    double p = 1.0;
    for (int z : tuple) p *= symbol_dist[z];
    return p;
}

inline void check_distribution(const std::vector<double>& p, const char* what) {
    double s = 0;
    for (double v : p) {
        if (v < 0) throw std::invalid_argument(std::string(what) + ": negative probability");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-12) throw std::invalid_argument(std::string(what) + ": not normalized");
}

}  // namespace detail

// stochastic base-learner: dataset (symbol indices) -> distribution over hypotheses
using BaseLearner = std::function<std::vector<double>(const std::vector<int>&)>;

// I(phi; D) in nats under p(D) = prod p(z) and the learner kernel, by
// exhaustive summation over the joint table
inline double exact_mutual_information(const BaseLearner& learner, const std::vector<double>& symbol_dist,
                                       int n_samples) {
    detail::check_distribution(symbol_dist, "exact_mutual_information");
    const double states = std::pow(static_cast<double>(symbol_dist.size()), n_samples);
    if (states > kEnumerationBudget)
        throw std::invalid_argument("exact_mutual_information: joint state space too large (about " +
                                    std::to_string(states) + " datasets)");
    const auto datasets = detail::enumerate_tuples(static_cast<int>(symbol_dist.size()), n_samples);
    std::vector<double> marginal;
    std::vector<std::pair<double, std::vector<double>>> table;  // (p(D), p(phi|D))
    for (const auto& d : datasets) {
        const double pd = detail::tuple_probability(d, symbol_dist);
        std::vector<double> post = learner(d);
        detail::check_distribution(post, "base learner output");
        if (marginal.empty()) marginal.assign(post.size(), 0.0);
        for (std::size_t i = 0; i < post.size(); ++i) marginal[i] += pd * post[i];
        table.emplace_back(pd, std::move(post));
    }
    double mi = 0.0;
    for (const auto& [pd, post] : table)
        for (std::size_t i = 0; i < post.size(); ++i)
            if (pd > 0 && post[i] > 0 && marginal[i] > 0) mi += pd * post[i] * std::log(post[i] / marginal[i]);
    return std::max(mi, 0.0);
}

// sqrt(2 sigma^2 MI / N)
inline double gen_bound_thm41(double mutual_information, double sigma_sq, int n_samples) {
    if (mutual_information < 0 || sigma_sq < 0) throw std::invalid_argument("gen_bound_thm41: negative input");
    return std::sqrt(2.0 * sigma_sq * mutual_information / n_samples);
}

// exact absolute average generalization gap of a base-learner on one task:
// | E_{p(D) p(phi|D)} [ L_pop(phi) - L_D(phi) ] |
inline double exact_generalization_gap(const BaseLearner& learner, const std::vector<double>& symbol_dist,
                                       const std::vector<std::vector<double>>& loss, int n_samples) {
    const auto datasets = detail::enumerate_tuples(static_cast<int>(symbol_dist.size()), n_samples);
    const int n_phi = static_cast<int>(loss.size());
    std::vector<double> pop(n_phi, 0.0);
    for (int f = 0; f < n_phi; ++f)
        for (std::size_t z = 0; z < symbol_dist.size(); ++z) pop[f] += symbol_dist[z] * loss[f][z];
    double gap = 0.0;
    for (const auto& d : datasets) {
        const double pd = detail::tuple_probability(d, symbol_dist);
        const std::vector<double> post = learner(d);
        for (int f = 0; f < n_phi; ++f) {
            double train = 0;
            for (int z : d) train += loss[f][z];
            train /= n_samples;
            gap += pd * post[f] * (pop[f] - train);
        }
    }
    return std::abs(gap);
}

// ---------------------------------------------------------------------------
// Finite task environments and the meta-level bound

struct FiniteEnvironment {
    std::vector<double> task_dist;                 // p(T)
    std::vector<std::vector<double>> data_dist;    // p(z|T), one row per task
    std::vector<std::vector<double>> loss;         // loss[phi][z] in [0, 1]
    int n_samples = 1;                             // N
    int n_tasks = 1;                               // K meta-training tasks

    int n_symbols() const { return data_dist.empty() ? 0 : static_cast<int>(data_dist.front().size()); }
    int n_hypotheses() const { return static_cast<int>(loss.size()); }

    void validate() const {
        detail::check_distribution(task_dist, "FiniteEnvironment task distribution");
        if (task_dist.size() != data_dist.size())
            throw std::invalid_argument("FiniteEnvironment: task table size mismatch");
        for (const auto& row : data_dist) detail::check_distribution(row, "FiniteEnvironment data distribution");
        for (const auto& row : loss)
            for (double v : row)
                if (v < 0 || v > 1) throw std::invalid_argument("FiniteEnvironment: loss outside [0,1]");
        if (n_samples < 1 || n_tasks < 1) throw std::invalid_argument("FiniteEnvironment: N and K must be >= 1");
    }

    std::vector<double> marginal_data_dist() const {
        std::vector<double> m(n_symbols(), 0.0);
        for (std::size_t t = 0; t < task_dist.size(); ++t)
            for (int z = 0; z < n_symbols(); ++z) m[z] += task_dist[t] * data_dist[t][z];
        return m;
    }
};

// meta-learner: K datasets -> distribution over hyperparameters
using MetaLearner = std::function<std::vector<double>(const std::vector<std::vector<int>>&)>;
// base-learner given a hyperparameter index
using ThetaBaseLearner = std::function<std::vector<double>(const std::vector<int>&, int)>;

struct MetaGenAnalysis {
    double gap = 0.0;        // exact absolute average meta-generalization gap
    double bound = 0.0;      // assembled two-term bound
    double env_mi = 0.0;     // I(theta; D_mtr)
    double within_term = 0.0;
    double env_term = 0.0;
};

// Enumerates the full joint over meta-training datasets, hyperparameters,
// fresh tasks and their datasets. The environment term applies the
// single-task bound at the level of datasets-as-samples; the within-task term
// averages per-(theta, task) bounds over the meta-learner marginal.
inline MetaGenAnalysis meta_gen_bound_thm43(const FiniteEnvironment& env, const MetaLearner& meta_learner,
                                            const ThetaBaseLearner& base_learner, int n_theta) {
    env.validate();
    const int n_z = env.n_symbols();
    const double dataset_count = std::pow(static_cast<double>(n_z), env.n_samples);
    const double joint = std::pow(dataset_count, env.n_tasks) * n_theta;
    if (joint > kEnumerationBudget)
        throw std::invalid_argument("meta_gen_bound_thm43: joint state space too large (about " +
                                    std::to_string(joint) + " states)");

    const auto datasets = detail::enumerate_tuples(n_z, env.n_samples);
    const std::vector<double> marginal_z = env.marginal_data_dist();
    const int n_d = static_cast<int>(datasets.size());

    // marginal dataset distribution and per-task conditionals
    std::vector<double> p_d(n_d, 0.0);
    std::vector<std::vector<double>> p_d_given_t(env.task_dist.size(), std::vector<double>(n_d, 0.0));
    for (int di = 0; di < n_d; ++di) {
        for (std::size_t t = 0; t < env.task_dist.size(); ++t) {
            const double p = detail::tuple_probability(datasets[di], env.data_dist[t]);
            p_d_given_t[t][di] = p;
            p_d[di] += env.task_dist[t] * p;
        }
    }

    // average training loss of the base-learner under theta on a dataset
    auto train_loss = [&](int di, int theta) {
        const std::vector<double> post = base_learner(datasets[di], theta);
        double l = 0;
        for (int f = 0; f < env.n_hypotheses(); ++f) {
            double acc = 0;
            for (int z : datasets[di]) acc += env.loss[f][z];
            l += post[f] * acc / env.n_samples;
        }
        return l;
    };
    // population loss of the base-learner output on task t
    auto pop_loss = [&](int di, int theta, int t) {
        const std::vector<double> post = base_learner(datasets[di], theta);
        double l = 0;
        for (int f = 0; f < env.n_hypotheses(); ++f) {
            double acc = 0;
            for (int z = 0; z < n_z; ++z) acc += env.data_dist[t][z] * env.loss[f][z];
            l += post[f] * acc;
        }
        return l;
    };

    // enumerate meta-training datasets (tuples of dataset indices)
    const auto mtr_tuples = detail::enumerate_tuples(n_d, env.n_tasks);
    std::vector<double> p_theta(n_theta, 0.0);
    double env_mi = 0.0;
    double meta_training_loss = 0.0;
    std::vector<std::pair<double, std::vector<double>>> mtr_table;
    for (const auto& tup : mtr_tuples) {
        double p = 1.0;
        for (int di : tup) p *= p_d[di];
        std::vector<double> post = meta_learner([&] {
            std::vector<std::vector<int>> ds;
            for (int di : tup) ds.push_back(datasets[di]);
            return ds;
        }());
        detail::check_distribution(post, "meta learner output");
        for (int th = 0; th < n_theta; ++th) p_theta[th] += p * post[th];
        mtr_table.emplace_back(p, std::move(post));
    }
    for (std::size_t i = 0; i < mtr_tuples.size(); ++i) {
        const auto& [p, post] = mtr_table[i];
        if (p == 0) continue;
        for (int th = 0; th < n_theta; ++th) {
            if (post[th] > 0 && p_theta[th] > 0) env_mi += p * post[th] * std::log(post[th] / p_theta[th]);
            double avg_tr = 0;
            for (int di : mtr_tuples[i]) avg_tr += train_loss(di, th);
            meta_training_loss += p * post[th] * avg_tr / env.n_tasks;
        }
    }
    env_mi = std::max(env_mi, 0.0);

    // meta-population loss: fresh task and dataset under each theta
    double meta_population_loss = 0.0;
    for (int th = 0; th < n_theta; ++th) {
        if (p_theta[th] == 0) continue;
        double l_theta = 0;
        for (std::size_t t = 0; t < env.task_dist.size(); ++t)
            for (int di = 0; di < n_d; ++di)
                if (p_d_given_t[t][di] > 0)
                    l_theta += env.task_dist[t] * p_d_given_t[t][di] * pop_loss(di, th, static_cast<int>(t));
        meta_population_loss += p_theta[th] * l_theta;
    }

    MetaGenAnalysis out;
    out.gap = std::abs(meta_population_loss - meta_training_loss);
    out.env_mi = env_mi;
    out.env_term = gen_bound_thm41(env_mi, kSubGaussianSq, env.n_tasks);

    // within-task term: per-(theta, task) mutual information of the
    // base-learner, averaged over the meta-learner marginal and p(T)
    double within = 0.0;
    for (int th = 0; th < n_theta; ++th) {
        if (p_theta[th] == 0) continue;
        for (std::size_t t = 0; t < env.task_dist.size(); ++t) {
            BaseLearner fixed = [&, th](const std::vector<int>& d) { return base_learner(d, th); };
            const double mi = exact_mutual_information(fixed, env.data_dist[t], env.n_samples);
            within += p_theta[th] * env.task_dist[t] * gen_bound_thm41(mi, kSubGaussianSq, env.n_samples);
        }
    }
    out.within_term = within;
    out.bound = out.env_term + out.within_term;
    return out;
}

// ---------------------------------------------------------------------------
// Task relatedness

struct GaussianEnvironment {
    double task_mean = 0.0;      // mean of the task distribution
    double task_var = 1.0;       // variance of task means
    double obs_var = 1.0;        // per-task observation variance
    int n_samples = 1;

    void validate() const {
        if (!(task_var >= 0) || !(obs_var > 0)) throw std::invalid_argument("GaussianEnvironment: bad variances");
        if (n_samples < 1) throw std::invalid_argument("GaussianEnvironment: N must be >= 1");
    }
};

// E_{T,T'}[KL(p(D|T) || p(D|T'))] = N task_var / obs_var for Gaussian tasks
inline double task_relatedness_gaussian(const GaussianEnvironment& env) {
    env.validate();
    return env.n_samples * env.task_var / env.obs_var;
}

enum class Divergence { kl, js };

// averaged pairwise divergence between the dataset marginals of two
// independently drawn tasks, by enumeration over Z^N
inline double task_relatedness_finite(const FiniteEnvironment& env, Divergence div) {
    env.validate();
    const auto datasets = detail::enumerate_tuples(env.n_symbols(), env.n_samples);
    const int n_t = static_cast<int>(env.task_dist.size());
    std::vector<std::vector<double>> p_d(n_t, std::vector<double>(datasets.size()));
    for (int t = 0; t < n_t; ++t)
        for (std::size_t di = 0; di < datasets.size(); ++di)
            p_d[t][di] = detail::tuple_probability(datasets[di], env.data_dist[t]);
    auto kl = [](const std::vector<double>& p, const std::vector<double>& q) {
        double d = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (p[i] == 0) continue;
            if (q[i] == 0) return std::numeric_limits<double>::infinity();
            d += p[i] * std::log(p[i] / q[i]);
        }
        return d;
    };
    double acc = 0;
    for (int a = 0; a < n_t; ++a) {
        for (int b = 0; b < n_t; ++b) {
            double d;
            if (div == Divergence::kl) {
                d = kl(p_d[a], p_d[b]);
            } else {
                std::vector<double> mix(datasets.size());
                for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = 0.5 * (p_d[a][i] + p_d[b][i]);
                d = 0.5 * kl(p_d[a], mix) + 0.5 * kl(p_d[b], mix);
            }
            acc += env.task_dist[a] * env.task_dist[b] * d;
        }
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Gibbs meta-learner and the information meta-risk objective

// L_IMRM(theta) = (1/K) sum_k [ E_gibbs[L_k] + (1/beta) KL(gibbs || prior_theta) ]
// with gibbs the per-task Gibbs base-learner under the theta-indexed prior
inline double imrm_meta_loss(const std::vector<std::vector<double>>& per_task_losses,
                             const DiscreteDistribution& prior_theta, double beta) {
    if (per_task_losses.empty()) throw std::invalid_argument("imrm_meta_loss: no tasks");
    double acc = 0;
    for (const auto& losses : per_task_losses) {
        const DiscreteDistribution post = gibbs_posterior(prior_theta, losses, beta);
        double expected = 0, kl = 0;
        for (std::size_t i = 0; i < losses.size(); ++i) {
            expected += post.probs[i] * losses[i];
            if (post.probs[i] > 0) kl += post.probs[i] * std::log(post.probs[i] / prior_theta.probs[i]);
        }
        acc += expected + kl / beta;
    }
    return acc / per_task_losses.size();
}

// p(theta | D_mtr) proportional to q(theta) exp(-beta L_IMRM(theta))
inline DiscreteDistribution gibbs_meta_learner(const DiscreteDistribution& hyperprior,
                                               const std::vector<double>& imrm_losses, double beta) {
    return gibbs_posterior(hyperprior, imrm_losses, beta);
}

// ---------------------------------------------------------------------------
// Minimum excess meta-risk on a hierarchical finite model

// I(theta; D_mtr)/(K N) + I(phi; D_tr | theta)/N
inline double memr_decomposition_bound(double mi_hyper, double mi_model, int n_tasks, int n_samples) {
    if (mi_hyper < 0 || mi_model < 0) throw std::invalid_argument("memr_decomposition_bound: negative MI");
    return mi_hyper / (static_cast<double>(n_tasks) * n_samples) + mi_model / n_samples;
}

struct HierarchicalModel {
    std::vector<double> hyperprior;                            // p(theta)
    std::vector<std::vector<double>> prior;                    // p(phi | theta)
    std::vector<double> x_dist;                                // p(x)
    std::vector<std::vector<std::vector<double>>> y_given_xphi;  // [phi][x][y]
    int n_per_task = 1;                                        // N
    int n_tasks = 1;                                           // K

    int n_theta() const { return static_cast<int>(hyperprior.size()); }
    int n_phi() const { return static_cast<int>(prior.empty() ? 0 : prior.front().size()); }
    int n_x() const { return static_cast<int>(x_dist.size()); }
    int n_y() const { return y_given_xphi.empty() ? 0 : static_cast<int>(y_given_xphi.front().front().size()); }

    void validate() const {
        detail::check_distribution(hyperprior, "HierarchicalModel hyperprior");
        for (const auto& row : prior) detail::check_distribution(row, "HierarchicalModel prior");
        detail::check_distribution(x_dist, "HierarchicalModel x distribution");
        for (const auto& phi_tab : y_given_xphi)
            for (const auto& row : phi_tab) detail::check_distribution(row, "HierarchicalModel likelihood");
        if (n_per_task < 1 || n_tasks < 1) throw std::invalid_argument("HierarchicalModel: N, K >= 1");
    }
};

struct MemrAnalysis {
    double memr = 0.0;                 // I(Y; phi | X, D)
    double bound = 0.0;                // decomposition bound
    double mi_hyper = 0.0;             // I(theta; D_mtr)
    double mi_model = 0.0;             // I(phi; D_tr | theta)
    double total_uncertainty = 0.0;    // H(Y | X, D)
    double aleatoric_phi = 0.0;        // H(Y | X, phi)
    double aleatoric_phi_theta = 0.0;  // H(Y | X, phi, theta)
};

// Full enumeration of the hierarchical joint: the Bayesian predictive risk
// decomposes into MEMR plus aleatoric uncertainty, and MEMR obeys the
// decomposition bound.
inline MemrAnalysis memr_analysis(const HierarchicalModel& m) {
    m.validate();
    const int n_pair = m.n_x() * m.n_y();
    const double d_count = std::pow(static_cast<double>(n_pair), m.n_per_task);
    const double joint = std::pow(d_count, m.n_tasks + 1) * m.n_theta() * m.n_phi();
    if (joint > kEnumerationBudget)
        throw std::invalid_argument("memr_analysis: joint state space too large (about " +
                                    std::to_string(joint) + " states)");

    const auto ds = detail::enumerate_tuples(n_pair, m.n_per_task);
    const int n_d = static_cast<int>(ds.size());
    auto pair_x = [&](int pair) { return pair / m.n_y(); };
    auto pair_y = [&](int pair) { return pair % m.n_y(); };

    // p(D | phi) for one task's dataset
    std::vector<std::vector<double>> p_d_given_phi(m.n_phi(), std::vector<double>(n_d, 1.0));
    for (int f = 0; f < m.n_phi(); ++f)
        for (int di = 0; di < n_d; ++di)
            for (int pair : ds[di])
                p_d_given_phi[f][di] *= m.x_dist[pair_x(pair)] * m.y_given_xphi[f][pair_x(pair)][pair_y(pair)];

    // p(D | theta) marginalizing the per-task phi
    std::vector<std::vector<double>> p_d_given_theta(m.n_theta(), std::vector<double>(n_d, 0.0));
    for (int th = 0; th < m.n_theta(); ++th)
        for (int f = 0; f < m.n_phi(); ++f)
            for (int di = 0; di < n_d; ++di) p_d_given_theta[th][di] += m.prior[th][f] * p_d_given_phi[f][di];

    // I(theta; D_mtr): D_mtr is a K-tuple of datasets, i.i.d. given theta
    const auto mtr = detail::enumerate_tuples(n_d, m.n_tasks);
    double mi_hyper = 0.0;
    {
        std::vector<double> p_mtr(mtr.size(), 0.0);
        std::vector<std::vector<double>> p_mtr_given_theta(m.n_theta(), std::vector<double>(mtr.size(), 1.0));
        for (int th = 0; th < m.n_theta(); ++th)
            for (std::size_t i = 0; i < mtr.size(); ++i) {
                for (int di : mtr[i]) p_mtr_given_theta[th][i] *= p_d_given_theta[th][di];
                p_mtr[i] += m.hyperprior[th] * p_mtr_given_theta[th][i];
            }
        for (int th = 0; th < m.n_theta(); ++th)
            for (std::size_t i = 0; i < mtr.size(); ++i) {
                const double pj = m.hyperprior[th] * p_mtr_given_theta[th][i];
                if (pj > 0 && p_mtr[i] > 0)
                    mi_hyper += pj * std::log(p_mtr_given_theta[th][i] / p_mtr[i]);
            }
        mi_hyper = std::max(mi_hyper, 0.0);
    }

    // I(phi; D_tr | theta)
    double mi_model = 0.0;
    for (int th = 0; th < m.n_theta(); ++th) {
        double mi_th = 0.0;
        for (int f = 0; f < m.n_phi(); ++f)
            for (int di = 0; di < n_d; ++di) {
                const double pj = m.prior[th][f] * p_d_given_phi[f][di];
                if (pj > 0 && p_d_given_theta[th][di] > 0)
                    mi_th += pj * std::log(p_d_given_phi[f][di] / p_d_given_theta[th][di]);
            }
        mi_model += m.hyperprior[th] * std::max(mi_th, 0.0);
    }

    // predictive uncertainties: D = (D_mtr, D_T)
    MemrAnalysis out;
    out.mi_hyper = mi_hyper;
    out.mi_model = mi_model;
    out.bound = memr_decomposition_bound(mi_hyper, mi_model, m.n_tasks, m.n_per_task);

    double h_y_given_xd = 0.0;
    for (std::size_t i = 0; i < mtr.size(); ++i) {
        for (int dt = 0; dt < n_d; ++dt) {
            // joint weight of (D_mtr = mtr[i], D_T = dt) and posterior over (theta, phi_T)
            double p_data = 0.0;
            std::vector<double> post_phi(m.n_phi(), 0.0);
            for (int th = 0; th < m.n_theta(); ++th) {
                double p_mtr_th = m.hyperprior[th];
                for (int di : mtr[i]) p_mtr_th *= p_d_given_theta[th][di];
                for (int f = 0; f < m.n_phi(); ++f) {
                    const double w = p_mtr_th * m.prior[th][f] * p_d_given_phi[f][dt];
                    post_phi[f] += w;
                    p_data += w;
                }
            }
            if (p_data == 0) continue;
            for (double& v : post_phi) v /= p_data;
            // predictive p(y | x, D) = sum_phi post(phi) p(y | x, phi)
            for (int x = 0; x < m.n_x(); ++x) {
                for (int y = 0; y < m.n_y(); ++y) {
                    double pred = 0;
                    for (int f = 0; f < m.n_phi(); ++f) pred += post_phi[f] * m.y_given_xphi[f][x][y];
                    h_y_given_xd -= p_data * m.x_dist[x] * xlogx(pred);
                }
            }
        }
    }
    out.total_uncertainty = h_y_given_xd;

    // marginal of the meta-test phi and (theta, phi) for the aleatoric terms
    std::vector<double> p_phi(m.n_phi(), 0.0);
    for (int th = 0; th < m.n_theta(); ++th)
        for (int f = 0; f < m.n_phi(); ++f) p_phi[f] += m.hyperprior[th] * m.prior[th][f];
    double h_y_given_xphi = 0.0;
    for (int f = 0; f < m.n_phi(); ++f)
        for (int x = 0; x < m.n_x(); ++x)
            for (int y = 0; y < m.n_y(); ++y)
                h_y_given_xphi -= p_phi[f] * m.x_dist[x] * xlogx(m.y_given_xphi[f][x][y]);
    out.aleatoric_phi = h_y_given_xphi;

    double h_y_given_xphitheta = 0.0;
    for (int th = 0; th < m.n_theta(); ++th)
        for (int f = 0; f < m.n_phi(); ++f)
            for (int x = 0; x < m.n_x(); ++x)
                for (int y = 0; y < m.n_y(); ++y)
                    h_y_given_xphitheta -=
                        m.hyperprior[th] * m.prior[th][f] * m.x_dist[x] * xlogx(m.y_given_xphi[f][x][y]);
    out.aleatoric_phi_theta = h_y_given_xphitheta;

    out.memr = out.total_uncertainty - out.aleatoric_phi;
    return out;
}

}  // namespace metalearn
