#pragma once

#include "metalearn/bayes.hpp"
#include "metalearn/comms.hpp"
#include "metalearn/core.hpp"
#include "metalearn/meta_algorithms.hpp"
#include "metalearn/models.hpp"

#include <cmath>
#include <memory>
#include <vector>

// Task families and model bindings for the built-in benchmarks.

namespace metalearn {

// ---------------------------------------------------------------------------
// Sinusoid regression: y = A sin(x + b) with A ~ U[0.1, 5], b ~ U[0, pi],
// inputs x ~ U[-5, 5].

struct SinusoidTask {
    double amplitude = 1.0;
    double phase = 0.0;

    double eval(double x) const { return amplitude * std::sin(x + phase); }
};

inline SinusoidTask sample_sinusoid_task(RngStream& rng) {
    SinusoidTask t;
    t.amplitude = rng.uniform(0.1, 5.0);
    t.phase = rng.uniform(0.0, M_PI);
    return t;
}

inline TaskDataset gen_sinusoid_task(RngStream rng, int n_train, int n_val, std::int64_t task_id) {
    const SinusoidTask t = sample_sinusoid_task(rng);
    std::vector<Sample> samples;
    samples.reserve(n_train + n_val);
    for (int i = 0; i < n_train + n_val; ++i) {
        const double x = rng.uniform(-5.0, 5.0);
        samples.push_back({make_vec({x}), make_vec({t.eval(x)})});
    }
    TaskDataset out;
    auto [tr, va] = split_dataset(samples, n_train);
    out.train = std::move(tr);
    out.val = std::move(va);
    out.task_id = task_id;
    return out;
}

inline MetaBatch gen_sinusoid_meta_batch(int k_tasks, int n_train, int n_val, const RngStream& env_rng,
                                         std::uint64_t environment_seed = 0) {
    MetaBatch batch;
    batch.environment_seed = environment_seed;
    for (int k = 0; k < k_tasks; ++k)
        batch.tasks.push_back(gen_sinusoid_task(env_rng.derived(static_cast<std::uint64_t>(k)), n_train, n_val, k));
    return batch;
}

// standard sinusoid backbone: two hidden layers of 40 tanh units
inline Mlp sinusoid_mlp(int context_dim = 0) { return Mlp(1, {40, 40}, 1, Activation::tanh, context_dim); }

inline ObjectiveBinder mlp_mse_binder(const Mlp& mlp) {
    return [mlp](const TaskDataset& task) {
        return TaskObjectives{std::make_shared<MlpObjective>(mlp, task.train, LossKind::mse_mean),
                              std::make_shared<MlpObjective>(mlp, task.val, LossKind::mse_mean)};
    };
}

// ---------------------------------------------------------------------------
// Few-pilot demodulation.

inline double snr_db_to_noise_power(double snr_db) { return std::pow(10.0, -snr_db / 10.0); }

// demodulator backbone: received (I, Q) -> 30 -> 30 -> 16 logits, ReLU
inline SoftmaxClassifier demod_classifier() { return SoftmaxClassifier(2, {30, 30}, 16, Activation::relu); }

inline ObjectiveBinder classifier_binder(const SoftmaxClassifier& clf) {
    const Mlp backbone = clf.backbone();
    return [backbone](const TaskDataset& task) {
        return TaskObjectives{std::make_shared<MlpObjective>(backbone, task.train, LossKind::cross_entropy),
                              std::make_shared<MlpObjective>(backbone, task.val, LossKind::cross_entropy)};
    };
}

struct DemodEnvironment {
    std::vector<DemodTaskParams> devices;
    MetaBatch batch;
};

inline DemodEnvironment gen_demod_environment(int k_devices, double snr_db, int n_train, int n_val,
                                              const RngStream& env_rng) {
    DemodEnvironment env;
    const double n0 = snr_db_to_noise_power(snr_db);
    for (int k = 0; k < k_devices; ++k) {
        RngStream device_rng = env_rng.derived({static_cast<std::uint64_t>(k), 0});
        DemodTaskParams p = sample_demod_device(n0, n_train + n_val, n_train, device_rng);
        env.batch.tasks.push_back(
            gen_demod_task(p, env_rng.derived({static_cast<std::uint64_t>(k), 1}), k));
        env.devices.push_back(p);
    }
    return env;
}

// ---------------------------------------------------------------------------
// BMAML adapters

inline std::vector<BmamlTask> bmaml_tasks_from_batch(const MetaBatch& batch, const ObjectiveBinder& bind) {
    std::vector<BmamlTask> out;
    out.reserve(batch.tasks.size());
    for (const auto& t : batch.tasks) {
        BmamlTask bt;
        bt.obj = bind(t);
        bt.n_tr = static_cast<int>(t.train.size());
        bt.n_va = static_cast<int>(t.val.size());
        out.push_back(std::move(bt));
    }
    return out;
}

inline ParticleSet init_particles(const Mlp& mlp, int n_particles, RngStream& rng) {
    ParticleSet set;
    for (int i = 0; i < n_particles; ++i) set.particles.push_back(mlp.init_params(rng));
    return set;
}

// ensemble-mean prediction MSE of a particle set on a dataset
inline double particle_ensemble_mse(const Mlp& mlp, const ParticleSet& set, const std::vector<Sample>& data) {
    double total = 0;
    for (const Sample& s : data) {
        Vec mean_pred = Vec::Zero(mlp.output_dim());
        for (const Vec& phi : set.particles) mean_pred += mlp.forward(phi, s.x);
        mean_pred /= set.size();
        total += (mean_pred - s.y).squaredNorm();
    }
    return total / data.size();
}

// per-task SVGD adaptation followed by the ensemble validation MSE
inline double bmaml_adapted_mse(const Mlp& mlp, const ParticleSet& meta, const TaskDataset& task,
                                const BmamlConfig& cfg, double alpha, int n_steps) {
    BmamlTask bt;
    bt.obj = {std::make_shared<MlpObjective>(mlp, task.train, LossKind::mse_mean),
              std::make_shared<MlpObjective>(mlp, task.val, LossKind::mse_mean)};
    bt.n_tr = static_cast<int>(task.train.size());
    bt.n_va = static_cast<int>(task.val.size());
    const ScoreFn score = bmaml_task_score(bt, meta.mean(), cfg);
    const ParticleSet adapted = svgd_adapt(meta, score, alpha, n_steps);
    return particle_ensemble_mse(mlp, adapted, task.val);
}

// ---------------------------------------------------------------------------
// Quadratic task family (fast synthetic benchmark for trend checks)

inline TaskObjectives gen_quadratic_task(RngStream rng, int dim) {
    Mat a = Mat::Zero(dim, dim);
    for (int i = 0; i < dim; ++i)
        for (int j = 0; j < dim; ++j) a(i, j) = rng.normal();
    a = (a * a.transpose() / dim + 0.3 * Mat::Identity(dim, dim)).eval();
    const Vec center = rng.normal_vec(dim);
    // train and validation share the center; curvature differs
    Mat b = Mat::Zero(dim, dim);
    for (int i = 0; i < dim; ++i)
        for (int j = 0; j < dim; ++j) b(i, j) = rng.normal();
    b = (b * b.transpose() / dim + 0.3 * Mat::Identity(dim, dim)).eval();
    return {quadratic_objective(a, center), quadratic_objective(b, center)};
}

}  // namespace metalearn
