#pragma once

#include "metalearn/benchmarks.hpp"
#include "metalearn/bilevel.hpp"
#include "metalearn/bounds.hpp"
#include "metalearn/comms.hpp"
#include "metalearn/ridge_meta.hpp"

#include <json.hpp>

#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

// Experiment configuration, deterministic run orchestration, and CSV/manifest
// emission for the built-in benchmarks.

namespace metalearn {

struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr const char* kLibraryVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Sectioned key-value configuration text. Unknown keys are errors, not
// warnings: a silent typo invalidates an experiment.

class ConfigFile {
public:
    static ConfigFile parse(const std::string& text) {
        ConfigFile cfg;
        std::istringstream in(text);
        std::string line;
        std::string section;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']') throw config_error("config line " + std::to_string(line_no) + ": bad section");
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw config_error("config line " + std::to_string(line_no) + ": expected key = value");
            std::string key = trim(line.substr(0, eq));
            std::string value = trim(line.substr(eq + 1));
            if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
                value = value.substr(1, value.size() - 2);
            if (key.empty()) throw config_error("config line " + std::to_string(line_no) + ": empty key");
            const std::string full = section.empty() ? key : section + "." + key;
            if (cfg.values_.count(full)) throw config_error("config: duplicate key '" + full + "'");
            cfg.values_[full] = value;
        }
        return cfg;
    }

    static ConfigFile load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw config_error("config: cannot open '" + path + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str());
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        consumed_.insert(key);
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        consumed_.insert(key);
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t used = 0;
            const double v = std::stod(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (...) {
            throw config_error("config: key '" + key + "' is not a number: '" + it->second + "'");
        }
    }

    long long get_int(const std::string& key, long long fallback) const {
        consumed_.insert(key);
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t used = 0;
            const long long v = std::stoll(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (...) {
            throw config_error("config: key '" + key + "' is not an integer: '" + it->second + "'");
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        consumed_.insert(key);
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true") return true;
        if (it->second == "false") return false;
        throw config_error("config: key '" + key + "' is not a boolean: '" + it->second + "'");
    }

    // every present key must have been consumed by a getter
    void ensure_fully_consumed() const {
        std::vector<std::string> unknown;
        for (const auto& [k, v] : values_)
            if (!consumed_.count(k)) unknown.push_back(k);
        if (!unknown.empty()) {
            std::string msg = "config: unknown keys:";
            for (const auto& k : unknown) msg += " '" + k + "'";
            throw config_error(msg);
        }
    }

    const std::map<std::string, std::string>& raw() const { return values_; }

private:
    static std::string trim(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return "";
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    }

    std::map<std::string, std::string> values_;
    mutable std::set<std::string> consumed_;
};

// ---------------------------------------------------------------------------
// Experiment description

struct ExperimentConfig {
    std::string benchmark = "sinusoid";  // sinusoid | demod | chanpred | bilevel_quadratic | bounds
    std::string algorithm = "maml";
    InnerConfig inner;
    OuterConfig outer;
    int k_tasks = 20;
    int n_train = 10;
    int n_val = 10;
    int n_test_tasks = 20;
    int n_test_val = 50;
    int eval_every = 0;  // 0: pick automatically
    std::uint64_t seed = 1;
    std::string out_dir = "runs";

    // demodulation
    double snr_db = 18.0;
    int ser_eval_symbols = 2000;
    int scratch_steps = 200;

    // bmaml
    int n_particles = 5;
    double bmaml_sigma_n_sq = 0.1;
    double bmaml_prior_gamma = 1.0;

    // channel prediction
    int cp_s_dim = 16;
    int cp_rank = 2;
    double cp_rho = 0.98;
    int cp_slots = 24;
    int cp_window = 2;
    int cp_lag = 1;
    double cp_lambda = 0.5;
    std::string cp_mode = "lstd";  // naive | lstd

    // bilevel quadratic
    double bl_a = 2.0;
    double bl_b = 1.0;
    double bl_noise = 0.0;
    int bl_lower_steps = 1;
    int bl_neumann_n = 4;
    double bl_alpha = 10.0;
    double bl_beta = 30.0;

    // bounds
    int n_environments = 50;

    static ExperimentConfig from_config(const ConfigFile& cfg);
    void validate() const;
};

inline ExperimentConfig ExperimentConfig::from_config(const ConfigFile& cfg) {
    ExperimentConfig e;
    e.benchmark = cfg.get_string("experiment.benchmark", e.benchmark);
    e.algorithm = cfg.get_string("experiment.algorithm", e.algorithm);
    e.k_tasks = static_cast<int>(cfg.get_int("experiment.k_tasks", e.k_tasks));
    e.n_train = static_cast<int>(cfg.get_int("experiment.n_train", e.n_train));
    e.n_val = static_cast<int>(cfg.get_int("experiment.n_val", e.n_val));
    e.n_test_tasks = static_cast<int>(cfg.get_int("experiment.n_test_tasks", e.n_test_tasks));
    e.n_test_val = static_cast<int>(cfg.get_int("experiment.n_test_val", e.n_test_val));
    e.eval_every = static_cast<int>(cfg.get_int("experiment.eval_every", e.eval_every));
    e.seed = static_cast<std::uint64_t>(cfg.get_int("experiment.seed", static_cast<long long>(e.seed)));
    e.out_dir = cfg.get_string("experiment.out_dir", e.out_dir);

    e.inner.alpha = cfg.get_double("inner.alpha", e.inner.alpha);
    e.inner.n_steps = static_cast<int>(cfg.get_int("inner.n_steps", e.inner.n_steps));
    e.inner.lambda = cfg.get_double("inner.lambda", e.inner.lambda);
    e.inner.cg_iters = static_cast<int>(cfg.get_int("inner.cg_iters", e.inner.cg_iters));
    e.inner.neumann_n = static_cast<int>(cfg.get_int("inner.neumann_n", e.inner.neumann_n));
    e.inner.tol_inner = cfg.get_double("inner.tol_inner", e.inner.tol_inner);
    e.inner.max_inner_iters = static_cast<int>(cfg.get_int("inner.max_inner_iters", e.inner.max_inner_iters));
    const std::string inverse = cfg.get_string("inner.inverse", "cg");
    if (inverse == "cg") {
        e.inner.inverse = InnerConfig::InverseMethod::cg;
    } else if (inverse == "neumann") {
        e.inner.inverse = InnerConfig::InverseMethod::neumann;
    } else {
        throw config_error("config: inner.inverse must be 'cg' or 'neumann'");
    }

    e.outer.beta = cfg.get_double("outer.beta", e.outer.beta);
    e.outer.meta_batch_size = static_cast<int>(cfg.get_int("outer.meta_batch_size", e.outer.meta_batch_size));
    e.outer.n_meta_iters = static_cast<int>(cfg.get_int("outer.n_meta_iters", e.outer.n_meta_iters));
    e.outer.sharp_alpha_in = cfg.get_double("outer.sharp_alpha_in", e.outer.sharp_alpha_in);
    e.outer.sharp_alpha_ot = cfg.get_double("outer.sharp_alpha_ot", e.outer.sharp_alpha_ot);
    e.outer.es_n_points = static_cast<int>(cfg.get_int("outer.es_n_points", e.outer.es_n_points));
    e.outer.es_delta = cfg.get_double("outer.es_delta", e.outer.es_delta);

    e.snr_db = cfg.get_double("demod.snr_db", e.snr_db);
    e.ser_eval_symbols = static_cast<int>(cfg.get_int("demod.ser_eval_symbols", e.ser_eval_symbols));
    e.scratch_steps = static_cast<int>(cfg.get_int("demod.scratch_steps", e.scratch_steps));

    e.n_particles = static_cast<int>(cfg.get_int("bmaml.n_particles", e.n_particles));
    e.bmaml_sigma_n_sq = cfg.get_double("bmaml.sigma_n_sq", e.bmaml_sigma_n_sq);
    e.bmaml_prior_gamma = cfg.get_double("bmaml.prior_gamma", e.bmaml_prior_gamma);

    e.cp_s_dim = static_cast<int>(cfg.get_int("chanpred.s_dim", e.cp_s_dim));
    e.cp_rank = static_cast<int>(cfg.get_int("chanpred.rank", e.cp_rank));
    e.cp_rho = cfg.get_double("chanpred.rho", e.cp_rho);
    e.cp_slots = static_cast<int>(cfg.get_int("chanpred.slots", e.cp_slots));
    e.cp_window = static_cast<int>(cfg.get_int("chanpred.window", e.cp_window));
    e.cp_lag = static_cast<int>(cfg.get_int("chanpred.lag", e.cp_lag));
    e.cp_lambda = cfg.get_double("chanpred.lambda", e.cp_lambda);
    e.cp_mode = cfg.get_string("chanpred.mode", e.cp_mode);

    e.bl_a = cfg.get_double("bilevel.a", e.bl_a);
    e.bl_b = cfg.get_double("bilevel.b", e.bl_b);
    e.bl_noise = cfg.get_double("bilevel.noise", e.bl_noise);
    e.bl_lower_steps = static_cast<int>(cfg.get_int("bilevel.lower_steps", e.bl_lower_steps));
    e.bl_neumann_n = static_cast<int>(cfg.get_int("bilevel.neumann_n", e.bl_neumann_n));
    e.bl_alpha = cfg.get_double("bilevel.alpha", e.bl_alpha);
    e.bl_beta = cfg.get_double("bilevel.beta", e.bl_beta);

    e.n_environments = static_cast<int>(cfg.get_int("bounds.n_environments", e.n_environments));

    cfg.ensure_fully_consumed();
    e.validate();
    return e;
}

inline void ExperimentConfig::validate() const {
    static const std::map<std::string, std::set<std::string>> admissible = {
        {"sinusoid",
         {"joint", "maml", "fomaml", "reptile", "imaml", "prox_maml", "es_maml_fo", "es_maml_h", "sharp_maml",
          "cavia", "bmaml"}},
        {"demod",
         {"joint", "maml", "fomaml", "reptile", "imaml", "prox_maml", "sharp_maml", "cavia", "scratch",
          "mmse_ml"}},
        {"chanpred", {"closed_form"}},
        {"bilevel_quadratic", {"alset"}},
        {"bounds", {"enumerate"}},
    };
    const auto it = admissible.find(benchmark);
    if (it == admissible.end()) throw config_error("config: unknown benchmark '" + benchmark + "'");
    if (!it->second.count(algorithm))
        throw config_error("config: algorithm '" + algorithm + "' is not admissible for benchmark '" +
                           benchmark + "'");
    if (k_tasks < 1) throw config_error("config: experiment.k_tasks must be positive");
    if (n_train < 0 || n_val < 0) throw config_error("config: experiment.n_train/n_val must be nonnegative");
    if (n_test_tasks < 1) throw config_error("config: experiment.n_test_tasks must be positive");
    if (benchmark == "chanpred" && cp_mode != "naive" && cp_mode != "lstd")
        throw config_error("config: chanpred.mode must be 'naive' or 'lstd'");
    try {
        inner.validate();
        outer.validate();
    } catch (const std::invalid_argument& e) {
        throw config_error(std::string("config: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// CSV and manifest emission

// shortest round-trip decimal representation
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

struct RunRow {
    long long iteration = 0;
    std::vector<double> metrics;
};

struct RunSummary {
    std::vector<std::string> columns;  // including "iteration" and trailing "seed"
    std::vector<RunRow> rows;
    double best_test_metric = std::numeric_limits<double>::quiet_NaN();
    double final_test_metric = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t seed = 0;
    std::string csv_path;
};

inline void write_csv(const std::string& path, const RunSummary& summary) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open CSV output '" + path + "'");
    for (std::size_t i = 0; i < summary.columns.size(); ++i) {
        out << summary.columns[i];
        out << (i + 1 < summary.columns.size() ? ',' : '\n');
    }
    for (const RunRow& r : summary.rows) {
        out << r.iteration;
        for (double m : r.metrics) out << ',' << format_double(m);
        out << ',' << summary.seed << '\n';
    }
}

inline void write_manifest(const std::string& path, const ExperimentConfig& cfg,
                           const std::map<std::string, std::string>& raw_config, double wall_time_ms,
                           const RunSummary& summary) {
    nlohmann::json j;
    j["library_version"] = kLibraryVersion;
    j["benchmark"] = cfg.benchmark;
    j["algorithm"] = cfg.algorithm;
    j["seed"] = cfg.seed;
    j["wall_time_ms"] = wall_time_ms;
    j["csv"] = summary.csv_path;
    j["best_test_metric"] = summary.best_test_metric;
    j["final_test_metric"] = summary.final_test_metric;
    j["config_echo"] = raw_config;
    // meta-test tasks draw from the "test"-tagged stream path, disjoint from
    // the "env"/"train" paths used during meta-training
    j["rng_paths"] = {{"environment", "seed/env"}, {"training", "seed/train"}, {"meta_test", "seed/test"}};
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Experiment drivers

namespace detail {

inline constexpr std::uint64_t kPathEnv = 0xE17;
inline constexpr std::uint64_t kPathTrain = 0x7121;
inline constexpr std::uint64_t kPathTest = 0x7E57;
inline constexpr std::uint64_t kPathInit = 0x1417;

inline MetaAlgorithm algorithm_from_tag(const std::string& tag) {
    if (tag == "joint") return MetaAlgorithm::joint;
    if (tag == "maml") return MetaAlgorithm::maml;
    if (tag == "fomaml") return MetaAlgorithm::fomaml;
    if (tag == "reptile") return MetaAlgorithm::reptile;
    if (tag == "imaml") return MetaAlgorithm::imaml;
    if (tag == "prox_maml") return MetaAlgorithm::prox_maml;
    if (tag == "es_maml_fo") return MetaAlgorithm::es_maml_first_order;
    if (tag == "es_maml_h") return MetaAlgorithm::es_maml_hessian;
    if (tag == "sharp_maml") return MetaAlgorithm::sharp_maml;
    throw config_error("unknown meta algorithm tag '" + tag + "'");
}

inline int pick_eval_every(const ExperimentConfig& cfg) {
    if (cfg.eval_every > 0) return cfg.eval_every;
    return std::max(1, cfg.outer.n_meta_iters / 20);
}

}  // namespace detail

// CAVIA outer loop (the context model needs the network, not just objectives)
inline MetaTrainResult cavia_meta_train(const Mlp& mlp, const Vec& theta0, const std::vector<TaskDataset>& tasks,
                                        LossKind kind, const InnerConfig& inner, const OuterConfig& outer,
                                        const RngStream& root, int iter_offset = 0) {
    MetaTrainResult res;
    res.theta = theta0;
    const int n_tasks = static_cast<int>(tasks.size());
    const int batch_size = std::min(outer.meta_batch_size, n_tasks);
    for (int it = iter_offset; it < iter_offset + outer.n_meta_iters; ++it) {
        RngStream iter_rng = root.derived({0x5a7e, static_cast<std::uint64_t>(it)});
        const std::vector<int> idx = iter_rng.sample_without_replacement(n_tasks, batch_size);
        double loss = 0;
        Vec grad = Vec::Zero(res.theta.size());
        for (int i : idx) {
            loss += cavia_meta_objective(mlp, res.theta, tasks[i], kind, inner);
            grad += cavia_meta_gradient(mlp, res.theta, tasks[i], kind, inner);
        }
        loss /= batch_size;
        if (!std::isfinite(loss) || loss > outer.divergence_guard)
            throw numeric_error("cavia_meta_train: divergence at iteration " + std::to_string(it));
        res.loss_trace.push_back(loss);
        res.theta -= (outer.beta / batch_size) * grad;
    }
    return res;
}

// shared driver for the sinusoid and demodulation benchmarks: chunked
// meta-training with periodic meta-test evaluation
struct TrainEvalHooks {
    std::function<double(const Vec&)> evaluate;                          // theta -> test metric
    std::function<MetaTrainResult(const Vec&, int, int)> train_chunk;    // (theta, offset, iters) -> result
};

inline RunSummary run_train_eval_loop(const ExperimentConfig& cfg, const TrainEvalHooks& hooks,
                                      const Vec& theta0, const std::string& metric_name) {
    RunSummary summary;
    summary.columns = {"iteration", "meta_train_loss", metric_name, "seed"};
    summary.seed = cfg.seed;
    const int eval_every = detail::pick_eval_every(cfg);
    Vec theta = theta0;
    int done = 0;
    double last_train_loss = std::numeric_limits<double>::quiet_NaN();
    summary.best_test_metric = std::numeric_limits<double>::infinity();
    // row at iteration 0 evaluates the initialization
    {
        const double m = hooks.evaluate(theta);
        summary.rows.push_back({0, {last_train_loss, m}});
        summary.best_test_metric = std::min(summary.best_test_metric, m);
        summary.final_test_metric = m;
    }
    while (done < cfg.outer.n_meta_iters) {
        const int chunk = std::min(eval_every, cfg.outer.n_meta_iters - done);
        const MetaTrainResult res = hooks.train_chunk(theta, done, chunk);
        theta = res.theta;
        done += chunk;
        last_train_loss = res.loss_trace.empty() ? last_train_loss : res.loss_trace.back();
        const double m = hooks.evaluate(theta);
        summary.rows.push_back({done, {last_train_loss, m}});
        summary.best_test_metric = std::min(summary.best_test_metric, m);
        summary.final_test_metric = m;
    }
    return summary;
}

// --- sinusoid ---

inline RunSummary run_sinusoid_experiment(const ExperimentConfig& cfg) {
    const RngStream root(cfg.seed);
    const MetaBatch batch =
        gen_sinusoid_meta_batch(cfg.k_tasks, cfg.n_train, cfg.n_val, root.derived(detail::kPathEnv), cfg.seed);
    std::vector<TaskDataset> test_tasks;
    for (int i = 0; i < cfg.n_test_tasks; ++i)
        test_tasks.push_back(gen_sinusoid_task(root.derived({detail::kPathTest, static_cast<std::uint64_t>(i)}),
                                               cfg.n_train, cfg.n_test_val, 1000000 + i));

    if (cfg.algorithm == "bmaml") {
        const Mlp mlp = sinusoid_mlp();
        const ObjectiveBinder bind = mlp_mse_binder(mlp);
        BmamlConfig bcfg;
        bcfg.sigma_n_sq = cfg.bmaml_sigma_n_sq;
        bcfg.prior_gamma = cfg.bmaml_prior_gamma;
        const std::vector<BmamlTask> tasks = bmaml_tasks_from_batch(batch, bind);
        RngStream init_rng = root.derived(detail::kPathInit);
        ParticleSet particles = init_particles(mlp, cfg.n_particles, init_rng);

        RunSummary summary;
        summary.columns = {"iteration", "meta_train_loss", "meta_test_loss", "seed"};
        summary.seed = cfg.seed;
        summary.best_test_metric = std::numeric_limits<double>::infinity();
        const int eval_every = detail::pick_eval_every(cfg);
        auto evaluate = [&](const ParticleSet& set) {
            double acc = 0;
            for (const auto& t : test_tasks)
                acc += bmaml_adapted_mse(mlp, set, t, bcfg, cfg.inner.alpha, cfg.inner.n_steps);
            return acc / test_tasks.size();
        };
        double m = evaluate(particles);
        double last_train = std::numeric_limits<double>::quiet_NaN();
        summary.rows.push_back({0, {last_train, m}});
        summary.best_test_metric = std::min(summary.best_test_metric, m);
        summary.final_test_metric = m;
        int done = 0;
        while (done < cfg.outer.n_meta_iters) {
            const int chunk = std::min(eval_every, cfg.outer.n_meta_iters - done);
            OuterConfig chunk_cfg = cfg.outer;
            chunk_cfg.n_meta_iters = chunk;
            const auto res = bmaml_meta_train(tasks, particles, bcfg, cfg.inner, chunk_cfg,
                                              root.derived(detail::kPathTrain), done);
            particles = res.particles;
            done += chunk;
            if (!res.loss_trace.empty()) last_train = res.loss_trace.back();
            m = evaluate(particles);
            summary.rows.push_back({done, {last_train, m}});
            summary.best_test_metric = std::min(summary.best_test_metric, m);
            summary.final_test_metric = m;
        }
        return summary;
    }

    if (cfg.algorithm == "cavia") {
        const Mlp mlp = sinusoid_mlp(/*context_dim=*/4);
        RngStream init_rng = root.derived(detail::kPathInit);
        const Vec theta0 = mlp.init_params(init_rng);
        TrainEvalHooks hooks;
        hooks.train_chunk = [&, mlp](const Vec& theta, int offset, int iters) {
            OuterConfig chunk = cfg.outer;
            chunk.n_meta_iters = iters;
            return cavia_meta_train(mlp, theta, batch.tasks, LossKind::mse_mean, cfg.inner, chunk,
                                    root.derived(detail::kPathTrain), offset);
        };
        hooks.evaluate = [&, mlp](const Vec& theta) {
            double acc = 0;
            for (const auto& t : test_tasks) acc += cavia_meta_objective(mlp, theta, t, LossKind::mse_mean, cfg.inner);
            return acc / test_tasks.size();
        };
        return run_train_eval_loop(cfg, hooks, theta0, "meta_test_loss");
    }

    const Mlp mlp = sinusoid_mlp();
    const ObjectiveBinder bind = mlp_mse_binder(mlp);
    std::vector<TaskObjectives> bound;
    for (const auto& t : batch.tasks) bound.push_back(bind(t));
    std::vector<TaskObjectives> bound_test;
    for (const auto& t : test_tasks) bound_test.push_back(bind(t));
    RngStream init_rng = root.derived(detail::kPathInit);
    const Vec theta0 = mlp.init_params(init_rng);
    const MetaAlgorithm algo = detail::algorithm_from_tag(cfg.algorithm);

    TrainEvalHooks hooks;
    hooks.train_chunk = [&](const Vec& theta, int offset, int iters) {
        OuterConfig chunk = cfg.outer;
        chunk.n_meta_iters = iters;
        return meta_train_from(algo, theta, bound, cfg.inner, chunk, root.derived(detail::kPathTrain), offset);
    };
    hooks.evaluate = [&](const Vec& theta) {
        double acc = 0;
        for (const auto& t : bound_test) acc += adapted_validation_loss(algo, t, theta, cfg.inner);
        return acc / bound_test.size();
    };
    return run_train_eval_loop(cfg, hooks, theta0, "meta_test_loss");
}

// --- demodulation ---

inline RunSummary run_demod_experiment(const ExperimentConfig& cfg) {
    const RngStream root(cfg.seed);
    const DemodEnvironment env =
        gen_demod_environment(cfg.k_tasks, cfg.snr_db, cfg.n_train, cfg.n_val, root.derived(detail::kPathEnv));
    const double n0 = snr_db_to_noise_power(cfg.snr_db);

    // meta-test devices with n_train pilots each
    struct TestDevice {
        DemodTaskParams params;
        TaskDataset pilots;
    };
    std::vector<TestDevice> test_devices;
    for (int i = 0; i < cfg.n_test_tasks; ++i) {
        RngStream drng = root.derived({detail::kPathTest, static_cast<std::uint64_t>(i), 0});
        TestDevice dev;
        dev.params = sample_demod_device(n0, cfg.n_train, cfg.n_train, drng);
        dev.pilots = gen_demod_task(dev.params, root.derived({detail::kPathTest, static_cast<std::uint64_t>(i), 1}),
                                    1000000 + i);
        test_devices.push_back(std::move(dev));
    }
    const SoftmaxClassifier clf = demod_classifier();
    const ObjectiveBinder bind = classifier_binder(clf);

    auto mean_ser = [&](const std::function<Vec(const TestDevice&)>& adapt) {
        double acc = 0;
        for (std::size_t i = 0; i < test_devices.size(); ++i) {
            const Vec phi = adapt(test_devices[i]);
            acc += ser_eval(clf, phi, test_devices[i].params, cfg.ser_eval_symbols,
                            root.derived({0x5E4, static_cast<std::uint64_t>(i)}));
        }
        return acc / test_devices.size();
    };

    if (cfg.algorithm == "mmse_ml") {
        RunSummary summary;
        summary.columns = {"iteration", "meta_train_loss", "ser", "seed"};
        summary.seed = cfg.seed;
        double acc = 0;
        for (std::size_t i = 0; i < test_devices.size(); ++i)
            acc += mmse_ml_ser(test_devices[i].params, test_devices[i].pilots.train, cfg.ser_eval_symbols,
                               root.derived({0x5E4, static_cast<std::uint64_t>(i)}));
        acc /= test_devices.size();
        summary.rows.push_back({0, {std::numeric_limits<double>::quiet_NaN(), acc}});
        summary.best_test_metric = summary.final_test_metric = acc;
        return summary;
    }

    if (cfg.algorithm == "scratch") {
        RunSummary summary;
        summary.columns = {"iteration", "meta_train_loss", "ser", "seed"};
        summary.seed = cfg.seed;
        InnerConfig scratch_cfg = cfg.inner;
        scratch_cfg.n_steps = cfg.scratch_steps;
        const double ser = mean_ser([&](const TestDevice& dev) {
            RngStream init = root.derived({detail::kPathInit, static_cast<std::uint64_t>(dev.pilots.task_id)});
            const Vec phi0 = clf.init_params(init);
            MlpObjective obj(clf.backbone(), dev.pilots.train, LossKind::cross_entropy);
            return inner_adapt_gd(obj, phi0, scratch_cfg);
        });
        summary.rows.push_back({0, {std::numeric_limits<double>::quiet_NaN(), ser}});
        summary.best_test_metric = summary.final_test_metric = ser;
        return summary;
    }

    if (cfg.algorithm == "cavia") {
        // context-augmented demodulator
        const SoftmaxClassifier ctx_clf(2, {30, 30}, 16, Activation::relu);
        const Mlp backbone(2, {30, 30}, 16, Activation::relu, 4);
        RngStream init_rng = root.derived(detail::kPathInit);
        const Vec theta0 = backbone.init_params(init_rng);
        TrainEvalHooks hooks;
        hooks.train_chunk = [&, backbone](const Vec& theta, int offset, int iters) {
            OuterConfig chunk = cfg.outer;
            chunk.n_meta_iters = iters;
            return cavia_meta_train(backbone, theta, env.batch.tasks, LossKind::cross_entropy, cfg.inner, chunk,
                                    root.derived(detail::kPathTrain), offset);
        };
        hooks.evaluate = [&, backbone](const Vec& theta) {
            double acc = 0;
            for (std::size_t i = 0; i < test_devices.size(); ++i) {
                const Vec ctx =
                    cavia_adapt(backbone, theta, test_devices[i].pilots.train, LossKind::cross_entropy, cfg.inner);
                // decisions from the context-conditioned network
                const auto& dev = test_devices[i];
                RngStream ser_rng = root.derived({0x5E4, static_cast<std::uint64_t>(i)});
                const auto constellation = qam16_constellation();
                int errors = 0;
                for (int s = 0; s < cfg.ser_eval_symbols; ++s) {
                    const Sample sample = demod_draw(dev.params, constellation, ser_rng);
                    const Vec logits = backbone.forward(theta, sample.x, ctx);
                    int best = 0;
                    for (int c = 1; c < 16; ++c)
                        if (logits[c] > logits[best]) best = c;
                    if (best != static_cast<int>(sample.y[0])) ++errors;
                }
                acc += static_cast<double>(errors) / cfg.ser_eval_symbols;
            }
            return acc / test_devices.size();
        };
        return run_train_eval_loop(cfg, hooks, theta0, "ser");
    }

    std::vector<TaskObjectives> bound;
    for (const auto& t : env.batch.tasks) bound.push_back(bind(t));
    RngStream init_rng = root.derived(detail::kPathInit);
    const Vec theta0 = clf.init_params(init_rng);
    const MetaAlgorithm algo = detail::algorithm_from_tag(cfg.algorithm);

    TrainEvalHooks hooks;
    hooks.train_chunk = [&](const Vec& theta, int offset, int iters) {
        OuterConfig chunk = cfg.outer;
        chunk.n_meta_iters = iters;
        return meta_train_from(algo, theta, bound, cfg.inner, chunk, root.derived(detail::kPathTrain), offset);
    };
    hooks.evaluate = [&](const Vec& theta) {
        return mean_ser([&](const TestDevice& dev) {
            MlpObjective obj(clf.backbone(), dev.pilots.train, LossKind::cross_entropy);
            if (algo == MetaAlgorithm::imaml || algo == MetaAlgorithm::prox_maml)
                return imaml_inner_solve(obj, theta, cfg.inner);
            return inner_adapt_gd(obj, theta, cfg.inner);
        });
    };
    return run_train_eval_loop(cfg, hooks, theta0, "ser");
}

// --- channel prediction ---

inline RunSummary run_chanpred_experiment(const ExperimentConfig& cfg) {
    const RngStream root(cfg.seed);
    ChanPredTaskParams params;
    params.s_dim = cfg.cp_s_dim;
    params.rank = cfg.cp_rank;
    params.rho = cfg.cp_rho;
    params.n_slots = cfg.cp_slots;
    ChanPredConfig pc;
    pc.window = cfg.cp_window;
    pc.lag = cfg.cp_lag;
    pc.lambda = cfg.cp_lambda;
    pc.n_train = cfg.n_train;
    pc.mode = cfg.cp_mode == "lstd" ? ChanPredMode::lstd : ChanPredMode::naive;
    pc.rank = cfg.cp_rank;

    std::vector<Frame> train_frames;
    for (int k = 0; k < cfg.k_tasks; ++k)
        train_frames.push_back(gen_chanpred_frame(params, root.derived({detail::kPathEnv, static_cast<std::uint64_t>(k)})));
    const Frame test_frame = gen_chanpred_frame(params, root.derived({detail::kPathTest, 0}));

    const auto meta = chanpred_meta(train_frames, test_frame, pc);
    const double scratch = chanpred_scratch_nmse(test_frame, pc);

    RunSummary summary;
    summary.columns = {"iteration", "nmse_meta", "nmse_scratch", "seed"};
    summary.seed = cfg.seed;
    summary.rows.push_back({0, {meta.nmse, scratch}});
    summary.best_test_metric = summary.final_test_metric = meta.nmse;
    return summary;
}

// --- bilevel quadratic ---

inline RunSummary run_bilevel_experiment(const ExperimentConfig& cfg) {
    const RngStream root(cfg.seed);
    Mat a = Mat::Identity(1, 1) * cfg.bl_a;
    const Vec b = make_vec({cfg.bl_b});
    BilevelProblem p;
    p.theta_dim = 1;
    p.phi_dim = 1;
    p.smoothness_lg = 1.0;
    const double noise = cfg.bl_noise;
    auto noise_vec = [noise](std::uint64_t key, std::uint64_t salt) {
        if (noise == 0.0) return Vec(Vec::Zero(1));
        RngStream s(key ^ salt);
        return Vec(noise * s.normal_vec(1));
    };
    p.f_value = [b](const Vec&, const Vec& phi, std::uint64_t) { return 0.5 * (phi - b).squaredNorm(); };
    p.f_grad_theta = [noise_vec](const Vec&, const Vec&, std::uint64_t key) { return noise_vec(key, 0x11); };
    p.f_grad_phi = [b, noise_vec](const Vec&, const Vec& phi, std::uint64_t key) {
        return Vec(phi - b + noise_vec(key, 0x22));
    };
    p.g_value = [a](const Vec& theta, const Vec& phi, std::uint64_t) {
        return 0.5 * (phi - a * theta).squaredNorm();
    };
    p.g_grad_phi = [a, noise_vec](const Vec& theta, const Vec& phi, std::uint64_t key) {
        return Vec(phi - a * theta + noise_vec(key, 0x33));
    };
    p.g_hvp_phiphi = [](const Vec&, const Vec&, const Vec& v, std::uint64_t) { return v; };
    p.g_hvp_thetaphi = [a](const Vec&, const Vec&, const Vec& v, std::uint64_t) { return Vec(-a.transpose() * v); };
    p.exact_lower_solution = [a](const Vec& theta) { return Vec(a * theta); };

    AlsetConfig ac;
    ac.lower_steps_per_outer = cfg.bl_lower_steps;
    ac.outer_iters = cfg.outer.n_meta_iters;
    ac.neumann_n = cfg.bl_neumann_n;
    ac.alpha = cfg.bl_alpha;
    ac.beta = cfg.bl_beta;
    const auto res = alset_solve(p, make_vec({1.0}), make_vec({0.0}), ac, root);

    RunSummary summary;
    summary.columns = {"iteration", "theta", "hypergrad_sq_norm", "lower_gap_sq", "seed"};
    summary.seed = cfg.seed;
    const int stride = std::max(1, ac.outer_iters / 200);
    for (int i = 0; i < ac.outer_iters; i += stride)
        summary.rows.push_back({i,
                                {res.theta_trajectory[i][0], res.diagnostics.hypergrad_sq_norm[i],
                                 res.diagnostics.lower_gap_sq[i]}});
    summary.best_test_metric = summary.final_test_metric = res.theta[0];
    return summary;
}

// --- bounds ---

struct BoundsInstanceResult {
    double gap = 0;
    double bound = 0;
};

// one random 2-task, 2-hypothesis Bernoulli environment with table-backed
// stochastic learners
inline BoundsInstanceResult random_bounds_instance(RngStream rng) {
    FiniteEnvironment env;
    env.n_samples = 1 + static_cast<int>(rng.uniform_index(2));
    env.n_tasks = 2;
    env.task_dist = {0.5, 0.5};
    for (int t = 0; t < 2; ++t) {
        const double p = 0.1 + 0.8 * rng.uniform();
        env.data_dist.push_back({p, 1.0 - p});
    }
    env.loss.assign(2, std::vector<double>(2));
    for (auto& row : env.loss)
        for (double& v : row) v = rng.uniform();

    const int n_theta = 2;
    const int n_d = static_cast<int>(std::pow(2, env.n_samples));
    auto meta_table = std::make_shared<std::vector<std::vector<double>>>();
    RngStream mrng = rng.derived(11);
    for (int i = 0; i < n_d * n_d; ++i) {
        std::vector<double> p(n_theta);
        double s = 0;
        for (double& v : p) {
            v = mrng.uniform() + 1e-3;
            s += v;
        }
        for (double& v : p) v /= s;
        meta_table->push_back(p);
    }
    auto base_table = std::make_shared<std::vector<std::vector<double>>>();
    RngStream brng = rng.derived(13);
    for (int i = 0; i < n_d * n_theta; ++i) {
        std::vector<double> p(2);
        double s = 0;
        for (double& v : p) {
            v = brng.uniform() + 1e-3;
            s += v;
        }
        for (double& v : p) v /= s;
        base_table->push_back(p);
    }
    auto d_index = [](const std::vector<int>& d) {
        int idx = 0;
        for (int z : d) idx = idx * 2 + z;
        return idx;
    };
    MetaLearner meta = [meta_table, n_d, d_index](const std::vector<std::vector<int>>& ds) {
        int idx = 0;
        for (const auto& d : ds) idx = idx * n_d + d_index(d);
        return (*meta_table)[idx];
    };
    ThetaBaseLearner base = [base_table, n_d, d_index](const std::vector<int>& d, int theta) {
        return (*base_table)[theta * n_d + d_index(d)];
    };
    const auto res = meta_gen_bound_thm43(env, meta, base, n_theta);
    return {res.gap, res.bound};
}

inline RunSummary run_bounds_experiment(const ExperimentConfig& cfg) {
    const RngStream root(cfg.seed);
    RunSummary summary;
    summary.columns = {"iteration", "gap", "bound", "seed"};
    summary.seed = cfg.seed;
    double worst_margin = std::numeric_limits<double>::infinity();
    for (int i = 0; i < cfg.n_environments; ++i) {
        const auto r = random_bounds_instance(root.derived(static_cast<std::uint64_t>(i)));
        summary.rows.push_back({i, {r.gap, r.bound}});
        worst_margin = std::min(worst_margin, r.bound - r.gap);
    }
    summary.best_test_metric = summary.final_test_metric = worst_margin;
    if (worst_margin < -1e-12)
        throw numeric_error("bounds: a generated environment violated the bound by " +
                            std::to_string(-worst_margin));
    return summary;
}

// --- top-level dispatch ---

inline RunSummary run_experiment(const ExperimentConfig& cfg, const std::map<std::string, std::string>& raw = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    RunSummary summary;
    if (cfg.benchmark == "sinusoid") {
        summary = run_sinusoid_experiment(cfg);
    } else if (cfg.benchmark == "demod") {
        summary = run_demod_experiment(cfg);
    } else if (cfg.benchmark == "chanpred") {
        summary = run_chanpred_experiment(cfg);
    } else if (cfg.benchmark == "bilevel_quadratic") {
        summary = run_bilevel_experiment(cfg);
    } else if (cfg.benchmark == "bounds") {
        summary = run_bounds_experiment(cfg);
    } else {
        throw config_error("unknown benchmark '" + cfg.benchmark + "'");
    }

    std::filesystem::create_directories(cfg.out_dir);
    const std::string csv_path = cfg.out_dir + "/run.csv";
    summary.csv_path = csv_path;
    try {
        write_csv(csv_path, summary);
    } catch (...) {
        std::filesystem::remove(csv_path);  // never leave a partial CSV behind
        throw;
    }
    const double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(cfg.out_dir + "/manifest.json", cfg, raw, wall_ms, summary);
    return summary;
}

// ---------------------------------------------------------------------------
// Sweeps: one run per axis value, shared base seed, consolidated CSV.

inline ExperimentConfig apply_axis(const ExperimentConfig& base, const std::string& axis, double value) {
    ExperimentConfig cfg = base;
    if (axis == "N") {
        cfg.n_train = static_cast<int>(value);
    } else if (axis == "K") {
        cfg.k_tasks = static_cast<int>(value);
    } else if (axis == "SNR") {
        cfg.snr_db = value;
    } else if (axis == "n_pilots") {
        cfg.n_train = static_cast<int>(value);
    } else {
        throw config_error("sweep: unknown axis '" + axis + "' (expected N, K, SNR or n_pilots)");
    }
    return cfg;
}

inline RunSummary run_sweep(const ExperimentConfig& base, const std::string& axis,
                            const std::vector<double>& values,
                            const std::map<std::string, std::string>& raw = {}) {
    RunSummary consolidated;
    consolidated.columns = {"iteration", "axis_value", "best_test_metric", "final_test_metric", "seed"};
    consolidated.seed = base.seed;
    std::filesystem::create_directories(base.out_dir);
    int idx = 0;
    for (double v : values) {
        ExperimentConfig cfg = apply_axis(base, axis, v);
        cfg.out_dir = base.out_dir + "/" + axis + "_" + format_double(v);
        const RunSummary run = run_experiment(cfg, raw);
        consolidated.rows.push_back({idx++, {v, run.best_test_metric, run.final_test_metric}});
    }
    consolidated.csv_path = base.out_dir + "/sweep.csv";
    write_csv(consolidated.csv_path, consolidated);
    return consolidated;
}

// ---------------------------------------------------------------------------
// Gradient checks: every finite-difference oracle in one report.

struct GradCheckEntry {
    std::string name;
    double worst_error = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    bool all_pass() const {
        for (const auto& e : entries)
            if (!e.pass) return false;
        return true;
    }
};

namespace gradcheck {

inline TaskObjectives random_mlp_task(RngStream& rng) {
    Mlp mlp(1, {5, 4}, 1, Activation::tanh);
    std::vector<Sample> tr, va;
    for (int i = 0; i < 6; ++i) tr.push_back({rng.normal_vec(1), rng.normal_vec(1)});
    for (int i = 0; i < 6; ++i) va.push_back({rng.normal_vec(1), rng.normal_vec(1)});
    return {std::make_shared<MlpObjective>(mlp, tr, LossKind::mse_mean),
            std::make_shared<MlpObjective>(mlp, va, LossKind::mse_mean)};
}

// worst relative error of the MAML meta-gradient against central differences
inline double maml_worst_error(const std::vector<std::pair<TaskObjectives, Vec>>& instances,
                               const InnerConfig& cfg) {
    double worst = 0;
    for (const auto& [task, theta] : instances) {
        const Vec got = maml_meta_gradient(task, theta, cfg);
        const Vec want = fd_gradient([&](const Vec& th) { return maml_meta_objective(task, th, cfg); }, theta);
        worst = std::max(worst, relative_error(got, want));
    }
    return worst;
}

// FOMAML against MAML on affine training losses (exact identity)
inline double fomaml_worst_error(const std::vector<std::pair<TaskObjectives, Vec>>& instances,
                                 const InnerConfig& cfg) {
    double worst = 0;
    for (const auto& [task, theta] : instances) {
        const Vec fo = fomaml_meta_gradient(task, theta, cfg);
        const Vec ma = maml_meta_gradient(task, theta, cfg);
        worst = std::max(worst, relative_error(fo, ma));
    }
    return worst;
}

inline double imaml_worst_error(const std::vector<std::pair<TaskObjectives, Vec>>& instances,
                                const InnerConfig& cfg) {
    double worst = 0;
    for (const auto& [task, theta] : instances) {
        const Vec got = imaml_meta_gradient(task, theta, cfg);
        const Vec want =
            fd_gradient([&](const Vec& th) { return imaml_meta_objective(task, th, cfg); }, theta, 1e-5);
        worst = std::max(worst, relative_error(got, want));
    }
    return worst;
}

}  // namespace gradcheck

inline GradCheckReport grad_check(const std::string& scope = "all") {
    const std::set<std::string> known = {"all", "maml", "imaml", "bilevel", "cavia"};
    if (!known.count(scope)) throw config_error("grad-check: unknown scope '" + scope + "'");
    const auto want = [&](const char* group) { return scope == "all" || scope == group; };
    GradCheckReport report;
    const auto add = [&report](const std::string& name, double err, double tol) {
        report.entries.push_back({name, err, tol, err <= tol});
    };

    if (want("maml")) {
        // model derivative oracles; central differences need smooth
        // activations, so these run on the tanh path
        {
            double worst_g = 0, worst_h = 0;
            for (int i = 0; i < 8; ++i) {
                RngStream rng(40 + i);
                Mlp mlp(2, {6, 4}, 1, Activation::tanh);
                std::vector<Sample> data;
                for (int s = 0; s < 6; ++s) data.push_back({rng.normal_vec(2), rng.normal_vec(1)});
                MlpObjective obj(mlp, data, LossKind::mse_mean);
                const Vec phi = mlp.init_params(rng);
                worst_g = std::max(worst_g, relative_error(obj.grad(phi), finite_diff_grad(obj, phi)));
                const Vec v = rng.normal_vec(mlp.param_count());
                worst_h = std::max(worst_h, relative_error(obj.hvp(phi, v), finite_diff_hvp(obj, phi, v)));
            }
            add("mlp_grad", worst_g, 1e-4);
            add("mlp_hvp", worst_h, 1e-3);
        }
        {
            // softmax cross-entropy head
            double worst_g = 0, worst_h = 0;
            for (int i = 0; i < 6; ++i) {
                RngStream rng(60 + i);
                Mlp mlp(2, {5}, 4, Activation::tanh);
                std::vector<Sample> data;
                for (int s = 0; s < 6; ++s) {
                    Vec y(1);
                    y[0] = static_cast<double>(rng.uniform_index(4));
                    data.push_back({rng.normal_vec(2), y});
                }
                MlpObjective obj(mlp, data, LossKind::cross_entropy);
                const Vec phi = mlp.init_params(rng);
                worst_g = std::max(worst_g, relative_error(obj.grad(phi), finite_diff_grad(obj, phi)));
                const Vec v = rng.normal_vec(mlp.param_count());
                worst_h = std::max(worst_h, relative_error(obj.hvp(phi, v), finite_diff_hvp(obj, phi, v)));
            }
            add("softmax_ce_grad", worst_g, 1e-4);
            add("softmax_ce_hvp", worst_h, 1e-3);
        }
        {
            InnerConfig cfg;
            cfg.alpha = 0.05;
            std::vector<std::pair<TaskObjectives, Vec>> instances;
            for (int i = 0; i < 10; ++i) {
                RngStream rng(100 + i);
                auto task = gradcheck::random_mlp_task(rng);
                Mlp mlp(1, {5, 4}, 1, Activation::tanh);
                instances.emplace_back(task, mlp.init_params(rng));
            }
            add("maml", gradcheck::maml_worst_error(instances, cfg), 1e-3);
            // FOMAML: exact identity with MAML under affine inner losses
            std::vector<std::pair<TaskObjectives, Vec>> affine;
            for (int i = 0; i < 5; ++i) {
                RngStream rng(150 + i);
                const int d = 4;
                const Vec slope = rng.normal_vec(d);
                auto tr = std::make_shared<FunctionalObjective>(
                    d, [slope](const Vec& p) { return slope.dot(p); }, [slope](const Vec&) { return slope; },
                    [d](const Vec&, const Vec&) { return Vec(Vec::Zero(d)); });
                Mat b = Mat::Identity(d, d);
                affine.push_back({TaskObjectives{tr, quadratic_objective(b, rng.normal_vec(d))}, rng.normal_vec(d)});
            }
            add("fomaml_affine_identity", gradcheck::fomaml_worst_error(affine, cfg), 1e-12);
            // Sharp-MAML against its frozen objective
            OuterConfig outer;
            outer.sharp_alpha_in = 0.1;
            outer.sharp_alpha_ot = 0.05;
            double worst = 0;
            for (const auto& [task, theta] : instances) {
                const Vec got = sharp_maml_meta_gradient(task, theta, cfg, outer);
                const Vec want = fd_gradient(sharp_maml_frozen_objective(task, theta, cfg, outer), theta);
                worst = std::max(worst, relative_error(got, want));
            }
            add("sharp_maml", worst, 1e-3);
            // Reptile one-step identity
            double worst_re = 0;
            for (const auto& [task, theta] : instances) {
                InnerConfig one = cfg;
                one.n_steps = 1;
                const Vec adapted = inner_adapt_gd(*task.tr, theta, one);
                const Vec got = reptile_outer_update(theta, {adapted}, 0.3);
                const Vec want = theta - 0.3 * cfg.alpha * task.tr->grad(theta);
                worst_re = std::max(worst_re, relative_error(got, want));
            }
            add("reptile_one_step_identity", worst_re, 1e-12);
            // ES gradient on a quadratic (exact in expectation; generous
            // statistical tolerance with a fixed stream)
            {
                Mat a2 = Mat::Identity(2, 2);
                auto loss = [&](const Vec& p) { return 0.5 * (p - make_vec({0.2, -0.1})).squaredNorm(); };
                RngStream rng(7);
                const Vec phi = make_vec({0.3, 0.1});
                const Vec est = es_gradient(loss, phi, 200000, 0.05, rng);
                const Vec exact = phi - make_vec({0.2, -0.1});
                add("es_gradient", relative_error(est, exact), 0.15);
            }
        }
    }

    if (want("imaml")) {
        InnerConfig cfg;
        cfg.lambda = 2.0;
        cfg.tol_inner = 1e-11;
        std::vector<std::pair<TaskObjectives, Vec>> instances;
        for (int i = 0; i < 10; ++i) {
            RngStream rng(200 + i);
            LinearModel model(3, 1, false);
            std::vector<Sample> tr, va;
            for (int s = 0; s < 8; ++s) tr.push_back({rng.normal_vec(3), rng.normal_vec(1)});
            for (int s = 0; s < 5; ++s) va.push_back({rng.normal_vec(3), rng.normal_vec(1)});
            instances.push_back({TaskObjectives{std::make_shared<LinearObjective>(model, tr),
                                                std::make_shared<LinearObjective>(model, va)},
                                 rng.normal_vec(3)});
        }
        add("imaml", gradcheck::imaml_worst_error(instances, cfg), 1e-3);
        // Prox-MAML: envelope identity, the gradient of the proximal value is
        // lambda (theta - phi*)
        double worst = 0;
        for (const auto& [task, theta] : instances) {
            const Vec phi = imaml_inner_solve(*task.tr, theta, cfg);
            const Vec got = cfg.lambda * (theta - phi);
            auto prox_value = [&](const Vec& th) {
                const Vec p = imaml_inner_solve(*task.tr, th, cfg);
                return task.tr->loss(p) + 0.5 * cfg.lambda * (p - th).squaredNorm();
            };
            const Vec want = fd_gradient(prox_value, theta, 1e-5);
            worst = std::max(worst, relative_error(got, want));
        }
        add("prox_maml_envelope", worst, 1e-3);
    }

    if (want("cavia")) {
        InnerConfig cfg;
        cfg.alpha = 0.1;
        double worst = 0;
        for (int i = 0; i < 10; ++i) {
            RngStream rng(300 + i);
            Mlp mlp(1, {5}, 1, Activation::tanh, 2);
            TaskDataset task;
            for (int s = 0; s < 5; ++s) task.train.push_back({rng.normal_vec(1), rng.normal_vec(1)});
            for (int s = 0; s < 6; ++s) task.val.push_back({rng.normal_vec(1), rng.normal_vec(1)});
            const Vec theta = mlp.init_params(rng);
            const Vec got = cavia_meta_gradient(mlp, theta, task, LossKind::mse_mean, cfg);
            const Vec want = fd_gradient(
                [&](const Vec& th) { return cavia_meta_objective(mlp, th, task, LossKind::mse_mean, cfg); },
                theta);
            worst = std::max(worst, relative_error(got, want));
        }
        add("cavia", worst, 1e-3);
    }

    if (want("bilevel")) {
        // implicit hypergradient against the nested-solve finite difference
        double worst = 0;
        for (int i = 0; i < 5; ++i) {
            RngStream rng(400 + i);
            const int dt = 2, dp = 3;
            Mat gm = Mat::Zero(dp, dp);
            for (int r = 0; r < dp; ++r)
                for (int c = 0; c < dp; ++c) gm(r, c) = rng.normal();
            gm = (gm * gm.transpose() + 0.5 * Mat::Identity(dp, dp)).eval();
            Mat cm = Mat::Zero(dp, dt);
            for (int r = 0; r < dp; ++r)
                for (int c = 0; c < dt; ++c) cm(r, c) = rng.normal();
            const Vec c0 = rng.normal_vec(dp);
            const Vec pt = rng.normal_vec(dp);
            const Vec qt = rng.normal_vec(dt);
            BilevelProblem prob;
            prob.theta_dim = dt;
            prob.phi_dim = dp;
            prob.f_value = [pt, qt](const Vec& th, const Vec& ph, std::uint64_t) {
                return 0.5 * (ph - pt).squaredNorm() + 0.5 * (th - qt).squaredNorm();
            };
            prob.f_grad_theta = [qt](const Vec& th, const Vec&, std::uint64_t) { return Vec(th - qt); };
            prob.f_grad_phi = [pt](const Vec&, const Vec& ph, std::uint64_t) { return Vec(ph - pt); };
            prob.g_grad_phi = [gm, cm, c0](const Vec& th, const Vec& ph, std::uint64_t) {
                return Vec(gm * ph + cm * th + c0);
            };
            prob.g_hvp_phiphi = [gm](const Vec&, const Vec&, const Vec& v, std::uint64_t) { return Vec(gm * v); };
            prob.g_hvp_thetaphi = [cm](const Vec&, const Vec&, const Vec& v, std::uint64_t) {
                return Vec(cm.transpose() * v);
            };
            auto phi_star = [gm, cm, c0](const Vec& th) { return Vec(-gm.llt().solve(cm * th + c0)); };
            const Vec theta = rng.normal_vec(dt);
            const Vec got = implicit_hypergradient(prob, theta, phi_star(theta));
            const Vec want = fd_gradient(
                [&](const Vec& th) { return prob.f_value(th, phi_star(th), kPopulationSample); }, theta, 1e-6);
            worst = std::max(worst, relative_error(got, want));
        }
        add("bilevel_implicit", worst, 1e-6);
        // Neumann expectation against the truncated series
        {
            RngStream rng(500);
            Mat h = Mat::Zero(4, 4);
            for (int r = 0; r < 4; ++r)
                for (int c = 0; c < 4; ++c) h(r, c) = rng.normal();
            h = (h * h.transpose() + 0.5 * Mat::Identity(4, 4)).eval();
            const double l_g = 1.1 * Eigen::SelfAdjointEigenSolver<Mat>(h).eigenvalues().maxCoeff();
            const Vec v = rng.normal_vec(4);
            auto hvp_s = [&h](const Vec& x, std::uint64_t) { return Vec(h * x); };
            auto hvp_d = [&h](const Vec& x) { return Vec(h * x); };
            double worst_nm = 0;
            for (int n : {1, 2, 4, 8}) {
                Vec mean = Vec::Zero(4);
                for (int np = 0; np < n; ++np) {
                    RngStream r(1);
                    mean += neumann_apply_fixed(hvp_s, v, l_g, n, np, r);
                }
                mean /= n;
                worst_nm = std::max(worst_nm, relative_error(mean, neumann_truncated_series(hvp_d, v, l_g, n)));
            }
            add("neumann_expectation", worst_nm, 1e-12);
        }
        // BMAML particle gradient against finite differences
        {
            double worst_bm = 0;
            for (int i = 0; i < 3; ++i) {
                RngStream rng(600 + i);
                const int m = 3, d = 2;
                Mat a2 = Mat::Identity(d, d);
                BmamlTask task;
                task.obj = {quadratic_objective(a2, rng.normal_vec(d)),
                            quadratic_objective(a2, rng.normal_vec(d))};
                task.n_tr = 5;
                task.n_va = 4;
                BmamlConfig bc;
                ParticleSet meta;
                for (int j = 0; j < m; ++j) meta.particles.push_back(rng.normal_vec(d));
                const auto blocks = bmaml_meta_particle_gradient(meta, task, bc, 0.05);
                Vec got(m * d);
                for (int j = 0; j < m; ++j) got.segment(j * d, d) = blocks[j];
                auto objective = [&](const Vec& z) {
                    ParticleSet set;
                    for (int j = 0; j < m; ++j) set.particles.push_back(z.segment(j * d, d));
                    const ScoreFn score = bmaml_task_score(task, set.mean(), bc);
                    return bmaml_outer_loss(svgd_step(set, score, 0.05).particles, task, bc);
                };
                Vec flat(m * d);
                for (int j = 0; j < m; ++j) flat.segment(j * d, d) = meta.particles[j];
                worst_bm = std::max(worst_bm, relative_error(got, fd_gradient(objective, flat)));
            }
            add("bmaml_svgd", worst_bm, 1e-3);
        }
    }

    return report;
}

}  // namespace metalearn
