// Command-line front end: deterministic experiment runs, parameter sweeps,
// gradient checks, and the bounds oracle, all emitting CSV + a JSON manifest.
//
// Exit codes: 0 success, 2 configuration error, 3 numeric failure,
// 4 oracle-check failure.

#include "metalearn/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>

namespace {

using namespace metalearn;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitOracle = 4;

ExperimentConfig load_experiment(const std::string& path, std::uint64_t seed_override, bool has_seed,
                                 const std::string& out_override, ConfigFile& cfg_out) {
    cfg_out = ConfigFile::load(path);
    ExperimentConfig cfg = ExperimentConfig::from_config(cfg_out);
    if (has_seed) cfg.seed = seed_override;
    if (!out_override.empty()) cfg.out_dir = out_override;
    return cfg;
}

std::vector<double> parse_values(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stod(item));
    }
    return out;
}

void print_summary(const RunSummary& s) {
    std::printf("rows: %zu\n", s.rows.size());
    std::printf("best_test_metric: %s\n", format_double(s.best_test_metric).c_str());
    std::printf("final_test_metric: %s\n", format_double(s.final_test_metric).c_str());
    std::printf("csv: %s\n", s.csv_path.c_str());
}

// built-in default configurations for `bench`
std::string builtin_config(const std::string& name) {
    if (name == "sinusoid")
        return "[experiment]\n"
               "benchmark = sinusoid\nalgorithm = maml\nk_tasks = 100\nn_train = 10\nn_val = 10\n"
               "n_test_tasks = 20\nseed = 1\n"
               "[inner]\nalpha = 0.01\nn_steps = 1\n"
               "[outer]\nbeta = 0.002\nmeta_batch_size = 5\nn_meta_iters = 2000\n";
    if (name == "demod")
        return "[experiment]\n"
               "benchmark = demod\nalgorithm = maml\nk_tasks = 40\nn_train = 8\nn_val = 64\n"
               "n_test_tasks = 10\nseed = 1\n"
               "[demod]\nsnr_db = 18\nser_eval_symbols = 2000\n"
               "[inner]\nalpha = 0.1\nn_steps = 4\n"
               "[outer]\nbeta = 0.02\nmeta_batch_size = 5\nn_meta_iters = 800\n";
    if (name == "chanpred")
        return "[experiment]\n"
               "benchmark = chanpred\nalgorithm = closed_form\nk_tasks = 10\nn_train = 4\nseed = 1\n"
               "[chanpred]\ns_dim = 16\nrank = 2\nrho = 0.98\nslots = 24\nwindow = 2\nlag = 1\n"
               "lambda = 0.5\nmode = lstd\n";
    throw config_error("bench: unknown benchmark '" + name + "' (expected sinusoid, demod or chanpred)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"meta-learning and bilevel optimization benchmark harness"};
    app.require_subcommand(1);

    std::string config_path, out_dir, axis, values_csv, scope = "all", bench_name;
    std::uint64_t seed = 0;
    bool has_seed = false;

    auto add_seed = [&](CLI::App* cmd) {
        cmd->add_option("--seed", seed, "override the root seed")->each([&](const std::string&) {
            has_seed = true;
        });
    };

    CLI::App* run = app.add_subcommand("run", "run one experiment from a config file");
    run->add_option("config", config_path, "config file")->required();
    add_seed(run);
    run->add_option("--out", out_dir, "output directory");

    CLI::App* gc = app.add_subcommand("grad-check", "run the finite-difference oracle suites");
    gc->add_option("--scope", scope, "all|maml|imaml|bilevel|cavia");

    CLI::App* sweep = app.add_subcommand("sweep", "run one experiment per axis value");
    sweep->add_option("config", config_path, "config file")->required();
    sweep->add_option("--axis", axis, "N|K|SNR|n_pilots")->required();
    sweep->add_option("--values", values_csv, "comma-separated values")->required();
    add_seed(sweep);
    sweep->add_option("--out", out_dir, "output directory");

    CLI::App* bounds = app.add_subcommand("bounds", "enumerate bound/gap pairs on random environments");
    bounds->add_option("config", config_path, "config file")->required();
    add_seed(bounds);
    bounds->add_option("--out", out_dir, "output directory");

    CLI::App* bench = app.add_subcommand("bench", "run a built-in benchmark configuration");
    bench->add_option("name", bench_name, "sinusoid|demod|chanpred")->required();
    add_seed(bench);
    bench->add_option("--out", out_dir, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            ConfigFile raw;
            const ExperimentConfig cfg = load_experiment(config_path, seed, has_seed, out_dir, raw);
            print_summary(run_experiment(cfg, raw.raw()));
            return kExitOk;
        }
        if (gc->parsed()) {
            const GradCheckReport report = grad_check(scope);
            for (const auto& e : report.entries)
                std::printf("%-28s %-6s worst %.3e (tol %.1e)\n", e.name.c_str(), e.pass ? "pass" : "FAIL",
                            e.worst_error, e.tolerance);
            if (!report.all_pass()) {
                std::fprintf(stderr, "grad-check: oracle comparison exceeded tolerance\n");
                return kExitOracle;
            }
            return kExitOk;
        }
        if (sweep->parsed()) {
            ConfigFile raw;
            const ExperimentConfig cfg = load_experiment(config_path, seed, has_seed, out_dir, raw);
            print_summary(run_sweep(cfg, axis, parse_values(values_csv), raw.raw()));
            return kExitOk;
        }
        if (bounds->parsed()) {
            ConfigFile raw;
            ExperimentConfig cfg = load_experiment(config_path, seed, has_seed, out_dir, raw);
            cfg.benchmark = "bounds";
            cfg.algorithm = "enumerate";
            const RunSummary s = run_experiment(cfg, raw.raw());
            std::printf("environments: %zu, worst bound-gap margin: %s\n", s.rows.size(),
                        format_double(s.best_test_metric).c_str());
            print_summary(s);
            return kExitOk;
        }
        if (bench->parsed()) {
            ConfigFile raw = ConfigFile::parse(builtin_config(bench_name));
            ExperimentConfig cfg = ExperimentConfig::from_config(raw);
            if (has_seed) cfg.seed = seed;
            if (!out_dir.empty()) cfg.out_dir = out_dir;
            print_summary(run_experiment(cfg, raw.raw()));
            return kExitOk;
        }
    } catch (const config_error& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return kExitConfig;
    } catch (const numeric_error& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return kExitNumeric;
    } catch (const convergence_error& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return kExitNumeric;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    }
    return kExitOk;
}
