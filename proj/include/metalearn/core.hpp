#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

// Core numeric types, task abstractions, splittable random streams and
// finite-difference derivative oracles shared by every other header.

namespace metalearn {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using CVec = Eigen::VectorXcd;
using CMat = Eigen::MatrixXcd;

struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct convergence_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void check_finite(const Vec& v, const char* what) {
    if (!v.allFinite()) throw numeric_error(std::string(what) + ": non-finite entries");
}

inline Vec make_vec(std::initializer_list<double> xs) {
    Vec v(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) v[i++] = x;
    return v;
}

// ---------------------------------------------------------------------------
// Counter-based random stream.
//
// A stream is identified by (root seed, path); draws are a pure function of
// (key, counter), so replay is bit-exact and streams derived with different
// paths are statistically independent. Gaussian variates use the polar method
// so no platform-dependent trigonometry enters the stream.

class RngStream {
public:
    explicit RngStream(std::uint64_t root_seed) : key_(mix(root_seed ^ 0x9e3779b97f4a7c15ull)) {}

    RngStream derived(std::uint64_t path_element) const {
        RngStream s(*this);
        s.key_ = mix(s.key_ ^ mix(path_element + 0x45d9f3b3335b369ull));
        s.counter_ = 0;
        s.has_spare_ = false;
        return s;
    }

    RngStream derived(std::initializer_list<std::uint64_t> path) const {
        RngStream s(*this);
        for (std::uint64_t e : path) s = s.derived(e);
        return s;
    }

    std::uint64_t next_u64() { return mix(key_ + (++counter_) * 0x9e3779b97f4a7c15ull); }

    // uniform on [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t uniform_index(std::uint64_t n) {
        // rejection sampling keeps the draw exactly uniform
        const std::uint64_t limit = n * (UINT64_MAX / n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        has_spare_ = true;
        return u * m;
    }

    Vec normal_vec(int dim) {
        Vec v(dim);
        for (int i = 0; i < dim; ++i) v[i] = normal();
        return v;
    }

    std::complex<double> normal_complex() {
        // CN(0,1): each component has variance 1/2
        return {normal() * M_SQRT1_2, normal() * M_SQRT1_2};
    }

    // k distinct indices from [0, n), ascending (partial Fisher-Yates then sort)
    std::vector<int> sample_without_replacement(int n, int k) {
        std::vector<int> pool(n);
        for (int i = 0; i < n; ++i) pool[i] = i;
        for (int i = 0; i < k; ++i) {
            const int j = i + static_cast<int>(uniform_index(static_cast<std::uint64_t>(n - i)));
            std::swap(pool[i], pool[j]);
        }
        std::vector<int> out(pool.begin(), pool.begin() + k);
        std::sort(out.begin(), out.end());
        return out;
    }

private:
    static std::uint64_t mix(std::uint64_t x) {
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ull;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebull;
        x ^= x >> 31;
        return x;
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Tasks

struct Sample {
    Vec x;
    Vec y;
};

struct TaskDataset {
    std::vector<Sample> train;
    std::vector<Sample> val;
    std::int64_t task_id = 0;
};

struct MetaBatch {
    std::vector<TaskDataset> tasks;
    std::uint64_t environment_seed = 0;
};

inline std::pair<std::vector<Sample>, std::vector<Sample>> split_dataset(const std::vector<Sample>& samples,
                                                                         int n_train) {
    if (n_train < 0 || n_train > static_cast<int>(samples.size()))
        throw std::invalid_argument("split_dataset: n_train out of range");
    std::vector<Sample> train(samples.begin(), samples.begin() + n_train);
    std::vector<Sample> val(samples.begin() + n_train, samples.end());
    return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------
// Differentiable objective bound to a fixed dataset split.

class Objective {
public:
    virtual ~Objective() = default;
    virtual int dim() const = 0;
    virtual double loss(const Vec& phi) const = 0;
    virtual Vec grad(const Vec& phi) const = 0;
    // exact Hessian-vector product at phi applied to v
    virtual Vec hvp(const Vec& phi, const Vec& v) const = 0;
};

// Objective assembled from callables; handy for quadratics and test fixtures.
class FunctionalObjective final : public Objective {
public:
    using LossFn = std::function<double(const Vec&)>;
    using GradFn = std::function<Vec(const Vec&)>;
    using HvpFn = std::function<Vec(const Vec&, const Vec&)>;

    FunctionalObjective(int dim, LossFn loss, GradFn grad, HvpFn hvp = nullptr)
        : dim_(dim), loss_(std::move(loss)), grad_(std::move(grad)), hvp_(std::move(hvp)) {}

    int dim() const override { return dim_; }
    double loss(const Vec& phi) const override { return loss_(phi); }
    Vec grad(const Vec& phi) const override { return grad_(phi); }
    Vec hvp(const Vec& phi, const Vec& v) const override {
        if (!hvp_) throw numeric_error("FunctionalObjective: no hvp provided");
        return hvp_(phi, v);
    }

private:
    int dim_;
    LossFn loss_;
    GradFn grad_;
    HvpFn hvp_;
};

// The train/validation objective pair of one task, as consumed by every
// meta-learning algorithm.
struct TaskObjectives {
    std::shared_ptr<const Objective> tr;
    std::shared_ptr<const Objective> va;
};

// binds a model to a task's splits
using ObjectiveBinder = std::function<TaskObjectives(const TaskDataset&)>;

// quadratic 0.5 * (phi - c)' A (phi - c), A symmetric
inline std::shared_ptr<Objective> quadratic_objective(const Mat& a, const Vec& c) {
    const int d = static_cast<int>(c.size());
    return std::make_shared<FunctionalObjective>(
        d, [a, c](const Vec& p) { return 0.5 * (p - c).dot(a * (p - c)); },
        [a, c](const Vec& p) { return Vec(a * (p - c)); },
        [a](const Vec&, const Vec& v) { return Vec(a * v); });
}

// ---------------------------------------------------------------------------
// Finite-difference oracles. These are test anchors for every analytic
// gradient and HVP in the library and must stay independent of them.

inline constexpr double kFdGradStep = 1e-5;
inline constexpr double kFdHvpStep = 1e-4;

inline Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& x, double h = kFdGradStep) {
    if (!(h > 0)) throw std::invalid_argument("fd_gradient: h must be positive");
    Vec g(x.size());
    Vec p = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        p[i] = x[i] + h;
        const double fp = f(p);
        p[i] = x[i] - h;
        const double fm = f(p);
        p[i] = x[i];
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw numeric_error("fd_gradient: non-finite loss at probe point");
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

inline Vec finite_diff_grad(const Objective& obj, const Vec& phi, double h = kFdGradStep) {
    return fd_gradient([&obj](const Vec& p) { return obj.loss(p); }, phi, h);
}

inline Vec finite_diff_hvp(const Objective& obj, const Vec& phi, const Vec& v, double h = kFdHvpStep) {
    if (!(h > 0)) throw std::invalid_argument("finite_diff_hvp: h must be positive");
    check_finite(v, "finite_diff_hvp direction");
    const Vec gp = obj.grad(phi + h * v);
    const Vec gm = obj.grad(phi - h * v);
    if (!gp.allFinite() || !gm.allFinite()) throw numeric_error("finite_diff_hvp: non-finite gradient at probe point");
    return (gp - gm) / (2.0 * h);
}

inline double relative_error(const Vec& got, const Vec& want) {
    const double scale = std::max(want.norm(), 1e-12);
    return (got - want).norm() / scale;
}

// ---------------------------------------------------------------------------
// Backtracking gradient descent to a gradient-norm tolerance. Deterministic;
// shared by the proximal inner solvers and the bilevel reference solutions.

struct GdResult {
    Vec x;
    int iterations = 0;
    double grad_norm = 0.0;
    bool converged = false;
};

inline GdResult minimize_gd(const std::function<double(const Vec&)>& value,
                            const std::function<Vec(const Vec&)>& gradient, const Vec& x0, double tol,
                            int max_iters, double step0 = 1.0) {
    GdResult res;
    res.x = x0;
    double fx = value(res.x);
    Vec g = gradient(res.x);
    double gnorm = g.norm();
    double step = step0;
    for (int it = 0; it < max_iters; ++it) {
        if (!g.allFinite()) throw numeric_error("minimize_gd: non-finite gradient at iteration " + std::to_string(it));
        res.grad_norm = gnorm;
        res.iterations = it;
        if (gnorm <= tol) {
            res.converged = true;
            return res;
        }
        const double g2 = gnorm * gnorm;
        bool accepted = false;
        while (step >= 1e-20) {
            Vec cand = res.x - step * g;
            const double fc = value(cand);
            const double needed = 0.5 * step * g2;
            const double rounding = 8.0 * std::numeric_limits<double>::epsilon() * (std::abs(fx) + std::abs(fc));
            if (std::isfinite(fc) && fc <= fx - needed) {
                res.x = std::move(cand);
                fx = fc;
                g = gradient(res.x);
                gnorm = g.norm();
                step *= 1.5;
                accepted = true;
                break;
            }
            // once the sufficient decrease falls below rounding, progress is
            // judged by gradient contraction instead of function values
            if (std::isfinite(fc) && needed <= rounding && fc <= fx + rounding) {
                Vec gc = gradient(cand);
                const double gcn = gc.norm();
                if (gcn < 0.95 * gnorm) {
                    res.x = std::move(cand);
                    fx = std::min(fc, fx);
                    g = std::move(gc);
                    gnorm = gcn;
                    step *= 1.5;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if (!accepted) break;  // numerical floor
    }
    res.grad_norm = gnorm;
    res.converged = gnorm <= tol;
    return res;
}

}  // namespace metalearn
