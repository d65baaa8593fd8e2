#pragma once

#include "metalearn/core.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <vector>

// Concrete differentiable models: a linear (multi-output) regressor, a
// fixed-architecture MLP with an optional context input block, and a softmax
// classifier head. Gradients and Hessian-vector products are analytic; HVPs
// use forward-over-reverse tangent propagation rather than a generic tape.

namespace metalearn {

// ---------------------------------------------------------------------------
// Linear model, single- or multi-output. Parameters are the d x q weight
// matrix flattened column by column; prediction is W' x.

class LinearModel {
public:
    LinearModel(int input_dim, int output_dim = 1, bool normalized_loss = false)
        : d_(input_dim), q_(output_dim), normalized_(normalized_loss) {}

    int input_dim() const { return d_; }
    int output_dim() const { return q_; }
    int param_count() const { return d_ * q_; }
    bool normalized_loss() const { return normalized_; }

    Vec predict(const Vec& phi, const Vec& x) const {
        check_dims(phi, x);
        Eigen::Map<const Mat> w(phi.data(), d_, q_);
        return w.transpose() * x;
    }

    // ||X phi - y||^2, or its mean over samples when normalized
    double mse_loss(const Vec& phi, const std::vector<Sample>& data) const {
        if (data.empty()) throw std::invalid_argument("mse_loss: empty dataset");
        double total = 0.0;
        for (const Sample& s : data) total += (predict(phi, s.x) - s.y).squaredNorm();
        return normalized_ ? total / static_cast<double>(data.size()) : total;
    }

    Vec grad(const Vec& phi, const std::vector<Sample>& data) const {
        if (data.empty()) throw std::invalid_argument("grad: empty dataset");
        Eigen::Map<const Mat> w(phi.data(), d_, q_);
        Mat g = Mat::Zero(d_, q_);
        for (const Sample& s : data) {
            check_dims(phi, s.x);
            g += 2.0 * s.x * (w.transpose() * s.x - s.y).transpose();
        }
        if (normalized_) g /= static_cast<double>(data.size());
        return Eigen::Map<Vec>(g.data(), g.size());
    }

    Vec hvp(const Vec& phi, const std::vector<Sample>& data, const Vec& v) const {
        if (data.empty()) throw std::invalid_argument("hvp: empty dataset");
        check_dims(phi, data.front().x);
        if (v.size() != phi.size()) throw std::invalid_argument("hvp: direction dimension mismatch");
        Eigen::Map<const Mat> vm(v.data(), d_, q_);
        Mat h = Mat::Zero(d_, q_);
        for (const Sample& s : data) h += 2.0 * s.x * (vm.transpose() * s.x).transpose();
        if (normalized_) h /= static_cast<double>(data.size());
        return Eigen::Map<Vec>(h.data(), h.size());
    }

private:
    void check_dims(const Vec& phi, const Vec& x) const {
        if (phi.size() != d_ * q_) throw std::invalid_argument("LinearModel: parameter dimension mismatch");
        if (x.size() != d_) throw std::invalid_argument("LinearModel: input dimension mismatch");
    }

    int d_;
    int q_;
    bool normalized_;
};

class LinearObjective final : public Objective {
public:
    LinearObjective(LinearModel model, std::vector<Sample> data) : model_(model), data_(std::move(data)) {}

    int dim() const override { return model_.param_count(); }
    double loss(const Vec& phi) const override { return model_.mse_loss(phi, data_); }
    Vec grad(const Vec& phi) const override { return model_.grad(phi, data_); }
    Vec hvp(const Vec& phi, const Vec& v) const override { return model_.hvp(phi, data_, v); }

private:
    LinearModel model_;
    std::vector<Sample> data_;
};

// ---------------------------------------------------------------------------
// MLP with an optional context block appended to the input. The context is
// what per-task adaptation touches in CAVIA; context_dim = 0 recovers the
// plain network bit for bit.

enum class Activation { tanh, relu };

enum class LossKind {
    mse_mean,       // (1/N) sum ||f(x) - y||^2
    cross_entropy,  // -(1/N) sum log softmax(f(x))[y]
};

class Mlp {
public:
    Mlp(int input_dim, std::vector<int> hidden, int output_dim, Activation act = Activation::tanh,
        int context_dim = 0)
        : input_dim_(input_dim),
          hidden_(std::move(hidden)),
          output_dim_(output_dim),
          act_(act),
          context_dim_(context_dim) {
        int in = input_dim_ + context_dim_;
        for (int h : hidden_) {
            layer_in_.push_back(in);
            layer_out_.push_back(h);
            in = h;
        }
        layer_in_.push_back(in);
        layer_out_.push_back(output_dim_);
    }

    int input_dim() const { return input_dim_; }
    int context_dim() const { return context_dim_; }
    int output_dim() const { return output_dim_; }
    int layer_count() const { return static_cast<int>(layer_out_.size()); }

    int param_count() const {
        int n = 0;
        for (int l = 0; l < layer_count(); ++l) n += layer_out_[l] * (layer_in_[l] + 1);
        return n;
    }

    // weights U[-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero
    Vec init_params(RngStream& rng) const {
        Vec p = Vec::Zero(param_count());
        int off = 0;
        for (int l = 0; l < layer_count(); ++l) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(layer_in_[l]));
            const int nw = layer_out_[l] * layer_in_[l];
            for (int i = 0; i < nw; ++i) p[off + i] = rng.uniform(-bound, bound);
            off += nw + layer_out_[l];  // biases stay zero
        }
        return p;
    }

    Vec forward(const Vec& params, const Vec& x, const Vec& ctx = Vec()) const {
        Workspace ws;
        run_forward(params, x, ctx, ws);
        return ws.post.back();
    }

    double loss(const Vec& params, const std::vector<Sample>& data, LossKind kind, const Vec& ctx = Vec()) const {
        if (data.empty()) throw std::invalid_argument("Mlp::loss: empty dataset");
        double total = 0.0;
        Workspace ws;
        for (const Sample& s : data) {
            run_forward(params, s.x, ctx, ws);
            total += sample_loss(ws.post.back(), s.y, kind);
        }
        return total / static_cast<double>(data.size());
    }

    struct Grads {
        Vec params;
        Vec ctx;
    };

    Grads gradients(const Vec& params, const std::vector<Sample>& data, LossKind kind, const Vec& ctx = Vec()) const {
        if (data.empty()) throw std::invalid_argument("Mlp::gradients: empty dataset");
        Grads g{Vec::Zero(param_count()), Vec::Zero(context_dim_)};
        Workspace ws;
        const double inv_n = 1.0 / static_cast<double>(data.size());
        for (const Sample& s : data) {
            run_forward(params, s.x, ctx, ws);
            Vec delta = inv_n * output_delta(ws.post.back(), s.y, kind);
            backprop(params, ws, delta, g.params, g.ctx);
        }
        return g;
    }

    // Exact second derivative applied to a joint direction (v_params, v_ctx):
    // returns (d^2 L dparams^2 + d^2 L dparams dctx) tangents via
    // forward-over-reverse propagation.
    Grads hvp(const Vec& params, const std::vector<Sample>& data, LossKind kind, const Vec& v_params,
              const Vec& v_ctx = Vec(), const Vec& ctx = Vec()) const {
        if (data.empty()) throw std::invalid_argument("Mlp::hvp: empty dataset");
        const Vec vp = v_params.size() ? v_params : Vec(Vec::Zero(param_count()));
        const Vec vc = v_ctx.size() ? v_ctx : Vec(Vec::Zero(context_dim_));
        if (vp.size() != param_count()) throw std::invalid_argument("Mlp::hvp: parameter direction mismatch");
        if (vc.size() != context_dim_) throw std::invalid_argument("Mlp::hvp: context direction mismatch");

        Grads r{Vec::Zero(param_count()), Vec::Zero(context_dim_)};
        Workspace ws;
        const double inv_n = 1.0 / static_cast<double>(data.size());
        for (const Sample& s : data) {
            run_forward(params, s.x, ctx, ws);
            run_forward_tangent(params, vp, vc, ws);
            // output adjoint and its tangent
            Vec delta = inv_n * output_delta(ws.post.back(), s.y, kind);
            Vec rdelta = inv_n * output_delta_tangent(ws.post.back(), ws.rpost.back(), kind);
            backprop_tangent(params, vp, ws, delta, rdelta, r.params, r.ctx);
        }
        return r;
    }

private:
    struct Workspace {
        std::vector<Vec> pre;    // z_l, layer inputs to the activation
        std::vector<Vec> post;   // a_l, activations (post.back() is the raw output)
        std::vector<Vec> rpre;   // tangents of pre
        std::vector<Vec> rpost;  // tangents of post
        Vec a0;                  // [x; ctx]
        Vec ra0;
    };

    double act(double z) const { return act_ == Activation::tanh ? std::tanh(z) : (z > 0.0 ? z : 0.0); }
    double act_d(double z) const {
        if (act_ == Activation::tanh) {
            const double t = std::tanh(z);
            return 1.0 - t * t;
        }
        return z > 0.0 ? 1.0 : 0.0;
    }
    double act_dd(double z) const {
        if (act_ == Activation::tanh) {
            const double t = std::tanh(z);
            return -2.0 * t * (1.0 - t * t);
        }
        return 0.0;
    }

    void run_forward(const Vec& params, const Vec& x, const Vec& ctx, Workspace& ws) const {
        if (x.size() != input_dim_) throw std::invalid_argument("Mlp: input dimension mismatch");
        if (params.size() != param_count()) throw std::invalid_argument("Mlp: parameter dimension mismatch");
        const Vec c = ctx.size() ? ctx : Vec(Vec::Zero(context_dim_));
        if (c.size() != context_dim_) throw std::invalid_argument("Mlp: context dimension mismatch");
        ws.a0.resize(input_dim_ + context_dim_);
        ws.a0 << x, c;
        const int n_layers = layer_count();
        ws.pre.assign(n_layers, Vec());
        ws.post.assign(n_layers, Vec());
        const Vec* prev = &ws.a0;
        int off = 0;
        for (int l = 0; l < n_layers; ++l) {
            Eigen::Map<const Mat> w(params.data() + off, layer_out_[l], layer_in_[l]);
            off += layer_out_[l] * layer_in_[l];
            Eigen::Map<const Vec> b(params.data() + off, layer_out_[l]);
            off += layer_out_[l];
            ws.pre[l] = w * (*prev) + b;
            if (l + 1 < n_layers) {
                ws.post[l] = ws.pre[l].unaryExpr([this](double z) { return act(z); });
            } else {
                ws.post[l] = ws.pre[l];  // linear output layer
            }
            prev = &ws.post[l];
        }
    }

    void run_forward_tangent(const Vec& params, const Vec& vp, const Vec& vc, Workspace& ws) const {
        const int n_layers = layer_count();
        ws.ra0 = Vec::Zero(input_dim_ + context_dim_);
        ws.ra0.tail(context_dim_) = vc;
        ws.rpre.assign(n_layers, Vec());
        ws.rpost.assign(n_layers, Vec());
        const Vec* prev = &ws.a0;
        const Vec* rprev = &ws.ra0;
        int off = 0;
        for (int l = 0; l < n_layers; ++l) {
            Eigen::Map<const Mat> w(params.data() + off, layer_out_[l], layer_in_[l]);
            Eigen::Map<const Mat> vw(vp.data() + off, layer_out_[l], layer_in_[l]);
            off += layer_out_[l] * layer_in_[l];
            Eigen::Map<const Vec> vb(vp.data() + off, layer_out_[l]);
            off += layer_out_[l];
            ws.rpre[l] = vw * (*prev) + w * (*rprev) + vb;
            if (l + 1 < n_layers) {
                ws.rpost[l] =
                    ws.pre[l].unaryExpr([this](double z) { return act_d(z); }).cwiseProduct(ws.rpre[l]);
            } else {
                ws.rpost[l] = ws.rpre[l];
            }
            prev = &ws.post[l];
            rprev = &ws.rpost[l];
        }
    }

    double sample_loss(const Vec& out, const Vec& target, LossKind kind) const {
        if (kind == LossKind::mse_mean) return (out - target).squaredNorm();
        return -log_softmax(out)[class_index(target, out.size())];
    }

    // dL/dz at the output layer for one sample (before the 1/N factor)
    Vec output_delta(const Vec& out, const Vec& target, LossKind kind) const {
        if (kind == LossKind::mse_mean) return 2.0 * (out - target);
        Vec p = softmax(out);
        p[class_index(target, out.size())] -= 1.0;
        return p;
    }

    // the softmax Jacobian does not depend on the label
    Vec output_delta_tangent(const Vec& out, const Vec& rout, LossKind kind) const {
        if (kind == LossKind::mse_mean) return 2.0 * rout;
        const Vec p = softmax(out);
        return p.cwiseProduct(rout) - p * p.dot(rout);
    }

    void backprop(const Vec& params, Workspace& ws, Vec delta, Vec& gparams, Vec& gctx) const {
        const int n_layers = layer_count();
        std::vector<int> offsets = layer_offsets();
        for (int l = n_layers - 1; l >= 0; --l) {
            const Vec& below = (l == 0) ? ws.a0 : ws.post[l - 1];
            Eigen::Map<Mat> gw(gparams.data() + offsets[l], layer_out_[l], layer_in_[l]);
            Eigen::Map<Vec> gb(gparams.data() + offsets[l] + layer_out_[l] * layer_in_[l], layer_out_[l]);
            gw += delta * below.transpose();
            gb += delta;
            Eigen::Map<const Mat> w(params.data() + offsets[l], layer_out_[l], layer_in_[l]);
            Vec back = w.transpose() * delta;
            if (l == 0) {
                if (context_dim_ > 0) gctx += back.tail(context_dim_);
            } else {
                delta = ws.pre[l - 1].unaryExpr([this](double z) { return act_d(z); }).cwiseProduct(back);
            }
        }
    }

    void backprop_tangent(const Vec& params, const Vec& vp, Workspace& ws, Vec delta, Vec rdelta, Vec& rparams,
                          Vec& rctx) const {
        const int n_layers = layer_count();
        std::vector<int> offsets = layer_offsets();
        for (int l = n_layers - 1; l >= 0; --l) {
            const Vec& below = (l == 0) ? ws.a0 : ws.post[l - 1];
            const Vec& rbelow = (l == 0) ? ws.ra0 : ws.rpost[l - 1];
            Eigen::Map<Mat> rgw(rparams.data() + offsets[l], layer_out_[l], layer_in_[l]);
            Eigen::Map<Vec> rgb(rparams.data() + offsets[l] + layer_out_[l] * layer_in_[l], layer_out_[l]);
            rgw += rdelta * below.transpose() + delta * rbelow.transpose();
            rgb += rdelta;
            Eigen::Map<const Mat> w(params.data() + offsets[l], layer_out_[l], layer_in_[l]);
            Eigen::Map<const Mat> vw(vp.data() + offsets[l], layer_out_[l], layer_in_[l]);
            Vec back = w.transpose() * delta;
            Vec rback = vw.transpose() * delta + w.transpose() * rdelta;
            if (l == 0) {
                if (context_dim_ > 0) rctx += rback.tail(context_dim_);
            } else {
                const Vec& z = ws.pre[l - 1];
                Vec d1 = z.unaryExpr([this](double v) { return act_d(v); });
                Vec d2 = z.unaryExpr([this](double v) { return act_dd(v); });
                rdelta = d1.cwiseProduct(rback) + d2.cwiseProduct(ws.rpre[l - 1]).cwiseProduct(back);
                delta = d1.cwiseProduct(back);
            }
        }
    }

    std::vector<int> layer_offsets() const {
        std::vector<int> offs(layer_count());
        int off = 0;
        for (int l = 0; l < layer_count(); ++l) {
            offs[l] = off;
            off += layer_out_[l] * (layer_in_[l] + 1);
        }
        return offs;
    }

    static int class_index(const Vec& target, Eigen::Index n_classes) {
        if (target.size() != 1) throw std::invalid_argument("cross entropy targets must be single class indices");
        const double t = target[0];
        const int idx = static_cast<int>(std::llround(t));
        if (idx < 0 || idx >= n_classes || std::abs(t - idx) > 1e-9)
            throw std::invalid_argument("cross entropy target is not a valid class index");
        return idx;
    }

public:
    static Vec log_softmax(const Vec& logits) {
        const double m = logits.maxCoeff();
        const double lse = m + std::log((logits.array() - m).exp().sum());
        return logits.array() - lse;
    }

    static Vec softmax(const Vec& logits) { return log_softmax(logits).array().exp(); }

private:
    int input_dim_;
    std::vector<int> hidden_;
    int output_dim_;
    Activation act_;
    int context_dim_;
    std::vector<int> layer_in_;
    std::vector<int> layer_out_;
};

// Binds an Mlp, a dataset split, a loss head and a fixed context into the
// parameter-space Objective used by the meta-learning algorithms.
class MlpObjective final : public Objective {
public:
    MlpObjective(Mlp mlp, std::vector<Sample> data, LossKind kind, Vec ctx = Vec())
        : mlp_(std::move(mlp)), data_(std::move(data)), kind_(kind), ctx_(std::move(ctx)) {}

    int dim() const override { return mlp_.param_count(); }
    double loss(const Vec& phi) const override { return mlp_.loss(phi, data_, kind_, ctx_); }
    Vec grad(const Vec& phi) const override { return mlp_.gradients(phi, data_, kind_, ctx_).params; }
    Vec hvp(const Vec& phi, const Vec& v) const override {
        return mlp_.hvp(phi, data_, kind_, v, Vec(), ctx_).params;
    }

    const std::vector<Sample>& data() const { return data_; }

private:
    Mlp mlp_;
    std::vector<Sample> data_;
    LossKind kind_;
    Vec ctx_;
};

// ---------------------------------------------------------------------------
// Softmax classifier over a finite symbol set: an MLP backbone producing one
// logit per class, with cross-entropy training loss.

class SoftmaxClassifier {
public:
    SoftmaxClassifier(int feature_dim, std::vector<int> hidden, int n_classes,
                      Activation act = Activation::relu)
        : mlp_(feature_dim, std::move(hidden), n_classes, act), n_classes_(n_classes) {}

    const Mlp& backbone() const { return mlp_; }
    int n_classes() const { return n_classes_; }
    int param_count() const { return mlp_.param_count(); }
    Vec init_params(RngStream& rng) const { return mlp_.init_params(rng); }

    Vec probabilities(const Vec& phi, const Vec& x) const { return Mlp::softmax(mlp_.forward(phi, x)); }
    Vec log_probabilities(const Vec& phi, const Vec& x) const { return Mlp::log_softmax(mlp_.forward(phi, x)); }

    double cross_entropy_loss(const Vec& phi, const std::vector<Sample>& data) const {
        return mlp_.loss(phi, data, LossKind::cross_entropy);
    }

    Vec grad(const Vec& phi, const std::vector<Sample>& data) const {
        return mlp_.gradients(phi, data, LossKind::cross_entropy).params;
    }

    Vec hvp(const Vec& phi, const std::vector<Sample>& data, const Vec& v) const {
        return mlp_.hvp(phi, data, LossKind::cross_entropy, v).params;
    }

    int decide(const Vec& phi, const Vec& x) const {
        int best = 0;
        const Vec p = mlp_.forward(phi, x);
        for (int i = 1; i < n_classes_; ++i)
            if (p[i] > p[best]) best = i;
        return best;
    }

private:
    Mlp mlp_;
    int n_classes_;
};

}  // namespace metalearn
