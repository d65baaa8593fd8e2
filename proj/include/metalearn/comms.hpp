#pragma once

#include "metalearn/core.hpp"
#include "metalearn/models.hpp"
#include "metalearn/ridge_meta.hpp"

#include <cmath>
#include <complex>
#include <utility>
#include <vector>

// Task environments and evaluation for the two communications applications:
// few-pilot demodulation over a distorted fading channel, and frame-based
// linear channel prediction with a long-/short-term decomposition.

namespace metalearn {

using Complex = std::complex<double>;

// ---------------------------------------------------------------------------
// Demodulation

// 16-QAM, unit average energy: {+-1, +-3}^2 / sqrt(10)
inline std::vector<Complex> qam16_constellation() {
    std::vector<Complex> pts;
    const double levels[4] = {-3.0, -1.0, 1.0, 3.0};
    const double scale = 1.0 / std::sqrt(10.0);
    for (double re : levels)
        for (double im : levels) pts.emplace_back(re * scale, im * scale);
    return pts;
}

struct DemodTaskParams {
    double iq_epsilon = 0.0;    // amplitude imbalance
    double iq_delta = 0.0;      // phase imbalance, radians
    Complex channel = {1.0, 0.0};
    double noise_power = 0.1;   // N0
    int n_pilots = 8;
    int n_train = 4;

    void validate() const {
        if (!(noise_power > 0)) throw std::invalid_argument("DemodTaskParams: N0 must be positive");
        if (n_train < 0 || n_train > n_pilots) throw std::invalid_argument("DemodTaskParams: bad split");
    }
};

// transmitter I/Q imbalance: x = mu s + nu conj(s),
// mu = cos(delta) + j eps sin(delta), nu = eps cos(delta) - j sin(delta)
inline Complex iq_distort(Complex s, double eps, double delta) {
    const Complex mu(std::cos(delta), eps * std::sin(delta));
    const Complex nu(eps * std::cos(delta), -std::sin(delta));
    return mu * s + nu * std::conj(s);
}

// per-device draw: eps ~ U[0, 0.15], delta ~ U[0, 15deg], h ~ CN(0,1)
inline DemodTaskParams sample_demod_device(double noise_power, int n_pilots, int n_train, RngStream& rng) {
    DemodTaskParams p;
    p.iq_epsilon = rng.uniform(0.0, 0.15);
    p.iq_delta = rng.uniform(0.0, 15.0 * M_PI / 180.0);
    p.channel = rng.normal_complex();
    p.noise_power = noise_power;
    p.n_pilots = n_pilots;
    p.n_train = n_train;
    return p;
}

inline Sample demod_draw(const DemodTaskParams& p, const std::vector<Complex>& constellation, RngStream& rng) {
    const int idx = static_cast<int>(rng.uniform_index(constellation.size()));
    const Complex x = iq_distort(constellation[idx], p.iq_epsilon, p.iq_delta);
    const Complex z = std::sqrt(p.noise_power) * rng.normal_complex();
    const Complex y = p.channel * x + z;
    Sample s;
    s.x = make_vec({y.real(), y.imag()});
    s.y = make_vec({static_cast<double>(idx)});
    return s;
}

// pilots drawn uniformly from the constellation, distorted, faded, and noisy;
// first n_train samples form the adaptation split
inline TaskDataset gen_demod_task(const DemodTaskParams& p, RngStream rng, std::int64_t task_id = 0) {
    p.validate();
    const auto constellation = qam16_constellation();
    std::vector<Sample> samples;
    samples.reserve(p.n_pilots);
    for (int i = 0; i < p.n_pilots; ++i) samples.push_back(demod_draw(p, constellation, rng));
    TaskDataset t;
    auto [tr, va] = split_dataset(samples, p.n_train);
    t.train = std::move(tr);
    t.val = std::move(va);
    t.task_id = task_id;
    return t;
}

// fraction of argmax decision errors over n fresh draws
inline double ser_eval(const SoftmaxClassifier& clf, const Vec& phi, const DemodTaskParams& p, int n,
                       RngStream rng) {
    const auto constellation = qam16_constellation();
    int errors = 0;
    for (int i = 0; i < n; ++i) {
        const Sample s = demod_draw(p, constellation, rng);
        if (clf.decide(phi, s.x) != static_cast<int>(s.y[0])) ++errors;
    }
    return static_cast<double>(errors) / n;
}

// MMSE channel estimate under the linear AWGN model with h ~ CN(0,1):
// h_hat = sum conj(s_i) y_i / (sum |s_i|^2 + N0)
inline Complex mmse_channel_estimate(const std::vector<Sample>& pilots, double noise_power) {
    const auto constellation = qam16_constellation();
    Complex num = 0.0;
    double den = noise_power;
    for (const Sample& s : pilots) {
        const Complex sym = constellation[static_cast<int>(s.y[0])];
        const Complex y(s.x[0], s.x[1]);
        num += std::conj(sym) * y;
        den += std::norm(sym);
    }
    return num / den;
}

// nearest-neighbor (ML) decision in the derotated constellation
inline int ml_decide(Complex y, Complex h_est) {
    const auto constellation = qam16_constellation();
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int i = 0; i < static_cast<int>(constellation.size()); ++i) {
        const double d = std::norm(y - h_est * constellation[i]);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

inline double mmse_ml_ser(const DemodTaskParams& p, const std::vector<Sample>& pilots, int n, RngStream rng) {
    const Complex h_est = mmse_channel_estimate(pilots, p.noise_power);
    const auto constellation = qam16_constellation();
    int errors = 0;
    for (int i = 0; i < n; ++i) {
        const Sample s = demod_draw(p, constellation, rng);
        if (ml_decide(Complex(s.x[0], s.x[1]), h_est) != static_cast<int>(s.y[0])) ++errors;
    }
    return static_cast<double>(errors) / n;
}

// ---------------------------------------------------------------------------
// Calibration

inline std::pair<int, double> classify_with_confidence(const SoftmaxClassifier& clf, const Vec& phi,
                                                       const Vec& features) {
    const Vec p = clf.probabilities(phi, features);
    int best = 0;
    for (int i = 1; i < static_cast<int>(p.size()); ++i)
        if (p[i] > p[best]) best = i;
    return {best, p[best]};
}

struct ReliabilityDiagram {
    std::vector<double> bin_edges;     // n_bins + 1 edges on [0, 1]
    std::vector<double> mean_confidence;
    std::vector<double> accuracy;
    std::vector<long> counts;
    long total = 0;
    double ece = 0.0;
};

inline ReliabilityDiagram reliability_diagram(const SoftmaxClassifier& clf, const Vec& phi,
                                              const std::vector<Sample>& stream, int n_bins) {
    if (n_bins < 1) throw std::invalid_argument("reliability_diagram: need at least one bin");
    ReliabilityDiagram out;
    out.bin_edges.resize(n_bins + 1);
    for (int b = 0; b <= n_bins; ++b) out.bin_edges[b] = static_cast<double>(b) / n_bins;
    out.mean_confidence.assign(n_bins, 0.0);
    out.accuracy.assign(n_bins, 0.0);
    out.counts.assign(n_bins, 0);
    for (const Sample& s : stream) {
        const auto [decision, conf] = classify_with_confidence(clf, phi, s.x);
        int b = std::min(static_cast<int>(conf * n_bins), n_bins - 1);
        out.mean_confidence[b] += conf;
        out.accuracy[b] += (decision == static_cast<int>(s.y[0])) ? 1.0 : 0.0;
        ++out.counts[b];
        ++out.total;
    }
    for (int b = 0; b < n_bins; ++b) {
        if (out.counts[b] == 0) continue;
        out.mean_confidence[b] /= out.counts[b];
        out.accuracy[b] /= out.counts[b];
        out.ece += (static_cast<double>(out.counts[b]) / out.total) *
                   std::abs(out.accuracy[b] - out.mean_confidence[b]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Channel prediction

using Frame = std::vector<CVec>;  // one channel vector per slot

struct ChanPredTaskParams {
    int s_dim = 16;      // S = N_R N_T W
    int rank = 2;        // R, number of long-term directions
    double rho = 0.98;   // AR(1) coefficient of the short-term amplitudes
    int n_slots = 40;

    void validate() const {
        if (rank < 1 || rank > s_dim) throw std::invalid_argument("ChanPredTaskParams: need 1 <= R <= S");
        if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("ChanPredTaskParams: rho in [0,1]");
        if (n_slots < 1) throw std::invalid_argument("ChanPredTaskParams: empty frame");
    }
};

// h_l = B d_l with B a random orthonormal S x R long-term basis and d an
// AR(1) short-term amplitude process with unit stationary variance
inline Frame gen_chanpred_frame(const ChanPredTaskParams& p, RngStream rng) {
    p.validate();
    CMat raw(p.s_dim, p.rank);
    for (int i = 0; i < p.s_dim; ++i)
        for (int j = 0; j < p.rank; ++j) raw(i, j) = rng.normal_complex();
    const CMat basis = Eigen::HouseholderQR<CMat>(raw).householderQ() * CMat::Identity(p.s_dim, p.rank);
    CVec d(p.rank);
    for (int j = 0; j < p.rank; ++j) d[j] = rng.normal_complex();
    const double innovation = std::sqrt(std::max(0.0, 1.0 - p.rho * p.rho));
    Frame frame;
    frame.reserve(p.n_slots);
    for (int l = 0; l < p.n_slots; ++l) {
        frame.push_back(basis * d);
        CVec w(p.rank);
        for (int j = 0; j < p.rank; ++j) w[j] = rng.normal_complex();
        d = p.rho * d + innovation * w;
    }
    return frame;
}

struct LstdDecomposition {
    CMat basis;                // S x R, top-R left singular directions
    std::vector<CVec> coeffs;  // per-slot projections
};

inline CMat stack_frame(const Frame& frame) {
    const int s = static_cast<int>(frame.front().size());
    CMat m(s, static_cast<int>(frame.size()));
    for (std::size_t l = 0; l < frame.size(); ++l) m.col(l) = frame[l];
    return m;
}

inline LstdDecomposition lstd_decompose(const Frame& frame, int rank) {
    if (frame.empty()) throw std::invalid_argument("lstd_decompose: empty frame");
    const int s = static_cast<int>(frame.front().size());
    if (rank < 1 || rank > s) throw std::invalid_argument("lstd_decompose: need 1 <= R <= S");
    Eigen::JacobiSVD<CMat> svd(stack_frame(frame), Eigen::ComputeThinU);
    LstdDecomposition out;
    out.basis = svd.matrixU().leftCols(rank);
    out.coeffs.reserve(frame.size());
    for (const CVec& h : frame) out.coeffs.push_back(out.basis.adjoint() * h);
    return out;
}

inline int frame_numerical_rank(const Frame& frame, double tol = 1e-8) {
    Eigen::JacobiSVD<CMat> svd(stack_frame(frame));
    const auto& sv = svd.singularValues();
    const double cutoff = tol * sv.maxCoeff();
    int rank = 0;
    for (int i = 0; i < sv.size(); ++i)
        if (sv[i] > cutoff) ++rank;
    return rank;
}

// interleaved (real, imaginary) realification
inline Vec realify(const CVec& v) {
    Vec out(2 * v.size());
    for (int i = 0; i < v.size(); ++i) {
        out[2 * i] = v[i].real();
        out[2 * i + 1] = v[i].imag();
    }
    return out;
}

inline CVec complexify(const Vec& v) {
    CVec out(v.size() / 2);
    for (int i = 0; i < out.size(); ++i) out[i] = Complex(v[2 * i], v[2 * i + 1]);
    return out;
}

enum class ChanPredMode { naive, lstd };

struct ChanPredConfig {
    int window = 2;       // L previous channels per regressor
    int lag = 1;          // prediction delta
    double lambda = 1.0;  // ridge anchor weight
    int n_train = 4;      // training regression pairs per frame
    ChanPredMode mode = ChanPredMode::naive;
    int rank = 2;         // R used by the lstd mode

    int first_index() const { return window - 1; }

    void validate() const {
        if (window < 1 || lag < 1) throw std::invalid_argument("ChanPredConfig: window and lag must be >= 1");
        if (!(lambda > 0)) throw std::invalid_argument("ChanPredConfig: lambda must be positive");
        if (n_train < 1) throw std::invalid_argument("ChanPredConfig: n_train must be >= 1");
    }
};

namespace detail {

// regression pair (vec of the window, target at i + lag) for slot index i,
// realified; works for both the raw channels and the lstd coefficients
inline void sequence_regression(const std::vector<CVec>& seq, const ChanPredConfig& cfg, int n_train, Mat& x_tr,
                                Mat& y_tr, Mat& x_va, Mat& y_va) {
    const int dim = static_cast<int>(seq.front().size());
    const int first = cfg.first_index();
    const int last = static_cast<int>(seq.size()) - 1 - cfg.lag;
    const int n_pairs = last - first + 1;
    if (n_pairs < n_train + 1)
        throw std::invalid_argument("chanpred: frame too short for the requested split");
    const int in_dim = 2 * dim * cfg.window;
    const int out_dim = 2 * dim;
    x_tr.resize(n_train, in_dim);
    y_tr.resize(n_train, out_dim);
    x_va.resize(n_pairs - n_train, in_dim);
    y_va.resize(n_pairs - n_train, out_dim);
    for (int k = 0; k < n_pairs; ++k) {
        const int i = first + k;
        Vec row(in_dim);
        for (int w = 0; w < cfg.window; ++w) row.segment(2 * dim * w, 2 * dim) = realify(seq[i - w]);
        const Vec target = realify(seq[i + cfg.lag]);
        if (k < n_train) {
            x_tr.row(k) = row.transpose();
            y_tr.row(k) = target.transpose();
        } else {
            x_va.row(k - n_train) = row.transpose();
            y_va.row(k - n_train) = target.transpose();
        }
    }
}

}  // namespace detail

struct ChanPredFrameData {
    RidgeTask task;                  // regression in the prediction space
    CMat basis;                      // lstd basis (empty in naive mode)
    std::vector<CVec> target_truth;  // true channel vectors of the validation targets
};

// builds the per-frame ridge regression; in lstd mode the long-term basis is
// estimated from the training region only and the regression runs on the
// short-term coefficients
inline ChanPredFrameData chanpred_frame_data(const Frame& frame, const ChanPredConfig& cfg) {
    cfg.validate();
    ChanPredFrameData out;
    const int first = cfg.first_index();
    const int train_region_end = first + cfg.n_train + cfg.lag;  // slots visible during adaptation
    std::vector<CVec> seq;
    if (cfg.mode == ChanPredMode::lstd) {
        Frame train_region(frame.begin(), frame.begin() + std::min<std::size_t>(train_region_end, frame.size()));
        out.basis = lstd_decompose(train_region, cfg.rank).basis;
        seq.reserve(frame.size());
        for (const CVec& h : frame) seq.push_back(out.basis.adjoint() * h);
    } else {
        seq = frame;
    }
    detail::sequence_regression(seq, cfg, cfg.n_train, out.task.x_tr, out.task.y_tr, out.task.x_va,
                                out.task.y_va);
    out.task.lambda = cfg.lambda;
    const int last = static_cast<int>(frame.size()) - 1 - cfg.lag;
    for (int i = first + cfg.n_train; i <= last; ++i) out.target_truth.push_back(frame[i + cfg.lag]);
    return out;
}

// NMSE of the adapted predictor on the validation slots, evaluated in the
// channel space (predictions of the lstd mode are mapped back through the basis)
inline double chanpred_nmse(const ChanPredFrameData& data, const Mat& phi) {
    double acc = 0.0;
    const int n = static_cast<int>(data.task.x_va.rows());
    for (int i = 0; i < n; ++i) {
        const Vec pred = (data.task.x_va.row(i) * phi).transpose();
        CVec h_hat = complexify(pred);
        if (data.basis.size() > 0) h_hat = data.basis * h_hat;
        const CVec& truth = data.target_truth[i];
        acc += (h_hat - truth).squaredNorm() / truth.squaredNorm();
    }
    return acc / n;
}

struct ChanPredResult {
    Mat theta;    // meta-learned bias in the regression space
    double nmse;  // on the held-out frame
};

// meta-train the ridge bias over K frames, adapt on the test frame with
// n_train pairs, and report the h-space NMSE over its remaining slots
inline ChanPredResult chanpred_meta(const std::vector<Frame>& train_frames, const Frame& test_frame,
                                    const ChanPredConfig& cfg) {
    if (train_frames.empty()) throw std::invalid_argument("chanpred_meta: no training frames");
    std::vector<RidgeTask> tasks;
    tasks.reserve(train_frames.size());
    for (const Frame& f : train_frames) tasks.push_back(chanpred_frame_data(f, cfg).task);
    ChanPredResult out;
    out.theta = ridge_meta_closed_form(tasks).theta;
    const ChanPredFrameData test = chanpred_frame_data(test_frame, cfg);
    const Mat phi = ridge_inner_closed_form(test.task, out.theta).phi;
    out.nmse = chanpred_nmse(test, phi);
    return out;
}

// per-frame baseline: ridge regression on the test frame alone (zero bias)
inline double chanpred_scratch_nmse(const Frame& test_frame, const ChanPredConfig& cfg) {
    const ChanPredFrameData test = chanpred_frame_data(test_frame, cfg);
    const Mat zero = Mat::Zero(test.task.x_tr.cols(), test.task.y_tr.cols());
    const Mat phi = ridge_inner_closed_form(test.task, zero).phi;
    return chanpred_nmse(test, phi);
}

}  // namespace metalearn
