#pragma once

#include "gengmm/core_types.hpp"

#include <algorithm>
#include <cassert>
#include <vector>

namespace gengmm {

// Per-class mixture of M diagonal-covariance Gaussians over unit-norm
// embeddings: p(f|c) = sum_m pi_m N(f; mu_m, diag(var_m)).
struct ClassGmm {
    ClassId class_id = 0;
    Vec weights;   // M, simplex
    Mat means;     // D x M
    Mat variances; // D x M, every entry >= var_floor

    // Derived caches, refreshed after every parameter change.
    Mat inv_var;     // D x M
    Vec log_norm;    // M, -0.5 * (D log 2pi + sum_d log var_d)
    Vec log_weights; // M
    std::vector<int> starved; // consecutive zero-responsibility E/M steps

    int components() const { return static_cast<int>(weights.size()); }
    int dim() const { return static_cast<int>(means.rows()); }

    void refresh() {
        const int m = components();
        const int d = dim();
        inv_var = variances.cwiseInverse();
        log_norm.resize(m);
        for (int j = 0; j < m; ++j) {
            log_norm[j] = -0.5 * (d * std::log(2.0 * M_PI) + variances.col(j).array().log().sum());
        }
        log_weights = weights.array().log();
    }

    static ClassGmm make(ClassId cls, int components, int dim) {
        ClassGmm g;
        g.class_id = cls;
        g.weights = Vec::Constant(components, 1.0 / components);
        g.means = Mat::Zero(dim, components);
        g.variances = Mat::Ones(dim, components);
        g.starved.assign(components, 0);
        g.refresh();
        return g;
    }
};

// Per-component log N(f; mu_m, var_m).
inline Vec log_gaussians(const ClassGmm& g, const Vec& f) {
    const int m = g.components();
    Vec out(m);
    for (int j = 0; j < m; ++j) {
        const double q = ((f - g.means.col(j)).array().square() * g.inv_var.col(j).array()).sum();
        out[j] = g.log_norm[j] - 0.5 * q;
    }
    return out;
}

// N x M matrix of per-component log densities for a batch F (D x N).
inline Mat log_likelihood_matrix(const ClassGmm& g, const Mat& F) {
    const int n = static_cast<int>(F.cols());
    const int m = g.components();
    Mat out(n, m);
    for (int j = 0; j < m; ++j) {
        Vec q = (F.colwise() - g.means.col(j)).array().square().matrix().transpose() * g.inv_var.col(j);
        out.col(j) = (-0.5 * q).array() + g.log_norm[j];
    }
    return out;
}

// log p(f|c; phi_c) via log-sum-exp over components.
inline double log_class_conditional(const ClassGmm& g, const Vec& f) {
    return log_sum_exp(g.log_weights + log_gaussians(g, f));
}

inline double log_class_conditional(const ClassGmm& g, const FeatureVector& f) {
    return log_class_conditional(g, f.values);
}

// p(m | f, c; phi_c): softmax of log pi_m + log N_m.
inline Vec component_posterior(const ClassGmm& g, const Vec& f) {
    Vec logits = g.log_weights + log_gaussians(g, f);
    const double lse = log_sum_exp(logits);
    return (logits.array() - lse).exp();
}

inline Vec component_posterior(const ClassGmm& g, const FeatureVector& f) {
    return component_posterior(g, f.values);
}

// Log-domain Sinkhorn scaling for the kernel exp(logL / eps): returns the
// N x M plan Q = diag(u) K diag(v) with row marginals 1/N and column
// marginals col_marginals. Columns are exact after the final scaling; rows
// carry the residual of however many iterations were run.
inline Mat sinkhorn_plan(const Mat& logL, const Vec& col_marginals, double eps, int iters) {
    const int n = static_cast<int>(logL.rows());
    const int m = static_cast<int>(logL.cols());
    assert(n >= 1 && m >= 1);
    if (!logL.allFinite()) throw NumericalInstability("non-finite log-likelihoods in sinkhorn");

    Mat logK = logL / eps;
    Vec log_u = Vec::Zero(n);
    Vec log_v = Vec::Zero(m);
    const double log_row = -std::log(static_cast<double>(n));
    const Vec log_col = col_marginals.array().log();

    for (int t = 0; t < iters; ++t) {
        for (int i = 0; i < n; ++i) {
            Vec row = logK.row(i).transpose() + log_v;
            log_u[i] = log_row - log_sum_exp(row);
        }
        for (int j = 0; j < m; ++j) {
            Vec col = logK.col(j) + log_u;
            log_v[j] = log_col[j] - log_sum_exp(col);
        }
    }

    Mat q(n, m);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) q(i, j) = std::exp(log_u[i] + logK(i, j) + log_v[j]);
    }
    return q;
}

// Entropic-OT E-step over a batch F (D x N) against the class's components.
inline Mat sinkhorn_e_step(const ClassGmm& g, const Mat& F, int iters, double eps) {
    return sinkhorn_plan(log_likelihood_matrix(g, F), g.weights, eps, iters);
}

inline Mat sinkhorn_e_step(const ClassGmm& g, const Mat& F, const RunConfig& cfg) {
    return sinkhorn_e_step(g, F, cfg.sinkhorn_iters, cfg.sinkhorn_eps);
}

namespace detail {

// Scalar scale for identity-shaped covariances: mean per-dim variance of the
// sample, floored.
inline double identity_scale(const Mat& F, double var_floor) {
    const Vec mean = F.rowwise().mean();
    const double s = (F.colwise() - mean).array().square().mean();
    return std::max(s, var_floor);
}

} // namespace detail

// EMA M-step over the same embeddings the E-step saw. Components with no
// responsibility mass keep their parameters for this step and age toward
// re-seeding.
inline void momentum_m_step(ClassGmm& g, const Mat& F, const Mat& q, double lambda_ema, double var_floor,
                            int starvation_limit) {
    const int m = g.components();
    const Vec colmass = q.colwise().sum();
    Vec pi_hat(m);
    constexpr double kDeadMass = 1e-12;

    for (int j = 0; j < m; ++j) {
        if (colmass[j] <= kDeadMass) {
            pi_hat[j] = g.weights[j];
            g.starved[j]++;
            continue;
        }
        g.starved[j] = 0;
        pi_hat[j] = colmass[j];
        const Vec mu_hat = (F * q.col(j)) / colmass[j];
        const Vec var_hat = ((F.colwise() - mu_hat).array().square().matrix() * q.col(j)) / colmass[j];
        g.means.col(j) = lambda_ema * g.means.col(j) + (1.0 - lambda_ema) * mu_hat;
        g.variances.col(j) =
            (lambda_ema * g.variances.col(j) + (1.0 - lambda_ema) * var_hat).cwiseMax(var_floor);
    }

    g.weights = lambda_ema * g.weights + (1.0 - lambda_ema) * pi_hat;
    g.weights /= g.weights.sum();
    g.refresh();

    // Re-seed components starved past the limit at the least likely queue
    // embedding; keeps all M components live.
    for (int j = 0; j < m; ++j) {
        if (g.starved[j] < starvation_limit) continue;
        int worst = 0;
        double worst_ll = std::numeric_limits<double>::infinity();
        for (int i = 0; i < F.cols(); ++i) {
            const double ll = log_class_conditional(g, Vec(F.col(i)));
            if (ll < worst_ll) {
                worst_ll = ll;
                worst = i;
            }
        }
        g.means.col(j) = F.col(worst);
        g.variances.col(j).setConstant(detail::identity_scale(F, var_floor));
        g.starved[j] = 0;
        g.refresh();
    }
}

// Fixed-capacity FIFO over embedding columns. Eviction overwrites the oldest
// slot; storage order is deterministic given a deterministic push sequence.
class FifoQueue {
public:
    FifoQueue() = default;
    FifoQueue(int dim, int capacity) : data_(dim, capacity) {}

    void push(const Vec& v) {
        data_.col(head_) = v;
        head_ = (head_ + 1) % static_cast<int>(data_.cols());
        size_ = std::min(size_ + 1, static_cast<int>(data_.cols()));
    }

    int size() const { return size_; }
    int capacity() const { return static_cast<int>(data_.cols()); }
    bool empty() const { return size_ == 0; }

    // Valid entries as a D x size block (storage order, not age order).
    auto contents() const { return data_.leftCols(size_); }

    Mat& storage() { return data_; }
    const Mat& storage() const { return data_; }
    int head() const { return head_; }
    void restore(const Mat& data, int size, int head) {
        data_ = data;
        size_ = size;
        head_ = head;
    }

private:
    Mat data_;
    int size_ = 0;
    int head_ = 0;
};

struct GmmOptions {
    int classes = 5;
    int components = 3;
    int dim = 64;
    double var_floor = 1e-4;
    int capacity = 32768;
    int push_per_class = 100;
    int sinkhorn_iters = 10;
    double sinkhorn_eps = 0.05;
    double lambda_ema = 0.9;
    int starvation_limit = 100;
    int init_min_queue = 32; // embeddings required before seeding a class

    static GmmOptions from(const RunConfig& cfg) {
        GmmOptions o;
        o.classes = cfg.classes;
        o.components = cfg.components;
        o.dim = cfg.embed_dim;
        o.var_floor = cfg.var_floor;
        o.capacity = cfg.bank_capacity;
        o.push_per_class = cfg.bank_push_per_class;
        o.sinkhorn_iters = cfg.sinkhorn_iters;
        o.sinkhorn_eps = cfg.sinkhorn_eps;
        o.lambda_ema = cfg.lambda_ema;
        o.starvation_limit = cfg.starvation_limit;
        return o;
    }
};

// Which batch pixels a gated update actually admitted (for audits).
struct GateTrace {
    std::vector<int> pushed;
};

// One ClassGmm per class plus its FIFO embedding queue.
class GmmBank {
public:
    GmmBank() = default;
    explicit GmmBank(const GmmOptions& opts) : opts_(opts) {
        for (int c = 0; c < opts.classes; ++c) {
            gmms_.push_back(ClassGmm::make(c, opts.components, opts.dim));
            queues_.emplace_back(opts.dim, opts.capacity);
        }
        initialized_.assign(opts.classes, false);
    }

    const GmmOptions& options() const { return opts_; }
    int classes() const { return static_cast<int>(gmms_.size()); }

    const ClassGmm& gmm(int c) const { return gmms_[c]; }
    ClassGmm& gmm_mutable(int c) { return gmms_[c]; }
    const FifoQueue& queue(int c) const { return queues_[c]; }
    FifoQueue& queue_mutable(int c) { return queues_[c]; }

    bool initialized(int c) const { return initialized_[c]; }
    void set_initialized(int c, bool v) { initialized_[c] = v; }
    bool all_initialized() const {
        return std::all_of(initialized_.begin(), initialized_.end(), [](bool b) { return b; });
    }

    // Push embeddings whose classifier prediction agrees with their given
    // label (Full or Noisy pixels only), capped per class, then run one
    // Sinkhorn E/M step per class whose queue has content.
    void gated_update(const Mat& embeddings, const std::vector<LabelState>& labels,
                      const std::vector<ClassId>& predictions, GateTrace* trace = nullptr) {
        const int n = static_cast<int>(embeddings.cols());
        assert(static_cast<int>(labels.size()) == n && static_cast<int>(predictions.size()) == n);
        std::vector<int> pushed_per_class(classes(), 0);
        for (int i = 0; i < n; ++i) {
            const LabelState& l = labels[i];
            if (l.kind != LabelState::Kind::Full && l.kind != LabelState::Kind::Noisy) continue;
            if (l.cls < 0 || l.cls >= classes()) continue;
            if (predictions[i] != l.cls) continue;
            if (pushed_per_class[l.cls] >= opts_.push_per_class) continue;
            queues_[l.cls].push(embeddings.col(i));
            pushed_per_class[l.cls]++;
            if (trace) trace->pushed.push_back(i);
        }
        for (int c = 0; c < classes(); ++c) {
            if (queues_[c].empty()) continue;
            maybe_seed(c);
            if (initialized_[c]) em_step(c);
        }
    }

    // One momentum Sinkhorn-EM update of class c over its queue contents.
    void em_step(int c) {
        const Mat F = queues_[c].contents();
        const Mat q = sinkhorn_e_step(gmms_[c], F, opts_.sinkhorn_iters, opts_.sinkhorn_eps);
        momentum_m_step(gmms_[c], F, q, opts_.lambda_ema, opts_.var_floor, opts_.starvation_limit);
    }

    // Farthest-point seeding once the queue has enough content.
    void maybe_seed(int c) {
        if (initialized_[c]) return;
        const int need = std::max(opts_.components, std::min(opts_.capacity, opts_.init_min_queue));
        if (queues_[c].size() < need) return;
        seed_from_queue(c);
    }

    void seed_from_queue(int c) {
        const Mat F = queues_[c].contents();
        const int n = static_cast<int>(F.cols());
        const int m = opts_.components;
        ClassGmm& g = gmms_[c];

        std::vector<int> chosen;
        const Vec mean = F.rowwise().mean();
        int first = 0;
        double best = -1.0;
        for (int i = 0; i < n; ++i) {
            const double d = (F.col(i) - mean).squaredNorm();
            if (d > best) {
                best = d;
                first = i;
            }
        }
        chosen.push_back(first);
        Vec min_dist(n);
        for (int i = 0; i < n; ++i) min_dist[i] = (F.col(i) - F.col(first)).squaredNorm();
        while (static_cast<int>(chosen.size()) < m) {
            int next = 0;
            double far = -1.0;
            for (int i = 0; i < n; ++i) {
                if (min_dist[i] > far) {
                    far = min_dist[i];
                    next = i;
                }
            }
            chosen.push_back(next);
            for (int i = 0; i < n; ++i) min_dist[i] = std::min(min_dist[i], (F.col(i) - F.col(next)).squaredNorm());
        }

        g.weights = Vec::Constant(m, 1.0 / m);
        const double scale = detail::identity_scale(F, opts_.var_floor);
        for (int j = 0; j < m; ++j) {
            g.means.col(j) = F.col(chosen[j]);
            g.variances.col(j).setConstant(scale);
        }
        g.starved.assign(m, 0);
        g.refresh();
        initialized_[c] = true;
    }

private:
    GmmOptions opts_;
    std::vector<ClassGmm> gmms_;
    std::vector<FifoQueue> queues_;
    std::vector<bool> initialized_;
};

// p(c, m | f) with explicit class priors; the full C x M table sums to 1.
inline Mat joint_class_component_posterior(const GmmBank& bank, const Vec& f, const Vec& class_priors) {
    const int c = bank.classes();
    const int m = bank.gmm(0).components();
    Mat logits(c, m);
    for (int k = 0; k < c; ++k) {
        const ClassGmm& g = bank.gmm(k);
        logits.row(k) = (g.log_weights + log_gaussians(g, f)).transpose().array() + std::log(class_priors[k]);
    }
    const double lse = log_sum_exp(Eigen::Map<const Vec>(logits.data(), logits.size()));
    return (logits.array() - lse).exp();
}

inline Mat joint_class_component_posterior(const GmmBank& bank, const FeatureVector& f, const Vec& class_priors) {
    return joint_class_component_posterior(bank, f.values, class_priors);
}

// Marginal p(c|f) under uniform class priors (the source-use convention).
inline Vec source_class_posterior(const GmmBank& bank, const Vec& f) {
    const Vec uniform = Vec::Constant(bank.classes(), 1.0 / bank.classes());
    return joint_class_component_posterior(bank, f, uniform).rowwise().sum();
}

} // namespace gengmm
