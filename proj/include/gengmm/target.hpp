#pragma once

#include "gengmm/prototypes.hpp"

#include <numeric>
#include <optional>

namespace gengmm {

// Target-side memory: EMA class prototypes, a reliable-embedding FIFO bank
// per class, and the EMA class priors used for label-shift correction.
class TargetState {
public:
    TargetState() = default;
    TargetState(int classes, int dim, int capacity, double lambda_ema, int k_top, double prior_floor)
        : lambda_ema_(lambda_ema), k_top_(k_top), prior_floor_(prior_floor) {
        // All-equal unit prototypes are cosine-neutral: until a class gets its
        // first reliable embeddings, pseudo-labels are purely posterior-driven.
        prototypes_ = Mat::Zero(dim, classes);
        prototypes_.row(0).setOnes();
        for (int c = 0; c < classes; ++c) bank_.emplace_back(dim, capacity);
        delta_target_ = Vec::Constant(classes, 1.0 / classes);
        delta_source_ = Vec::Constant(classes, 1.0 / classes);
    }

    int classes() const { return static_cast<int>(prototypes_.cols()); }
    int dim() const { return static_cast<int>(prototypes_.rows()); }
    const Mat& prototypes() const { return prototypes_; }
    Mat& prototypes_mutable() { return prototypes_; }
    const FifoQueue& bank(int c) const { return bank_[c]; }
    FifoQueue& bank_mutable(int c) { return bank_[c]; }
    const Vec& delta_target() const { return delta_target_; }
    const Vec& delta_source() const { return delta_source_; }
    Vec& delta_target_mutable() { return delta_target_; }
    Vec& delta_source_mutable() { return delta_source_; }
    double lambda_ema() const { return lambda_ema_; }
    int k_top() const { return k_top_; }
    double prior_floor() const { return prior_floor_; }

    static TargetState from(const RunConfig& cfg) {
        return TargetState(cfg.classes, cfg.embed_dim, cfg.bank_capacity, cfg.lambda_ema, cfg.k_top,
                           cfg.prior_floor);
    }

private:
    Mat prototypes_; // D x C, unit columns
    std::vector<FifoQueue> bank_;
    Vec delta_target_;
    Vec delta_source_;
    double lambda_ema_ = 0.9;
    int k_top_ = 10;
    double prior_floor_ = 1e-6;
};

// Per class present in the batch: rank members by cosine similarity to the
// class-mean embedding, push the top k into the bank, then EMA the prototype
// toward the bank mean.
inline void update_target_bank(TargetState& state, const Mat& embeddings,
                               const std::vector<ClassId>& teacher_pseudo_labels) {
    const int n = static_cast<int>(embeddings.cols());
    assert(static_cast<int>(teacher_pseudo_labels.size()) == n);
    for (int c = 0; c < state.classes(); ++c) {
        std::vector<int> members;
        for (int i = 0; i < n; ++i) {
            if (teacher_pseudo_labels[i] == c) members.push_back(i);
        }
        if (members.empty()) continue;

        Vec mean = Vec::Zero(state.dim());
        for (int i : members) mean += embeddings.col(i);
        mean /= static_cast<double>(members.size());

        std::vector<std::pair<double, int>> ranked;
        ranked.reserve(members.size());
        const double mean_norm = mean.norm();
        for (int i : members) {
            const double cos = mean_norm > 0 ? embeddings.col(i).dot(mean) / mean_norm : 0.0;
            ranked.emplace_back(cos, i);
        }
        std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        const int take = std::min<int>(state.k_top(), static_cast<int>(ranked.size()));
        for (int r = 0; r < take; ++r) state.bank_mutable(c).push(embeddings.col(ranked[r].second));

        const Mat queued = state.bank(c).contents();
        Vec queue_mean = queued.rowwise().mean();
        Vec updated = state.lambda_ema() * state.prototypes().col(c) + (1.0 - state.lambda_ema()) * queue_mean;
        const double nrm = updated.norm();
        if (nrm > 1e-12) state.prototypes_mutable().col(c) = updated / nrm;
    }
}

// Proposition 1: p_t(c|f) = p_s(c|f) * delta_target / delta_source,
// renormalized. Renormalization never moves the argmax.
inline Vec shift_corrected_posterior(const GmmBank& bank, const TargetState& state, const Vec& f) {
    const Vec ps = source_class_posterior(bank, f);
    Vec out = ps.array() * (state.delta_target().array() / state.delta_source().array());
    out /= out.sum();
    return out;
}

inline Vec shift_corrected_posterior(const GmmBank& bank, const TargetState& state, const FeatureVector& f) {
    return shift_corrected_posterior(bank, state, f.values);
}

struct PseudoLabel {
    ClassId cls = 0;
    double score = 0.0;
};

// Eq. 8: shift-corrected GMM posterior times the softmax of prototype
// cosine similarities.
inline PseudoLabel pseudo_label_target(const GmmBank& bank, const TargetState& state, const Vec& f) {
    const Vec post = shift_corrected_posterior(bank, state, f);
    Vec cos = state.prototypes().transpose() * f;
    const double lse = log_sum_exp(cos);
    const Vec soft = (cos.array() - lse).exp();
    Vec score = post.array() * soft.array();
    int best = 0;
    for (int c = 1; c < score.size(); ++c) {
        if (score[c] > score[best]) best = c;
    }
    return {best, score[best]};
}

inline PseudoLabel pseudo_label_target(const GmmBank& bank, const TargetState& state, const FeatureVector& f) {
    return pseudo_label_target(bank, state, f.values);
}

// Per-pixel soft scores over classes (normalized Eq. 8 scores), used by the
// soft reading of the scene-GMM sigma.
inline Vec pseudo_label_scores(const GmmBank& bank, const TargetState& state, const Vec& f) {
    const Vec post = shift_corrected_posterior(bank, state, f);
    Vec cos = state.prototypes().transpose() * f;
    const double lse = log_sum_exp(cos);
    const Vec soft = (cos.array() - lse).exp();
    Vec score = post.array() * soft.array();
    score /= score.sum();
    return score;
}

// Batched Eq. 8 for a whole scene: per-pixel argmax class, its score, and the
// normalized score table (used by the soft sigma reading).
struct PseudoLabelBatch {
    std::vector<ClassId> labels; // N
    Vec scores;                  // N
    Mat soft_scores;             // C x N, columns sum to 1
};

inline PseudoLabelBatch pseudo_label_batch(const GmmBank& bank, const TargetState& state, const Mat& F) {
    const int n = static_cast<int>(F.cols());
    const int classes = bank.classes();

    // log p_s(c|f) under uniform class priors: LSE over components per class.
    Mat class_log(classes, n);
    for (int c = 0; c < classes; ++c) {
        const ClassGmm& g = bank.gmm(c);
        Mat ll = log_likelihood_matrix(g, F); // N x M
        ll.rowwise() += g.log_weights.transpose();
        class_log.row(c) = log_sum_exp_rows(ll).transpose();
    }
    const Vec ratio_log = (state.delta_target().array() / state.delta_source().array()).log();
    class_log.colwise() += ratio_log;

    Mat cos = state.prototypes().transpose() * F; // C x N
    PseudoLabelBatch out;
    out.labels.resize(n);
    out.scores.resize(n);
    out.soft_scores.resize(classes, n);
    for (int i = 0; i < n; ++i) {
        const Vec post_log = class_log.col(i);
        const double lse_p = log_sum_exp(post_log);
        const Vec post = (post_log.array() - lse_p).exp();
        const Vec cs = cos.col(i);
        const double lse_c = log_sum_exp(cs);
        const Vec soft = (cs.array() - lse_c).exp();
        Vec score = post.array() * soft.array();
        int best = 0;
        for (int c = 1; c < classes; ++c) {
            if (score[c] > score[best]) best = c;
        }
        out.labels[i] = best;
        out.scores[i] = score[best];
        out.soft_scores.col(i) = score / score.sum();
    }
    return out;
}

// Eq. 10: nearest component within the pseudo-labeled class, nearest foreign
// component per other class. alpha defaults to 1 (unlabeled target); weak
// scenes overwrite it with scene_alpha.
inline PrototypeSelection select_target_prototypes(const GmmBank& bank, const Vec& f, ClassId y_hat) {
    assert(y_hat >= 0 && y_hat < bank.classes());
    const int m_plus = nearest_component(bank.gmm(y_hat), f);
    return detail::select_around_positive(bank, f, y_hat, m_plus, 1.0);
}

inline PrototypeSelection select_target_prototypes(const GmmBank& bank, const FeatureVector& f, ClassId y_hat) {
    return select_target_prototypes(bank, f.values, y_hat);
}

// Per-scene class models fitted from weak labels: mean over weakly labeled
// pixels, spread over pseudo-labeled pixels.
struct SceneGmm {
    Mat means;                 // D x C (columns valid where present)
    Vec sigmas;                // C
    std::vector<bool> present; // class had >= 1 weakly labeled pixel

    bool has(ClassId c) const { return c >= 0 && c < static_cast<int>(present.size()) && present[c]; }
};

// weak_labels: per pixel the weak class or -1. pseudo_labels: per pixel the
// Eq. 8 class. soft_scores (C x N) activates the soft-sigma reading.
inline SceneGmm fit_scene_gmm(const Mat& features, const std::vector<ClassId>& weak_labels,
                              const std::vector<ClassId>& pseudo_labels, int classes, double var_floor,
                              const Mat* soft_scores = nullptr) {
    const int n = static_cast<int>(features.cols());
    assert(static_cast<int>(weak_labels.size()) == n && static_cast<int>(pseudo_labels.size()) == n);
    SceneGmm out;
    out.means = Mat::Zero(features.rows(), classes);
    out.sigmas = Vec::Constant(classes, var_floor);
    out.present.assign(classes, false);

    std::vector<int> weak_count(classes, 0);
    for (int i = 0; i < n; ++i) {
        const ClassId k = weak_labels[i];
        if (k < 0) continue;
        out.means.col(k) += features.col(i);
        weak_count[k]++;
    }
    for (int k = 0; k < classes; ++k) {
        if (weak_count[k] == 0) continue;
        out.present[k] = true;
        out.means.col(k) /= static_cast<double>(weak_count[k]);
    }

    for (int k = 0; k < classes; ++k) {
        if (!out.present[k]) continue;
        double acc = 0.0;
        double mass = 0.0;
        if (soft_scores) {
            for (int i = 0; i < n; ++i) {
                const double s = (*soft_scores)(k, i);
                acc += s * (features.col(i) - out.means.col(k)).squaredNorm();
                mass += s;
            }
        } else {
            for (int i = 0; i < n; ++i) {
                if (pseudo_labels[i] != k) continue;
                acc += (features.col(i) - out.means.col(k)).squaredNorm();
                mass += 1.0;
            }
        }
        out.sigmas[k] = mass > 0 ? std::max(std::sqrt(acc / mass), var_floor) : var_floor;
    }
    return out;
}

// Eq. 12 weight against the positive class's scene component; falls back to
// the Eq. 7 source-GMM weight when the class has no weak labels in the scene.
inline double scene_alpha(const SceneGmm& scene_gmm, const GmmBank& bank, const Vec& f, ClassId positive_class) {
    if (scene_gmm.has(positive_class)) {
        const double d2 = (f - scene_gmm.means.col(positive_class)).squaredNorm();
        return std::exp(-d2 / (2.0 * scene_gmm.sigmas[positive_class]));
    }
    const int m_plus = nearest_component(bank.gmm(positive_class), f);
    return component_alpha(bank.gmm(positive_class), m_plus, f);
}

namespace detail {

// Normalize then mix toward the floor: entries end up >= floor exactly while
// the sum stays 1 (up to rounding).
inline Vec floored_simplex(Vec v, double floor) {
    const int n = static_cast<int>(v.size());
    v = v.cwiseMax(0.0);
    const double s = v.sum();
    if (s > 0) {
        v /= s;
    } else {
        v.setConstant(1.0 / n);
    }
    return ((1.0 - n * floor) * v).array() + floor;
}

inline void ema_prior_update(Vec& prior, const std::vector<ClassId>& labels, int classes, double lambda,
                             double floor) {
    if (labels.empty()) return;
    Vec h = Vec::Zero(classes);
    for (ClassId c : labels) {
        assert(c >= 0 && c < classes);
        h[c] += 1.0;
    }
    h = floored_simplex(h, floor);
    prior = lambda * prior + (1.0 - lambda) * h;
    prior = floored_simplex(prior, floor);
}

} // namespace detail

// Fold batch label histograms into the EMA source/target priors. A side with
// no observations this call is left untouched.
inline void update_priors(TargetState& state, const std::vector<ClassId>& source_batch_labels,
                          const std::vector<ClassId>& target_pseudo_labels) {
    detail::ema_prior_update(state.delta_source_mutable(), source_batch_labels, state.classes(),
                             state.lambda_ema(), state.prior_floor());
    detail::ema_prior_update(state.delta_target_mutable(), target_pseudo_labels, state.classes(),
                             state.lambda_ema(), state.prior_floor());
}

} // namespace gengmm
