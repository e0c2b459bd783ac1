#pragma once

#include "gengmm/model.hpp"
#include "gengmm/prototypes.hpp"

#include <map>
#include <optional>

namespace gengmm {

struct ContrastiveResult {
    double value = 0.0;
    Vec grad_f; // d value / d f, with alpha treated as a constant weight
};

// InfoNCE against the positive prototype and the C-1 hardest negatives, in
// log-sum-exp form. tau sits inside every exponent.
inline ContrastiveResult contrastive_loss(const Vec& f, const PrototypeSelection& sel, double tau) {
    assert(tau > 0);
    const int c = static_cast<int>(sel.negatives.size()) + 1;
    Vec logits(c);
    logits[0] = f.dot(sel.positive.mean) / tau;
    for (int i = 0; i < c - 1; ++i) logits[i + 1] = f.dot(sel.negatives[i].mean) / tau;

    const double lse = log_sum_exp(logits);
    const Vec p = (logits.array() - lse).exp();

    ContrastiveResult out;
    out.value = sel.alpha * (lse - logits[0]);
    Vec acc = p[0] * sel.positive.mean;
    for (int i = 0; i < c - 1; ++i) acc += p[i + 1] * sel.negatives[i].mean;
    out.grad_f = (sel.alpha / tau) * (acc - sel.positive.mean);
    return out;
}

inline ContrastiveResult contrastive_loss(const FeatureVector& f, const PrototypeSelection& sel, double tau) {
    return contrastive_loss(f.values, sel, tau);
}

struct CeResult {
    double value = 0.0;
    Mat grad_logits;
};

// Mean softmax cross-entropy over the given labeled pixels.
inline CeResult ce_labeled(const Mat& logits, const std::vector<ClassId>& labels) {
    const int n = static_cast<int>(logits.cols());
    assert(static_cast<int>(labels.size()) == n);
    CeResult out;
    out.grad_logits = Mat::Zero(logits.rows(), n);
    if (n == 0) return out;
    for (int i = 0; i < n; ++i) {
        const Vec col = logits.col(i);
        const double lse = log_sum_exp(col);
        out.value += lse - col[labels[i]];
        Vec p = (col.array() - lse).exp();
        p[labels[i]] -= 1.0;
        out.grad_logits.col(i) = p / static_cast<double>(n);
    }
    out.value /= static_cast<double>(n);
    return out;
}

struct SelfTrainResult {
    double value = 0.0;
    Mat grad_logits;
    std::vector<double> weights; // the per-pixel weight actually applied
};

// Eq. 1-2 self-training: per-pixel weight is the scene fraction of teacher
// confidences above beta, unless an alpha override is supplied (weak-target
// scenes). Weights are constants with respect to the student logits.
inline SelfTrainResult ce_selftrain(const Mat& logits, const std::vector<ClassId>& pseudo_labels,
                                    const std::vector<double>& confidences, const std::vector<int>& scene_ids,
                                    double beta, const std::vector<double>* alpha_override = nullptr) {
    const int n = static_cast<int>(logits.cols());
    assert(static_cast<int>(pseudo_labels.size()) == n);
    assert(static_cast<int>(confidences.size()) == n);
    assert(static_cast<int>(scene_ids.size()) == n);

    SelfTrainResult out;
    out.grad_logits = Mat::Zero(logits.rows(), n);
    out.weights.assign(n, 0.0);
    if (n == 0) return out;

    std::map<int, std::pair<int, int>> counts; // scene -> (above beta, total)
    for (int i = 0; i < n; ++i) {
        auto& c = counts[scene_ids[i]];
        if (confidences[i] > beta) c.first++;
        c.second++;
    }

    for (int i = 0; i < n; ++i) {
        double weight;
        if (alpha_override) {
            weight = (*alpha_override)[i];
        } else {
            const auto& c = counts[scene_ids[i]];
            weight = static_cast<double>(c.first) / static_cast<double>(c.second);
        }
        out.weights[i] = weight;
        const Vec col = logits.col(i);
        const double lse = log_sum_exp(col);
        out.value += weight * (lse - col[pseudo_labels[i]]);
        Vec p = (col.array() - lse).exp();
        p[pseudo_labels[i]] -= 1.0;
        out.grad_logits.col(i) = weight * p / static_cast<double>(n);
    }
    out.value /= static_cast<double>(n);
    return out;
}

// One optimization step's worth of pixels, already routed per Alg. 1. Raw
// inputs are concatenated across the labeled-source / unlabeled-source /
// target sub-batches; the per-pixel annotations say which loss terms apply.
struct LossInputs {
    Mat raw;                        // raw_dim x N
    std::vector<ClassId> ce_label;  // N, -1 = no labeled CE
    std::vector<ClassId> st_label;  // N, -1 = no self-train CE
    std::vector<double> st_conf;    // N, teacher max-softmax; NaN = outside any self-train scene
    std::vector<int> scene_key;     // N, groups the per-scene w computation
    std::vector<double> st_alpha;   // N, per-pixel weight override; NaN = use scene w

    std::vector<int> cl_pixel; // K batch indices carrying a contrastive term
    SelectionBatch cl_sel;     // K selections (alpha included)
    const GmmBank* bank = nullptr;

    void init(int n, int raw_dim) {
        raw.resize(raw_dim, n);
        ce_label.assign(n, -1);
        st_label.assign(n, -1);
        st_conf.assign(n, std::numeric_limits<double>::quiet_NaN());
        scene_key.assign(n, -1);
        st_alpha.assign(n, std::numeric_limits<double>::quiet_NaN());
    }

    int size() const { return static_cast<int>(raw.cols()); }
};

struct LossReport {
    double contrastive = 0.0; // mean l_GMMCl over contrastive pixels
    double ce_labeled = 0.0;
    double ce_selftrain = 0.0;
    double total = 0.0;
    int labeled_count = 0;
    int selftrain_count = 0;
    int contrastive_count = 0;
    std::vector<double> alphas; // per contrastive pixel
    std::vector<double> ws;     // per self-train pixel, the applied weight
    ModelGrads grads;

    bool finite() const {
        return std::isfinite(contrastive) && std::isfinite(ce_labeled) && std::isfinite(ce_selftrain) &&
               std::isfinite(total);
    }
    double mean_alpha() const {
        if (alphas.empty()) return 0.0;
        double s = 0.0;
        for (double a : alphas) s += a;
        return s / static_cast<double>(alphas.size());
    }
    double mean_w() const {
        if (ws.empty()) return 0.0;
        double s = 0.0;
        for (double w : ws) s += w;
        return s / static_cast<double>(ws.size());
    }
};

// L = L_ce^l + L_ce^u + lambda_cl * mean(l_GMMCl), with parameter gradients.
// Selections, pseudo-labels, confidences and weights are inputs here; they do
// not receive gradients. Pass `pre` to reuse a forward evaluation.
inline LossReport total_loss(const Model& model, const LossInputs& in, const RunConfig& cfg,
                             const ForwardCache* pre = nullptr) {
    ForwardCache local;
    if (!pre) {
        local = forward(model, in.raw);
        pre = &local;
    }
    const ForwardCache& cache = *pre;
    const int n = in.size();

    LossReport report;
    report.grads = ModelGrads::zeros_like(model);

    int n_ce = 0;
    int n_st = 0;
    for (int i = 0; i < n; ++i) {
        if (in.ce_label[i] >= 0) n_ce++;
        if (in.st_label[i] >= 0) n_st++;
    }
    const int n_cl = static_cast<int>(in.cl_pixel.size());
    report.labeled_count = n_ce;
    report.selftrain_count = n_st;
    report.contrastive_count = n_cl;

    // Per-scene w: fraction of the scene's pixels (all with a teacher
    // confidence, labeled or not) above beta.
    std::map<int, std::pair<int, int>> counts;
    for (int i = 0; i < n; ++i) {
        if (!std::isfinite(in.st_conf[i])) continue;
        auto& c = counts[in.scene_key[i]];
        if (in.st_conf[i] > cfg.beta) c.first++;
        c.second++;
    }
    auto scene_w = [&counts](int key) {
        const auto it = counts.find(key);
        if (it == counts.end() || it->second.second == 0) return 0.0;
        return static_cast<double>(it->second.first) / static_cast<double>(it->second.second);
    };

    Mat d_logits = Mat::Zero(cache.logits.rows(), n);
    Mat d_f = Mat::Zero(cache.f.rows(), n);

    for (int i = 0; i < n; ++i) {
        const bool has_ce = in.ce_label[i] >= 0;
        const bool has_st = in.st_label[i] >= 0;
        if (!has_ce && !has_st) continue;
        const Vec col = cache.logits.col(i);
        const double lse = log_sum_exp(col);
        const Vec p = (col.array() - lse).exp();
        if (has_ce) {
            report.ce_labeled += lse - col[in.ce_label[i]];
            Vec g = p;
            g[in.ce_label[i]] -= 1.0;
            d_logits.col(i) += g / static_cast<double>(n_ce);
        }
        if (has_st) {
            const double weight = std::isfinite(in.st_alpha[i]) ? in.st_alpha[i] : scene_w(in.scene_key[i]);
            report.ws.push_back(weight);
            report.ce_selftrain += weight * (lse - col[in.st_label[i]]);
            Vec g = p;
            g[in.st_label[i]] -= 1.0;
            d_logits.col(i) += weight * g / static_cast<double>(n_st);
        }
    }
    if (n_ce > 0) report.ce_labeled /= static_cast<double>(n_ce);
    if (n_st > 0) report.ce_selftrain /= static_cast<double>(n_st);

    if (n_cl > 0) {
        assert(in.bank != nullptr);
        const GmmBank& bank = *in.bank;
        const int classes = bank.classes();
        const double cl_scale = cfg.lambda_cl / static_cast<double>(n_cl);
        Vec logits_cl(classes);
        for (int k = 0; k < n_cl; ++k) {
            const int i = in.cl_pixel[k];
            const Vec f = cache.f.col(i);
            const ClassId pos = in.cl_sel.pos_class[k];
            const double alpha = in.cl_sel.alpha[k];
            report.alphas.push_back(alpha);
            for (int c = 0; c < classes; ++c) {
                logits_cl[c] = f.dot(bank.gmm(c).means.col(in.cl_sel.comp_of_class(c, k))) / cfg.tau;
            }
            const double lse = log_sum_exp(logits_cl);
            report.contrastive += alpha * (lse - logits_cl[pos]);

            Vec acc = Vec::Zero(f.size());
            for (int c = 0; c < classes; ++c) {
                const double pc = std::exp(logits_cl[c] - lse);
                acc += pc * bank.gmm(c).means.col(in.cl_sel.comp_of_class(c, k));
            }
            acc -= bank.gmm(pos).means.col(in.cl_sel.comp_of_class(pos, k));
            d_f.col(i) += cl_scale * (alpha / cfg.tau) * acc;
        }
        report.contrastive /= static_cast<double>(n_cl);
    }

    backward(model, cache, d_logits, d_f, report.grads);
    report.total = report.ce_labeled + report.ce_selftrain + cfg.lambda_cl * report.contrastive;
    return report;
}

} // namespace gengmm
