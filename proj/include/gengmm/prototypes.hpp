#pragma once

#include "gengmm/gmm.hpp"

namespace gengmm {

struct PrototypeRef {
    ClassId cls = -1;
    int component = -1;
    Vec mean; // q vector used in the contrastive loss
};

// Positive prototype, the hardest negative per foreign class, and the
// confidence weight for one pixel embedding.
struct PrototypeSelection {
    PrototypeRef positive;
    std::vector<PrototypeRef> negatives; // exactly C-1, one per class != positive.cls
    double alpha = 1.0;
};

// argmax_m of p(m|f,c); ties broken toward the lowest component index.
inline int nearest_component(const ClassGmm& g, const Vec& f) {
    const Vec logits = g.log_weights + log_gaussians(g, f);
    int best = 0;
    for (int j = 1; j < logits.size(); ++j) {
        if (logits[j] > logits[best]) best = j;
    }
    return best;
}

// Eq.-7-style proximity weight against one component: exp(-d^2 / (2 sigma)),
// sigma scalarized as the mean of the component's diagonal variances.
inline double component_alpha(const ClassGmm& g, int component, const Vec& f) {
    const double d2 = (f - g.means.col(component)).squaredNorm();
    const double sigma = g.variances.col(component).mean();
    return std::exp(-d2 / (2.0 * sigma));
}

namespace detail {

inline PrototypeSelection select_around_positive(const GmmBank& bank, const Vec& f, ClassId positive_class,
                                                 int positive_component, double alpha) {
    PrototypeSelection sel;
    sel.positive = {positive_class, positive_component, bank.gmm(positive_class).means.col(positive_component)};
    sel.alpha = alpha;
    sel.negatives.reserve(bank.classes() - 1);
    for (int c = 0; c < bank.classes(); ++c) {
        if (c == positive_class) continue;
        const int m = nearest_component(bank.gmm(c), f);
        sel.negatives.push_back({c, m, bank.gmm(c).means.col(m)});
    }
    return sel;
}

} // namespace detail

// Labeled source pixel: positive is the nearest component of the ground-truth
// class, negatives the nearest component of every other class. alpha = 1.
inline PrototypeSelection select_labeled_source(const GmmBank& bank, const Vec& f, ClassId y) {
    assert(y >= 0 && y < bank.classes());
    const int m_plus = nearest_component(bank.gmm(y), f);
    return detail::select_around_positive(bank, f, y, m_plus, 1.0);
}

// Unlabeled source pixel: the positive is the argmax of the joint (c, m)
// posterior under uniform class priors; alpha decays with distance to it.
// Joint argmax ties break toward the lowest (class, component) pair.
inline PrototypeSelection select_unlabeled_source(const GmmBank& bank, const Vec& f) {
    const int classes = bank.classes();
    int best_c = 0;
    int best_m = 0;
    double best_logit = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < classes; ++c) {
        const ClassGmm& g = bank.gmm(c);
        const Vec logits = g.log_weights + log_gaussians(g, f);
        for (int m = 0; m < logits.size(); ++m) {
            if (logits[m] > best_logit) {
                best_logit = logits[m];
                best_c = c;
                best_m = m;
            }
        }
    }
    const double alpha = component_alpha(bank.gmm(best_c), best_m, f);
    return detail::select_around_positive(bank, f, best_c, best_m, alpha);
}

// Noisy source labels are not trusted for prototype choice: identical to the
// unlabeled-source rule, with Eq.-7 weighting absorbing off-distribution
// pixels.
inline PrototypeSelection select_noisy_source(const GmmBank& bank, const Vec& f, ClassId /*y_noisy*/) {
    return select_unlabeled_source(bank, f);
}

inline PrototypeSelection select_labeled_source(const GmmBank& bank, const FeatureVector& f, ClassId y) {
    return select_labeled_source(bank, f.values, y);
}
inline PrototypeSelection select_unlabeled_source(const GmmBank& bank, const FeatureVector& f) {
    return select_unlabeled_source(bank, f.values);
}
inline PrototypeSelection select_noisy_source(const GmmBank& bank, const FeatureVector& f, ClassId y) {
    return select_noisy_source(bank, f.values, y);
}

// Flat selection table for a whole batch; avoids per-pixel allocations on the
// training path. comp_of_class(c, k) is the nearest component of class c for
// pixel k, so row pos_class[k] holds the positive component.
struct SelectionBatch {
    std::vector<ClassId> pos_class;
    std::vector<int> pos_comp;
    std::vector<double> alpha;
    Eigen::MatrixXi comp_of_class; // C x K

    int size() const { return static_cast<int>(pos_class.size()); }
};

enum class SelectMode {
    LabeledSource,  // positive class given; alpha = 1
    UnlabeledSource // positive class from the joint posterior; Eq. 7 alpha
};

// Batched counterpart of the per-pixel selection ops. `labels` is required in
// LabeledSource mode (and reused for target pseudo-labeled selection, which
// shares the within-class argmax rule).
inline SelectionBatch select_batch(const GmmBank& bank, const Mat& F, SelectMode mode,
                                   const std::vector<ClassId>* labels = nullptr) {
    const int k = static_cast<int>(F.cols());
    const int classes = bank.classes();
    SelectionBatch out;
    out.pos_class.resize(k);
    out.pos_comp.resize(k);
    out.alpha.assign(k, 1.0);
    out.comp_of_class.resize(classes, k);

    Mat best_logit(classes, k);
    for (int c = 0; c < classes; ++c) {
        const ClassGmm& g = bank.gmm(c);
        Mat ll = log_likelihood_matrix(g, F); // K x M
        ll.rowwise() += g.log_weights.transpose();
        for (int i = 0; i < k; ++i) {
            int arg = 0;
            for (int m = 1; m < ll.cols(); ++m) {
                if (ll(i, m) > ll(i, arg)) arg = m;
            }
            out.comp_of_class(c, i) = arg;
            best_logit(c, i) = ll(i, arg);
        }
    }

    for (int i = 0; i < k; ++i) {
        if (mode == SelectMode::LabeledSource) {
            assert(labels != nullptr);
            out.pos_class[i] = (*labels)[i];
        } else {
            int arg = 0;
            for (int c = 1; c < classes; ++c) {
                if (best_logit(c, i) > best_logit(arg, i)) arg = c;
            }
            out.pos_class[i] = arg;
        }
        out.pos_comp[i] = out.comp_of_class(out.pos_class[i], i);
        if (mode == SelectMode::UnlabeledSource) {
            out.alpha[i] = component_alpha(bank.gmm(out.pos_class[i]), out.pos_comp[i], F.col(i));
        }
    }
    return out;
}

} // namespace gengmm
