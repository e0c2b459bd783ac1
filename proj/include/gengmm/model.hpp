#pragma once

#include "gengmm/core_types.hpp"

namespace gengmm {

// Encoder (affine+ReLU) -> {projection head (affine, ReLU, affine, l2-norm),
// classifier (affine)}. Gradients are closed-form for this fixed shape.
struct Model {
    Mat w_enc; // hidden x raw
    Vec b_enc;
    Mat w_p1; // hidden x hidden
    Vec b_p1;
    Mat w_p2; // embed x hidden
    Vec b_p2;
    Mat w_cls; // classes x hidden
    Vec b_cls;

    int raw_dim() const { return static_cast<int>(w_enc.cols()); }
    int hidden_dim() const { return static_cast<int>(w_enc.rows()); }
    int embed_dim() const { return static_cast<int>(w_p2.rows()); }
    int classes() const { return static_cast<int>(w_cls.rows()); }

    static Model init(int raw_dim, int hidden_dim, int embed_dim, int classes, Rng& rng) {
        Model m;
        auto fill = [&rng](Mat& w, int rows, int cols) {
            w.resize(rows, cols);
            const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
            for (int j = 0; j < cols; ++j) {
                for (int i = 0; i < rows; ++i) w(i, j) = scale * rng.normal();
            }
        };
        auto fill_bias = [&rng](Vec& b, int n) {
            b.resize(n);
            for (int i = 0; i < n; ++i) b[i] = 0.01 * rng.normal();
        };
        fill(m.w_enc, hidden_dim, raw_dim);
        fill_bias(m.b_enc, hidden_dim);
        fill(m.w_p1, hidden_dim, hidden_dim);
        fill_bias(m.b_p1, hidden_dim);
        fill(m.w_p2, embed_dim, hidden_dim);
        fill_bias(m.b_p2, embed_dim);
        fill(m.w_cls, classes, hidden_dim);
        fill_bias(m.b_cls, classes);
        return m;
    }

    size_t param_count() const {
        return static_cast<size_t>(w_enc.size() + b_enc.size() + w_p1.size() + b_p1.size() + w_p2.size() +
                                   b_p2.size() + w_cls.size() + b_cls.size());
    }

    template <typename Fn>
    void for_each_param(Fn&& fn) {
        fn(w_enc);
        fn(b_enc);
        fn(w_p1);
        fn(b_p1);
        fn(w_p2);
        fn(b_p2);
        fn(w_cls);
        fn(b_cls);
    }

    Vec flatten() const {
        Vec out(param_count());
        Eigen::Index k = 0;
        auto put = [&](const auto& p) {
            out.segment(k, p.size()) = Eigen::Map<const Vec>(p.data(), p.size());
            k += p.size();
        };
        put(w_enc);
        put(b_enc);
        put(w_p1);
        put(b_p1);
        put(w_p2);
        put(b_p2);
        put(w_cls);
        put(b_cls);
        return out;
    }

    void unflatten(const Vec& flat) {
        Eigen::Index k = 0;
        auto take = [&](auto& p) {
            Eigen::Map<Vec>(p.data(), p.size()) = flat.segment(k, p.size());
            k += p.size();
        };
        take(w_enc);
        take(b_enc);
        take(w_p1);
        take(b_p1);
        take(w_p2);
        take(b_p2);
        take(w_cls);
        take(b_cls);
    }

    bool all_finite() const {
        return w_enc.allFinite() && b_enc.allFinite() && w_p1.allFinite() && b_p1.allFinite() &&
               w_p2.allFinite() && b_p2.allFinite() && w_cls.allFinite() && b_cls.allFinite();
    }
};

struct ModelGrads {
    Mat w_enc;
    Vec b_enc;
    Mat w_p1;
    Vec b_p1;
    Mat w_p2;
    Vec b_p2;
    Mat w_cls;
    Vec b_cls;

    static ModelGrads zeros_like(const Model& m) {
        ModelGrads g;
        g.w_enc = Mat::Zero(m.w_enc.rows(), m.w_enc.cols());
        g.b_enc = Vec::Zero(m.b_enc.size());
        g.w_p1 = Mat::Zero(m.w_p1.rows(), m.w_p1.cols());
        g.b_p1 = Vec::Zero(m.b_p1.size());
        g.w_p2 = Mat::Zero(m.w_p2.rows(), m.w_p2.cols());
        g.b_p2 = Vec::Zero(m.b_p2.size());
        g.w_cls = Mat::Zero(m.w_cls.rows(), m.w_cls.cols());
        g.b_cls = Vec::Zero(m.b_cls.size());
        return g;
    }

    Vec flatten() const {
        Vec out(w_enc.size() + b_enc.size() + w_p1.size() + b_p1.size() + w_p2.size() + b_p2.size() +
                w_cls.size() + b_cls.size());
        Eigen::Index k = 0;
        auto put = [&](const auto& p) {
            out.segment(k, p.size()) = Eigen::Map<const Vec>(p.data(), p.size());
            k += p.size();
        };
        put(w_enc);
        put(b_enc);
        put(w_p1);
        put(b_p1);
        put(w_p2);
        put(b_p2);
        put(w_cls);
        put(b_cls);
        return out;
    }
};

// Everything the backward pass needs from one forward evaluation.
struct ForwardCache {
    Mat x;       // raw x N
    Mat pre_enc; // hidden x N
    Mat h;       // hidden x N
    Mat pre_p1;  // hidden x N
    Mat a;       // hidden x N
    Mat g;       // embed x N, pre-normalization
    Vec g_norm;  // N
    Mat f;       // embed x N, unit columns
    Mat logits;  // classes x N

    int size() const { return static_cast<int>(x.cols()); }
};

inline ForwardCache forward(const Model& m, const Mat& x) {
    ForwardCache c;
    c.x = x;
    c.pre_enc = (m.w_enc * x).colwise() + m.b_enc;
    c.h = c.pre_enc.cwiseMax(0.0);
    c.pre_p1 = (m.w_p1 * c.h).colwise() + m.b_p1;
    c.a = c.pre_p1.cwiseMax(0.0);
    c.g = (m.w_p2 * c.a).colwise() + m.b_p2;
    c.g_norm = c.g.colwise().norm();
    c.f = c.g;
    for (int i = 0; i < c.f.cols(); ++i) {
        const double n = c.g_norm[i];
        if (n > 0) c.f.col(i) /= n;
    }
    c.logits = (m.w_cls * c.h).colwise() + m.b_cls;
    return c;
}

// Classifier-only path for evaluation.
inline Mat classify(const Model& m, const Mat& x) {
    const Mat h = ((m.w_enc * x).colwise() + m.b_enc).cwiseMax(0.0);
    return (m.w_cls * h).colwise() + m.b_cls;
}

inline std::vector<ClassId> argmax_classes(const Mat& logits) {
    std::vector<ClassId> out(logits.cols());
    for (int i = 0; i < logits.cols(); ++i) {
        int best = 0;
        for (int c = 1; c < logits.rows(); ++c) {
            if (logits(c, i) > logits(best, i)) best = c;
        }
        out[i] = best;
    }
    return out;
}

// Accumulate parameter gradients given upstream gradients on the logits and
// on the normalized embeddings f.
inline void backward(const Model& m, const ForwardCache& c, const Mat& d_logits, const Mat& d_f,
                     ModelGrads& grads) {
    const int n = c.size();

    // Through l2 normalization: dg = (df - f (f . df)) / ||g||.
    Mat d_g(c.g.rows(), n);
    for (int i = 0; i < n; ++i) {
        const double r = c.g_norm[i];
        const double fdot = c.f.col(i).dot(d_f.col(i));
        d_g.col(i) = (d_f.col(i) - fdot * c.f.col(i)) / r;
    }

    grads.w_p2.noalias() += d_g * c.a.transpose();
    grads.b_p2 += d_g.rowwise().sum();
    Mat d_a = m.w_p2.transpose() * d_g;
    Mat d_pre_p1 = d_a.cwiseProduct((c.pre_p1.array() > 0.0).cast<double>().matrix());
    grads.w_p1.noalias() += d_pre_p1 * c.h.transpose();
    grads.b_p1 += d_pre_p1.rowwise().sum();

    grads.w_cls.noalias() += d_logits * c.h.transpose();
    grads.b_cls += d_logits.rowwise().sum();

    Mat d_h = m.w_p1.transpose() * d_pre_p1;
    d_h.noalias() += m.w_cls.transpose() * d_logits;
    Mat d_pre_enc = d_h.cwiseProduct((c.pre_enc.array() > 0.0).cast<double>().matrix());
    grads.w_enc.noalias() += d_pre_enc * c.x.transpose();
    grads.b_enc += d_pre_enc.rowwise().sum();
}

// Classic momentum SGD.
class SgdOptimizer {
public:
    SgdOptimizer() = default;
    SgdOptimizer(const Model& m, double lr, double momentum)
        : lr_(lr), momentum_(momentum), velocity_(ModelGrads::zeros_like(m)) {}

    void step(Model& m, const ModelGrads& g) {
        auto upd = [this](auto& theta, auto& v, const auto& grad) {
            v = momentum_ * v + grad;
            theta -= lr_ * v;
        };
        upd(m.w_enc, velocity_.w_enc, g.w_enc);
        upd(m.b_enc, velocity_.b_enc, g.b_enc);
        upd(m.w_p1, velocity_.w_p1, g.w_p1);
        upd(m.b_p1, velocity_.b_p1, g.b_p1);
        upd(m.w_p2, velocity_.w_p2, g.w_p2);
        upd(m.b_p2, velocity_.b_p2, g.b_p2);
        upd(m.w_cls, velocity_.w_cls, g.w_cls);
        upd(m.b_cls, velocity_.b_cls, g.b_cls);
    }

    double learning_rate() const { return lr_; }

private:
    double lr_ = 0.1;
    double momentum_ = 0.9;
    ModelGrads velocity_;
};

struct TeacherStudent {
    Model student;
    Model teacher; // EMA of the student trajectory
};

inline void teacher_update(TeacherStudent& pair, double lambda_teacher) {
    auto upd = [lambda_teacher](auto& t, const auto& s) { t = lambda_teacher * t + (1.0 - lambda_teacher) * s; };
    upd(pair.teacher.w_enc, pair.student.w_enc);
    upd(pair.teacher.b_enc, pair.student.b_enc);
    upd(pair.teacher.w_p1, pair.student.w_p1);
    upd(pair.teacher.b_p1, pair.student.b_p1);
    upd(pair.teacher.w_p2, pair.student.w_p2);
    upd(pair.teacher.b_p2, pair.student.b_p2);
    upd(pair.teacher.w_cls, pair.student.w_cls);
    upd(pair.teacher.b_cls, pair.student.b_cls);
}

} // namespace gengmm
