#pragma once

#include "gengmm/common.hpp"

#include <cstdint>
#include <vector>

namespace gengmm {

enum class Domain : uint32_t { Source = 0, Target = 1 };

// One l2-normalized embedding (a "pixel feature").
struct FeatureVector {
    Vec values;

    int dim() const { return static_cast<int>(values.size()); }
};

inline FeatureVector normalize(const Vec& raw) {
    const double n = raw.norm();
    if (!(n > 0.0) || !std::isfinite(n)) {
        throw DegenerateFeature("cannot l2-normalize a zero or non-finite vector");
    }
    return FeatureVector{raw / n};
}

// Supervision state of one pixel.
struct LabelState {
    enum class Kind : uint8_t { Full = 0, Point = 1, Coarse = 2, Noisy = 3, Unlabeled = 4 };

    Kind kind = Kind::Unlabeled;
    ClassId cls = -1; // valid unless kind == Unlabeled

    static LabelState full(ClassId c) { return {Kind::Full, c}; }
    static LabelState point(ClassId c) { return {Kind::Point, c}; }
    static LabelState coarse(ClassId c) { return {Kind::Coarse, c}; }
    static LabelState noisy(ClassId c) { return {Kind::Noisy, c}; }
    static LabelState unlabeled() { return {Kind::Unlabeled, -1}; }

    bool labeled() const { return kind != Kind::Unlabeled; }
    // Weak labels in the sense of point/coarse annotations.
    bool weak() const { return kind == Kind::Point || kind == Kind::Coarse; }

    bool operator==(const LabelState& o) const { return kind == o.kind && cls == o.cls; }
};

// A bag of pixels on a dense H x W grid, standing in for one image.
// true_label is hidden from all training paths; it exists for evaluation.
struct Scene {
    int height = 0;
    int width = 0;
    Domain domain = Domain::Source;
    Mat raw;                          // raw_dim x (H*W), pixel index = y*W + x
    std::vector<LabelState> labels;   // H*W
    std::vector<ClassId> true_labels; // H*W

    int pixels() const { return height * width; }
    int raw_dim() const { return static_cast<int>(raw.rows()); }
};

struct BatchPixel {
    int scene_id = -1;
    int pixel_index = -1;
};

// Pixels drawn from one domain for a single step. Raw inputs are carried;
// embeddings are produced by whichever model the step runs.
struct Batch {
    Domain domain = Domain::Source;
    Mat raw;                        // raw_dim x N
    std::vector<LabelState> labels; // N
    std::vector<BatchPixel> origin; // N

    int size() const { return static_cast<int>(raw.cols()); }
};

struct RunConfig {
    // Dimensions.
    int classes = 5;       // C
    int embed_dim = 64;    // D, projection-head output
    int hidden_dim = 128;  // encoder width
    int components = 3;    // M, Gaussians per class

    // Losses.
    double tau = 0.1;           // contrastive temperature
    double beta = 0.968;        // self-training confidence threshold
    double lambda_cl = 1.0;     // weight of the contrastive term

    // EMA rates.
    double lambda_ema = 0.9;      // GMM / prototypes / priors
    double lambda_teacher = 0.999;

    // Sinkhorn-EM.
    int sinkhorn_iters = 10;
    double sinkhorn_eps = 0.05;
    double var_floor = 1e-4;
    int starvation_limit = 100; // consecutive dead E-steps before re-seeding

    // Memory banks.
    int bank_capacity = 32768;    // per class
    int bank_push_per_class = 100;
    int k_top = 10;               // reliable target embeddings per class per batch
    double prior_floor = 1e-6;

    // Optimization.
    double learning_rate = 0.2;
    double sgd_momentum = 0.9;
    int iterations = 1000;
    int warmup_iterations = 200; // GMM-only updates, no contrastive loss
    int batch_labeled = 256;

    // Component toggles (ablations).
    bool enable_selftrain = true;     // the "UL" component
    bool use_alpha_selftrain = true;  // weak-target scenes: alpha instead of w
    bool soft_scene_sigma = false;    // Eq. 11 sigma: soft posterior weighting

    // Bookkeeping.
    int metrics_interval = 100;
    int miou_eval_scenes = 8; // held-out scenes scored per metrics row
    uint64_t seed = 1;

    void validate() const {
        if (classes < 2) throw ConfigError("classes must be >= 2");
        if (components < 1) throw ConfigError("components must be >= 1");
        if (!(tau > 0)) throw ConfigError("tau must be > 0");
        if (beta < 0 || beta > 1) throw ConfigError("beta must be in [0,1]");
        if (!(lambda_ema > 0 && lambda_ema < 1)) throw ConfigError("lambda_ema must be in (0,1)");
        if (!(lambda_teacher > 0 && lambda_teacher < 1)) throw ConfigError("lambda_teacher must be in (0,1)");
        if (embed_dim < 2) throw ConfigError("embed_dim must be >= 2");
        if (sinkhorn_iters < 1) throw ConfigError("sinkhorn_iters must be >= 1");
        if (!(sinkhorn_eps > 0)) throw ConfigError("sinkhorn_eps must be > 0");
        if (bank_capacity < 1) throw ConfigError("bank_capacity must be >= 1");
        if (bank_push_per_class < 1) throw ConfigError("bank_push_per_class must be >= 1");
        if (k_top < 1) throw ConfigError("k_top must be >= 1");
        if (!(var_floor > 0)) throw ConfigError("var_floor must be > 0");
    }
};

} // namespace gengmm
