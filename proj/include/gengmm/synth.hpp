#pragma once

#include "gengmm/core_types.hpp"
#include "gengmm/model.hpp"

#include <json.hpp>

#include <cmath>
#include <vector>

namespace gengmm {

enum class TargetAnnotation { None = 0, Point = 1, Coarse = 2 };

// A two-domain synthetic benchmark: Voronoi class regions on a grid, features
// drawn from per-class multimodal mixtures, and a target domain produced by a
// fixed rotation + shift of feature space plus a class-prior shift.
struct ScenarioSpec {
    int classes = 5;
    int raw_dim = 16;
    int modes_per_class = 2;

    // Source mixture geometry.
    double class_separation = 2.2; // distance of class centers from origin
    double mode_spread = 1.0;      // distance of mode centers from class center
    double feature_std = 0.45;     // isotropic per-mode noise

    // Target transform (applied to raw feature space) and label shift.
    double rotation_deg = 25.0;
    double shift_mag = 0.7;
    double prior_skew = 2.5;          // target priors ~ skew^(c/(C-1)); 1 = no shift
    std::vector<double> target_priors; // explicit override; empty = derive from skew

    // Supervision regimes.
    double label_fraction = 1.0; // rho: fraction of source scenes labeled
    double noise_rate = 0.0;     // symmetric label flips on labeled source
    TargetAnnotation annotation = TargetAnnotation::None;
    int point_radius = 4;
    int point_count = 1; // discs per class per scene
    int coarse_width = 2;

    // Layout.
    int voronoi_sites = 10;
    int grid_h = 32;
    int grid_w = 32;
    int source_scenes = 200;
    int target_scenes = 200;
    int holdout_scenes = 50;

    uint64_t seed = 1;

    void validate() const {
        if (classes < 2) throw SpecError("classes must be >= 2");
        if (raw_dim < 2) throw SpecError("raw_dim must be >= 2");
        if (modes_per_class < 1) throw SpecError("modes_per_class must be >= 1");
        if (!(label_fraction > 0.0 && label_fraction <= 1.0)) throw SpecError("label_fraction must be in (0,1]");
        if (!(noise_rate >= 0.0 && noise_rate < 1.0)) throw SpecError("noise_rate must be in [0,1)");
        if (grid_h * grid_w <= 0) throw SpecError("grid must be non-empty");
        if (voronoi_sites < 1) throw SpecError("voronoi_sites must be >= 1");
        if (source_scenes < 1 || target_scenes < 1 || holdout_scenes < 0) {
            throw SpecError("scene counts must be positive");
        }
        if (!target_priors.empty()) {
            if (static_cast<int>(target_priors.size()) != classes) {
                throw SpecError("target_priors must have one entry per class");
            }
            double s = 0.0;
            for (double p : target_priors) {
                if (p < 0) throw SpecError("target_priors entries must be >= 0");
                s += p;
            }
            if (std::abs(s - 1.0) > 1e-9) throw SpecError("target_priors must sum to 1");
        }
        if (annotation == TargetAnnotation::Point && (point_radius < 0 || point_count < 1)) {
            throw SpecError("point annotation needs radius >= 0 and count >= 1");
        }
        if (annotation == TargetAnnotation::Coarse && coarse_width < 0) {
            throw SpecError("coarse_width must be >= 0");
        }
    }

    Vec resolved_target_priors() const {
        Vec p(classes);
        if (!target_priors.empty()) {
            for (int c = 0; c < classes; ++c) p[c] = target_priors[c];
        } else {
            for (int c = 0; c < classes; ++c) {
                p[c] = std::pow(prior_skew, static_cast<double>(c) / std::max(1, classes - 1));
            }
            p /= p.sum();
        }
        return p;
    }
};

struct GeneratedData {
    std::vector<Scene> source;
    std::vector<Scene> target;
    std::vector<Scene> holdout; // target distribution, evaluation only
};

namespace detail {

// Class mixture geometry drawn once per scenario seed.
struct MixtureModel {
    std::vector<Mat> mode_centers; // per class: raw_dim x modes
    Mat rotation;                  // raw_dim x raw_dim
    Vec shift;

    static MixtureModel build(const ScenarioSpec& spec) {
        Rng rng = Rng(spec.seed).derive(0xfeedULL);
        MixtureModel mm;
        mm.mode_centers.reserve(spec.classes);
        for (int c = 0; c < spec.classes; ++c) {
            Vec center = rng.normal_vec(spec.raw_dim);
            center *= spec.class_separation / center.norm();
            Mat modes(spec.raw_dim, spec.modes_per_class);
            for (int m = 0; m < spec.modes_per_class; ++m) {
                Vec dir = rng.normal_vec(spec.raw_dim);
                dir *= spec.mode_spread / dir.norm();
                modes.col(m) = center + dir;
            }
            mm.mode_centers.push_back(std::move(modes));
        }

        // Block-diagonal Givens rotation over coordinate pairs.
        const double theta = spec.rotation_deg * M_PI / 180.0;
        mm.rotation = Mat::Identity(spec.raw_dim, spec.raw_dim);
        for (int k = 0; k + 1 < spec.raw_dim; k += 2) {
            mm.rotation(k, k) = std::cos(theta);
            mm.rotation(k, k + 1) = -std::sin(theta);
            mm.rotation(k + 1, k) = std::sin(theta);
            mm.rotation(k + 1, k + 1) = std::cos(theta);
        }
        Vec dir = rng.normal_vec(spec.raw_dim);
        mm.shift = spec.shift_mag * dir / dir.norm();
        return mm;
    }
};

inline ClassId sample_class(const Vec& priors, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (int c = 0; c < priors.size(); ++c) {
        acc += priors[c];
        if (u < acc) return c;
    }
    return static_cast<ClassId>(priors.size() - 1);
}

inline Scene build_scene(const ScenarioSpec& spec, const MixtureModel& mm, Domain domain, const Vec& priors,
                         Rng rng) {
    Scene s;
    s.height = spec.grid_h;
    s.width = spec.grid_w;
    s.domain = domain;
    const int n = s.pixels();
    s.raw.resize(spec.raw_dim, n);
    s.labels.assign(n, LabelState::unlabeled());
    s.true_labels.assign(n, 0);

    // Voronoi partition of the grid.
    std::vector<double> sx(spec.voronoi_sites), sy(spec.voronoi_sites);
    std::vector<ClassId> site_class(spec.voronoi_sites);
    for (int k = 0; k < spec.voronoi_sites; ++k) {
        sy[k] = rng.uniform() * spec.grid_h;
        sx[k] = rng.uniform() * spec.grid_w;
        site_class[k] = sample_class(priors, rng);
    }
    for (int y = 0; y < spec.grid_h; ++y) {
        for (int x = 0; x < spec.grid_w; ++x) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int k = 0; k < spec.voronoi_sites; ++k) {
                const double dy = y + 0.5 - sy[k];
                const double dx = x + 0.5 - sx[k];
                const double d = dy * dy + dx * dx;
                if (d < best_d) {
                    best_d = d;
                    best = k;
                }
            }
            s.true_labels[y * spec.grid_w + x] = site_class[best];
        }
    }

    for (int p = 0; p < n; ++p) {
        const ClassId c = s.true_labels[p];
        const int mode = rng.uniform_int(spec.modes_per_class);
        Vec x = mm.mode_centers[c].col(mode) + spec.feature_std * rng.normal_vec(spec.raw_dim);
        if (domain == Domain::Target) x = mm.rotation * x + mm.shift;
        // Quantize to f32 so the on-disk container round-trips bit-exactly.
        for (int d = 0; d < spec.raw_dim; ++d) s.raw(d, p) = static_cast<double>(static_cast<float>(x[d]));
    }
    return s;
}

inline void apply_source_labels(Scene& s, const ScenarioSpec& spec, bool labeled_scene, Rng& rng) {
    if (!labeled_scene) return;
    const bool noisy = spec.noise_rate > 0.0;
    for (int p = 0; p < s.pixels(); ++p) {
        ClassId given = s.true_labels[p];
        if (noisy && rng.uniform() < spec.noise_rate) {
            // Symmetric flip to a uniformly random other class.
            const int offset = 1 + rng.uniform_int(spec.classes - 1);
            given = static_cast<ClassId>((given + offset) % spec.classes);
        }
        s.labels[p] = noisy ? LabelState::noisy(given) : LabelState::full(given);
    }
}

inline void apply_point_labels(Scene& s, const ScenarioSpec& spec, Rng& rng) {
    for (ClassId c = 0; c < spec.classes; ++c) {
        std::vector<int> cells;
        for (int p = 0; p < s.pixels(); ++p) {
            if (s.true_labels[p] == c) cells.push_back(p);
        }
        if (cells.empty()) continue;
        if (spec.point_count > static_cast<int>(cells.size())) {
            throw SpecError("point_count exceeds the class region size in a scene");
        }
        // Choose disc centers without replacement.
        for (int k = 0; k < spec.point_count; ++k) {
            const int pick = k + rng.uniform_int(static_cast<int>(cells.size()) - k);
            std::swap(cells[k], cells[pick]);
        }
        for (int k = 0; k < spec.point_count; ++k) {
            const int cy = cells[k] / s.width;
            const int cx = cells[k] % s.width;
            for (int y = std::max(0, cy - spec.point_radius); y <= std::min(s.height - 1, cy + spec.point_radius);
                 ++y) {
                for (int x = std::max(0, cx - spec.point_radius);
                     x <= std::min(s.width - 1, cx + spec.point_radius); ++x) {
                    const int dy = y - cy;
                    const int dx = x - cx;
                    if (dy * dy + dx * dx > spec.point_radius * spec.point_radius) continue;
                    const int p = y * s.width + x;
                    // Points cover only pixels whose true class matches.
                    if (s.true_labels[p] == c) s.labels[p] = LabelState::point(c);
                }
            }
        }
    }
}

inline void apply_coarse_labels(Scene& s, const ScenarioSpec& spec) {
    const int w = spec.coarse_width;
    for (int y = 0; y < s.height; ++y) {
        for (int x = 0; x < s.width; ++x) {
            const ClassId c = s.true_labels[y * s.width + x];
            bool interior = true;
            for (int dy = -w; dy <= w && interior; ++dy) {
                for (int dx = -w; dx <= w && interior; ++dx) {
                    const int ny = std::clamp(y + dy, 0, s.height - 1);
                    const int nx = std::clamp(x + dx, 0, s.width - 1);
                    if (s.true_labels[ny * s.width + nx] != c) interior = false;
                }
            }
            if (interior) s.labels[y * s.width + x] = LabelState::coarse(c);
        }
    }
}

} // namespace detail

// Deterministic function of (spec, seed): identical specs produce identical
// scene sets.
inline GeneratedData generate(const ScenarioSpec& spec) {
    spec.validate();
    const detail::MixtureModel mm = detail::MixtureModel::build(spec);
    const Vec source_priors = Vec::Constant(spec.classes, 1.0 / spec.classes);
    const Vec target_priors = spec.resolved_target_priors();
    const Rng master(spec.seed);

    GeneratedData data;
    const int labeled_scenes = static_cast<int>(std::ceil(spec.label_fraction * spec.source_scenes));
    for (int i = 0; i < spec.source_scenes; ++i) {
        Rng rng = master.derive(1, static_cast<uint64_t>(i));
        Scene s = detail::build_scene(spec, mm, Domain::Source, source_priors, rng.derive(11));
        Rng label_rng = rng.derive(12);
        detail::apply_source_labels(s, spec, i < labeled_scenes, label_rng);
        data.source.push_back(std::move(s));
    }
    for (int i = 0; i < spec.target_scenes; ++i) {
        Rng rng = master.derive(2, static_cast<uint64_t>(i));
        Scene s = detail::build_scene(spec, mm, Domain::Target, target_priors, rng.derive(11));
        Rng label_rng = rng.derive(12);
        if (spec.annotation == TargetAnnotation::Point) detail::apply_point_labels(s, spec, label_rng);
        if (spec.annotation == TargetAnnotation::Coarse) detail::apply_coarse_labels(s, spec);
        data.target.push_back(std::move(s));
    }
    for (int i = 0; i < spec.holdout_scenes; ++i) {
        Rng rng = master.derive(3, static_cast<uint64_t>(i));
        data.holdout.push_back(detail::build_scene(spec, mm, Domain::Target, target_priors, rng.derive(11)));
    }
    return data;
}

struct EvalResult {
    Eigen::Matrix<int64_t, Eigen::Dynamic, Eigen::Dynamic> confusion; // truth x predicted
    Vec iou;       // NaN where class absent from both truth and prediction
    Vec accuracy;  // per-class recall; NaN where class absent from truth
    Vec precision; // NaN where class never predicted
    Vec recall;
    double miou = 0.0;
};

inline EvalResult evaluate_predictions(const Eigen::Matrix<int64_t, Eigen::Dynamic, Eigen::Dynamic>& confusion) {
    const int classes = static_cast<int>(confusion.rows());
    EvalResult r;
    r.confusion = confusion;
    r.iou = Vec::Constant(classes, std::numeric_limits<double>::quiet_NaN());
    r.accuracy = Vec::Constant(classes, std::numeric_limits<double>::quiet_NaN());
    r.precision = Vec::Constant(classes, std::numeric_limits<double>::quiet_NaN());
    r.recall = Vec::Constant(classes, std::numeric_limits<double>::quiet_NaN());
    double iou_sum = 0.0;
    int iou_count = 0;
    for (int c = 0; c < classes; ++c) {
        const int64_t tp = confusion(c, c);
        const int64_t truth = confusion.row(c).sum();
        const int64_t predicted = confusion.col(c).sum();
        const int64_t uni = truth + predicted - tp;
        if (uni > 0) {
            r.iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
            iou_sum += r.iou[c];
            iou_count++;
        }
        if (truth > 0) {
            r.accuracy[c] = static_cast<double>(tp) / static_cast<double>(truth);
            r.recall[c] = r.accuracy[c];
        }
        if (predicted > 0) r.precision[c] = static_cast<double>(tp) / static_cast<double>(predicted);
    }
    r.miou = iou_count > 0 ? iou_sum / iou_count : 0.0;
    return r;
}

// Confusion-matrix mIoU of the classifier over the given scenes.
inline EvalResult evaluate(const Model& model, const std::vector<Scene>& scenes) {
    const int classes = model.classes();
    Eigen::Matrix<int64_t, Eigen::Dynamic, Eigen::Dynamic> confusion(classes, classes);
    confusion.setZero();
    for (const Scene& s : scenes) {
        const Mat logits = classify(model, s.raw);
        const std::vector<ClassId> pred = argmax_classes(logits);
        for (int p = 0; p < s.pixels(); ++p) confusion(s.true_labels[p], pred[p])++;
    }
    return evaluate_predictions(confusion);
}

inline void to_json(nlohmann::json& j, const ScenarioSpec& s) {
    j = nlohmann::json{{"classes", s.classes},
                       {"raw_dim", s.raw_dim},
                       {"modes_per_class", s.modes_per_class},
                       {"class_separation", s.class_separation},
                       {"mode_spread", s.mode_spread},
                       {"feature_std", s.feature_std},
                       {"rotation_deg", s.rotation_deg},
                       {"shift_mag", s.shift_mag},
                       {"prior_skew", s.prior_skew},
                       {"target_priors", s.target_priors},
                       {"label_fraction", s.label_fraction},
                       {"noise_rate", s.noise_rate},
                       {"annotation", static_cast<int>(s.annotation)},
                       {"point_radius", s.point_radius},
                       {"point_count", s.point_count},
                       {"coarse_width", s.coarse_width},
                       {"voronoi_sites", s.voronoi_sites},
                       {"grid_h", s.grid_h},
                       {"grid_w", s.grid_w},
                       {"source_scenes", s.source_scenes},
                       {"target_scenes", s.target_scenes},
                       {"holdout_scenes", s.holdout_scenes},
                       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, ScenarioSpec& s) {
    j.at("classes").get_to(s.classes);
    j.at("raw_dim").get_to(s.raw_dim);
    j.at("modes_per_class").get_to(s.modes_per_class);
    j.at("class_separation").get_to(s.class_separation);
    j.at("mode_spread").get_to(s.mode_spread);
    j.at("feature_std").get_to(s.feature_std);
    j.at("rotation_deg").get_to(s.rotation_deg);
    j.at("shift_mag").get_to(s.shift_mag);
    j.at("prior_skew").get_to(s.prior_skew);
    j.at("target_priors").get_to(s.target_priors);
    j.at("label_fraction").get_to(s.label_fraction);
    s.annotation = static_cast<TargetAnnotation>(j.at("annotation").get<int>());
    j.at("point_radius").get_to(s.point_radius);
    j.at("point_count").get_to(s.point_count);
    j.at("coarse_width").get_to(s.coarse_width);
    j.at("noise_rate").get_to(s.noise_rate);
    j.at("voronoi_sites").get_to(s.voronoi_sites);
    j.at("grid_h").get_to(s.grid_h);
    j.at("grid_w").get_to(s.grid_w);
    j.at("source_scenes").get_to(s.source_scenes);
    j.at("target_scenes").get_to(s.target_scenes);
    j.at("holdout_scenes").get_to(s.holdout_scenes);
    j.at("seed").get_to(s.seed);
}

inline void to_json(nlohmann::json& j, const EvalResult& r) {
    auto vec_to_json = [](const Vec& v) {
        nlohmann::json out = nlohmann::json::array();
        for (Eigen::Index i = 0; i < v.size(); ++i) {
            if (std::isnan(v[i])) {
                out.push_back(nullptr);
            } else {
                out.push_back(v[i]);
            }
        }
        return out;
    };
    j = nlohmann::json{{"miou", r.miou},
                       {"iou", vec_to_json(r.iou)},
                       {"accuracy", vec_to_json(r.accuracy)},
                       {"precision", vec_to_json(r.precision)},
                       {"recall", vec_to_json(r.recall)}};
}

} // namespace gengmm
