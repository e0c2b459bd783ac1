#pragma once

#include "gengmm/core_types.hpp"
#include "gengmm/gmm.hpp"
#include "gengmm/model.hpp"
#include "gengmm/target.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <vector>

namespace gengmm {

// Little-endian binary container primitives. All multi-byte values are
// composed explicitly so files are identical across hosts.
class BinaryWriter {
public:
    explicit BinaryWriter(const std::string& path) : os_(path, std::ios::binary) {
        if (!os_) throw IoError("cannot open for writing: " + path);
    }

    void u8(uint8_t v) { os_.put(static_cast<char>(v)); }
    void u16(uint16_t v) {
        u8(static_cast<uint8_t>(v & 0xff));
        u8(static_cast<uint8_t>(v >> 8));
    }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
    }
    void f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void magic(const char m[5]) { os_.write(m, 4); }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        os_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    void mat_f64(const Mat& m) {
        u32(static_cast<uint32_t>(m.rows()));
        u32(static_cast<uint32_t>(m.cols()));
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            for (Eigen::Index i = 0; i < m.rows(); ++i) f64(m(i, j));
        }
    }
    void vec_f64(const Vec& v) {
        u32(static_cast<uint32_t>(v.size()));
        for (Eigen::Index i = 0; i < v.size(); ++i) f64(v[i]);
    }

    void close() { os_.close(); }

private:
    std::ofstream os_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::string& path) : is_(path, std::ios::binary) {
        if (!is_) throw IoError("cannot open for reading: " + path);
    }

    uint8_t u8() {
        int c = is_.get();
        if (c == EOF) throw IoError("unexpected end of file");
        return static_cast<uint8_t>(c);
    }
    uint16_t u16() {
        uint16_t v = u8();
        v |= static_cast<uint16_t>(u8()) << 8;
        return v;
    }
    uint32_t u32() {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(u8()) << (8 * i);
        return v;
    }
    uint64_t u64() {
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(u8()) << (8 * i);
        return v;
    }
    float f32() {
        const uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        const uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    void expect_magic(const char m[5]) {
        char buf[4];
        is_.read(buf, 4);
        if (!is_ || std::memcmp(buf, m, 4) != 0) throw IoError(std::string("bad magic, expected ") + m);
    }
    std::string str() {
        const uint32_t n = u32();
        std::string s(n, '\0');
        is_.read(s.data(), n);
        if (!is_) throw IoError("unexpected end of file in string");
        return s;
    }
    Mat mat_f64() {
        const uint32_t rows = u32();
        const uint32_t cols = u32();
        Mat m(rows, cols);
        for (uint32_t j = 0; j < cols; ++j) {
            for (uint32_t i = 0; i < rows; ++i) m(i, j) = f64();
        }
        return m;
    }
    Vec vec_f64() {
        const uint32_t n = u32();
        Vec v(n);
        for (uint32_t i = 0; i < n; ++i) v[i] = f64();
        return v;
    }

private:
    std::ifstream is_;
};

// ---------------------------------------------------------------------------
// Scene sets: magic "GGMM"; header (version, C, D, H, W, scene count, domain);
// per scene raw features as f32 (pixel-major), label-state bytes (kind u8 +
// class u16, 0xffff when unlabeled), true labels as u16.
// ---------------------------------------------------------------------------

inline constexpr uint32_t kSceneFormatVersion = 1;

inline void save_scenes(const std::string& path, const std::vector<Scene>& scenes, int classes) {
    if (scenes.empty()) throw IoError("refusing to write an empty scene set: " + path);
    BinaryWriter w(path);
    const Scene& first = scenes.front();
    w.magic("GGMM");
    w.u32(kSceneFormatVersion);
    w.u32(static_cast<uint32_t>(classes));
    w.u32(static_cast<uint32_t>(first.raw_dim()));
    w.u32(static_cast<uint32_t>(first.height));
    w.u32(static_cast<uint32_t>(first.width));
    w.u32(static_cast<uint32_t>(scenes.size()));
    w.u32(static_cast<uint32_t>(first.domain));
    for (const Scene& s : scenes) {
        if (s.height != first.height || s.width != first.width || s.raw_dim() != first.raw_dim() ||
            s.domain != first.domain) {
            throw IoError("scene set is not homogeneous");
        }
        for (int p = 0; p < s.pixels(); ++p) {
            for (int d = 0; d < s.raw_dim(); ++d) w.f32(static_cast<float>(s.raw(d, p)));
        }
        for (int p = 0; p < s.pixels(); ++p) {
            w.u8(static_cast<uint8_t>(s.labels[p].kind));
            w.u16(s.labels[p].kind == LabelState::Kind::Unlabeled ? 0xffff
                                                                  : static_cast<uint16_t>(s.labels[p].cls));
        }
        for (int p = 0; p < s.pixels(); ++p) w.u16(static_cast<uint16_t>(s.true_labels[p]));
    }
}

struct SceneSet {
    std::vector<Scene> scenes;
    int classes = 0;
};

inline SceneSet load_scenes(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("GGMM");
    const uint32_t version = r.u32();
    if (version != kSceneFormatVersion) throw IoError("unsupported scene format version");
    SceneSet out;
    out.classes = static_cast<int>(r.u32());
    const int dim = static_cast<int>(r.u32());
    const int h = static_cast<int>(r.u32());
    const int w = static_cast<int>(r.u32());
    const int count = static_cast<int>(r.u32());
    const Domain domain = static_cast<Domain>(r.u32());
    out.scenes.reserve(count);
    for (int s = 0; s < count; ++s) {
        Scene scene;
        scene.height = h;
        scene.width = w;
        scene.domain = domain;
        scene.raw.resize(dim, h * w);
        for (int p = 0; p < h * w; ++p) {
            for (int d = 0; d < dim; ++d) scene.raw(d, p) = static_cast<double>(r.f32());
        }
        scene.labels.resize(h * w);
        for (int p = 0; p < h * w; ++p) {
            const auto kind = static_cast<LabelState::Kind>(r.u8());
            const uint16_t cls = r.u16();
            scene.labels[p] = {kind, kind == LabelState::Kind::Unlabeled ? -1 : static_cast<ClassId>(cls)};
        }
        scene.true_labels.resize(h * w);
        for (int p = 0; p < h * w; ++p) scene.true_labels[p] = static_cast<ClassId>(r.u16());
        out.scenes.push_back(std::move(scene));
    }
    return out;
}

// ---------------------------------------------------------------------------
// GMM bank snapshots ("GGMB"): per-class pi/mu/Sigma as f64 plus the FIFO
// queues, for checkpoint/resume.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_queue(BinaryWriter& w, const FifoQueue& q) {
    w.u32(static_cast<uint32_t>(q.capacity()));
    w.u32(static_cast<uint32_t>(q.size()));
    w.u32(static_cast<uint32_t>(q.head()));
    const auto contents = q.contents();
    w.u32(static_cast<uint32_t>(contents.rows()));
    for (Eigen::Index j = 0; j < contents.cols(); ++j) {
        for (Eigen::Index i = 0; i < contents.rows(); ++i) w.f64(contents(i, j));
    }
}

inline FifoQueue read_queue(BinaryReader& r) {
    const int capacity = static_cast<int>(r.u32());
    const int size = static_cast<int>(r.u32());
    const int head = static_cast<int>(r.u32());
    const int dim = static_cast<int>(r.u32());
    Mat data = Mat::Zero(dim, capacity);
    for (int j = 0; j < size; ++j) {
        for (int i = 0; i < dim; ++i) data(i, j) = r.f64();
    }
    FifoQueue q(dim, capacity);
    q.restore(data, size, head);
    return q;
}

} // namespace detail

inline void write_gmm_bank(BinaryWriter& w, const GmmBank& bank) {
    const GmmOptions& o = bank.options();
    w.u32(static_cast<uint32_t>(o.classes));
    w.u32(static_cast<uint32_t>(o.components));
    w.u32(static_cast<uint32_t>(o.dim));
    w.f64(o.var_floor);
    w.u32(static_cast<uint32_t>(o.capacity));
    w.u32(static_cast<uint32_t>(o.push_per_class));
    w.u32(static_cast<uint32_t>(o.sinkhorn_iters));
    w.f64(o.sinkhorn_eps);
    w.f64(o.lambda_ema);
    w.u32(static_cast<uint32_t>(o.starvation_limit));
    w.u32(static_cast<uint32_t>(o.init_min_queue));
    for (int c = 0; c < bank.classes(); ++c) {
        const ClassGmm& g = bank.gmm(c);
        w.u8(bank.initialized(c) ? 1 : 0);
        w.vec_f64(g.weights);
        w.mat_f64(g.means);
        w.mat_f64(g.variances);
        for (int m = 0; m < g.components(); ++m) w.u32(static_cast<uint32_t>(g.starved[m]));
        detail::write_queue(w, bank.queue(c));
    }
}

inline GmmBank read_gmm_bank(BinaryReader& r) {
    GmmOptions o;
    o.classes = static_cast<int>(r.u32());
    o.components = static_cast<int>(r.u32());
    o.dim = static_cast<int>(r.u32());
    o.var_floor = r.f64();
    o.capacity = static_cast<int>(r.u32());
    o.push_per_class = static_cast<int>(r.u32());
    o.sinkhorn_iters = static_cast<int>(r.u32());
    o.sinkhorn_eps = r.f64();
    o.lambda_ema = r.f64();
    o.starvation_limit = static_cast<int>(r.u32());
    o.init_min_queue = static_cast<int>(r.u32());
    GmmBank bank(o);
    for (int c = 0; c < o.classes; ++c) {
        const bool initialized = r.u8() != 0;
        ClassGmm& g = bank.gmm_mutable(c);
        g.weights = r.vec_f64();
        g.means = r.mat_f64();
        g.variances = r.mat_f64();
        g.starved.resize(g.components());
        for (int m = 0; m < g.components(); ++m) g.starved[m] = static_cast<int>(r.u32());
        g.refresh();
        bank.queue_mutable(c) = detail::read_queue(r);
        bank.set_initialized(c, initialized);
    }
    return bank;
}

inline void save_gmm_bank(const std::string& path, const GmmBank& bank) {
    BinaryWriter w(path);
    w.magic("GGMB");
    w.u32(1);
    write_gmm_bank(w, bank);
}

inline GmmBank load_gmm_bank(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("GGMB");
    if (r.u32() != 1) throw IoError("unsupported gmm bank version");
    return read_gmm_bank(r);
}

// ---------------------------------------------------------------------------
// Target state ("GGMT").
// ---------------------------------------------------------------------------

inline void write_target_state(BinaryWriter& w, const TargetState& st) {
    w.u32(static_cast<uint32_t>(st.classes()));
    w.u32(static_cast<uint32_t>(st.dim()));
    w.f64(st.lambda_ema());
    w.u32(static_cast<uint32_t>(st.k_top()));
    w.f64(st.prior_floor());
    w.mat_f64(st.prototypes());
    w.vec_f64(st.delta_target());
    w.vec_f64(st.delta_source());
    for (int c = 0; c < st.classes(); ++c) detail::write_queue(w, st.bank(c));
}

inline TargetState read_target_state(BinaryReader& r) {
    const int classes = static_cast<int>(r.u32());
    const int dim = static_cast<int>(r.u32());
    const double lambda = r.f64();
    const int k_top = static_cast<int>(r.u32());
    const double floor = r.f64();
    Mat prototypes = r.mat_f64();
    Vec dt = r.vec_f64();
    Vec ds = r.vec_f64();
    std::vector<FifoQueue> queues;
    for (int c = 0; c < classes; ++c) queues.push_back(detail::read_queue(r));
    TargetState st(classes, dim, queues.empty() ? 1 : queues[0].capacity(), lambda, k_top, floor);
    st.prototypes_mutable() = prototypes;
    st.delta_target_mutable() = dt;
    st.delta_source_mutable() = ds;
    for (int c = 0; c < classes; ++c) st.bank_mutable(c) = queues[c];
    return st;
}

// ---------------------------------------------------------------------------
// Model and full training checkpoints ("GGMC").
// ---------------------------------------------------------------------------

inline void write_model(BinaryWriter& w, const Model& m) {
    w.mat_f64(m.w_enc);
    w.vec_f64(m.b_enc);
    w.mat_f64(m.w_p1);
    w.vec_f64(m.b_p1);
    w.mat_f64(m.w_p2);
    w.vec_f64(m.b_p2);
    w.mat_f64(m.w_cls);
    w.vec_f64(m.b_cls);
}

inline Model read_model(BinaryReader& r) {
    Model m;
    m.w_enc = r.mat_f64();
    m.b_enc = r.vec_f64();
    m.w_p1 = r.mat_f64();
    m.b_p1 = r.vec_f64();
    m.w_p2 = r.mat_f64();
    m.b_p2 = r.vec_f64();
    m.w_cls = r.mat_f64();
    m.b_cls = r.vec_f64();
    return m;
}

inline void to_json(nlohmann::json& j, const RunConfig& cfg) {
    j = nlohmann::json{{"classes", cfg.classes},
                       {"embed_dim", cfg.embed_dim},
                       {"hidden_dim", cfg.hidden_dim},
                       {"components", cfg.components},
                       {"tau", cfg.tau},
                       {"beta", cfg.beta},
                       {"lambda_cl", cfg.lambda_cl},
                       {"lambda_ema", cfg.lambda_ema},
                       {"lambda_teacher", cfg.lambda_teacher},
                       {"sinkhorn_iters", cfg.sinkhorn_iters},
                       {"sinkhorn_eps", cfg.sinkhorn_eps},
                       {"var_floor", cfg.var_floor},
                       {"starvation_limit", cfg.starvation_limit},
                       {"bank_capacity", cfg.bank_capacity},
                       {"bank_push_per_class", cfg.bank_push_per_class},
                       {"k_top", cfg.k_top},
                       {"prior_floor", cfg.prior_floor},
                       {"learning_rate", cfg.learning_rate},
                       {"sgd_momentum", cfg.sgd_momentum},
                       {"iterations", cfg.iterations},
                       {"warmup_iterations", cfg.warmup_iterations},
                       {"batch_labeled", cfg.batch_labeled},
                       {"enable_selftrain", cfg.enable_selftrain},
                       {"use_alpha_selftrain", cfg.use_alpha_selftrain},
                       {"soft_scene_sigma", cfg.soft_scene_sigma},
                       {"metrics_interval", cfg.metrics_interval},
                       {"miou_eval_scenes", cfg.miou_eval_scenes},
                       {"seed", cfg.seed}};
}

inline void from_json(const nlohmann::json& j, RunConfig& cfg) {
    j.at("classes").get_to(cfg.classes);
    j.at("embed_dim").get_to(cfg.embed_dim);
    j.at("hidden_dim").get_to(cfg.hidden_dim);
    j.at("components").get_to(cfg.components);
    j.at("tau").get_to(cfg.tau);
    j.at("beta").get_to(cfg.beta);
    j.at("lambda_cl").get_to(cfg.lambda_cl);
    j.at("lambda_ema").get_to(cfg.lambda_ema);
    j.at("lambda_teacher").get_to(cfg.lambda_teacher);
    j.at("sinkhorn_iters").get_to(cfg.sinkhorn_iters);
    j.at("sinkhorn_eps").get_to(cfg.sinkhorn_eps);
    j.at("var_floor").get_to(cfg.var_floor);
    j.at("starvation_limit").get_to(cfg.starvation_limit);
    j.at("bank_capacity").get_to(cfg.bank_capacity);
    j.at("bank_push_per_class").get_to(cfg.bank_push_per_class);
    j.at("k_top").get_to(cfg.k_top);
    j.at("prior_floor").get_to(cfg.prior_floor);
    j.at("learning_rate").get_to(cfg.learning_rate);
    j.at("sgd_momentum").get_to(cfg.sgd_momentum);
    j.at("iterations").get_to(cfg.iterations);
    j.at("warmup_iterations").get_to(cfg.warmup_iterations);
    j.at("batch_labeled").get_to(cfg.batch_labeled);
    j.at("enable_selftrain").get_to(cfg.enable_selftrain);
    j.at("use_alpha_selftrain").get_to(cfg.use_alpha_selftrain);
    j.at("soft_scene_sigma").get_to(cfg.soft_scene_sigma);
    j.at("metrics_interval").get_to(cfg.metrics_interval);
    j.at("miou_eval_scenes").get_to(cfg.miou_eval_scenes);
    j.at("seed").get_to(cfg.seed);
}

struct Checkpoint {
    uint64_t iteration = 0;
    RunConfig config;
    std::string rng_state;
    Model student;
    Model teacher;
    GmmBank bank;
    TargetState target_state;
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    BinaryWriter w(path);
    w.magic("GGMC");
    w.u32(1);
    w.u64(ck.iteration);
    nlohmann::json j = ck.config;
    w.str(j.dump());
    w.str(ck.rng_state);
    write_model(w, ck.student);
    write_model(w, ck.teacher);
    write_gmm_bank(w, ck.bank);
    write_target_state(w, ck.target_state);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("GGMC");
    if (r.u32() != 1) throw IoError("unsupported checkpoint version");
    Checkpoint ck;
    ck.iteration = r.u64();
    ck.config = nlohmann::json::parse(r.str()).get<RunConfig>();
    ck.rng_state = r.str();
    ck.student = read_model(r);
    ck.teacher = read_model(r);
    ck.bank = read_gmm_bank(r);
    ck.target_state = read_target_state(r);
    return ck;
}

} // namespace gengmm
