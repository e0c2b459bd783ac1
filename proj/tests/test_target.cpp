#include "gengmm/target.hpp"

#include "oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace gengmm;

namespace {

TargetState simple_state(int classes, int dim, int capacity = 64, double lambda = 0.9, int k_top = 3) {
    return TargetState(classes, dim, capacity, lambda, k_top, 1e-6);
}

} // namespace

TEST_CASE("update_target_bank: a singleton class member is its own mean and gets pushed") {
    TargetState st = simple_state(2, 3);
    Rng rng(3);
    Mat emb(3, 4);
    for (int i = 0; i < 4; ++i) emb.col(i) = oracle::random_unit(3, rng);
    const std::vector<ClassId> pseudo = {0, 1, 1, 1};
    update_target_bank(st, emb, pseudo);
    REQUIRE(st.bank(0).size() == 1);
    REQUIRE((st.bank(0).contents().col(0) - emb.col(0)).norm() == 0.0);
    REQUIRE(st.bank(1).size() == 3);
}

TEST_CASE("update_target_bank: full momentum keeps prototypes") {
    TargetState st = simple_state(2, 3, 64, 1.0 - 1e-12, 3);
    const Mat before = st.prototypes();
    Rng rng(5);
    Mat emb(3, 6);
    for (int i = 0; i < 6; ++i) emb.col(i) = oracle::random_unit(3, rng);
    std::vector<ClassId> pseudo(6, 0);
    // lambda == 1 exactly: prototypes must not move.
    TargetState frozen(2, 3, 64, 1.0, 3, 1e-6);
    const Mat frozen_before = frozen.prototypes();
    update_target_bank(frozen, emb, pseudo);
    REQUIRE((frozen.prototypes() - frozen_before).cwiseAbs().maxCoeff() == 0.0);
    (void)before;
    (void)st;
}

TEST_CASE("update_target_bank: 20-pixel batch matches the brute-force top-k ranking") {
    const int k_top = 4;
    TargetState st = simple_state(2, 5, 64, 0.9, k_top);
    Rng rng(7);
    const int n = 20;
    Mat emb(5, n);
    std::vector<ClassId> pseudo(n);
    for (int i = 0; i < n; ++i) {
        emb.col(i) = oracle::random_unit(5, rng);
        pseudo[i] = rng.uniform_int(2);
    }
    update_target_bank(st, emb, pseudo);

    for (int c = 0; c < 2; ++c) {
        std::vector<int> members;
        for (int i = 0; i < n; ++i) {
            if (pseudo[i] == c) members.push_back(i);
        }
        Vec mean = Vec::Zero(5);
        for (int i : members) mean += emb.col(i);
        mean /= static_cast<double>(members.size());
        std::vector<std::pair<double, int>> ranked;
        for (int i : members) ranked.emplace_back(emb.col(i).dot(mean) / mean.norm(), i);
        std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        const int take = std::min<int>(k_top, static_cast<int>(ranked.size()));
        REQUIRE(st.bank(c).size() == take);
        for (int r = 0; r < take; ++r) {
            REQUIRE((st.bank(c).contents().col(r) - emb.col(ranked[r].second)).norm() == 0.0);
        }
        // Prototype stays unit norm.
        REQUIRE(std::abs(st.prototypes().col(c).norm() - 1.0) < 1e-12);
    }
}

TEST_CASE("shift-corrected posterior: equal priors reproduce the source posterior bitwise") {
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        GmmBank bank = oracle::random_bank(4, 2, 5, rng);
        TargetState st = simple_state(4, 5);
        const Vec f = rng.normal_vec(5);
        const Vec got = shift_corrected_posterior(bank, st, f);
        Vec want = source_class_posterior(bank, f);
        want /= want.sum();
        for (int c = 0; c < 4; ++c) REQUIRE(got[c] == want[c]); // bitwise
    }
}

TEST_CASE("shift-corrected posterior: the derived scalar example hits 6/13, 7/13") {
    // Engineer p_s = [0.3, 0.7]: with M=1 and identity covariances the class
    // log-densities differ by -0.5 (||f-mu1||^2 - ||f-mu2||^2).
    GmmOptions opts;
    opts.classes = 2;
    opts.components = 1;
    opts.dim = 2;
    GmmBank bank(opts);
    const double b = 0.1;
    const double a = b + 2.0 * std::log(7.0 / 3.0);
    bank.gmm_mutable(0).means.col(0) << std::sqrt(a), 0.0;
    bank.gmm_mutable(1).means.col(0) << std::sqrt(b), 0.0;
    for (int c = 0; c < 2; ++c) {
        bank.gmm_mutable(c).variances.setConstant(1.0);
        bank.gmm_mutable(c).refresh();
        bank.set_initialized(c, true);
    }
    TargetState st = simple_state(2, 2);
    const Vec ps = source_class_posterior(bank, Vec(Vec::Zero(2)));
    REQUIRE(ps[0] == Catch::Approx(0.3).margin(1e-14));
    REQUIRE(ps[1] == Catch::Approx(0.7).margin(1e-14));

    st.delta_target_mutable() << 2.0 / 3.0, 1.0 / 3.0; // ratio proportional to [2, 1]
    st.delta_source_mutable() << 0.5, 0.5;
    const Vec got = shift_corrected_posterior(bank, st, Vec(Vec::Zero(2)));
    REQUIRE(std::abs(got[0] - 6.0 / 13.0) < 1e-12);
    REQUIRE(std::abs(got[1] - 7.0 / 13.0) < 1e-12);
    REQUIRE(got.sum() == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("shift-corrected argmax is invariant to global rescaling of the ratio") {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        GmmBank bank = oracle::random_bank(3, 2, 4, rng);
        TargetState st = simple_state(3, 4);
        Vec dt(3);
        for (int c = 0; c < 3; ++c) dt[c] = 0.1 + rng.uniform();
        dt /= dt.sum();
        st.delta_target_mutable() = dt;
        const Vec f = rng.normal_vec(4);
        const Vec base = shift_corrected_posterior(bank, st, f);
        int arg_base = 0;
        for (int c = 1; c < 3; ++c) {
            if (base[c] > base[arg_base]) arg_base = c;
        }
        // Rescale delta_source uniformly (equivalently the ratio by 1/s).
        st.delta_source_mutable() *= 0.25;
        const Vec scaled = shift_corrected_posterior(bank, st, f);
        int arg_scaled = 0;
        for (int c = 1; c < 3; ++c) {
            if (scaled[c] > scaled[arg_scaled]) arg_scaled = c;
        }
        REQUIRE(arg_base == arg_scaled);
        REQUIRE(scaled.sum() == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("pseudo_label_target: degenerate single class") {
    Rng rng(13);
    GmmBank bank = oracle::random_bank(1, 2, 3, rng);
    TargetState st = simple_state(1, 3);
    const PseudoLabel pl = pseudo_label_target(bank, st, Vec(oracle::random_unit(3, rng)));
    REQUIRE(pl.cls == 0);
    REQUIRE(pl.score == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("pseudo_label_target: cosine term breaks symmetric posterior ties") {
    // Two identical class GMMs: posterior is symmetric, so the prototype
    // similarity must decide.
    GmmOptions opts;
    opts.classes = 2;
    opts.components = 1;
    opts.dim = 3;
    GmmBank bank(opts);
    for (int c = 0; c < 2; ++c) {
        bank.gmm_mutable(c).means.col(0) << 0.0, 0.0, 1.0;
        bank.gmm_mutable(c).variances.setConstant(0.5);
        bank.gmm_mutable(c).refresh();
        bank.set_initialized(c, true);
    }
    TargetState st = simple_state(2, 3);
    Vec f(3);
    f << 1.0, 0.0, 0.0;
    st.prototypes_mutable().col(1) = f; // class 1's prototype equals f
    st.prototypes_mutable().col(0) << 0.0, 1.0, 0.0;
    const PseudoLabel pl = pseudo_label_target(bank, st, f);
    REQUIRE(pl.cls == 1);
}

TEST_CASE("pseudo_label_target matches brute-force Eq. 8 scoring") {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        GmmBank bank = oracle::random_bank(3, 2, 4, rng);
        TargetState st = simple_state(3, 4);
        for (int c = 0; c < 3; ++c) st.prototypes_mutable().col(c) = oracle::random_unit(4, rng);
        Vec dt(3), ds(3);
        for (int c = 0; c < 3; ++c) {
            dt[c] = 0.1 + rng.uniform();
            ds[c] = 0.1 + rng.uniform();
        }
        st.delta_target_mutable() = dt / dt.sum();
        st.delta_source_mutable() = ds / ds.sum();
        const Vec f = oracle::random_unit(4, rng);

        // Brute force: naive posterior, ratio, renormalize, cosine softmax.
        const Vec priors = Vec::Constant(3, 1.0 / 3.0);
        const Mat joint = oracle::joint_posterior(bank, f, priors);
        Vec ps = joint.rowwise().sum();
        Vec shifted = ps.array() * (st.delta_target().array() / st.delta_source().array());
        shifted /= shifted.sum();
        Vec cos(3);
        for (int c = 0; c < 3; ++c) cos[c] = st.prototypes().col(c).dot(f);
        Vec soft = (cos.array() - cos.maxCoeff()).exp();
        soft /= soft.sum();
        Vec score = shifted.array() * soft.array();
        int want = 0;
        for (int c = 1; c < 3; ++c) {
            if (score[c] > score[want]) want = c;
        }

        const PseudoLabel pl = pseudo_label_target(bank, st, f);
        REQUIRE(pl.cls == want);
    }
}

TEST_CASE("pseudo_label_target degrades to the posterior argmax when prototypes are equal") {
    Rng rng(19);
    for (int trial = 0; trial < 100; ++trial) {
        GmmBank bank = oracle::random_bank(4, 2, 4, rng);
        TargetState st = simple_state(4, 4); // default prototypes are all equal
        const Vec f = oracle::random_unit(4, rng);
        const Vec post = shift_corrected_posterior(bank, st, f);
        int want = 0;
        for (int c = 1; c < 4; ++c) {
            if (post[c] > post[want]) want = c;
        }
        REQUIRE(pseudo_label_target(bank, st, f).cls == want);
    }
}

TEST_CASE("select_target_prototypes: M=1 reduces to class means; random matches oracle") {
    Rng rng(23);
    GmmBank single = oracle::random_bank(3, 1, 4, rng);
    const Vec f = oracle::random_unit(4, rng);
    const PrototypeSelection sel = select_target_prototypes(single, f, 1);
    REQUIRE(sel.positive.mean == single.gmm(1).means.col(0));
    REQUIRE(sel.alpha == 1.0);

    for (int trial = 0; trial < 100; ++trial) {
        GmmBank bank = oracle::random_bank(4, 3, 4, rng);
        const Vec g = rng.normal_vec(4);
        const ClassId y = rng.uniform_int(4);
        const PrototypeSelection s = select_target_prototypes(bank, g, y);
        REQUIRE(s.positive.cls == y);
        REQUIRE(s.positive.component == oracle::nearest_component(bank.gmm(y), g));
        for (const auto& n : s.negatives) REQUIRE(n.component == oracle::nearest_component(bank.gmm(n.cls), g));
    }
}

TEST_CASE("fit_scene_gmm: zero spread floors sigma; two-point mean") {
    const double floor = 1e-4;
    Mat feats(3, 2);
    feats.col(0) << 1.0, 0.0, 0.0;
    feats.col(1) << 1.0, 0.0, 0.0;
    const std::vector<ClassId> weak = {0, -1};
    const std::vector<ClassId> pseudo = {0, 0};
    const SceneGmm sg = fit_scene_gmm(feats, weak, pseudo, 2, floor);
    REQUIRE(sg.has(0));
    REQUIRE(!sg.has(1));
    REQUIRE((sg.means.col(0) - feats.col(0)).norm() == 0.0);
    REQUIRE(sg.sigmas[0] == floor);

    Mat two(3, 2);
    two.col(0) << 1.0, 0.0, 0.0;
    two.col(1) << 0.0, 1.0, 0.0;
    const std::vector<ClassId> weak2 = {0, 0};
    const SceneGmm sg2 = fit_scene_gmm(two, weak2, pseudo, 2, floor);
    REQUIRE((sg2.means.col(0) - Vec(0.5 * (two.col(0) + two.col(1)))).norm() < 1e-15);
}

TEST_CASE("fit_scene_gmm: planted three-class scene matches the two-pass oracle") {
    Rng rng(29);
    const int n = 60;
    Mat feats(4, n);
    std::vector<ClassId> weak(n, -1);
    std::vector<ClassId> pseudo(n);
    for (int i = 0; i < n; ++i) {
        feats.col(i) = rng.normal_vec(4);
        pseudo[i] = rng.uniform_int(3);
        if (rng.uniform() < 0.4) weak[i] = pseudo[i];
    }
    // Ensure each class has at least one weak pixel.
    weak[0] = 0;
    pseudo[0] = 0;
    weak[1] = 1;
    pseudo[1] = 1;
    weak[2] = 2;
    pseudo[2] = 2;
    const SceneGmm sg = fit_scene_gmm(feats, weak, pseudo, 3, 1e-4);
    for (int k = 0; k < 3; ++k) {
        Vec mean = Vec::Zero(4);
        int cnt = 0;
        for (int i = 0; i < n; ++i) {
            if (weak[i] == k) {
                mean += feats.col(i);
                cnt++;
            }
        }
        mean /= cnt;
        REQUIRE((sg.means.col(k) - mean).norm() < 1e-12);
        double acc = 0.0;
        int nk = 0;
        for (int i = 0; i < n; ++i) {
            if (pseudo[i] == k) {
                acc += (feats.col(i) - mean).squaredNorm();
                nk++;
            }
        }
        const double want = std::max(std::sqrt(acc / nk), 1e-4);
        REQUIRE(sg.sigmas[k] == Catch::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("fit_scene_gmm: class with weak labels but no pseudo pixels gets the floor sigma") {
    Mat feats(2, 2);
    feats.col(0) << 1.0, 0.0;
    feats.col(1) << 0.0, 1.0;
    const std::vector<ClassId> weak = {0, -1};
    const std::vector<ClassId> pseudo = {1, 1}; // nothing pseudo-labeled class 0
    const SceneGmm sg = fit_scene_gmm(feats, weak, pseudo, 2, 1e-4);
    REQUIRE(sg.sigmas[0] == 1e-4);
}

TEST_CASE("scene_alpha: exact mean gives 1; d^2 = 2 sigma gives exp(-1); fallback matches Eq. 7") {
    Rng rng(31);
    GmmBank bank = oracle::random_bank(2, 2, 3, rng);
    SceneGmm sg;
    sg.means = Mat::Zero(3, 2);
    sg.sigmas = Vec::Constant(2, 0.5);
    sg.present = {true, false};
    sg.means.col(0) << 1.0, 0.0, 0.0;

    REQUIRE(scene_alpha(sg, bank, Vec(sg.means.col(0)), 0) == 1.0);

    Vec f = sg.means.col(0);
    f[1] += std::sqrt(2.0 * 0.5);
    REQUIRE(scene_alpha(sg, bank, f, 0) == Catch::Approx(std::exp(-1.0)).epsilon(1e-12));

    // Class 1 absent from the scene: falls back to the source-GMM weight.
    const Vec g = oracle::random_unit(3, rng);
    const int m_plus = nearest_component(bank.gmm(1), g);
    REQUIRE(scene_alpha(sg, bank, g, 1) == component_alpha(bank.gmm(1), m_plus, g));
}

TEST_CASE("update_priors: EMA fixed point and full-momentum behavior") {
    TargetState st = simple_state(3, 4);
    const std::vector<ClassId> hist = {0, 0, 1, 2}; // h = [0.5, 0.25, 0.25]
    for (int step = 0; step < 400; ++step) update_priors(st, hist, {});
    REQUIRE(st.delta_source()[0] == Catch::Approx(0.5).margin(1e-9));
    REQUIRE(st.delta_source()[1] == Catch::Approx(0.25).margin(1e-9));
    REQUIRE(st.delta_source().sum() == Catch::Approx(1.0).margin(1e-12));
    // Empty target side stayed untouched.
    REQUIRE(st.delta_target()[0] == Catch::Approx(1.0 / 3.0).margin(1e-15));

    TargetState frozen(3, 4, 16, 1.0, 3, 1e-6);
    const Vec before = frozen.delta_source();
    // lambda = 1: histograms are ignored.
    update_priors(frozen, hist, hist);
    REQUIRE((frozen.delta_source() - before).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("update_priors: alternating histograms match the unrolled recurrence") {
    const double lambda = 0.9;
    TargetState st(2, 3, 16, lambda, 3, 1e-6);
    const std::vector<ClassId> hist_a = {0, 0, 0, 1}; // [0.75, 0.25]
    const std::vector<ClassId> hist_b = {0, 1, 1, 1}; // [0.25, 0.75]
    Vec expect = Vec::Constant(2, 0.5);
    for (int step = 0; step < 20; ++step) {
        const bool use_a = step % 2 == 0;
        update_priors(st, use_a ? hist_a : hist_b, {});
        Vec h(2);
        h << (use_a ? 0.75 : 0.25), (use_a ? 0.25 : 0.75);
        expect = lambda * expect + (1.0 - lambda) * h;
        expect /= expect.sum();
        REQUIRE(oracle::max_rel_error(st.delta_source(), expect) < 1e-12);
    }
}

TEST_CASE("priors stay floored simplices") {
    TargetState st(3, 4, 16, 0.5, 3, 1e-6);
    const std::vector<ClassId> skew = {0, 0, 0, 0, 0, 0, 0, 0};
    for (int step = 0; step < 2000; ++step) update_priors(st, skew, skew);
    REQUIRE(st.delta_source().minCoeff() >= 1e-6);
    REQUIRE(st.delta_source().sum() == Catch::Approx(1.0).margin(1e-9));
    REQUIRE(st.delta_target().minCoeff() >= 1e-6);
}

TEST_CASE("batched pseudo-labels agree with the per-pixel op") {
    Rng rng(37);
    GmmBank bank = oracle::random_bank(3, 2, 5, rng);
    TargetState st = simple_state(3, 5);
    for (int c = 0; c < 3; ++c) st.prototypes_mutable().col(c) = oracle::random_unit(5, rng);
    const int n = 30;
    Mat F(5, n);
    for (int i = 0; i < n; ++i) F.col(i) = oracle::random_unit(5, rng);
    const PseudoLabelBatch batch = pseudo_label_batch(bank, st, F);
    for (int i = 0; i < n; ++i) {
        const PseudoLabel single = pseudo_label_target(bank, st, Vec(F.col(i)));
        REQUIRE(batch.labels[i] == single.cls);
        REQUIRE(batch.soft_scores.col(i).sum() == Catch::Approx(1.0).margin(1e-12));
    }
}
