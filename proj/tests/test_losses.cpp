#include "gengmm/losses.hpp"

#include "oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace gengmm;

namespace {

PrototypeSelection random_selection(int classes, int dim, Rng& rng, double alpha = 1.0) {
    PrototypeSelection sel;
    sel.positive = {0, 0, oracle::random_unit(dim, rng)};
    for (int c = 1; c < classes; ++c) sel.negatives.push_back({c, 0, oracle::random_unit(dim, rng)});
    sel.alpha = alpha;
    return sel;
}

// A small random training step for end-to-end gradient checks. Keeps
// pre-activations away from ReLU kinks so central differences are valid.
struct TotalLossInstance {
    Model model;
    LossInputs inputs;
    GmmBank bank;
};

TotalLossInstance make_instance(Rng& rng) {
    const int raw_dim = 6;
    const int hidden = 12;
    const int embed = 8;
    const int classes = 3;
    TotalLossInstance inst;
    inst.model = Model::init(raw_dim, hidden, embed, classes, rng);
    inst.bank = oracle::random_bank(classes, 2, embed, rng);

    const int n = 24;
    inst.inputs.init(n, raw_dim);
    inst.inputs.bank = &inst.bank;
    for (int i = 0; i < n; ++i) {
        inst.inputs.raw.col(i) = rng.normal_vec(raw_dim);
        const int role = rng.uniform_int(3);
        if (role == 0) {
            inst.inputs.ce_label[i] = rng.uniform_int(classes);
        } else if (role == 1) {
            inst.inputs.st_label[i] = rng.uniform_int(classes);
            inst.inputs.st_conf[i] = rng.uniform();
            inst.inputs.scene_key[i] = rng.uniform_int(2);
            if (rng.uniform() < 0.5) inst.inputs.st_alpha[i] = rng.uniform();
        }
        if (rng.uniform() < 0.6) {
            inst.inputs.cl_pixel.push_back(i);
        }
    }
    if (!inst.inputs.cl_pixel.empty()) {
        Mat F(embed, inst.inputs.cl_pixel.size());
        const ForwardCache cache = forward(inst.model, inst.inputs.raw);
        for (size_t k = 0; k < inst.inputs.cl_pixel.size(); ++k) F.col(k) = cache.f.col(inst.inputs.cl_pixel[k]);
        inst.inputs.cl_sel = select_batch(inst.bank, F, SelectMode::UnlabeledSource);
    }
    // Guarantee at least one of each term.
    inst.inputs.ce_label[0] = 0;
    inst.inputs.st_label[1] = 1;
    inst.inputs.st_conf[1] = 0.9;
    inst.inputs.scene_key[1] = 0;
    return inst;
}

bool near_relu_kink(const Model& m, const Mat& raw, double margin = 1e-3) {
    const ForwardCache c = forward(m, raw);
    return c.pre_enc.cwiseAbs().minCoeff() < margin || c.pre_p1.cwiseAbs().minCoeff() < margin;
}

} // namespace

TEST_CASE("contrastive loss: saturated positive goes to zero") {
    Rng rng(3);
    PrototypeSelection sel = random_selection(4, 8, rng);
    // Make the positive dot product huge relative to the negatives.
    Vec f = sel.positive.mean; // unit vector aligned with q+
    sel.positive.mean *= 50.0;
    const ContrastiveResult r = contrastive_loss(f, sel, 0.1);
    REQUIRE(r.value >= 0.0);
    REQUIRE(r.value < 1e-9);
}

TEST_CASE("contrastive loss: orthogonal embedding gives alpha * log C") {
    const int classes = 5;
    const int dim = 8;
    PrototypeSelection sel;
    sel.positive = {0, 0, Vec::Zero(dim)};
    sel.positive.mean[0] = 1.0;
    for (int c = 1; c < classes; ++c) {
        PrototypeRef ref;
        ref.cls = c;
        ref.component = 0;
        ref.mean = Vec::Zero(dim);
        ref.mean[c % dim] = 1.0;
        sel.negatives.push_back(ref);
    }
    sel.alpha = 0.37;
    Vec f = Vec::Zero(dim);
    f[7] = 1.0; // orthogonal to every prototype
    sel.positive.mean[7] = 0.0;
    const ContrastiveResult r = contrastive_loss(f, sel, 0.25);
    REQUIRE(r.value == Catch::Approx(0.37 * std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("contrastive loss gradient matches finite differences") {
    Rng rng(5);
    int checked = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const double alpha = 0.1 + rng.uniform();
        PrototypeSelection sel = random_selection(4, 8, rng, alpha);
        const Vec f = rng.normal_vec(8);
        const double tau = rng.uniform(0.05, 0.5);
        const ContrastiveResult r = contrastive_loss(f, sel, tau);
        const Vec fd = oracle::finite_difference(
            [&](const Vec& x) { return contrastive_loss(x, sel, tau).value; }, f);
        REQUIRE(oracle::max_rel_error(r.grad_f, fd, 1e-7) < 1e-4);
        checked++;
    }
    REQUIRE(checked == 100);
}

TEST_CASE("contrastive loss is invariant to a uniform logit shift") {
    Rng rng(7);
    PrototypeSelection sel = random_selection(4, 8, rng);
    Vec f = oracle::random_unit(8, rng);
    const double tau = 0.2;
    const double base = contrastive_loss(f, sel, tau).value;
    // Adding t*f to every prototype shifts every logit by t/tau (f is unit).
    const double t = 0.83;
    PrototypeSelection shifted = sel;
    shifted.positive.mean += t * f;
    for (auto& n : shifted.negatives) n.mean += t * f;
    const double moved = contrastive_loss(f, shifted, tau).value;
    REQUIRE(oracle::rel_error(base, moved, 1e-12) < 1e-9);
}

TEST_CASE("scaling alpha by a power of two scales value and gradient exactly") {
    Rng rng(9);
    PrototypeSelection sel = random_selection(3, 6, rng, 0.4375); // exact binary fraction
    const Vec f = rng.normal_vec(6);
    const ContrastiveResult a = contrastive_loss(f, sel, 0.125);
    sel.alpha *= 2.0;
    const ContrastiveResult b = contrastive_loss(f, sel, 0.125);
    REQUIRE(b.value == 2.0 * a.value);
    for (int d = 0; d < 6; ++d) REQUIRE(b.grad_f[d] == 2.0 * a.grad_f[d]);
}

TEST_CASE("ce_labeled: confident correct logits give ~zero loss; uniform gives log C") {
    Mat logits(4, 2);
    logits.setZero();
    logits(2, 0) = 40.0;
    logits(1, 1) = 40.0;
    const CeResult confident = ce_labeled(logits, {2, 1});
    REQUIRE(confident.value < 1e-12);

    Mat uniform = Mat::Zero(4, 3);
    const CeResult u = ce_labeled(uniform, {0, 1, 2});
    REQUIRE(u.value == Catch::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("ce_labeled: empty batch gives zero value and gradient") {
    Mat logits(3, 0);
    const CeResult r = ce_labeled(logits, {});
    REQUIRE(r.value == 0.0);
    REQUIRE(r.grad_logits.cols() == 0);
}

TEST_CASE("ce_labeled gradient matches finite differences") {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const int classes = 3 + rng.uniform_int(3);
        const int n = 1 + rng.uniform_int(6);
        Mat logits(classes, n);
        std::vector<ClassId> labels(n);
        for (int i = 0; i < n; ++i) {
            logits.col(i) = rng.normal_vec(classes);
            labels[i] = rng.uniform_int(classes);
        }
        const CeResult r = ce_labeled(logits, labels);
        Vec flat = Eigen::Map<const Vec>(logits.data(), logits.size());
        const Vec fd = oracle::finite_difference(
            [&](const Vec& x) {
                Mat l = Eigen::Map<const Mat>(x.data(), classes, n);
                return ce_labeled(l, labels).value;
            },
            flat);
        const Vec an = Eigen::Map<const Vec>(r.grad_logits.data(), r.grad_logits.size());
        REQUIRE(oracle::max_rel_error(an, fd, 1e-7) < 1e-4);
    }
}

TEST_CASE("ce_selftrain: w counts confidences strictly above beta per scene") {
    Mat logits = Mat::Zero(3, 4);
    const std::vector<ClassId> pseudo = {0, 1, 2, 0};
    const std::vector<int> scenes = {0, 0, 0, 0};

    const SelfTrainResult all = ce_selftrain(logits, pseudo, {0.9, 0.9, 0.9, 0.9}, scenes, 0.5);
    for (double w : all.weights) REQUIRE(w == 1.0);

    const SelfTrainResult half = ce_selftrain(logits, pseudo, {0.9, 0.9, 0.1, 0.1}, scenes, 0.5);
    for (double w : half.weights) REQUIRE(w == 0.5);

    // beta = 1: nothing exceeds confidence 1.
    const SelfTrainResult none = ce_selftrain(logits, pseudo, {1.0, 1.0, 1.0, 1.0}, scenes, 1.0);
    REQUIRE(none.value == 0.0);
    REQUIRE(none.grad_logits.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("ce_selftrain: w is per scene, not global") {
    Mat logits = Mat::Zero(2, 4);
    const std::vector<ClassId> pseudo = {0, 0, 1, 1};
    const std::vector<int> scenes = {0, 0, 1, 1};
    const SelfTrainResult r = ce_selftrain(logits, pseudo, {0.9, 0.9, 0.1, 0.9}, scenes, 0.5);
    REQUIRE(r.weights[0] == 1.0);
    REQUIRE(r.weights[1] == 1.0);
    REQUIRE(r.weights[2] == 0.5);
    REQUIRE(r.weights[3] == 0.5);
}

TEST_CASE("ce_selftrain: zero alpha override annihilates the loss") {
    Rng rng(13);
    Mat logits(3, 5);
    std::vector<ClassId> pseudo(5);
    for (int i = 0; i < 5; ++i) {
        logits.col(i) = rng.normal_vec(3);
        pseudo[i] = rng.uniform_int(3);
    }
    const std::vector<double> zero(5, 0.0);
    const SelfTrainResult r =
        ce_selftrain(logits, pseudo, {0.9, 0.9, 0.9, 0.9, 0.9}, {0, 0, 0, 0, 0}, 0.5, &zero);
    REQUIRE(r.value == 0.0);
    REQUIRE(r.grad_logits.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("ce_selftrain gradient matches finite differences") {
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        const int classes = 3;
        const int n = 2 + rng.uniform_int(5);
        Mat logits(classes, n);
        std::vector<ClassId> pseudo(n);
        std::vector<double> conf(n);
        std::vector<int> scenes(n);
        std::vector<double> alpha(n);
        for (int i = 0; i < n; ++i) {
            logits.col(i) = rng.normal_vec(classes);
            pseudo[i] = rng.uniform_int(classes);
            conf[i] = rng.uniform();
            scenes[i] = rng.uniform_int(2);
            alpha[i] = rng.uniform();
        }
        const bool with_alpha = trial % 2 == 0;
        const SelfTrainResult r = ce_selftrain(logits, pseudo, conf, scenes, 0.6, with_alpha ? &alpha : nullptr);
        Vec flat = Eigen::Map<const Vec>(logits.data(), logits.size());
        const Vec fd = oracle::finite_difference(
            [&](const Vec& x) {
                Mat l = Eigen::Map<const Mat>(x.data(), classes, n);
                return ce_selftrain(l, pseudo, conf, scenes, 0.6, with_alpha ? &alpha : nullptr).value;
            },
            flat);
        const Vec an = Eigen::Map<const Vec>(r.grad_logits.data(), r.grad_logits.size());
        REQUIRE(oracle::max_rel_error(an, fd, 1e-7) < 1e-4);
    }
}

TEST_CASE("total_loss: lambda_cl = 0 reduces to the self-training objective") {
    Rng rng(19);
    TotalLossInstance inst = make_instance(rng);
    RunConfig cfg;
    cfg.classes = 3;
    cfg.tau = 0.1;
    cfg.beta = 0.6;
    cfg.lambda_cl = 0.0;
    const LossReport r = total_loss(inst.model, inst.inputs, cfg);
    REQUIRE(r.total == r.ce_labeled + r.ce_selftrain);
    // Contrastive pixels are still reported but carry zero weight in the total.
    REQUIRE(r.contrastive >= 0.0);
}

TEST_CASE("total_loss: no self-train pixels means L_ce^u = 0") {
    Rng rng(21);
    TotalLossInstance inst = make_instance(rng);
    for (int i = 0; i < inst.inputs.size(); ++i) inst.inputs.st_label[i] = -1;
    RunConfig cfg;
    cfg.classes = 3;
    const LossReport r = total_loss(inst.model, inst.inputs, cfg);
    REQUIRE(r.ce_selftrain == 0.0);
    REQUIRE(r.selftrain_count == 0);
}

TEST_CASE("total_loss end-to-end gradients match finite differences") {
    Rng rng(23);
    RunConfig cfg;
    cfg.classes = 3;
    cfg.tau = 0.15;
    cfg.beta = 0.6;
    cfg.lambda_cl = 0.7;

    int instances = 0;
    while (instances < 20) {
        TotalLossInstance inst = make_instance(rng);
        if (near_relu_kink(inst.model, inst.inputs.raw)) continue; // FD undefined at kinks
        instances++;

        const LossReport r = total_loss(inst.model, inst.inputs, cfg);
        const Vec analytic = r.grads.flatten();
        const Vec theta = inst.model.flatten();

        // Sample parameter coordinates; full FD over every weight is wasteful.
        Rng coord_rng = rng.derive(instances);
        for (int probe = 0; probe < 60; ++probe) {
            const int k = coord_rng.uniform_int(static_cast<int>(theta.size()));
            const double h = 1e-5;
            Model m = inst.model;
            Vec t = theta;
            t[k] = theta[k] + h;
            m.unflatten(t);
            const double up = total_loss(m, inst.inputs, cfg).total;
            t[k] = theta[k] - h;
            m.unflatten(t);
            const double down = total_loss(m, inst.inputs, cfg).total;
            const double fd = (up - down) / (2.0 * h);
            REQUIRE(oracle::rel_error(analytic[k], fd, 1e-6) < 1e-4);
        }
    }
}

TEST_CASE("total_loss with a reused forward cache matches recomputation") {
    Rng rng(29);
    TotalLossInstance inst = make_instance(rng);
    RunConfig cfg;
    cfg.classes = 3;
    const ForwardCache cache = forward(inst.model, inst.inputs.raw);
    const LossReport a = total_loss(inst.model, inst.inputs, cfg, &cache);
    const LossReport b = total_loss(inst.model, inst.inputs, cfg);
    REQUIRE(a.total == b.total);
    REQUIRE((a.grads.flatten() - b.grads.flatten()).cwiseAbs().maxCoeff() == 0.0);
}
