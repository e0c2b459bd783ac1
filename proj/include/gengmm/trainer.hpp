#pragma once

#include "gengmm/losses.hpp"
#include "gengmm/synth.hpp"
#include "gengmm/target.hpp"

#include <cstdio>
#include <string>
#include <vector>

namespace gengmm {

// Per-class pixel index over the labeled source scenes, for class-balanced
// sampling.
struct LabeledPixelPool {
    std::vector<std::vector<std::pair<int, int>>> by_class; // (scene, pixel)
    std::vector<ClassId> present;

    static LabeledPixelPool build(const std::vector<Scene>& scenes, int classes) {
        LabeledPixelPool pool;
        pool.by_class.resize(classes);
        for (int s = 0; s < static_cast<int>(scenes.size()); ++s) {
            const Scene& scene = scenes[s];
            for (int p = 0; p < scene.pixels(); ++p) {
                const LabelState& l = scene.labels[p];
                if (l.kind == LabelState::Kind::Full || l.kind == LabelState::Kind::Noisy) {
                    pool.by_class[l.cls].emplace_back(s, p);
                }
            }
        }
        for (int c = 0; c < classes; ++c) {
            if (!pool.by_class[c].empty()) pool.present.push_back(c);
        }
        return pool;
    }

    bool empty() const { return present.empty(); }
};

// Rare-class-sampling analog: classes are drawn uniformly among those present,
// then a pixel uniformly within the class, so expected per-class counts are
// equal. A missing class's share redistributes over the present ones.
inline Batch class_balanced_sample(const std::vector<Scene>& scenes, const LabeledPixelPool& pool,
                                   int batch_size, Rng& rng) {
    if (pool.empty()) throw SpecError("class_balanced_sample: empty labeled pool");
    Batch b;
    b.domain = Domain::Source;
    const int raw_dim = scenes.front().raw_dim();
    b.raw.resize(raw_dim, batch_size);
    b.labels.resize(batch_size);
    b.origin.resize(batch_size);
    for (int i = 0; i < batch_size; ++i) {
        const ClassId c = pool.present[rng.uniform_int(static_cast<int>(pool.present.size()))];
        const auto& list = pool.by_class[c];
        const auto [scene_idx, pixel_idx] = list[rng.uniform_int(static_cast<int>(list.size()))];
        b.raw.col(i) = scenes[scene_idx].raw.col(pixel_idx);
        b.labels[i] = scenes[scene_idx].labels[pixel_idx];
        b.origin[i] = {scene_idx, pixel_idx};
    }
    return b;
}

struct MetricsRow {
    int iter = 0;
    double l_ce_l = 0.0;
    double l_ce_u = 0.0;
    double l_cl = 0.0;
    double mean_alpha = 0.0;
    double mean_w = 0.0;
    double target_miou = 0.0;
};

inline std::string metrics_to_csv(const std::vector<MetricsRow>& rows) {
    std::string out = "iter,l_ce_l,l_ce_u,l_cl,mean_alpha,mean_w,target_miou\n";
    char buf[256];
    for (const MetricsRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n", r.iter, r.l_ce_l, r.l_ce_u,
                      r.l_cl, r.mean_alpha, r.mean_w, r.target_miou);
        out += buf;
    }
    return out;
}

struct PriorSnapshot {
    int iter = 0;
    Vec delta_target;
    Vec delta_source;
};

struct TrainResult {
    TeacherStudent models;
    GmmBank bank;
    TargetState target_state;
    std::vector<MetricsRow> metrics;
    std::vector<std::string> branch_trace; // one entry per iteration, e.g. "L|U|Tw"
    std::vector<PriorSnapshot> prior_trace;
    EvalResult final_eval;
    std::string rng_state;
    uint64_t iterations = 0;
};

// Instrumentation record for the "pseudo-labels come from the teacher" audit:
// the labels actually fed to self-training next to fresh teacher/student
// argmaxes at the same point.
struct PseudoLabelAudit {
    int iteration = 0;
    int scene = 0;
    std::vector<ClassId> used;
    std::vector<ClassId> from_teacher;
    std::vector<ClassId> from_student;
};

struct TrainObservers {
    std::vector<std::pair<int, int>>* gate_events = nullptr; // (scene, pixel) admitted to the GMM bank
    std::vector<double>* loss_trace = nullptr;               // per-iteration total loss
    std::vector<PseudoLabelAudit>* pseudo_audits = nullptr;
};

namespace detail {

inline ForwardCache concat_caches(const std::vector<const ForwardCache*>& parts) {
    int n = 0;
    for (const ForwardCache* p : parts) n += p->size();
    ForwardCache out;
    const ForwardCache& f0 = *parts.front();
    out.x.resize(f0.x.rows(), n);
    out.pre_enc.resize(f0.pre_enc.rows(), n);
    out.h.resize(f0.h.rows(), n);
    out.pre_p1.resize(f0.pre_p1.rows(), n);
    out.a.resize(f0.a.rows(), n);
    out.g.resize(f0.g.rows(), n);
    out.g_norm.resize(n);
    out.f.resize(f0.f.rows(), n);
    out.logits.resize(f0.logits.rows(), n);
    int at = 0;
    for (const ForwardCache* p : parts) {
        const int k = p->size();
        out.x.middleCols(at, k) = p->x;
        out.pre_enc.middleCols(at, k) = p->pre_enc;
        out.h.middleCols(at, k) = p->h;
        out.pre_p1.middleCols(at, k) = p->pre_p1;
        out.a.middleCols(at, k) = p->a;
        out.g.middleCols(at, k) = p->g;
        out.g_norm.segment(at, k) = p->g_norm;
        out.f.middleCols(at, k) = p->f;
        out.logits.middleCols(at, k) = p->logits;
        at += k;
    }
    return out;
}

inline void append_selection(SelectionBatch& dst, const SelectionBatch& src) {
    dst.pos_class.insert(dst.pos_class.end(), src.pos_class.begin(), src.pos_class.end());
    dst.pos_comp.insert(dst.pos_comp.end(), src.pos_comp.begin(), src.pos_comp.end());
    dst.alpha.insert(dst.alpha.end(), src.alpha.begin(), src.alpha.end());
    if (dst.comp_of_class.size() == 0) {
        dst.comp_of_class = src.comp_of_class;
    } else if (src.comp_of_class.size() > 0) {
        Eigen::MatrixXi merged(dst.comp_of_class.rows(), dst.comp_of_class.cols() + src.comp_of_class.cols());
        merged << dst.comp_of_class, src.comp_of_class;
        dst.comp_of_class = std::move(merged);
    }
}

} // namespace detail

// Algorithm-1-style training loop over the generated two-domain data.
class Trainer {
public:
    Trainer(const RunConfig& cfg, const GeneratedData& data, TrainObservers obs = {})
        : cfg_(cfg), data_(data), obs_(obs), rng_(cfg.seed) {
        cfg_.validate();
        for (int s = 0; s < static_cast<int>(data.source.size()); ++s) {
            bool any_labeled = false;
            for (const LabelState& l : data.source[s].labels) {
                if (l.kind == LabelState::Kind::Full || l.kind == LabelState::Kind::Noisy) {
                    any_labeled = true;
                    break;
                }
            }
            (any_labeled ? labeled_source_ : unlabeled_source_).push_back(s);
            if (any_labeled) {
                for (const LabelState& l : data.source[s].labels) {
                    if (l.kind == LabelState::Kind::Noisy) {
                        noisy_source_ = true;
                        break;
                    }
                }
            }
        }
        for (int t = 0; t < static_cast<int>(data.target.size()); ++t) {
            bool weak = false;
            for (const LabelState& l : data.target[t].labels) {
                if (l.weak()) {
                    weak = true;
                    break;
                }
            }
            target_scenes_.push_back(t);
            target_weak_.push_back(weak);
        }

        const int raw_dim = !data.source.empty() ? data.source.front().raw_dim()
                                                 : (!data.target.empty() ? data.target.front().raw_dim() : 0);
        if (raw_dim == 0) throw SpecError("training requires at least one scene");
        Rng init_rng = rng_.derive(0xa11ce);
        pair_.student = Model::init(raw_dim, cfg_.hidden_dim, cfg_.embed_dim, cfg_.classes, init_rng);
        pair_.teacher = pair_.student;
        bank_ = GmmBank(GmmOptions::from(cfg_));
        state_ = TargetState::from(cfg_);
        optimizer_ = SgdOptimizer(pair_.student, cfg_.learning_rate, cfg_.sgd_momentum);
        if (!labeled_source_.empty()) {
            pool_ = LabeledPixelPool::build(data_.source, cfg_.classes);
        }
        sample_rng_ = rng_.derive(0x5a3e);
    }

    TrainResult run() {
        for (int iter = 0; iter < cfg_.iterations; ++iter) step(iter);
        TrainResult result;
        result.models = pair_;
        result.bank = bank_;
        result.target_state = state_;
        result.metrics = metrics_;
        result.branch_trace = trace_;
        result.prior_trace = prior_trace_;
        result.final_eval = evaluate(pair_.student, data_.holdout.empty() ? data_.target : data_.holdout);
        result.rng_state = rng_.save_state();
        result.iterations = static_cast<uint64_t>(cfg_.iterations);
        return result;
    }

    const TeacherStudent& models() const { return pair_; }
    const GmmBank& bank() const { return bank_; }
    const TargetState& target_state() const { return state_; }
    bool noisy_source() const { return noisy_source_; }

    void step(int iter) {
        const bool want_selftrain = cfg_.enable_selftrain;
        const bool contrastive_on =
            cfg_.lambda_cl > 0.0 && iter >= cfg_.warmup_iterations && bank_.all_initialized();

        std::vector<ForwardCache> caches;
        caches.reserve(3);
        struct Entry {
            std::vector<ClassId> ce_label, st_label;
            std::vector<double> st_conf, st_alpha;
            std::vector<int> scene_key;
            std::vector<int> cl_local; // indices within the sub-batch
            SelectionBatch sel;
        };
        std::vector<Entry> entries;
        std::string trace;
        std::vector<ClassId> src_batch_labels;
        std::vector<ClassId> tgt_confident_pseudo;

        // --- labeled source minibatch: gated GMM update + Eq. 5 (or 6/7)
        // selection + labeled CE.
        if (!labeled_source_.empty()) {
            Batch b = class_balanced_sample(data_.source, pool_, cfg_.batch_labeled, sample_rng_);
            ForwardCache cache = forward(pair_.student, b.raw);
            const std::vector<ClassId> preds = argmax_classes(cache.logits);

            GateTrace gate;
            bank_.gated_update(cache.f, b.labels, preds, obs_.gate_events ? &gate : nullptr);
            if (obs_.gate_events) {
                for (int i : gate.pushed) {
                    obs_.gate_events->emplace_back(b.origin[i].scene_id, b.origin[i].pixel_index);
                }
            }

            Entry e;
            const int n = b.size();
            e.ce_label.resize(n);
            e.st_label.assign(n, -1);
            e.st_conf.assign(n, std::numeric_limits<double>::quiet_NaN());
            e.st_alpha.assign(n, std::numeric_limits<double>::quiet_NaN());
            e.scene_key.assign(n, -1);
            for (int i = 0; i < n; ++i) {
                e.ce_label[i] = b.labels[i].cls;
                src_batch_labels.push_back(b.labels[i].cls);
            }
            if (contrastive_on) {
                if (noisy_source_) {
                    e.sel = select_batch(bank_, cache.f, SelectMode::UnlabeledSource);
                } else {
                    e.sel = select_batch(bank_, cache.f, SelectMode::LabeledSource, &e.ce_label);
                }
                e.cl_local.resize(n);
                for (int i = 0; i < n; ++i) e.cl_local[i] = i;
            }
            caches.push_back(std::move(cache));
            entries.push_back(std::move(e));
            trace += "L";
        }

        // --- unlabeled source scene: self-training + Eq. 6/7 contrastive.
        if (!unlabeled_source_.empty() && (want_selftrain || contrastive_on)) {
            const int scene_idx = unlabeled_source_[u_cursor_ % unlabeled_source_.size()];
            u_cursor_++;
            const Scene& scene = data_.source[scene_idx];
            ForwardCache cache = forward(pair_.student, scene.raw);

            Entry e;
            const int n = scene.pixels();
            e.ce_label.assign(n, -1);
            e.st_label.assign(n, -1);
            e.st_conf.assign(n, std::numeric_limits<double>::quiet_NaN());
            e.st_alpha.assign(n, std::numeric_limits<double>::quiet_NaN());
            e.scene_key.assign(n, 1000000 + scene_idx);
            if (want_selftrain) {
                const Mat t_logits = classify(pair_.teacher, scene.raw);
                for (int i = 0; i < n; ++i) {
                    const Vec col = t_logits.col(i);
                    const double lse = log_sum_exp(col);
                    int best = 0;
                    for (int c = 1; c < col.size(); ++c) {
                        if (col[c] > col[best]) best = c;
                    }
                    e.st_label[i] = best;
                    e.st_conf[i] = std::exp(col[best] - lse);
                }
            }
            if (contrastive_on) {
                e.sel = select_batch(bank_, cache.f, SelectMode::UnlabeledSource);
                e.cl_local.resize(n);
                for (int i = 0; i < n; ++i) e.cl_local[i] = i;
            }
            caches.push_back(std::move(cache));
            entries.push_back(std::move(e));
            trace += trace.empty() ? "U" : "|U";
        }

        // --- target scene: pseudo-labels (Eq. 8-9), Eq. 10 selection, scene
        // GMM alpha for weak labels, self-training, weak-label CE.
        const bool target_needed = !target_scenes_.empty() &&
                                   (want_selftrain || contrastive_on || has_any_weak_target());
        if (target_needed) {
            const int scene_idx = target_scenes_[t_cursor_ % target_scenes_.size()];
            t_cursor_++;
            const Scene& scene = data_.target[scene_idx];
            const bool weak_scene = target_weak_[scene_idx];
            ForwardCache cache = forward(pair_.student, scene.raw);
            const int n = scene.pixels();

            Entry e;
            e.ce_label.assign(n, -1);
            e.st_label.assign(n, -1);
            e.st_conf.assign(n, std::numeric_limits<double>::quiet_NaN());
            e.st_alpha.assign(n, std::numeric_limits<double>::quiet_NaN());
            e.scene_key.assign(n, 2000000 + scene_idx);

            for (int i = 0; i < n; ++i) {
                if (scene.labels[i].weak()) e.ce_label[i] = scene.labels[i].cls;
            }

            const bool teacher_needed = want_selftrain || contrastive_on;
            if (teacher_needed) {
                ForwardCache t_cache = forward(pair_.teacher, scene.raw);
                std::vector<ClassId> t_pseudo(n);
                std::vector<double> t_conf(n);
                for (int i = 0; i < n; ++i) {
                    const Vec col = t_cache.logits.col(i);
                    const double lse = log_sum_exp(col);
                    int best = 0;
                    for (int c = 1; c < col.size(); ++c) {
                        if (col[c] > col[best]) best = c;
                    }
                    t_pseudo[i] = best;
                    t_conf[i] = std::exp(col[best] - lse);
                    if (t_conf[i] > cfg_.beta) tgt_confident_pseudo.push_back(best);
                }
                update_target_bank(state_, t_cache.f, t_pseudo);
                update_priors(state_, src_batch_labels, tgt_confident_pseudo);

                if (obs_.pseudo_audits) {
                    PseudoLabelAudit audit;
                    audit.iteration = iter;
                    audit.scene = scene_idx;
                    audit.used = t_pseudo;
                    audit.from_teacher = argmax_classes(t_cache.logits);
                    audit.from_student = argmax_classes(cache.logits);
                    obs_.pseudo_audits->push_back(std::move(audit));
                }

                if (want_selftrain) {
                    for (int i = 0; i < n; ++i) {
                        if (e.ce_label[i] >= 0) continue; // weak labels train via Eq. 1-1
                        e.st_label[i] = t_pseudo[i];
                        e.st_conf[i] = t_conf[i];
                    }
                    // Unlabeled weak-scene pixels still count toward w via
                    // their confidences.
                    if (weak_scene) {
                        for (int i = 0; i < n; ++i) {
                            if (e.ce_label[i] >= 0) e.st_conf[i] = t_conf[i];
                        }
                    }
                }

                if (contrastive_on) {
                    // Eq. 8 pseudo-labels from teacher embeddings; weak labels
                    // override where present.
                    PseudoLabelBatch pl = pseudo_label_batch(bank_, state_, t_cache.f);
                    std::vector<ClassId> y_hat = pl.labels;
                    for (int i = 0; i < n; ++i) {
                        if (e.ce_label[i] >= 0) y_hat[i] = e.ce_label[i];
                    }
                    e.sel = select_batch(bank_, cache.f, SelectMode::LabeledSource, &y_hat);
                    std::fill(e.sel.alpha.begin(), e.sel.alpha.end(), 1.0);
                    e.cl_local.resize(n);
                    for (int i = 0; i < n; ++i) e.cl_local[i] = i;

                    if (weak_scene) {
                        std::vector<ClassId> weak_labels(n, -1);
                        for (int i = 0; i < n; ++i) {
                            if (scene.labels[i].weak()) weak_labels[i] = scene.labels[i].cls;
                        }
                        const SceneGmm sg =
                            fit_scene_gmm(cache.f, weak_labels, y_hat, cfg_.classes, cfg_.var_floor,
                                          cfg_.soft_scene_sigma ? &pl.soft_scores : nullptr);
                        for (int i = 0; i < n; ++i) {
                            const double a = scene_alpha(sg, bank_, cache.f.col(i), e.sel.pos_class[i]);
                            e.sel.alpha[i] = a;
                            if (cfg_.use_alpha_selftrain && e.st_label[i] >= 0) e.st_alpha[i] = a;
                        }
                    }
                }
            }

            caches.push_back(std::move(cache));
            entries.push_back(std::move(e));
            trace += trace.empty() ? "" : "|";
            trace += weak_scene ? "Tw" : "Tu";
        }

        trace_.push_back(trace);
        if (entries.empty()) {
            if (obs_.loss_trace) obs_.loss_trace->push_back(0.0);
            maybe_log(iter, LossReport{});
            return;
        }

        // Assemble one combined batch and reuse the per-branch forwards.
        LossInputs in;
        int total = 0;
        for (const ForwardCache& c : caches) total += c.size();
        in.init(total, caches.front().x.rows());
        in.bank = &bank_;
        std::vector<const ForwardCache*> cache_ptrs;
        int at = 0;
        for (size_t bi = 0; bi < entries.size(); ++bi) {
            const Entry& e = entries[bi];
            const int k = caches[bi].size();
            in.raw.middleCols(at, k) = caches[bi].x;
            for (int i = 0; i < k; ++i) {
                in.ce_label[at + i] = e.ce_label[i];
                in.st_label[at + i] = e.st_label[i];
                in.st_conf[at + i] = e.st_conf[i];
                in.st_alpha[at + i] = e.st_alpha[i];
                in.scene_key[at + i] = e.scene_key[i];
            }
            for (int local : e.cl_local) in.cl_pixel.push_back(at + local);
            detail::append_selection(in.cl_sel, e.sel);
            cache_ptrs.push_back(&caches[bi]);
            at += k;
        }
        const ForwardCache combined = detail::concat_caches(cache_ptrs);

        LossReport report = total_loss(pair_.student, in, cfg_, &combined);
        if (!report.finite()) {
            throw NumericalInstability("non-finite loss at iteration " + std::to_string(iter));
        }
        if (obs_.loss_trace) obs_.loss_trace->push_back(report.total);

        optimizer_.step(pair_.student, report.grads);
        teacher_update(pair_, cfg_.lambda_teacher);
        maybe_log(iter, report);
    }

private:
    bool has_any_weak_target() const {
        for (bool w : target_weak_) {
            if (w) return true;
        }
        return false;
    }

    void maybe_log(int iter, const LossReport& report) {
        if (cfg_.metrics_interval <= 0) return;
        if ((iter + 1) % cfg_.metrics_interval != 0 && iter + 1 != cfg_.iterations) return;
        MetricsRow row;
        row.iter = iter + 1;
        row.l_ce_l = report.ce_labeled;
        row.l_ce_u = report.ce_selftrain;
        row.l_cl = report.contrastive;
        row.mean_alpha = report.mean_alpha();
        row.mean_w = report.mean_w();
        const auto& pool = data_.holdout.empty() ? data_.target : data_.holdout;
        const int n_eval = std::min<int>(cfg_.miou_eval_scenes, static_cast<int>(pool.size()));
        if (n_eval > 0) {
            std::vector<Scene> subset(pool.begin(), pool.begin() + n_eval);
            row.target_miou = evaluate(pair_.student, subset).miou;
        }
        metrics_.push_back(row);
        prior_trace_.push_back({iter + 1, state_.delta_target(), state_.delta_source()});
    }

    RunConfig cfg_;
    const GeneratedData& data_;
    TrainObservers obs_;
    Rng rng_;
    Rng sample_rng_{0};

    std::vector<int> labeled_source_;
    std::vector<int> unlabeled_source_;
    std::vector<int> target_scenes_;
    std::vector<bool> target_weak_;
    bool noisy_source_ = false;

    TeacherStudent pair_;
    GmmBank bank_;
    TargetState state_;
    SgdOptimizer optimizer_;
    LabeledPixelPool pool_;

    size_t u_cursor_ = 0;
    size_t t_cursor_ = 0;
    std::vector<MetricsRow> metrics_;
    std::vector<std::string> trace_;
    std::vector<PriorSnapshot> prior_trace_;
};

inline TrainResult train(const RunConfig& cfg, const GeneratedData& data, TrainObservers obs = {}) {
    Trainer t(cfg, data, obs);
    return t.run();
}

} // namespace gengmm
