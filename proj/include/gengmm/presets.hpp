#pragma once

#include "gengmm/core_types.hpp"
#include "gengmm/synth.hpp"

#include <string>

namespace gengmm {

// Desk-scale benchmark presets. The scenario geometry and the training
// hyperparameters below are the reference setup used by the acceptance suite
// and mirrored in configs/*.cfg.

inline RunConfig bench_run_config() {
    RunConfig cfg;
    cfg.classes = 5;
    cfg.embed_dim = 64;
    cfg.hidden_dim = 128;
    cfg.components = 3;
    cfg.tau = 0.1;
    cfg.beta = 0.968;
    cfg.lambda_cl = 1.0;
    cfg.bank_capacity = 2048; // desk-scale queue; the 32k default suits larger corpora
    cfg.bank_push_per_class = 100;
    cfg.k_top = 10;
    cfg.learning_rate = 0.15;
    cfg.sgd_momentum = 0.9;
    cfg.iterations = 1000;
    cfg.warmup_iterations = 200;
    cfg.batch_labeled = 256;
    cfg.metrics_interval = 100;
    cfg.miou_eval_scenes = 8;
    cfg.seed = 1;
    return cfg;
}

// Partially labeled source (rho = 0.5), unlabeled target, with feature-space
// rotation + shift and a skewed target class prior.
inline ScenarioSpec partial_source_scenario() {
    ScenarioSpec spec;
    spec.label_fraction = 0.5;
    return spec;
}

// Fully labeled source, point-annotated target.
inline ScenarioSpec point_target_scenario() {
    ScenarioSpec spec;
    spec.label_fraction = 1.0;
    spec.annotation = TargetAnnotation::Point;
    spec.point_radius = 4;
    spec.point_count = 1;
    return spec;
}

// Fully labeled source with 30% symmetric label noise, unlabeled target.
inline ScenarioSpec noisy_source_scenario() {
    ScenarioSpec spec;
    spec.label_fraction = 1.0;
    spec.noise_rate = 0.3;
    return spec;
}

inline bool preset_scenario(const std::string& name, ScenarioSpec& out) {
    if (name == "partial_source") out = partial_source_scenario();
    else if (name == "point_target") out = point_target_scenario();
    else if (name == "noisy_source") out = noisy_source_scenario();
    else return false;
    return true;
}

} // namespace gengmm
