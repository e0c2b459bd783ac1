#pragma once

#include "gengmm/core_types.hpp"
#include "gengmm/synth.hpp"

#include <istream>
#include <map>
#include <sstream>
#include <string>

namespace gengmm {

// Flat key=value run/scenario configuration. '#' starts a comment; blank
// lines are ignored; later keys override earlier ones.
inline std::map<std::string, std::string> parse_config_text(std::istream& is) {
    std::map<std::string, std::string> out;
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        const auto b = s.find_last_not_of(" \t\r");
        if (a == std::string::npos) return std::string();
        return s.substr(a, b - a + 1);
    };
    while (std::getline(is, line)) {
        lineno++;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        out[key] = value;
    }
    return out;
}

namespace detail {

inline int parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int out = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected integer, got '" + v + "'");
    }
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const uint64_t out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected unsigned integer, got '" + v + "'");
    }
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("key '" + key + "': expected boolean, got '" + v + "'");
}

inline std::vector<double> parse_double_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_double(key, item));
    return out;
}

} // namespace detail

inline bool apply_run_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    using namespace detail;
    if (key == "classes") cfg.classes = parse_int(key, value);
    else if (key == "embed_dim") cfg.embed_dim = parse_int(key, value);
    else if (key == "hidden_dim") cfg.hidden_dim = parse_int(key, value);
    else if (key == "components") cfg.components = parse_int(key, value);
    else if (key == "tau") cfg.tau = parse_double(key, value);
    else if (key == "beta") cfg.beta = parse_double(key, value);
    else if (key == "lambda_cl") cfg.lambda_cl = parse_double(key, value);
    else if (key == "lambda_ema") cfg.lambda_ema = parse_double(key, value);
    else if (key == "lambda_teacher") cfg.lambda_teacher = parse_double(key, value);
    else if (key == "sinkhorn_iters") cfg.sinkhorn_iters = parse_int(key, value);
    else if (key == "sinkhorn_eps") cfg.sinkhorn_eps = parse_double(key, value);
    else if (key == "var_floor") cfg.var_floor = parse_double(key, value);
    else if (key == "starvation_limit") cfg.starvation_limit = parse_int(key, value);
    else if (key == "bank_capacity") cfg.bank_capacity = parse_int(key, value);
    else if (key == "bank_push_per_class") cfg.bank_push_per_class = parse_int(key, value);
    else if (key == "k_top") cfg.k_top = parse_int(key, value);
    else if (key == "prior_floor") cfg.prior_floor = parse_double(key, value);
    else if (key == "learning_rate") cfg.learning_rate = parse_double(key, value);
    else if (key == "sgd_momentum") cfg.sgd_momentum = parse_double(key, value);
    else if (key == "iterations") cfg.iterations = parse_int(key, value);
    else if (key == "warmup_iterations") cfg.warmup_iterations = parse_int(key, value);
    else if (key == "batch_labeled") cfg.batch_labeled = parse_int(key, value);
    else if (key == "enable_selftrain") cfg.enable_selftrain = parse_bool(key, value);
    else if (key == "use_alpha_selftrain") cfg.use_alpha_selftrain = parse_bool(key, value);
    else if (key == "soft_scene_sigma") cfg.soft_scene_sigma = parse_bool(key, value);
    else if (key == "metrics_interval") cfg.metrics_interval = parse_int(key, value);
    else if (key == "miou_eval_scenes") cfg.miou_eval_scenes = parse_int(key, value);
    else if (key == "seed") cfg.seed = parse_u64(key, value);
    else return false;
    return true;
}

inline bool apply_scenario_key(ScenarioSpec& spec, const std::string& key, const std::string& value) {
    using namespace detail;
    if (key == "classes") spec.classes = parse_int(key, value);
    else if (key == "raw_dim") spec.raw_dim = parse_int(key, value);
    else if (key == "modes_per_class") spec.modes_per_class = parse_int(key, value);
    else if (key == "class_separation") spec.class_separation = parse_double(key, value);
    else if (key == "mode_spread") spec.mode_spread = parse_double(key, value);
    else if (key == "feature_std") spec.feature_std = parse_double(key, value);
    else if (key == "rotation_deg") spec.rotation_deg = parse_double(key, value);
    else if (key == "shift_mag") spec.shift_mag = parse_double(key, value);
    else if (key == "prior_skew") spec.prior_skew = parse_double(key, value);
    else if (key == "target_priors") spec.target_priors = parse_double_list(key, value);
    else if (key == "label_fraction") spec.label_fraction = parse_double(key, value);
    else if (key == "noise_rate") spec.noise_rate = parse_double(key, value);
    else if (key == "annotation") {
        if (value == "none") spec.annotation = TargetAnnotation::None;
        else if (value == "point") spec.annotation = TargetAnnotation::Point;
        else if (value == "coarse") spec.annotation = TargetAnnotation::Coarse;
        else throw ConfigError("key 'annotation': expected none|point|coarse, got '" + value + "'");
    } else if (key == "point_radius") spec.point_radius = parse_int(key, value);
    else if (key == "point_count") spec.point_count = parse_int(key, value);
    else if (key == "coarse_width") spec.coarse_width = parse_int(key, value);
    else if (key == "voronoi_sites") spec.voronoi_sites = parse_int(key, value);
    else if (key == "grid_h") spec.grid_h = parse_int(key, value);
    else if (key == "grid_w") spec.grid_w = parse_int(key, value);
    else if (key == "source_scenes") spec.source_scenes = parse_int(key, value);
    else if (key == "target_scenes") spec.target_scenes = parse_int(key, value);
    else if (key == "holdout_scenes") spec.holdout_scenes = parse_int(key, value);
    else if (key == "seed") spec.seed = parse_u64(key, value);
    else return false;
    return true;
}

struct ResolvedConfig {
    RunConfig run;
    ScenarioSpec scenario;
};

// Keys shared by both structs (classes, seed) are applied to both.
inline ResolvedConfig resolve_config(const std::map<std::string, std::string>& kv) {
    ResolvedConfig rc;
    for (const auto& [key, value] : kv) {
        const bool run_known = apply_run_key(rc.run, key, value);
        const bool scenario_known = apply_scenario_key(rc.scenario, key, value);
        if (!run_known && !scenario_known) throw ConfigError("unknown config key '" + key + "'");
    }
    return rc;
}

} // namespace gengmm
