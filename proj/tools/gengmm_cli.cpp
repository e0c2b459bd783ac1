// Command-line front end: dataset generation, training, evaluation, ablation
// sweeps, and checkpoint inspection.

#include "gengmm/config_text.hpp"
#include "gengmm/serialize.hpp"
#include "gengmm/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitInfeasible = 2;
constexpr int kExitDivergence = 3;

gengmm::ResolvedConfig load_resolved_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::map<std::string, std::string> kv;
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw gengmm::ConfigError("cannot open config file: " + path);
        kv = gengmm::parse_config_text(is);
    }
    for (const std::string& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw gengmm::ConfigError("--set expects key=value, got '" + o + "'");
        kv[o.substr(0, eq)] = o.substr(eq + 1);
    }
    return gengmm::resolve_config(kv);
}

void write_text_file(const fs::path& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw gengmm::IoError("cannot write " + path.string());
    os << content;
}

json dataset_sidecar(const gengmm::ResolvedConfig& rc) {
    json j;
    j["scenario"] = rc.scenario;
    j["run_config"] = rc.run;
    return j;
}

void save_dataset(const fs::path& dir, const gengmm::GeneratedData& data, const gengmm::ResolvedConfig& rc) {
    fs::create_directories(dir);
    gengmm::save_scenes((dir / "source.ggmm").string(), data.source, rc.scenario.classes);
    gengmm::save_scenes((dir / "target.ggmm").string(), data.target, rc.scenario.classes);
    if (!data.holdout.empty()) {
        gengmm::save_scenes((dir / "holdout.ggmm").string(), data.holdout, rc.scenario.classes);
    }
    write_text_file(dir / "dataset.json", dataset_sidecar(rc).dump(2) + "\n");
}

gengmm::GeneratedData load_dataset(const fs::path& dir) {
    gengmm::GeneratedData data;
    data.source = gengmm::load_scenes((dir / "source.ggmm").string()).scenes;
    data.target = gengmm::load_scenes((dir / "target.ggmm").string()).scenes;
    if (fs::exists(dir / "holdout.ggmm")) {
        data.holdout = gengmm::load_scenes((dir / "holdout.ggmm").string()).scenes;
    }
    return data;
}

json eval_to_json(const gengmm::EvalResult& r) {
    json j = r;
    return j;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    if (n == 0) return 0.0;
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int cmd_generate(const std::string& config_path, const std::vector<std::string>& overrides,
                 const std::string& out_dir) {
    const gengmm::ResolvedConfig rc = load_resolved_config(config_path, overrides);
    const gengmm::GeneratedData data = gengmm::generate(rc.scenario);
    save_dataset(out_dir, data, rc);
    std::cout << "wrote dataset to " << out_dir << " (" << data.source.size() << " source, " << data.target.size()
              << " target, " << data.holdout.size() << " holdout scenes)\n";
    return kExitOk;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& data_dir, const std::string& out_dir) {
    const gengmm::ResolvedConfig rc = load_resolved_config(config_path, overrides);
    gengmm::GeneratedData data;
    if (!data_dir.empty()) {
        data = load_dataset(data_dir);
    } else {
        data = gengmm::generate(rc.scenario);
    }

    fs::create_directories(out_dir);
    gengmm::Trainer trainer(rc.run, data);
    gengmm::TrainResult result;
    try {
        result = trainer.run();
    } catch (const gengmm::NumericalInstability& e) {
        // Diagnostic snapshot: message, config, and the state at failure.
        json diag;
        diag["error"] = e.what();
        diag["run_config"] = rc.run;
        diag["scenario"] = rc.scenario;
        write_text_file(fs::path(out_dir) / "divergence.json", diag.dump(2) + "\n");
        gengmm::Checkpoint ck;
        ck.config = rc.run;
        ck.student = trainer.models().student;
        ck.teacher = trainer.models().teacher;
        ck.bank = trainer.bank();
        ck.target_state = trainer.target_state();
        gengmm::save_checkpoint((fs::path(out_dir) / "divergence.ggmc").string(), ck);
        std::cerr << "training diverged: " << e.what() << "\n";
        return kExitDivergence;
    }

    write_text_file(fs::path(out_dir) / "metrics.csv", gengmm::metrics_to_csv(result.metrics));

    std::string priors_log;
    for (const gengmm::PriorSnapshot& s : result.prior_trace) {
        json row;
        row["iter"] = s.iter;
        row["delta_target"] = std::vector<double>(s.delta_target.data(), s.delta_target.data() + s.delta_target.size());
        row["delta_source"] = std::vector<double>(s.delta_source.data(), s.delta_source.data() + s.delta_source.size());
        priors_log += row.dump() + "\n";
    }
    write_text_file(fs::path(out_dir) / "priors.jsonl", priors_log);

    gengmm::Checkpoint ck;
    ck.iteration = result.iterations;
    ck.config = rc.run;
    ck.rng_state = result.rng_state;
    ck.student = result.models.student;
    ck.teacher = result.models.teacher;
    ck.bank = result.bank;
    ck.target_state = result.target_state;
    gengmm::save_checkpoint((fs::path(out_dir) / "checkpoint.ggmc").string(), ck);

    json summary;
    summary["run_config"] = rc.run;
    summary["scenario"] = rc.scenario;
    summary["seed"] = rc.run.seed;
    summary["iterations"] = result.iterations;
    summary["final_eval"] = eval_to_json(result.final_eval);
    write_text_file(fs::path(out_dir) / "summary.json", summary.dump(2) + "\n");

    std::cout << "final target mIoU: " << result.final_eval.miou << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir, const std::string& split,
             const std::string& out_file) {
    const gengmm::Checkpoint ck = gengmm::load_checkpoint(checkpoint_path);
    const gengmm::GeneratedData data = load_dataset(data_dir);
    const std::vector<gengmm::Scene>* scenes = nullptr;
    if (split == "holdout") scenes = &data.holdout;
    else if (split == "target") scenes = &data.target;
    else if (split == "source") scenes = &data.source;
    else throw gengmm::ConfigError("--split must be source|target|holdout");
    if (scenes->empty()) throw gengmm::ConfigError("requested split is empty");

    const gengmm::EvalResult r = gengmm::evaluate(ck.student, *scenes);
    json j;
    j["eval"] = eval_to_json(r);
    j["split"] = split;
    j["data_dir"] = data_dir;
    j["checkpoint"] = checkpoint_path;
    j["run_config"] = ck.config;
    j["seed"] = ck.config.seed;
    const std::string text = j.dump(2) + "\n";
    if (out_file.empty()) {
        std::cout << text;
    } else {
        write_text_file(out_file, text);
        std::cout << "mIoU(" << split << ") = " << r.miou << "\n";
    }
    return kExitOk;
}

int cmd_dump_gmm(const std::string& checkpoint_path, const std::string& out_file) {
    const gengmm::Checkpoint ck = gengmm::load_checkpoint(checkpoint_path);
    json classes = json::array();
    for (int c = 0; c < ck.bank.classes(); ++c) {
        const gengmm::ClassGmm& g = ck.bank.gmm(c);
        json jc;
        jc["class"] = c;
        jc["initialized"] = ck.bank.initialized(c);
        jc["weights"] = std::vector<double>(g.weights.data(), g.weights.data() + g.weights.size());
        json means = json::array();
        json variances = json::array();
        for (int m = 0; m < g.components(); ++m) {
            means.push_back(std::vector<double>(g.means.col(m).data(), g.means.col(m).data() + g.dim()));
            variances.push_back(
                std::vector<double>(g.variances.col(m).data(), g.variances.col(m).data() + g.dim()));
        }
        jc["means"] = means;
        jc["variances"] = variances;
        jc["queue_size"] = ck.bank.queue(c).size();
        classes.push_back(jc);
    }
    json j;
    j["gmm"] = classes;
    j["run_config"] = ck.config;
    j["seed"] = ck.config.seed;
    const std::string text = j.dump(2) + "\n";
    if (out_file.empty()) std::cout << text;
    else write_text_file(out_file, text);
    return kExitOk;
}

int cmd_dump_priors(const std::string& checkpoint_path, const std::string& out_file) {
    const gengmm::Checkpoint ck = gengmm::load_checkpoint(checkpoint_path);
    const gengmm::Vec& dt = ck.target_state.delta_target();
    const gengmm::Vec& ds = ck.target_state.delta_source();
    json j;
    j["delta_target"] = std::vector<double>(dt.data(), dt.data() + dt.size());
    j["delta_source"] = std::vector<double>(ds.data(), ds.data() + ds.size());
    j["run_config"] = ck.config;
    j["seed"] = ck.config.seed;
    const std::string text = j.dump(2) + "\n";
    if (out_file.empty()) std::cout << text;
    else write_text_file(out_file, text);
    return kExitOk;
}

struct AblateVariant {
    std::string name;
    std::function<void(gengmm::RunConfig&)> tweak;
};

int cmd_ablate(const std::string& config_path, const std::vector<std::string>& overrides,
               const std::string& sweep, const std::string& values, int seeds, int jobs,
               const std::string& out_dir) {
    const gengmm::ResolvedConfig base = load_resolved_config(config_path, overrides);

    std::vector<AblateVariant> variants;
    if (sweep == "components") {
        variants.push_back({"Lb", [](gengmm::RunConfig& c) {
                                c.enable_selftrain = false;
                                c.lambda_cl = 0.0;
                            }});
        variants.push_back({"Lb+UL", [](gengmm::RunConfig& c) { c.lambda_cl = 0.0; }});
        variants.push_back({"Lb+UL+GMM-Cl", [](gengmm::RunConfig&) {}});
    } else if (sweep == "weighting") {
        variants.push_back({"w", [](gengmm::RunConfig& c) { c.use_alpha_selftrain = false; }});
        variants.push_back({"alpha", [](gengmm::RunConfig& c) { c.use_alpha_selftrain = true; }});
    } else if (sweep == "M") {
        std::string list = values.empty() ? "1,3,5,7" : values;
        std::stringstream ss(list);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const int m = gengmm::detail::parse_int("M", item);
            variants.push_back({"M=" + item, [m](gengmm::RunConfig& c) { c.components = m; }});
        }
    } else {
        throw gengmm::ConfigError("--sweep must be components|weighting|M");
    }

    // Each seed gets its own dataset, shared by all variants.
    std::vector<gengmm::GeneratedData> datasets(seeds);
    for (int s = 0; s < seeds; ++s) {
        gengmm::ScenarioSpec spec = base.scenario;
        spec.seed = base.scenario.seed + static_cast<uint64_t>(s);
        datasets[s] = gengmm::generate(spec);
    }

    struct Job {
        int variant;
        int seed;
    };
    std::vector<Job> queue;
    for (int v = 0; v < static_cast<int>(variants.size()); ++v) {
        for (int s = 0; s < seeds; ++s) queue.push_back({v, s});
    }
    std::vector<std::vector<double>> mious(variants.size(), std::vector<double>(seeds, 0.0));
    std::mutex mu;
    size_t next = 0;
    std::string worker_error;

    auto worker = [&]() {
        while (true) {
            Job job{};
            {
                std::lock_guard<std::mutex> lock(mu);
                if (next >= queue.size() || !worker_error.empty()) return;
                job = queue[next++];
            }
            try {
                gengmm::RunConfig cfg = base.run;
                variants[job.variant].tweak(cfg);
                cfg.seed = base.run.seed + static_cast<uint64_t>(job.seed);
                const gengmm::TrainResult r = gengmm::train(cfg, datasets[job.seed]);
                std::lock_guard<std::mutex> lock(mu);
                mious[job.variant][job.seed] = r.final_eval.miou;
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(mu);
                if (worker_error.empty()) worker_error = e.what();
                return;
            }
        }
    };

    const int n_workers = std::max(1, std::min<int>(jobs, static_cast<int>(queue.size())));
    std::vector<std::thread> threads;
    for (int t = 0; t < n_workers; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (!worker_error.empty()) throw gengmm::NumericalInstability(worker_error);

    json jv = json::array();
    std::cout << "sweep: " << sweep << " (" << seeds << " seeds)\n";
    std::cout << "variant,median_miou,per_seed\n";
    for (size_t v = 0; v < variants.size(); ++v) {
        const double med = median(mious[v]);
        std::cout << variants[v].name << "," << med << ",";
        for (int s = 0; s < seeds; ++s) std::cout << (s ? " " : "") << mious[v][s];
        std::cout << "\n";
        json row;
        row["name"] = variants[v].name;
        row["median_miou"] = med;
        row["mious"] = mious[v];
        jv.push_back(row);
    }

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        json j;
        j["sweep"] = sweep;
        j["seeds"] = seeds;
        j["base_run_config"] = base.run;
        j["scenario"] = base.scenario;
        j["seed"] = base.run.seed;
        j["variants"] = jv;
        write_text_file(fs::path(out_dir) / "ablate.json", j.dump(2) + "\n");
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"GenGMM-style generalized domain adaptation on synthetic two-domain benchmarks"};
    app.require_subcommand(1);

    std::string config_path, out_dir, data_dir, checkpoint_path, out_file, split = "holdout";
    std::string sweep, values;
    std::vector<std::string> overrides;
    int seeds = 5;
    int jobs = static_cast<int>(std::thread::hardware_concurrency());
    if (jobs < 1) jobs = 1;

    CLI::App* generate = app.add_subcommand("generate", "Generate a synthetic dataset");
    generate->add_option("--config", config_path, "key=value config file");
    generate->add_option("--set", overrides, "override config keys (key=value)");
    generate->add_option("--out", out_dir, "output directory")->required();

    CLI::App* train = app.add_subcommand("train", "Train on a dataset (generated on the fly unless --data)");
    train->add_option("--config", config_path, "key=value config file");
    train->add_option("--set", overrides, "override config keys (key=value)");
    train->add_option("--data", data_dir, "dataset directory from `generate`");
    train->add_option("--out", out_dir, "output directory")->required();

    CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    eval->add_option("--data", data_dir, "dataset directory")->required();
    eval->add_option("--split", split, "source|target|holdout (default holdout)");
    eval->add_option("--out", out_file, "output JSON file (stdout if omitted)");

    CLI::App* ablate = app.add_subcommand("ablate", "Run an ablation sweep");
    ablate->add_option("--config", config_path, "key=value config file");
    ablate->add_option("--set", overrides, "override config keys (key=value)");
    ablate->add_option("--sweep", sweep, "components|weighting|M")->required();
    ablate->add_option("--values", values, "comma list for the M sweep");
    ablate->add_option("--seeds", seeds, "number of seeds (default 5)");
    ablate->add_option("--jobs", jobs, "parallel runs");
    ablate->add_option("--out", out_dir, "output directory for ablate.json");

    CLI::App* dump_gmm = app.add_subcommand("dump-gmm", "Dump GMM bank parameters as JSON");
    dump_gmm->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    dump_gmm->add_option("--out", out_file, "output JSON file (stdout if omitted)");

    CLI::App* dump_priors = app.add_subcommand("dump-priors", "Dump EMA class priors as JSON");
    dump_priors->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    dump_priors->add_option("--out", out_file, "output JSON file (stdout if omitted)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (generate->parsed()) return cmd_generate(config_path, overrides, out_dir);
        if (train->parsed()) return cmd_train(config_path, overrides, data_dir, out_dir);
        if (eval->parsed()) return cmd_eval(checkpoint_path, data_dir, split, out_file);
        if (ablate->parsed()) return cmd_ablate(config_path, overrides, sweep, values, seeds, jobs, out_dir);
        if (dump_gmm->parsed()) return cmd_dump_gmm(checkpoint_path, out_file);
        if (dump_priors->parsed()) return cmd_dump_priors(checkpoint_path, out_file);
    } catch (const gengmm::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const gengmm::SpecError& e) {
        std::cerr << "infeasible scenario: " << e.what() << "\n";
        return kExitInfeasible;
    } catch (const gengmm::NumericalInstability& e) {
        std::cerr << "numerical divergence: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const gengmm::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitConfig;
    }
    return kExitOk;
}
