// modula: staged mixture-of-adapters training harness.
//
// Subcommands map 1:1 onto the library's training and analysis
// operations; every run is driven by one JSON config. Progress goes to
// stderr, machine-readable results to stdout. Exit codes: 0 success,
// 1 validation error, 2 runtime failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "modula/audit.hpp"
#include "modula/checkpoint.hpp"
#include "modula/evaluate.hpp"
#include "modula/router_analysis.hpp"
#include "modula/training.hpp"

namespace fs = std::filesystem;
using namespace modula;

namespace {

std::string g_self;  // argv[0], used to spawn expert subprocesses

double now_seconds() {
    static auto t0 = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void progress(const std::string& msg) {
    std::fprintf(stderr, "[modula %7.1fs] %s\n", now_seconds(), msg.c_str());
}

struct CommonArgs {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::optional<std::string> out;
    std::string from;
    std::string task;
};

RunConfig load_config(const CommonArgs& args) {
    RunConfig cfg = load_run_config(args.config_path);
    if (args.seed) cfg.seed = *args.seed;
    if (args.out) cfg.out_dir = *args.out;
    cfg.validate();
    return cfg;
}

/// Wall-clock phase timings are deliberately kept out of metrics.json
/// (which must be byte-identical across reruns) and live in this
/// sidecar instead.
struct Timings {
    std::map<std::string, double> phases;
    void write(const fs::path& dir) const {
        fs::create_directories(dir);
        nlohmann::json j;
        for (const auto& [k, v] : phases) j[k] = v;
        std::ofstream out(dir / "timings.json", std::ios::binary);
        out << j.dump(2) << "\n";
    }
};

void write_curve(const fs::path& dir, const std::string& name, const std::vector<double>& curve) {
    fs::create_directories(dir);
    std::ofstream out(dir / (name + ".loss.csv"), std::ios::binary);
    out << "step,loss\n";
    for (size_t i = 0; i < curve.size(); ++i) out << i << ',' << format_weight(curve[i]) << "\n";
}

ParadigmHooks checkpoint_hooks(const fs::path& out_dir, Timings& timings) {
    ParadigmHooks hooks;
    auto start = std::make_shared<double>(0.0);
    hooks.before_stage = [start](TrainState&, const std::string& phase) {
        *start = now_seconds();
        progress(phase + ": start");
    };
    hooks.after_stage = [out_dir, &timings, start](TrainState& s, const std::string& phase,
                                                   const std::vector<double>& curve) {
        timings.phases[phase] = now_seconds() - *start;
        save_checkpoint(s, out_dir / phase);
        write_curve(out_dir / phase, "train", curve);
        progress(phase + ": " + std::to_string(curve.size()) + " steps, final loss " +
                 (curve.empty() ? std::string("-") : std::to_string(curve.back())));
    };
    return hooks;
}

int run_pretrain(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    if (cfg.pretrain.epochs <= 0)
        throw std::invalid_argument("pretrain-base: config has pretrain.epochs == 0");
    TrainState s = init_state(cfg);
    StageDatasets data = build_datasets(cfg);
    progress("pretraining base for " + std::to_string(cfg.pretrain.epochs) + " epochs");
    std::vector<double> curve = pretrain_base(s, data.universal, cfg.pretrain);
    fs::path dir = fs::path(cfg.out_dir) / "base";
    save_checkpoint(s, dir);
    write_curve(dir, "pretrain", curve);
    nlohmann::json out = {{"checkpoint", dir.string()},
                          {"steps", curve.size()},
                          {"final_loss", curve.empty() ? 0.0 : curve.back()}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

int run_train_universal(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    TrainState s = args.from.empty() ? init_state(cfg) : load_checkpoint(args.from);
    StageDatasets data = build_datasets(s.config);
    if (args.from.empty() && cfg.pretrain.epochs > 0) {
        progress("pretraining base first (no --from checkpoint given)");
        pretrain_base(s, data.universal, cfg.pretrain);
    }
    progress("stage1: training the universal expert");
    std::vector<double> curve =
        train_stage(s, Stage{StageKind::stage1, ""}, data.universal, s.config.stage_optimizer(StageKind::stage1));
    fs::path dir = fs::path(cfg.out_dir) / "stage1";
    save_checkpoint(s, dir);
    write_curve(dir, "train", curve);
    nlohmann::json out = {{"checkpoint", dir.string()}, {"steps", curve.size()}, {"final_loss", curve.back()}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

int run_train_expert(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    TrainState s = load_checkpoint(args.from);
    StageDatasets data = build_datasets(s.config);

    bool missing = false;
    for (auto& [ref, st] : s.stacks) missing = missing || st.find_expert(args.task) < 0;
    if (missing) add_expert_all(s, args.task);

    OptimizerConfig opt = s.config.stage_optimizer(StageKind::stage2);
    for (const auto& t : s.config.tasks)
        if (t.id == args.task && t.stage2_epochs > 0) opt.epochs = t.stage2_epochs;
    progress("stage2: training expert '" + args.task + "'");
    std::vector<double> curve = train_stage(s, Stage{StageKind::stage2, args.task}, data.domain(args.task), opt);
    fs::path dir = fs::path(cfg.out_dir) / ("stage2-" + args.task);
    save_checkpoint(s, dir);
    write_curve(dir, "train", curve);
    nlohmann::json out = {{"checkpoint", dir.string()}, {"steps", curve.size()}, {"final_loss", curve.back()}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

/// Grafts domain experts from separately trained stage-2 checkpoints
/// into `s`. Experts arrive exactly as the child saved them
/// (float32-rounded, like any checkpoint load).
void merge_expert_checkpoints(TrainState& s, const std::vector<std::string>& merge_dirs) {
    for (const std::string& dir : merge_dirs) {
        progress("merging expert checkpoint " + dir);
        TrainState part = load_checkpoint(dir);
        std::string tag = part.stage.domain_tag;
        if (part.stage.kind != StageKind::stage2 || tag.empty())
            throw std::invalid_argument("merge: " + dir + " is not a stage-2 expert checkpoint");
        for (auto& [ref, st] : s.stacks) {
            AdapterStack& src = part.stacks.at(ref);
            int j = src.find_expert(tag);
            if (j < 0) throw std::runtime_error("merge: checkpoint " + dir + " lacks expert " + tag);
            if (st.find_expert(tag) >= 0)
                throw std::invalid_argument("merge: expert '" + tag + "' already present");
            st.domain_experts.push_back(src.domain_experts[static_cast<size_t>(j)]);
            st.domain_experts.back().A.requires_grad = false;
            st.domain_experts.back().B.requires_grad = false;
        }
    }
}

int run_train_router(const CommonArgs& args, const std::vector<std::string>& merge_dirs) {
    RunConfig cfg = load_config(args);
    TrainState s = load_checkpoint(args.from);
    merge_expert_checkpoints(s, merge_dirs);
    StageDatasets data = build_datasets(s.config);
    ensure_routers(s);
    progress("stage3: training the router");
    std::vector<double> curve = train_stage(s, Stage{StageKind::stage3, ""}, data.mixture(),
                                            s.config.stage_optimizer(StageKind::stage3));
    fs::path dir = fs::path(cfg.out_dir) / "stage3";
    save_checkpoint(s, dir);
    write_curve(dir, "train", curve);
    nlohmann::json out = {{"checkpoint", dir.string()}, {"steps", curve.size()}, {"final_loss", curve.back()}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

void spawn_expert_children(const RunConfig& cfg, const CommonArgs& args, const fs::path& out_dir) {
    std::vector<pid_t> children;
    for (const auto& t : cfg.tasks) {
        pid_t pid = fork();
        if (pid < 0) throw std::runtime_error("fork failed");
        if (pid == 0) {
            std::vector<std::string> argv_s = {g_self,    "train-expert",
                                               "--config", args.config_path,
                                               "--from",   (out_dir / "stage1").string(),
                                               "--task",   t.id,
                                               "--out",    out_dir.string()};
            if (args.seed) {
                argv_s.push_back("--seed");
                argv_s.push_back(std::to_string(*args.seed));
            }
            std::vector<char*> argv_c;
            argv_c.reserve(argv_s.size() + 1);
            for (auto& a : argv_s) argv_c.push_back(a.data());
            argv_c.push_back(nullptr);
            execv(g_self.c_str(), argv_c.data());
            std::perror("execv");
            _exit(127);
        }
        children.push_back(pid);
    }
    for (pid_t pid : children) {
        int status = 0;
        if (waitpid(pid, &status, 0) < 0 || !WIFEXITED(status) || WEXITSTATUS(status) != 0)
            throw std::runtime_error("parallel expert training failed (child exit status " +
                                     std::to_string(WIFEXITED(status) ? WEXITSTATUS(status) : -1) + ")");
    }
}

int run_all(const CommonArgs& args, bool parallel_experts) {
    RunConfig cfg = load_config(args);
    fs::path out_dir(cfg.out_dir);
    Timings timings;
    TrainState s = init_state(cfg);
    StageDatasets data = build_datasets(cfg);

    if (cfg.pretrain.epochs > 0) {
        double t0 = now_seconds();
        progress("pretraining base (" + std::to_string(cfg.pretrain.epochs) + " epochs)");
        pretrain_base(s, data.universal, cfg.pretrain);
        timings.phases["pretrain"] = now_seconds() - t0;
    }

    if (!parallel_experts) {
        run_paradigm(s, data, checkpoint_hooks(out_dir, timings));
    } else {
        // stage 1 in-process, stage 2 in one subprocess per expert
        // (children share only the frozen stage-1 snapshot), stage 3
        // after merging the resulting expert tensors
        ParadigmHooks hooks = checkpoint_hooks(out_dir, timings);
        hooks.before_stage(s, "stage1");
        std::vector<double> c1 = train_stage(s, Stage{StageKind::stage1, ""}, data.universal,
                                             cfg.stage_optimizer(StageKind::stage1));
        hooks.after_stage(s, "stage1", c1);

        double t0 = now_seconds();
        progress("stage2: spawning " + std::to_string(cfg.tasks.size()) + " expert processes");
        spawn_expert_children(cfg, args, out_dir);
        timings.phases["stage2-parallel"] = now_seconds() - t0;

        TrainState merged = load_checkpoint(out_dir / "stage1");
        std::vector<std::string> dirs;
        for (const auto& t : cfg.tasks) dirs.push_back((out_dir / ("stage2-" + t.id)).string());
        merge_expert_checkpoints(merged, dirs);
        s = std::move(merged);

        ensure_routers(s);
        hooks.before_stage(s, "stage3");
        std::vector<double> c3 = train_stage(s, Stage{StageKind::stage3, ""}, data.mixture(),
                                             cfg.stage_optimizer(StageKind::stage3));
        hooks.after_stage(s, "stage3", c3);
    }

    double t0 = now_seconds();
    progress("evaluating on held-out splits");
    EvalReport report = evaluate(s, s.config.tasks, cfg.eval_samples);
    timings.phases["eval"] = now_seconds() - t0;
    write_metrics(report, out_dir / "metrics.json");
    timings.write(out_dir);
    std::cout << metrics_json(report).dump(2) << "\n";
    return 0;
}

int run_plug_task(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    TaskSpec spec = cfg.bounded_plug_task(args.task);
    TrainState s = load_checkpoint(args.from);
    StageDatasets data = build_datasets(s.config);

    fs::path out_dir = fs::path(cfg.out_dir) / ("plug-" + args.task);
    Timings timings;
    progress("plugging new task '" + args.task + "'");
    PlugResult result = plug_new_task(s, spec, data, checkpoint_hooks(out_dir, timings));
    save_checkpoint(s, out_dir / "stage3");
    timings.write(out_dir);

    nlohmann::json audit = {{"trained_params", result.audit.trained_params},
                            {"total_adapter_params", result.audit.total_adapter_params},
                            {"param_fraction", result.audit.param_fraction},
                            {"plug_data_union", result.audit.plug_data_union},
                            {"full_data_union", result.audit.full_data_union},
                            {"data_fraction_union", result.audit.data_fraction_union},
                            {"plug_data_consumed", result.audit.plug_data_consumed},
                            {"full_data_consumed", result.audit.full_data_consumed},
                            {"data_fraction_consumed", result.audit.data_fraction_consumed},
                            {"checkpoint", (out_dir / "stage3").string()}};
    {
        std::ofstream f(out_dir / "audit.json", std::ios::binary);
        f << audit.dump(2) << "\n";
    }
    std::cout << audit.dump(2) << "\n";
    return 0;
}

int run_eval(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    TrainState s = load_checkpoint(args.from);
    std::vector<TaskSpec> tasks = s.config.tasks;
    if (!args.task.empty()) tasks = {s.config.task(args.task)};
    progress("evaluating " + std::to_string(tasks.size()) + " tasks");
    EvalReport report = evaluate(s, tasks, cfg.eval_samples);
    write_metrics(report, fs::path(cfg.out_dir) / "metrics.json");
    std::cout << metrics_json(report).dump(2) << "\n";
    return 0;
}

int run_analyze_router(const CommonArgs& args, const std::string& layers_csv) {
    RunConfig cfg = load_config(args);
    TrainState s = load_checkpoint(args.from);
    std::vector<int> layers;
    if (!layers_csv.empty()) {
        std::stringstream ss(layers_csv);
        std::string item;
        while (std::getline(ss, item, ',')) layers.push_back(std::stoi(item));
    }
    progress("collecting routing distributions");
    RouterReport report = analyze_router(s, s.config.tasks, cfg.eval_samples, layers);
    fs::path csv = fs::path(cfg.out_dir) / "router_report.csv";
    write_router_csv(report, csv);

    nlohmann::json summary;
    summary["csv"] = csv.string();
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : report.cells) {
        nlohmann::json jc = {{"layer", c.layer},
                             {"site", site_tag_name(c.site)},
                             {"task", c.task},
                             {"entropy", c.entropy}};
        for (size_t i = 0; i < c.mean.size(); ++i) jc["mean"][c.expert_labels[i]] = c.mean[i];
        cells.push_back(jc);
    }
    summary["cells"] = cells;
    std::cout << summary.dump(2) << "\n";
    return 0;
}

int run_param_audit(const CommonArgs& args, const std::string& scenario_name, int experts) {
    RunConfig cfg = load_config(args);
    AuditScenario scenario = audit_scenario_from(scenario_name);
    ParamAuditReport report;
    if (!args.from.empty()) {
        TrainState s = load_checkpoint(args.from);
        report = param_audit(s, scenario);
    } else {
        int n = experts > 0 ? experts : static_cast<int>(cfg.tasks.size());
        report = param_audit_from_config(cfg, n, scenario);
    }
    std::cout << report.to_json().dump(2) << "\n";
    return 0;
}

int run_export_data(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    StageDatasets data = build_datasets(cfg);
    fs::path dir = fs::path(cfg.out_dir) / "data";
    fs::create_directories(dir);
    auto write_file = [&](const std::string& name, const std::vector<Example>& examples) {
        std::ofstream out(dir / name, std::ios::binary);
        for (const Example& ex : examples) out << example_to_line(ex) << "\n";
        return (dir / name).string();
    };
    nlohmann::json files = nlohmann::json::array();
    files.push_back(write_file("universal_mix.tsv", data.universal));
    for (const auto& [tag, ds] : data.domains) {
        files.push_back(write_file(tag + ".train.tsv", ds));
        TaskSpec bounded = cfg.task(tag);
        bounded.max_len = cfg.base.max_seq;
        files.push_back(write_file(tag + ".eval.tsv", generate_eval(bounded, cfg.eval_samples)));
    }
    files.push_back(write_file("stage3_mixture.tsv", data.mixture()));
    std::cout << nlohmann::json{{"files", files}}.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    g_self = argv[0];
    CLI::App app{"staged mixture-of-adapters trainer"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string layers_csv, scenario = "plug_task";
    int experts = 0;
    bool parallel_experts = false;
    std::vector<std::string> merge_dirs;

    auto add_common = [&](CLI::App* cmd, bool needs_from = false, bool needs_task = false) {
        cmd->add_option("--config", args.config_path, "JSON run configuration")->required();
        cmd->add_option("--seed", args.seed, "override config seed");
        cmd->add_option("--out", args.out, "override output directory");
        auto* from = cmd->add_option("--from", args.from, "checkpoint directory to continue from");
        if (needs_from) from->required();
        auto* task = cmd->add_option("--task", args.task, "task id");
        if (needs_task) task->required();
    };

    CLI::App* pretrain = app.add_subcommand("pretrain-base", "briefly train the base weights on the universal mix");
    add_common(pretrain);
    CLI::App* universal = app.add_subcommand("train-universal", "stage 1: train only the universal expert");
    add_common(universal);
    CLI::App* expert = app.add_subcommand("train-expert", "stage 2: train one domain expert");
    add_common(expert, true, true);
    CLI::App* router = app.add_subcommand("train-router", "stage 3: freeze experts, train only the router");
    add_common(router, true);
    router->add_option("--merge", merge_dirs, "stage-2 checkpoints to merge before training");
    CLI::App* all = app.add_subcommand("run-all", "full three-stage run plus evaluation");
    add_common(all);
    all->add_flag("--parallel-experts", parallel_experts, "train stage-2 experts in parallel subprocesses");
    CLI::App* plug = app.add_subcommand("plug-task", "add a new domain to a finished run");
    add_common(plug, true, true);
    CLI::App* eval_cmd = app.add_subcommand("eval", "held-out metrics for a checkpoint");
    add_common(eval_cmd, true);
    CLI::App* analyze = app.add_subcommand("analyze-router", "per-task routing distributions");
    add_common(analyze, true);
    analyze->add_option("--layers", layers_csv, "comma-separated layer filter (default: all)");
    CLI::App* audit = app.add_subcommand("param-audit", "trainable-parameter cost report");
    add_common(audit);
    audit->add_option("--scenario", scenario, "full_retrain or plug_task")->capture_default_str();
    audit->add_option("--experts", experts, "domain expert count for the arithmetic audit");
    CLI::App* export_cmd = app.add_subcommand("export-data", "write all datasets as TSV");
    add_common(export_cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (pretrain->parsed()) return run_pretrain(args);
        if (universal->parsed()) return run_train_universal(args);
        if (expert->parsed()) return run_train_expert(args);
        if (router->parsed()) return run_train_router(args, merge_dirs);
        if (all->parsed()) return run_all(args, parallel_experts);
        if (plug->parsed()) return run_plug_task(args);
        if (eval_cmd->parsed()) return run_eval(args);
        if (analyze->parsed()) return run_analyze_router(args, layers_csv);
        if (audit->parsed()) return run_param_audit(args, scenario, experts);
        if (export_cmd->parsed()) return run_export_data(args);
        std::cerr << "error: no subcommand\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 2;
    }
}
