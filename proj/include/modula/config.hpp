#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "modula/base_model.hpp"
#include "modula/data.hpp"

namespace modula {

struct OptimizerConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int batch_size = 16;
    int epochs = 1;
    int64_t max_steps = 0;  // 0 = run all epochs; otherwise stop after this many optimizer steps

    void validate() const {
        if (!(lr >= 0.0)) throw std::invalid_argument("optimizer: lr must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("optimizer: batch size must be >= 1");
        if (epochs < 1) throw std::invalid_argument("optimizer: epochs must be >= 1");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
            throw std::invalid_argument("optimizer: betas must lie in [0,1)");
        if (!(eps > 0.0)) throw std::invalid_argument("optimizer: eps must be > 0");
    }
};

/// Optional per-stage deviations from the shared optimizer settings.
struct StageOverride {
    std::optional<double> lr;
    std::optional<int> epochs;
    std::optional<int> batch_size;
    std::optional<int64_t> max_steps;

    OptimizerConfig apply(OptimizerConfig base) const {
        if (lr) base.lr = *lr;
        if (epochs) base.epochs = *epochs;
        if (batch_size) base.batch_size = *batch_size;
        if (max_steps) base.max_steps = *max_steps;
        return base;
    }
};

struct PretrainConfig {
    int epochs = 0;  // 0 disables pretraining
    double lr = 1e-3;
    int batch_size = 16;
};

/// One JSON file drives an entire run.
struct RunConfig {
    BaseConfig base;
    Variant variant = Variant::res;
    int universal_rank = 4;
    int domain_rank = 2;
    double universal_alpha = 0.0;  // 0 = default 2*rank
    double domain_alpha = 0.0;
    double leaky_slope = 0.01;
    bool residual_enabled = true;
    bool flan_universal_routed = true;
    bool flan_stage2_include_universal = true;
    std::vector<TaskSpec> tasks;
    std::vector<TaskSpec> plug_tasks;  // candidates for the plug-task workflow, not used by run-all
    int universal_mix_samples = 2048;
    int eval_samples = 256;
    OptimizerConfig optimizer;
    StageOverride stage1, stage2, stage3;
    PretrainConfig pretrain;
    uint64_t seed = 0;
    std::string out_dir = "out";

    double universal_alpha_or_default() const { return universal_alpha > 0.0 ? universal_alpha : 2.0 * universal_rank; }
    double domain_alpha_or_default() const { return domain_alpha > 0.0 ? domain_alpha : 2.0 * domain_rank; }

    OptimizerConfig stage_optimizer(StageKind kind) const {
        switch (kind) {
            case StageKind::stage1: return stage1.apply(optimizer);
            case StageKind::stage2: return stage2.apply(optimizer);
            case StageKind::stage3: return stage3.apply(optimizer);
            case StageKind::single_stage: return optimizer;
        }
        return optimizer;
    }

    const TaskSpec& task(const std::string& id) const {
        for (const auto& t : tasks)
            if (t.id == id) return t;
        throw std::invalid_argument("unknown task id: " + id);
    }

    void validate() const {
        base.validate();
        optimizer.validate();
        if (universal_rank < 1 || domain_rank < 1)
            throw std::invalid_argument("config: adapter ranks must be >= 1");
        if (tasks.empty()) throw std::invalid_argument("config: no tasks");
        if (universal_mix_samples < 1) throw std::invalid_argument("config: universal_mix_samples must be >= 1");
        if (eval_samples < 1) throw std::invalid_argument("config: eval_samples must be >= 1");
        std::vector<TaskSpec> all = tasks;
        all.insert(all.end(), plug_tasks.begin(), plug_tasks.end());
        for (size_t i = 0; i < all.size(); ++i) {
            all[i].validate();
            if (all[i].marker >= base.n_vocab || all[i].vocab_hi > base.n_vocab)
                throw std::invalid_argument("task " + all[i].id + ": tokens outside base vocabulary");
            for (size_t j = i + 1; j < all.size(); ++j) {
                if (all[i].id == all[j].id)
                    throw std::invalid_argument("config: duplicate task id " + all[i].id);
                if (all[i].marker == all[j].marker)
                    throw std::invalid_argument("config: tasks " + all[i].id + " and " + all[j].id +
                                                " share marker token " + std::to_string(all[i].marker));
            }
        }
    }

    /// Tasks with max_len stamped from the base config.
    std::vector<TaskSpec> bounded_tasks() const {
        std::vector<TaskSpec> out = tasks;
        for (auto& t : out) t.max_len = base.max_seq;
        return out;
    }
    TaskSpec bounded_plug_task(const std::string& id) const {
        for (TaskSpec t : plug_tasks) {
            if (t.id == id) {
                t.max_len = base.max_seq;
                return t;
            }
        }
        throw std::invalid_argument("unknown plug task id: " + id);
    }
};

// ---- JSON ----------------------------------------------------------

inline nlohmann::json to_json(const BaseConfig& c) {
    nlohmann::json sites = nlohmann::json::array();
    for (SiteTag t : c.adapter_sites) sites.push_back(site_tag_name(t));
    return {{"n_vocab", c.n_vocab}, {"d_model", c.d_model}, {"n_layers", c.n_layers},
            {"n_heads", c.n_heads}, {"d_ff", c.d_ff},       {"max_seq", c.max_seq},
            {"adapter_sites", sites}};
}

inline BaseConfig base_config_from_json(const nlohmann::json& j) {
    BaseConfig c;
    c.n_vocab = j.value("n_vocab", c.n_vocab);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.max_seq = j.value("max_seq", c.max_seq);
    if (j.contains("adapter_sites")) {
        c.adapter_sites.clear();
        for (const auto& s : j.at("adapter_sites")) c.adapter_sites.push_back(site_tag_from(s.get<std::string>()));
    }
    return c;
}

inline nlohmann::json to_json(const TaskSpec& t) {
    return {{"id", t.id},
            {"kind", gen_kind_name(t.kind)},
            {"marker", t.marker},
            {"vocab_lo", t.vocab_lo},
            {"vocab_hi", t.vocab_hi},
            {"sample_count", t.sample_count},
            {"payload_len", t.payload_len},
            {"seed", t.seed},
            {"stage2_epochs", t.stage2_epochs}};
}

inline TaskSpec task_spec_from_json(const nlohmann::json& j) {
    TaskSpec t;
    t.id = j.at("id").get<std::string>();
    t.kind = gen_kind_from(j.at("kind").get<std::string>());
    t.marker = j.at("marker").get<int>();
    t.vocab_lo = j.at("vocab_lo").get<int>();
    t.vocab_hi = j.at("vocab_hi").get<int>();
    t.sample_count = j.value("sample_count", t.sample_count);
    t.payload_len = j.value("payload_len", t.payload_len);
    t.seed = j.value("seed", t.seed);
    t.stage2_epochs = j.value("stage2_epochs", t.stage2_epochs);
    return t;
}

inline nlohmann::json to_json(const OptimizerConfig& o) {
    return {{"lr", o.lr},           {"beta1", o.beta1},
            {"beta2", o.beta2},     {"eps", o.eps},
            {"weight_decay", o.weight_decay}, {"batch_size", o.batch_size},
            {"epochs", o.epochs},   {"max_steps", o.max_steps}};
}

inline OptimizerConfig optimizer_from_json(const nlohmann::json& j) {
    OptimizerConfig o;
    o.lr = j.value("lr", o.lr);
    o.beta1 = j.value("beta1", o.beta1);
    o.beta2 = j.value("beta2", o.beta2);
    o.eps = j.value("eps", o.eps);
    o.weight_decay = j.value("weight_decay", o.weight_decay);
    o.batch_size = j.value("batch_size", o.batch_size);
    o.epochs = j.value("epochs", o.epochs);
    o.max_steps = j.value("max_steps", o.max_steps);
    return o;
}

inline nlohmann::json to_json(const StageOverride& s) {
    nlohmann::json j = nlohmann::json::object();
    if (s.lr) j["lr"] = *s.lr;
    if (s.epochs) j["epochs"] = *s.epochs;
    if (s.batch_size) j["batch_size"] = *s.batch_size;
    if (s.max_steps) j["max_steps"] = *s.max_steps;
    return j;
}

inline StageOverride stage_override_from_json(const nlohmann::json& j) {
    StageOverride s;
    if (j.contains("lr")) s.lr = j.at("lr").get<double>();
    if (j.contains("epochs")) s.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) s.batch_size = j.at("batch_size").get<int>();
    if (j.contains("max_steps")) s.max_steps = j.at("max_steps").get<int64_t>();
    return s;
}

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& t : c.tasks) tasks.push_back(to_json(t));
    nlohmann::json plug = nlohmann::json::array();
    for (const auto& t : c.plug_tasks) plug.push_back(to_json(t));
    return {{"base", to_json(c.base)},
            {"variant", variant_name(c.variant)},
            {"universal_rank", c.universal_rank},
            {"domain_rank", c.domain_rank},
            {"universal_alpha", c.universal_alpha},
            {"domain_alpha", c.domain_alpha},
            {"leaky_slope", c.leaky_slope},
            {"residual_enabled", c.residual_enabled},
            {"flan_universal_routed", c.flan_universal_routed},
            {"flan_stage2_include_universal", c.flan_stage2_include_universal},
            {"tasks", tasks},
            {"plug_tasks", plug},
            {"universal_mix_samples", c.universal_mix_samples},
            {"eval_samples", c.eval_samples},
            {"optimizer", to_json(c.optimizer)},
            {"stage1", to_json(c.stage1)},
            {"stage2", to_json(c.stage2)},
            {"stage3", to_json(c.stage3)},
            {"pretrain", {{"epochs", c.pretrain.epochs}, {"lr", c.pretrain.lr}, {"batch_size", c.pretrain.batch_size}}},
            {"seed", c.seed},
            {"out_dir", c.out_dir}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    if (j.contains("base")) c.base = base_config_from_json(j.at("base"));
    if (j.contains("variant")) c.variant = variant_from(j.at("variant").get<std::string>());
    c.universal_rank = j.value("universal_rank", c.universal_rank);
    c.domain_rank = j.value("domain_rank", c.domain_rank);
    c.universal_alpha = j.value("universal_alpha", c.universal_alpha);
    c.domain_alpha = j.value("domain_alpha", c.domain_alpha);
    c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
    c.residual_enabled = j.value("residual_enabled", c.residual_enabled);
    c.flan_universal_routed = j.value("flan_universal_routed", c.flan_universal_routed);
    c.flan_stage2_include_universal = j.value("flan_stage2_include_universal", c.flan_stage2_include_universal);
    if (j.contains("tasks"))
        for (const auto& t : j.at("tasks")) c.tasks.push_back(task_spec_from_json(t));
    if (j.contains("plug_tasks"))
        for (const auto& t : j.at("plug_tasks")) c.plug_tasks.push_back(task_spec_from_json(t));
    c.universal_mix_samples = j.value("universal_mix_samples", c.universal_mix_samples);
    c.eval_samples = j.value("eval_samples", c.eval_samples);
    if (j.contains("optimizer")) c.optimizer = optimizer_from_json(j.at("optimizer"));
    if (j.contains("stage1")) c.stage1 = stage_override_from_json(j.at("stage1"));
    if (j.contains("stage2")) c.stage2 = stage_override_from_json(j.at("stage2"));
    if (j.contains("stage3")) c.stage3 = stage_override_from_json(j.at("stage3"));
    if (j.contains("pretrain")) {
        const auto& p = j.at("pretrain");
        c.pretrain.epochs = p.value("epochs", c.pretrain.epochs);
        c.pretrain.lr = p.value("lr", c.pretrain.lr);
        c.pretrain.batch_size = p.value("batch_size", c.pretrain.batch_size);
    }
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot read config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("config file " + path + " is not valid JSON: " + e.what());
    }
    RunConfig c = run_config_from_json(j);
    c.validate();
    return c;
}

}  // namespace modula
