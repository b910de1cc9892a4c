#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "modula/base_model.hpp"
#include "modula/config.hpp"
#include "modula/data.hpp"

namespace modula {

struct Moments {
    Tensor m, v;
    int64_t t = 0;
};

/// Everything a run owns: frozen base, per-site stacks, stage tag,
/// optimizer moments and the step counter. Trainable flags live on the
/// tensors themselves and are a pure function of (variant, stage);
/// moments exist only for the currently trainable set.
struct TrainState {
    RunConfig config;
    BaseParams base;
    StackMap stacks;
    Stage stage{StageKind::stage1, ""};
    int64_t step = 0;
    uint64_t seed = 0;
    std::map<std::string, Moments> moments;
};

struct NamedTensor {
    std::string name;
    Tensor* tensor = nullptr;
    bool is_base = false;
    std::string role;  // "base" | "universal" | "expert:<tag>" | "router"
};

/// Stable, deterministic enumeration of every parameter tensor. The
/// order defines checkpoint blob layout.
inline std::vector<NamedTensor> enumerate_tensors(TrainState& s) {
    std::vector<NamedTensor> out;
    auto base = [&](const std::string& name, Tensor& t) { out.push_back({"base." + name, &t, true, "base"}); };
    base("tok_embed", s.base.tok_embed);
    base("pos_embed", s.base.pos_embed);
    for (size_t li = 0; li < s.base.layers.size(); ++li) {
        auto& l = s.base.layers[li];
        std::string p = "L" + std::to_string(li) + ".";
        base(p + "attn_q", l.attn_q);
        base(p + "attn_k", l.attn_k);
        base(p + "attn_v", l.attn_v);
        base(p + "attn_o", l.attn_o);
        base(p + "ff_in", l.ff_in);
        base(p + "ff_out", l.ff_out);
        base(p + "norm_attn", l.norm_attn_gain);
        base(p + "norm_ff", l.norm_ff_gain);
    }
    base("final_norm", s.base.final_norm_gain);
    base("lm_head", s.base.lm_head);

    for (auto& [ref, st] : s.stacks) {
        std::string p = "stack." + ref.name() + ".";
        if (st.universal) {
            out.push_back({p + "universal.A", &st.universal->A, false, "universal"});
            out.push_back({p + "universal.B", &st.universal->B, false, "universal"});
        }
        for (auto& e : st.domain_experts) {
            out.push_back({p + "expert." + e.domain_tag + ".A", &e.A, false, "expert:" + e.domain_tag});
            out.push_back({p + "expert." + e.domain_tag + ".B", &e.B, false, "expert:" + e.domain_tag});
        }
        if (st.router) out.push_back({p + "router.W", &st.router->W, false, "router"});
    }
    return out;
}

/// Content hashes keyed by tensor name; the freeze-soundness checks
/// compare these bit-exactly across training calls.
inline std::map<std::string, uint64_t> tensor_hashes(TrainState& s, bool only_frozen = false) {
    std::map<std::string, uint64_t> out;
    for (auto& nt : enumerate_tensors(s))
        if (!only_frozen || !nt.tensor->requires_grad) out[nt.name] = content_hash(*nt.tensor);
    return out;
}

/// Base plus universal-only stacks; no domain experts, no routers.
/// Checkpoint loading materializes the rest from the manifest.
inline TrainState init_state_skeleton(const RunConfig& cfg) {
    cfg.validate();
    TrainState s;
    s.config = cfg;
    s.seed = cfg.seed;
    s.base = init_base(cfg.base, derive_seed(cfg.seed, "base-init"));
    for (int li = 0; li < cfg.base.n_layers; ++li)
        for (SiteTag tag : cfg.base.adapter_sites) {
            SiteRef ref{li, tag};
            auto [d_in, d_out] = cfg.base.site_dims(tag);
            AdapterStack st = make_stack(cfg.variant, d_in, d_out, cfg.universal_rank,
                                         cfg.universal_alpha_or_default(), derive_seed(cfg.seed, "stack", ref.name()));
            st.leaky_slope = cfg.leaky_slope;
            st.residual_enabled = cfg.residual_enabled;
            st.flan_universal_routed = cfg.flan_universal_routed;
            st.flan_stage2_include_universal = cfg.flan_stage2_include_universal;
            s.stacks.emplace(ref, std::move(st));
        }
    return s;
}

inline TrainState init_state(const RunConfig& cfg) {
    TrainState s = init_state_skeleton(cfg);
    if (cfg.variant == Variant::molora) {
        // molora trains all experts and the router jointly in a single
        // stage, so the full population exists from the start
        for (auto& [ref, st] : s.stacks) {
            for (const auto& t : cfg.tasks)
                add_expert(st, t.id, cfg.domain_rank, cfg.domain_alpha_or_default(),
                           derive_seed(cfg.seed, "expert", t.id + "/" + ref.name()));
            ensure_router(st);
        }
        s.stage = Stage{StageKind::single_stage, ""};
    } else if (cfg.variant == Variant::plain) {
        s.stage = Stage{StageKind::single_stage, ""};
    }
    return s;
}

/// Appends a fresh expert at every site, seeded independently of
/// creation order.
inline void add_expert_all(TrainState& s, const std::string& tag) {
    for (auto& [ref, st] : s.stacks)
        add_expert(st, tag, s.config.domain_rank, s.config.domain_alpha_or_default(),
                   derive_seed(s.seed, "expert", tag + "/" + ref.name()));
}

inline void ensure_routers(TrainState& s) {
    for (auto& [ref, st] : s.stacks) ensure_router(st);
}

namespace detail {
inline void validate_stage_for_variant(Variant v, const Stage& stage) {
    bool staged = (v == Variant::flan || v == Variant::res);
    if (staged && stage.kind == StageKind::single_stage)
        throw std::invalid_argument(std::string(variant_name(v)) + " stacks are trained in stages 1-3");
    if (!staged && stage.kind != StageKind::single_stage)
        throw std::invalid_argument(std::string(variant_name(v)) + " stacks only support single_stage training");
}
}  // namespace detail

/// Applies the stage's trainable mask:
///   stage1        -> only the universal expert's A and B
///   stage2(tag)   -> only that domain expert's A and B
///   stage3        -> only the router matrices
///   single_stage  -> plain: the single adapter; molora: all experts + router
/// Base parameters are never trainable here. Optimizer moments are
/// rebuilt (at zero) for exactly the new trainable set.
inline void set_trainable(TrainState& s, const Stage& stage) {
    detail::validate_stage_for_variant(s.config.variant, stage);
    if (stage.kind == StageKind::stage2) {
        if (stage.domain_tag.empty()) throw std::invalid_argument("stage2 requires a domain tag");
        for (auto& [ref, st] : s.stacks)
            if (st.find_expert(stage.domain_tag) < 0)
                throw std::invalid_argument("stage2: unknown domain tag '" + stage.domain_tag + "'");
    }
    if (stage.kind == StageKind::stage3) {
        for (auto& [ref, st] : s.stacks)
            if (!st.router) throw std::invalid_argument("stage3 without router at site " + ref.name());
    }

    for (auto& nt : enumerate_tensors(s)) nt.tensor->requires_grad = false;
    for (auto& [ref, st] : s.stacks) {
        st.active_expert_override.reset();
        switch (stage.kind) {
            case StageKind::stage1:
                if (!st.universal)
                    throw std::invalid_argument("stage1 without universal expert at site " + ref.name());
                st.universal->A.requires_grad = true;
                st.universal->B.requires_grad = true;
                break;
            case StageKind::stage2: {
                int i = st.find_expert(stage.domain_tag);
                st.active_expert_override = i;
                st.domain_experts[static_cast<size_t>(i)].A.requires_grad = true;
                st.domain_experts[static_cast<size_t>(i)].B.requires_grad = true;
                break;
            }
            case StageKind::stage3:
                st.router->W.requires_grad = true;
                break;
            case StageKind::single_stage:
                if (s.config.variant == Variant::plain) {
                    st.universal->A.requires_grad = true;
                    st.universal->B.requires_grad = true;
                } else {  // molora
                    for (auto& e : st.domain_experts) {
                        e.A.requires_grad = true;
                        e.B.requires_grad = true;
                    }
                    if (!st.router) throw std::invalid_argument("molora stack without router at " + ref.name());
                    st.router->W.requires_grad = true;
                }
                break;
        }
    }

    s.moments.clear();
    for (auto& nt : enumerate_tensors(s))
        if (nt.tensor->requires_grad)
            s.moments[nt.name] = Moments{Tensor::zeros(nt.tensor->shape), Tensor::zeros(nt.tensor->shape), 0};
    s.stage = stage;
}

/// Adam with decoupled weight decay. Tensors without an accumulated
/// gradient this step are treated as having gradient zero.
inline void adam_step(TrainState& s, const OptimizerConfig& opt) {
    for (auto& nt : enumerate_tensors(s)) {
        Tensor& t = *nt.tensor;
        if (!t.requires_grad) continue;
        auto it = s.moments.find(nt.name);
        if (it == s.moments.end())
            throw std::logic_error("adam_step: no moments for trainable tensor " + nt.name);
        Moments& mo = it->second;
        mo.t += 1;
        double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(mo.t));
        double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(mo.t));
        bool has_grad = !t.grad.empty();
        for (size_t i = 0; i < t.data.size(); ++i) {
            double gv = has_grad ? t.grad[i] : 0.0;
            mo.m.data[i] = opt.beta1 * mo.m.data[i] + (1.0 - opt.beta1) * gv;
            mo.v.data[i] = opt.beta2 * mo.v.data[i] + (1.0 - opt.beta2) * gv * gv;
            double mhat = mo.m.data[i] / bc1;
            double vhat = mo.v.data[i] / bc2;
            t.data[i] -= opt.lr * (mhat / (std::sqrt(vhat) + opt.eps) + opt.weight_decay * t.data[i]);
        }
    }
}

inline void clear_grads(TrainState& s) {
    for (auto& nt : enumerate_tensors(s)) nt.tensor->clear_grad();
}

namespace detail {
/// One optimizer step over a padded batch: mean over the batch of each
/// example's mask-weighted mean cross entropy.
inline double train_step(TrainState& s, const Batch& b, const OptimizerConfig& opt) {
    try {
        Graph g;
        NodeId total = -1;
        for (int r = 0; r < b.rows(); ++r) {
            NodeId logits = base_forward(g, s.base, s.config.base, s.stacks,
                                         b.tokens[static_cast<size_t>(r)], s.stage);
            NodeId loss = g.cross_entropy_rows(logits, b.targets[static_cast<size_t>(r)],
                                               b.mask[static_cast<size_t>(r)]);
            total = (total < 0) ? loss : g.add(total, loss);
        }
        NodeId loss = g.scale(total, 1.0 / b.rows());
        double lv = g.value(loss).data[0];
        if (!std::isfinite(lv)) throw std::runtime_error("non-finite loss");
        g.backward(loss);
        adam_step(s, opt);
        clear_grads(s);
        s.step += 1;
        return lv;
    } catch (const std::exception& e) {
        clear_grads(s);
        throw std::runtime_error("training aborted at step " + std::to_string(s.step) + ": " + e.what());
    }
}

/// Epoch/step loop shared by stage training and base pretraining.
/// Batch order is a pure function of (seed, label, epoch). When
/// opt.max_steps > 0 the loop cycles epochs until exactly that many
/// steps ran, ignoring opt.epochs.
inline std::vector<double> run_training_loop(TrainState& s, const std::string& label,
                                             const std::vector<Example>& dataset,
                                             const OptimizerConfig& opt) {
    opt.validate();
    if (dataset.empty()) throw std::invalid_argument("training: empty dataset");
    std::vector<double> curve;
    int64_t done = 0;
    for (int epoch = 0;; ++epoch) {
        if (opt.max_steps > 0) {
            if (done >= opt.max_steps) break;
        } else if (epoch >= opt.epochs) {
            break;
        }
        std::vector<Example> order = dataset;
        Rng rng(derive_seed(s.seed, "order", label, epoch));
        rng.shuffle(order);
        for (auto& b : batch(order, opt.batch_size)) {
            if (opt.max_steps > 0 && done >= opt.max_steps) break;
            curve.push_back(train_step(s, b, opt));
            ++done;
        }
    }
    return curve;
}
}  // namespace detail

/// Runs one stage: applies the trainable mask, then deterministic
/// minibatch training. For stage2 the dataset must contain only the
/// staged domain's examples.
inline std::vector<double> train_stage(TrainState& s, const Stage& stage,
                                       const std::vector<Example>& dataset, const OptimizerConfig& opt) {
    if (dataset.empty()) throw std::invalid_argument("train_stage: empty dataset");
    if (stage.kind == StageKind::stage2)
        for (const auto& ex : dataset)
            if (ex.task_id != stage.domain_tag)
                throw std::invalid_argument("train_stage: stage2 dataset for '" + stage.domain_tag +
                                            "' contains example of task '" + ex.task_id + "'");
    set_trainable(s, stage);
    return detail::run_training_loop(s, stage.label(), dataset, opt);
}

/// Briefly trains the base weights themselves. A harness convenience for
/// making "not fine-tuned" baselines meaningful; not part of the staged
/// paradigm, which never touches base parameters. Call it on a fresh
/// state, before any adapter training.
inline std::vector<double> pretrain_base(TrainState& s, const std::vector<Example>& dataset,
                                         const PretrainConfig& pc) {
    if (pc.epochs <= 0) return {};
    std::vector<NamedTensor> all = enumerate_tensors(s);
    s.moments.clear();
    for (auto& nt : all) {
        nt.tensor->requires_grad = nt.is_base;
        if (nt.is_base)
            s.moments[nt.name] = Moments{Tensor::zeros(nt.tensor->shape), Tensor::zeros(nt.tensor->shape), 0};
    }
    OptimizerConfig opt;
    opt.lr = pc.lr;
    opt.batch_size = pc.batch_size;
    opt.epochs = pc.epochs;
    std::vector<double> curve;
    try {
        curve = detail::run_training_loop(s, "pretrain", dataset, opt);
    } catch (...) {
        for (auto& nt : enumerate_tensors(s)) nt.tensor->requires_grad = false;
        s.moments.clear();
        throw;
    }
    for (auto& nt : enumerate_tensors(s)) nt.tensor->requires_grad = false;
    s.moments.clear();
    return curve;
}

/// Stage datasets for a run, all derived deterministically from the
/// config: a universal mix for stage 1 and one dataset per domain for
/// stage 2. The router's stage-3 mixture is uniform over domains (each
/// contributes the same number of examples, subsampled when sizes
/// differ) so that router training never inherits the domains' size
/// imbalance. naive_mixture() is the plain concatenation, which is what
/// the single-adapter baselines train on.
struct StageDatasets {
    std::vector<Example> universal;
    std::vector<std::pair<std::string, std::vector<Example>>> domains;
    uint64_t seed = 0;

    std::vector<Example> mixture() const {
        size_t per_domain = SIZE_MAX;
        for (const auto& [tag, ds] : domains) per_domain = std::min(per_domain, ds.size());
        std::vector<Example> out;
        for (const auto& [tag, ds] : domains) {
            std::vector<size_t> idx(ds.size());
            for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            Rng rng(derive_seed(seed, "mixture", tag));
            rng.shuffle(idx);
            for (size_t i = 0; i < per_domain; ++i) out.push_back(ds[idx[i]]);
        }
        return out;
    }

    std::vector<Example> naive_mixture() const {
        std::vector<Example> out;
        for (const auto& [tag, ds] : domains) out.insert(out.end(), ds.begin(), ds.end());
        return out;
    }

    const std::vector<Example>& domain(const std::string& tag) const {
        for (const auto& [t, ds] : domains)
            if (t == tag) return ds;
        throw std::invalid_argument("no dataset for domain " + tag);
    }
};

inline StageDatasets build_datasets(const RunConfig& cfg) {
    StageDatasets d;
    d.seed = derive_seed(cfg.seed, "datasets");
    std::vector<TaskSpec> tasks = cfg.bounded_tasks();
    d.universal = universal_mix(tasks, derive_seed(cfg.seed, "universal-data"), cfg.universal_mix_samples);
    for (const auto& t : tasks) d.domains.emplace_back(t.id, generate(t));
    return d;
}

struct ParadigmHooks {
    std::function<void(TrainState&, const std::string& phase)> before_stage;
    std::function<void(TrainState&, const std::string& phase, const std::vector<double>& curve)> after_stage;
};

/// The full three-stage run: universal expert on the mix, then each
/// domain expert individually (each sees only its own data plus the
/// frozen universal, so training order cannot change the result), then
/// the router on the concatenated mixture.
inline std::map<std::string, std::vector<double>> run_paradigm(TrainState& s, const StageDatasets& data,
                                                               const ParadigmHooks& hooks = {}) {
    const RunConfig& cfg = s.config;
    if (cfg.variant != Variant::flan && cfg.variant != Variant::res)
        throw std::invalid_argument("run_paradigm: " + std::string(variant_name(cfg.variant)) +
                                    " is a single-stage baseline; use train_stage directly");
    for (auto& [ref, st] : s.stacks)
        if (!st.universal)
            throw std::invalid_argument("run_paradigm: universal expert absent at site " + ref.name() +
                                        "; stage 1 cannot be skipped");
    std::map<std::string, std::vector<double>> curves;
    auto run = [&](const Stage& stage, const std::vector<Example>& ds) {
        std::string label = stage.label();
        if (hooks.before_stage) hooks.before_stage(s, label);
        std::vector<double> curve = train_stage(s, stage, ds, cfg.stage_optimizer(stage.kind));
        if (hooks.after_stage) hooks.after_stage(s, label, curve);
        curves[label] = std::move(curve);
    };

    run(Stage{StageKind::stage1, ""}, data.universal);
    for (const auto& [tag, ds] : data.domains) {
        add_expert_all(s, tag);
        Stage stage{StageKind::stage2, tag};
        OptimizerConfig opt = cfg.stage_optimizer(StageKind::stage2);
        for (const auto& t : cfg.tasks)
            if (t.id == tag && t.stage2_epochs > 0) opt.epochs = t.stage2_epochs;
        std::string label = stage.label();
        if (hooks.before_stage) hooks.before_stage(s, label);
        std::vector<double> curve = train_stage(s, stage, ds, opt);
        if (hooks.after_stage) hooks.after_stage(s, label, curve);
        curves[label] = std::move(curve);
    }
    ensure_routers(s);
    run(Stage{StageKind::stage3, ""}, data.mixture());
    return curves;
}

struct PlugAudit {
    int64_t trained_params = 0;        // new expert + router, summed over sites
    int64_t total_adapter_params = 0;  // universal + every expert + router, summed over sites
    double param_fraction = 0.0;
    // union semantics: datasets counted once even when consumed by both
    // the new expert and the router retraining
    int64_t plug_data_union = 0;
    int64_t full_data_union = 0;
    double data_fraction_union = 0.0;
    // consumed semantics: every training pass counts its dataset
    int64_t plug_data_consumed = 0;
    int64_t full_data_consumed = 0;
    double data_fraction_consumed = 0.0;
};

struct PlugResult {
    PlugAudit audit;
    std::vector<double> stage2_curve, stage3_curve;
};

/// Adds one domain to a stage-3-complete state: a fresh expert at every
/// site, stage-2 training on the new data only, then router retraining
/// on the expanded mixture. Every pre-existing expert tensor stays
/// bit-identical throughout (the stage masks never select them).
/// `data` is expanded in place with the new domain.
inline PlugResult plug_new_task(TrainState& s, const TaskSpec& new_task, StageDatasets& data,
                                const ParadigmHooks& hooks = {}) {
    if (s.stage.kind != StageKind::stage3)
        throw std::invalid_argument("plug_new_task: state has not completed stage 3");
    for (auto& [ref, st] : s.stacks)
        if (st.find_expert(new_task.id) >= 0)
            throw std::invalid_argument("plug_new_task: tag collision on '" + new_task.id + "'");

    TaskSpec bounded = new_task;
    bounded.max_len = s.config.base.max_seq;
    bounded.validate();
    std::vector<Example> new_dataset = generate(bounded);

    PlugResult result;
    add_expert_all(s, new_task.id);
    {
        Stage stage{StageKind::stage2, new_task.id};
        if (hooks.before_stage) hooks.before_stage(s, stage.label());
        result.stage2_curve = train_stage(s, stage, new_dataset, s.config.stage_optimizer(StageKind::stage2));
        if (hooks.after_stage) hooks.after_stage(s, stage.label(), result.stage2_curve);
    }
    data.domains.emplace_back(new_task.id, std::move(new_dataset));
    {
        Stage stage{StageKind::stage3, ""};
        if (hooks.before_stage) hooks.before_stage(s, stage.label() + "-plus-" + new_task.id);
        result.stage3_curve = train_stage(s, stage, data.mixture(), s.config.stage_optimizer(StageKind::stage3));
        if (hooks.after_stage) hooks.after_stage(s, stage.label() + "-plus-" + new_task.id, result.stage3_curve);
    }

    // the plugged task moves into the state's task roster
    bool known = false;
    for (const auto& t : s.config.tasks) known = known || t.id == new_task.id;
    if (!known) s.config.tasks.push_back(new_task);
    std::erase_if(s.config.plug_tasks, [&](const TaskSpec& t) { return t.id == new_task.id; });

    PlugAudit& a = result.audit;
    for (auto& [ref, st] : s.stacks) {
        StackParamCount c = param_count(st);
        int i = st.find_expert(new_task.id);
        a.trained_params += st.domain_experts[static_cast<size_t>(i)].param_count() + c.router;
        a.total_adapter_params += c.total;
    }
    a.param_fraction = static_cast<double>(a.trained_params) / static_cast<double>(a.total_adapter_params);

    int64_t domains_total = 0, min_domain = INT64_MAX;
    for (const auto& [tag, ds] : data.domains) {
        domains_total += static_cast<int64_t>(ds.size());
        min_domain = std::min(min_domain, static_cast<int64_t>(ds.size()));
    }
    int64_t universal_n = static_cast<int64_t>(data.universal.size());
    int64_t new_n = static_cast<int64_t>(data.domain(new_task.id).size());
    int64_t mixture_n = min_domain * static_cast<int64_t>(data.domains.size());
    // union: the balanced router mixture plus whatever of the new
    // dataset it did not already absorb
    a.plug_data_union = mixture_n + (new_n - min_domain);
    a.full_data_union = universal_n + domains_total;
    a.data_fraction_union = static_cast<double>(a.plug_data_union) / static_cast<double>(a.full_data_union);
    // consumed: every training pass bills its dataset
    a.plug_data_consumed = new_n + mixture_n;
    a.full_data_consumed = universal_n + domains_total + mixture_n;
    a.data_fraction_consumed =
        static_cast<double>(a.plug_data_consumed) / static_cast<double>(a.full_data_consumed);
    return result;
}

}  // namespace modula
