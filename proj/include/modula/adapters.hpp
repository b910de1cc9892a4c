#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "modula/graph.hpp"
#include "modula/rng.hpp"

namespace modula {

enum class Variant { plain, molora, flan, res };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::plain: return "plain";
        case Variant::molora: return "molora";
        case Variant::flan: return "flan";
        case Variant::res: return "res";
    }
    return "?";
}

inline Variant variant_from(const std::string& s) {
    if (s == "plain") return Variant::plain;
    if (s == "molora") return Variant::molora;
    if (s == "flan") return Variant::flan;
    if (s == "res") return Variant::res;
    throw std::invalid_argument("unknown adapter variant: " + s);
}

enum class ExpertRole { universal, domain };

/// One low-rank adapter: A is [rank, d_in], B is [d_out, rank]. B starts
/// at zero so a fresh expert contributes exactly nothing; the applied
/// contribution is always scaled by alpha/rank.
struct LoraExpert {
    Tensor A;
    Tensor B;
    int rank = 1;
    double alpha = 2.0;
    ExpertRole role = ExpertRole::domain;
    std::string domain_tag;

    double scaling() const { return alpha / rank; }
    int d_in() const { return A.shape[1]; }
    int d_out() const { return B.shape[0]; }
    int64_t param_count() const { return A.numel() + B.numel(); }
};

inline LoraExpert make_expert(int d_in, int d_out, int rank, double alpha, ExpertRole role,
                              std::string domain_tag, uint64_t seed) {
    if (rank < 1 || rank > std::min(d_in, d_out))
        throw std::invalid_argument("expert rank " + std::to_string(rank) + " out of range for dims " +
                                    std::to_string(d_in) + "->" + std::to_string(d_out));
    LoraExpert e;
    e.rank = rank;
    e.alpha = alpha;
    e.role = role;
    e.domain_tag = std::move(domain_tag);
    e.A = Tensor::zeros({rank, d_in});
    e.B = Tensor::zeros({d_out, rank});
    Rng rng(seed);
    double std = 1.0 / std::sqrt(static_cast<double>(rank));
    for (double& v : e.A.data) v = rng.normal(0.0, std);
    return e;
}

/// Linear gate over experts: W is [n_experts, d_in], one row per routed
/// expert, applied as softmax(W x) per token.
struct Router {
    Tensor W;
    int n_experts() const { return W.shape[0]; }
};

enum class StageKind { stage1, stage2, stage3, single_stage };

inline const char* stage_kind_name(StageKind k) {
    switch (k) {
        case StageKind::stage1: return "stage1";
        case StageKind::stage2: return "stage2";
        case StageKind::stage3: return "stage3";
        case StageKind::single_stage: return "single_stage";
    }
    return "?";
}

inline StageKind stage_kind_from(const std::string& s) {
    if (s == "stage1") return StageKind::stage1;
    if (s == "stage2") return StageKind::stage2;
    if (s == "stage3") return StageKind::stage3;
    if (s == "single_stage") return StageKind::single_stage;
    throw std::invalid_argument("unknown stage: " + s);
}

struct Stage {
    StageKind kind = StageKind::stage1;
    std::string domain_tag;

    std::string label() const {
        return kind == StageKind::stage2 ? std::string("stage2-") + domain_tag : stage_kind_name(kind);
    }
};

/// Per-site composition of universal expert, domain experts and router.
///
/// Router widths by variant:
///   molora  -> |domain_experts|          (no universal at all)
///   flan    -> 1 + |domain_experts|      (universal routed; row 0), or
///              |domain_experts| when flan_universal_routed is false
///   res     -> |domain_experts|          (universal feeds the trunk)
///   plain   -> no router, single expert
struct AdapterStack {
    Variant variant = Variant::res;
    int d_in = 0, d_out = 0;
    std::optional<LoraExpert> universal;
    std::vector<LoraExpert> domain_experts;
    std::optional<Router> router;
    bool residual_enabled = true;
    double leaky_slope = 0.01;
    bool flan_universal_routed = true;
    bool flan_stage2_include_universal = true;
    std::optional<int> active_expert_override;

    int find_expert(const std::string& tag) const {
        for (size_t i = 0; i < domain_experts.size(); ++i)
            if (domain_experts[i].domain_tag == tag) return static_cast<int>(i);
        return -1;
    }

    int router_width() const {
        switch (variant) {
            case Variant::plain: return 0;
            case Variant::molora: return static_cast<int>(domain_experts.size());
            case Variant::res: return static_cast<int>(domain_experts.size());
            case Variant::flan:
                return static_cast<int>(domain_experts.size()) + (flan_universal_routed ? 1 : 0);
        }
        return 0;
    }

    /// Labels of routed experts, index-aligned with router rows.
    std::vector<std::string> routed_labels() const {
        std::vector<std::string> out;
        if (variant == Variant::flan && flan_universal_routed) out.push_back("universal");
        for (const auto& e : domain_experts) out.push_back(e.domain_tag);
        return out;
    }
};

/// Fresh stack with only the universal expert (plain/flan/res). molora
/// stacks get their domain experts up front via add_expert and a zero
/// router via ensure_router.
inline AdapterStack make_stack(Variant variant, int d_in, int d_out, int universal_rank,
                               double universal_alpha, uint64_t seed) {
    AdapterStack st;
    st.variant = variant;
    st.d_in = d_in;
    st.d_out = d_out;
    if (variant != Variant::molora)
        st.universal = make_expert(d_in, d_out, universal_rank, universal_alpha, ExpertRole::universal, "",
                                   derive_seed(seed, "universal"));
    return st;
}

/// Appends a fresh zero-B expert. If a router exists its matrix gains a
/// zero row, so pre-existing routing logits are untouched; existing
/// expert tensors are never modified. res experts read the universal
/// hidden vector, so they live in the d_out space; all other variants'
/// experts read x directly.
inline void add_expert(AdapterStack& st, const std::string& domain_tag, int rank, double alpha,
                       uint64_t seed) {
    if (st.variant == Variant::plain)
        throw std::invalid_argument("add_expert: plain stacks hold exactly one adapter");
    if (domain_tag.empty()) throw std::invalid_argument("add_expert: empty domain tag");
    if (st.find_expert(domain_tag) >= 0)
        throw std::invalid_argument("add_expert: duplicate domain tag '" + domain_tag + "'");
    int expert_in = st.variant == Variant::res ? st.d_out : st.d_in;
    st.domain_experts.push_back(
        make_expert(expert_in, st.d_out, rank, alpha, ExpertRole::domain, domain_tag, seed));
    if (st.router) {
        Tensor& W = st.router->W;
        Tensor grown = Tensor::zeros({W.shape[0] + 1, W.shape[1]});
        std::copy(W.data.begin(), W.data.end(), grown.data.begin());
        grown.requires_grad = W.requires_grad;
        W = std::move(grown);
    }
}

/// Creates the router at zeros (uniform routing) if the variant uses one
/// and it does not exist yet.
inline void ensure_router(AdapterStack& st) {
    if (st.router) return;
    int width = st.router_width();
    if (width == 0) {
        if (st.variant == Variant::plain) return;
        throw std::invalid_argument("ensure_router: stack has no routed experts yet");
    }
    st.router = Router{Tensor::zeros({width, st.d_in})};
}

/// (alpha/r) * B * (A * x) for a whole [s, d_in] block of token vectors.
inline NodeId expert_delta(Graph& g, LoraExpert& e, NodeId x) {
    const Tensor& X = g.value(x);
    if (X.rank() != 2 || X.shape[1] != e.d_in())
        throw std::invalid_argument("expert_delta: input " + X.shape_str() + " does not match expert d_in " +
                                    std::to_string(e.d_in()));
    NodeId a = g.param(e.A);
    NodeId b = g.param(e.B);
    NodeId ax = g.matmul(x, g.transpose(a));
    return g.scale(g.matmul(ax, g.transpose(b)), e.scaling());
}

/// (alpha/r) * B * LeakyReLU(A * h), the domain-expert path of res
/// stacks.
inline NodeId expert_delta_res(Graph& g, LoraExpert& e, NodeId h, double slope) {
    const Tensor& H = g.value(h);
    if (H.rank() != 2 || H.shape[1] != e.d_in())
        throw std::invalid_argument("expert_delta_res: input " + H.shape_str() +
                                    " does not match expert d_in " + std::to_string(e.d_in()));
    NodeId a = g.param(e.A);
    NodeId b = g.param(e.B);
    NodeId pre = g.matmul(h, g.transpose(a));
    NodeId act = g.leaky_relu(pre, slope);
    return g.scale(g.matmul(act, g.transpose(b)), e.scaling());
}

/// softmax(W_R x) per token -> [s, n_experts]. Dense routing: every
/// expert gets a positive weight, no top-k.
inline NodeId route(Graph& g, Router& r, NodeId x) {
    const Tensor& X = g.value(x);
    if (X.rank() != 2 || X.shape[1] != r.W.shape[1])
        throw std::invalid_argument("route: input " + X.shape_str() + " does not match router d_in " +
                                    std::to_string(r.W.shape[1]));
    NodeId w = g.param(r.W);
    return g.softmax(g.matmul(x, g.transpose(w)));
}

struct StackForwardResult {
    NodeId y = -1;
    NodeId routing = -1;  // [s, n] routing coefficients, -1 when no router ran
    NodeId hidden = -1;   // res only: the universal hidden vector h
};

namespace detail {
inline NodeId weighted_expert_sum(Graph& g, NodeId acc, NodeId routing, int col,
                                  NodeId delta) {
    NodeId w = g.slice_cols(routing, col, col + 1);
    return g.add(acc, g.row_scale(delta, w));
}

[[noreturn]] inline void stage_error(const AdapterStack& st, const Stage& stage, const char* what) {
    throw std::invalid_argument(std::string(variant_name(st.variant)) + " forward at " + stage.label() +
                                ": " + what);
}
}  // namespace detail

/// y = sum_i s_i * B_i A_i x + W0 x with s = softmax(W_R x). Stage
/// agnostic: the router always participates.
inline StackForwardResult molora_forward(Graph& g, AdapterStack& st, NodeId x, NodeId w0x) {
    Stage dummy{StageKind::single_stage, ""};
    if (st.variant != Variant::molora) detail::stage_error(st, dummy, "stack variant is not molora");
    if (!st.router) detail::stage_error(st, dummy, "missing router");
    if (st.domain_experts.empty()) detail::stage_error(st, dummy, "no experts");
    if (st.router->n_experts() != static_cast<int>(st.domain_experts.size()))
        detail::stage_error(st, dummy, "router width does not match expert count");
    StackForwardResult res;
    res.routing = route(g, *st.router, x);
    NodeId y = w0x;
    for (size_t i = 0; i < st.domain_experts.size(); ++i)
        y = detail::weighted_expert_sum(g, y, res.routing, static_cast<int>(i),
                                        expert_delta(g, st.domain_experts[i], x));
    res.y = y;
    return res;
}

/// Single adapter, no router, stage agnostic: y = B A x + W0 x.
inline StackForwardResult plain_forward(Graph& g, AdapterStack& st, NodeId x, NodeId w0x) {
    Stage dummy{StageKind::single_stage, ""};
    if (st.variant != Variant::plain) detail::stage_error(st, dummy, "stack variant is not plain");
    if (!st.universal) detail::stage_error(st, dummy, "missing adapter");
    StackForwardResult res;
    res.y = g.add(expert_delta(g, *st.universal, x), w0x);
    return res;
}

/// Staged flan forward.
///   stage 1: y = E_u(x) + W0 x
///   stage 2: y = E_u(x) + E_i(x) + W0 x  (frozen universal kept in the
///            sum; drop it via flan_stage2_include_universal = false)
///   stage 3: y = sum over routed experts of s_k E_k(x) + W0 x, where
///            the universal expert occupies router row 0 unless
///            flan_universal_routed is false, in which case its delta is
///            added unrouted.
inline StackForwardResult flan_forward(Graph& g, AdapterStack& st, NodeId x, NodeId w0x,
                                       const Stage& stage) {
    if (st.variant != Variant::flan) detail::stage_error(st, stage, "stack variant is not flan");
    if (!st.universal) detail::stage_error(st, stage, "missing universal expert");
    StackForwardResult res;
    switch (stage.kind) {
        case StageKind::stage1:
            res.y = g.add(expert_delta(g, *st.universal, x), w0x);
            return res;
        case StageKind::stage2: {
            if (!st.active_expert_override) detail::stage_error(st, stage, "no active expert override");
            int i = *st.active_expert_override;
            if (i < 0 || i >= static_cast<int>(st.domain_experts.size()))
                detail::stage_error(st, stage, "active expert override out of range");
            NodeId y = g.add(expert_delta(g, st.domain_experts[static_cast<size_t>(i)], x), w0x);
            if (st.flan_stage2_include_universal) y = g.add(expert_delta(g, *st.universal, x), y);
            res.y = y;
            return res;
        }
        case StageKind::stage3: {
            if (!st.router) detail::stage_error(st, stage, "missing router");
            if (st.router->n_experts() != st.router_width())
                detail::stage_error(st, stage, "router width does not match expert count");
            res.routing = route(g, *st.router, x);
            NodeId y = w0x;
            int col = 0;
            if (st.flan_universal_routed)
                y = detail::weighted_expert_sum(g, y, res.routing, col++, expert_delta(g, *st.universal, x));
            else
                y = g.add(expert_delta(g, *st.universal, x), y);
            for (auto& e : st.domain_experts)
                y = detail::weighted_expert_sum(g, y, res.routing, col++, expert_delta(g, e, x));
            res.y = y;
            return res;
        }
        case StageKind::single_stage:
            detail::stage_error(st, stage, "flan stacks are trained in stages 1-3");
    }
    detail::stage_error(st, stage, "unreachable");
}

/// Staged res forward. The universal hidden vector h = (a_u/r_u) B* A* x
/// feeds the domain experts, which apply B_i LeakyReLU(A_i h); the
/// router reads the original x, not h.
///   stage 1: y = h + W0 x
///   stage 2: y = E_i(h) + W0 x [+ h]
///   stage 3: y = sum_i s_i E_i(h) + W0 x [+ h]
/// residual_enabled = false drops the trailing "+ h" from the composed
/// forms (stages 2 and 3). Stage 1 keeps it unconditionally; without it
/// the universal expert would receive no gradient at all and the whole
/// stack would be untrainable.
inline StackForwardResult res_forward(Graph& g, AdapterStack& st, NodeId x, NodeId w0x,
                                      const Stage& stage) {
    if (st.variant != Variant::res) detail::stage_error(st, stage, "stack variant is not res");
    if (!st.universal) detail::stage_error(st, stage, "missing universal expert");
    StackForwardResult res;
    NodeId h = expert_delta(g, *st.universal, x);
    res.hidden = h;
    switch (stage.kind) {
        case StageKind::stage1:
            res.y = g.add(h, w0x);
            return res;
        case StageKind::stage2: {
            if (!st.active_expert_override) detail::stage_error(st, stage, "no active expert override");
            int i = *st.active_expert_override;
            if (i < 0 || i >= static_cast<int>(st.domain_experts.size()))
                detail::stage_error(st, stage, "active expert override out of range");
            NodeId y = g.add(expert_delta_res(g, st.domain_experts[static_cast<size_t>(i)], h, st.leaky_slope), w0x);
            if (st.residual_enabled) y = g.add(y, h);
            res.y = y;
            return res;
        }
        case StageKind::stage3: {
            if (!st.router) detail::stage_error(st, stage, "missing router");
            if (st.domain_experts.empty()) detail::stage_error(st, stage, "no domain experts");
            if (st.router->n_experts() != static_cast<int>(st.domain_experts.size()))
                detail::stage_error(st, stage, "router width does not match expert count");
            res.routing = route(g, *st.router, x);
            NodeId y = w0x;
            for (size_t i = 0; i < st.domain_experts.size(); ++i)
                y = detail::weighted_expert_sum(g, y, res.routing, static_cast<int>(i),
                                                expert_delta_res(g, st.domain_experts[i], h, st.leaky_slope));
            if (st.residual_enabled) y = g.add(y, h);
            res.y = y;
            return res;
        }
        case StageKind::single_stage:
            detail::stage_error(st, stage, "res stacks are trained in stages 1-3");
    }
    detail::stage_error(st, stage, "unreachable");
}

/// Variant dispatch used by the model forward.
inline StackForwardResult stack_forward(Graph& g, AdapterStack& st, NodeId x, NodeId w0x,
                                        const Stage& stage) {
    switch (st.variant) {
        case Variant::plain: return plain_forward(g, st, x, w0x);
        case Variant::molora: return molora_forward(g, st, x, w0x);
        case Variant::flan: return flan_forward(g, st, x, w0x, stage);
        case Variant::res: return res_forward(g, st, x, w0x, stage);
    }
    throw std::logic_error("unreachable variant");
}

struct StackParamCount {
    int64_t universal = 0;
    int64_t per_expert = 0;  // of the first domain expert; 0 when none
    int64_t router = 0;
    int64_t total = 0;
};

/// Exact parameter counts: an expert costs r*(d_in+d_out), the router
/// n_experts*d_in.
inline StackParamCount param_count(const AdapterStack& st) {
    StackParamCount c;
    if (st.universal) c.universal = st.universal->param_count();
    c.total = c.universal;
    for (const auto& e : st.domain_experts) c.total += e.param_count();
    if (!st.domain_experts.empty()) c.per_expert = st.domain_experts[0].param_count();
    if (st.router) c.router = st.router->W.numel();
    c.total += c.router;
    return c;
}

/// Same counts from dimensions alone, for audits at arbitrary scale
/// without allocating tensors. Expert cost is rank*(expert_in + d_out),
/// where expert_in is d_out for res experts (they read h) and d_in
/// otherwise; the router always reads x, so it costs width*d_in.
inline StackParamCount param_count_from_dims(Variant variant, int d_in, int d_out, int universal_rank,
                                             int domain_rank, int n_domain_experts, bool with_router,
                                             bool flan_universal_routed = true) {
    StackParamCount c;
    if (variant != Variant::molora)
        c.universal = static_cast<int64_t>(universal_rank) * (d_in + d_out);
    int expert_in = variant == Variant::res ? d_out : d_in;
    int64_t per = static_cast<int64_t>(domain_rank) * (expert_in + d_out);
    c.per_expert = n_domain_experts > 0 ? per : 0;
    if (with_router) {
        int width = n_domain_experts;
        if (variant == Variant::flan && flan_universal_routed) width += 1;
        if (variant == Variant::plain) width = 0;
        c.router = static_cast<int64_t>(width) * d_in;
    }
    c.total = c.universal + static_cast<int64_t>(n_domain_experts) * per + c.router;
    return c;
}

}  // namespace modula
