#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "modula/adapters.hpp"
#include "modula/graph.hpp"
#include "modula/rng.hpp"

namespace modula {

enum class SiteTag { attn_q, attn_k, attn_v, attn_o, ff_in, ff_out };

constexpr SiteTag kAllSiteTags[] = {SiteTag::attn_q, SiteTag::attn_k, SiteTag::attn_v,
                                    SiteTag::attn_o, SiteTag::ff_in,  SiteTag::ff_out};

inline const char* site_tag_name(SiteTag t) {
    switch (t) {
        case SiteTag::attn_q: return "attn_q";
        case SiteTag::attn_k: return "attn_k";
        case SiteTag::attn_v: return "attn_v";
        case SiteTag::attn_o: return "attn_o";
        case SiteTag::ff_in: return "ff_in";
        case SiteTag::ff_out: return "ff_out";
    }
    return "?";
}

inline SiteTag site_tag_from(const std::string& s) {
    for (SiteTag t : kAllSiteTags)
        if (s == site_tag_name(t)) return t;
    throw std::invalid_argument("unknown adapter site tag: " + s);
}

struct SiteRef {
    int layer = 0;
    SiteTag tag = SiteTag::attn_q;

    bool operator<(const SiteRef& o) const {
        return layer != o.layer ? layer < o.layer : static_cast<int>(tag) < static_cast<int>(o.tag);
    }
    bool operator==(const SiteRef& o) const { return layer == o.layer && tag == o.tag; }

    std::string name() const { return "L" + std::to_string(layer) + "." + site_tag_name(tag); }
};

struct BaseConfig {
    int n_vocab = 64;
    int d_model = 32;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 64;
    int max_seq = 32;
    std::vector<SiteTag> adapter_sites = {SiteTag::attn_q, SiteTag::attn_v, SiteTag::ff_in};

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (n_vocab < 2) throw std::invalid_argument("base config: n_vocab must be >= 2");
        if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1)
            throw std::invalid_argument("base config: dimensions must be positive");
        if (d_model % n_heads != 0)
            throw std::invalid_argument("base config: d_model " + std::to_string(d_model) +
                                        " not divisible by n_heads " + std::to_string(n_heads));
        if (max_seq < 2) throw std::invalid_argument("base config: max_seq must be >= 2");
        for (size_t i = 0; i < adapter_sites.size(); ++i)
            for (size_t j = i + 1; j < adapter_sites.size(); ++j)
                if (adapter_sites[i] == adapter_sites[j])
                    throw std::invalid_argument("base config: duplicate adapter site");
    }

    /// (d_in, d_out) of the frozen linear layer a site wraps.
    std::pair<int, int> site_dims(SiteTag t) const {
        switch (t) {
            case SiteTag::attn_q:
            case SiteTag::attn_k:
            case SiteTag::attn_v:
            case SiteTag::attn_o: return {d_model, d_model};
            case SiteTag::ff_in: return {d_model, d_ff};
            case SiteTag::ff_out: return {d_ff, d_model};
        }
        return {0, 0};
    }
};

/// Frozen transformer weights. Every tensor keeps requires_grad = false
/// for the whole life of a paradigm run; only the pretraining harness
/// ever toggles them. Weight matrices are [d_out, d_in], applied as
/// y = x * W^T. Immutable after init: concurrent read-only forwards are
/// fine as long as each uses its own Graph.
struct BaseParams {
    struct Layer {
        Tensor attn_q, attn_k, attn_v, attn_o;  // [d, d]
        Tensor ff_in;                           // [d_ff, d]
        Tensor ff_out;                          // [d, d_ff]
        Tensor norm_attn_gain, norm_ff_gain;    // [d]
    };
    Tensor tok_embed;  // [V, d]
    Tensor pos_embed;  // [max_seq, d]
    std::vector<Layer> layers;
    Tensor final_norm_gain;  // [d]
    Tensor lm_head;          // [V, d]

    Tensor& site_weight(int layer, SiteTag tag) {
        Layer& l = layers.at(static_cast<size_t>(layer));
        switch (tag) {
            case SiteTag::attn_q: return l.attn_q;
            case SiteTag::attn_k: return l.attn_k;
            case SiteTag::attn_v: return l.attn_v;
            case SiteTag::attn_o: return l.attn_o;
            case SiteTag::ff_in: return l.ff_in;
            case SiteTag::ff_out: return l.ff_out;
        }
        throw std::logic_error("unreachable site tag");
    }
};

/// Deterministic scaled-normal init, std = 1/sqrt(d_model); norm gains
/// start at one. Same (config, seed) gives bit-identical parameters.
inline BaseParams init_base(const BaseConfig& cfg, uint64_t seed) {
    cfg.validate();
    double std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    auto normal_tensor = [&](std::vector<int> shape, const std::string& name) {
        Tensor t = Tensor::zeros(std::move(shape));
        Rng rng(derive_seed(seed, "base", name));
        for (double& v : t.data) v = rng.normal(0.0, std);
        return t;
    };
    BaseParams p;
    p.tok_embed = normal_tensor({cfg.n_vocab, cfg.d_model}, "tok_embed");
    p.pos_embed = normal_tensor({cfg.max_seq, cfg.d_model}, "pos_embed");
    p.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (int i = 0; i < cfg.n_layers; ++i) {
        auto& l = p.layers[static_cast<size_t>(i)];
        std::string prefix = "L" + std::to_string(i) + ".";
        l.attn_q = normal_tensor({cfg.d_model, cfg.d_model}, prefix + "attn_q");
        l.attn_k = normal_tensor({cfg.d_model, cfg.d_model}, prefix + "attn_k");
        l.attn_v = normal_tensor({cfg.d_model, cfg.d_model}, prefix + "attn_v");
        l.attn_o = normal_tensor({cfg.d_model, cfg.d_model}, prefix + "attn_o");
        l.ff_in = normal_tensor({cfg.d_ff, cfg.d_model}, prefix + "ff_in");
        l.ff_out = normal_tensor({cfg.d_model, cfg.d_ff}, prefix + "ff_out");
        l.norm_attn_gain = Tensor::of({cfg.d_model}, std::vector<double>(static_cast<size_t>(cfg.d_model), 1.0));
        l.norm_ff_gain = Tensor::of({cfg.d_model}, std::vector<double>(static_cast<size_t>(cfg.d_model), 1.0));
    }
    p.final_norm_gain = Tensor::of({cfg.d_model}, std::vector<double>(static_cast<size_t>(cfg.d_model), 1.0));
    p.lm_head = normal_tensor({cfg.n_vocab, cfg.d_model}, "lm_head");
    return p;
}

using StackMap = std::map<SiteRef, AdapterStack>;

/// Called once per adapted site with the post-softmax routing block
/// [s, n_experts] whenever a router participated in the forward.
using RouteTraceFn = std::function<void(const SiteRef&, const Tensor& routing)>;

namespace detail {
inline NodeId site_output(Graph& g, BaseParams& p, StackMap& stacks, int layer, SiteTag tag, NodeId x,
                          const Stage& stage, const RouteTraceFn& trace) {
    Tensor& w0 = p.site_weight(layer, tag);
    NodeId w0x = g.matmul(x, g.transpose(g.param(w0)));
    auto it = stacks.find(SiteRef{layer, tag});
    if (it == stacks.end()) return w0x;
    AdapterStack& st = it->second;
    if (st.d_in != g.value(x).shape[1] || st.d_out != w0.shape[0])
        throw std::invalid_argument("site " + SiteRef{layer, tag}.name() + ": stack dims " +
                                    std::to_string(st.d_in) + "->" + std::to_string(st.d_out) +
                                    " do not match the wrapped layer");
    StackForwardResult r = stack_forward(g, st, x, w0x, stage);
    if (trace && r.routing >= 0) trace(SiteRef{layer, tag}, g.value(r.routing));
    return r.y;
}
}  // namespace detail

/// Causal decoder forward over one token sequence -> [s, n_vocab]
/// logits. Pre-norm residual blocks with RMS normalization; the FF
/// nonlinearity is a leaky ReLU. Every linear layer named in
/// cfg.adapter_sites is produced by its adapter stack when one is
/// mapped, and by the plain frozen weight otherwise. With an empty
/// stack map this is exactly the pure base model.
inline NodeId base_forward(Graph& g, BaseParams& p, const BaseConfig& cfg, StackMap& stacks,
                           const std::vector<int>& tokens, const Stage& stage,
                           const RouteTraceFn& trace = nullptr) {
    int s = static_cast<int>(tokens.size());
    if (s < 1) throw std::invalid_argument("forward: empty token sequence");
    if (s > cfg.max_seq)
        throw std::invalid_argument("forward: sequence length " + std::to_string(s) + " exceeds max_seq " +
                                    std::to_string(cfg.max_seq));
    for (int t : tokens)
        if (t < 0 || t >= cfg.n_vocab)
            throw std::invalid_argument("forward: token " + std::to_string(t) + " outside vocabulary of " +
                                        std::to_string(cfg.n_vocab));
    for (const auto& [ref, st] : stacks) {
        if (ref.layer < 0 || ref.layer >= cfg.n_layers)
            throw std::invalid_argument("forward: stack at layer " + std::to_string(ref.layer) +
                                        " outside model with " + std::to_string(cfg.n_layers) + " layers");
    }

    std::vector<int> positions(static_cast<size_t>(s));
    for (int i = 0; i < s; ++i) positions[static_cast<size_t>(i)] = i;

    NodeId x = g.add(g.embedding(g.param(p.tok_embed), tokens),
                     g.embedding(g.param(p.pos_embed), positions));

    int dh = cfg.head_dim();
    double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int li = 0; li < cfg.n_layers; ++li) {
        auto& layer = p.layers[static_cast<size_t>(li)];

        NodeId xn = g.rms_norm(x, g.param(layer.norm_attn_gain));
        NodeId q = detail::site_output(g, p, stacks, li, SiteTag::attn_q, xn, stage, trace);
        NodeId k = detail::site_output(g, p, stacks, li, SiteTag::attn_k, xn, stage, trace);
        NodeId v = detail::site_output(g, p, stacks, li, SiteTag::attn_v, xn, stage, trace);
        std::vector<NodeId> heads;
        heads.reserve(static_cast<size_t>(cfg.n_heads));
        for (int h = 0; h < cfg.n_heads; ++h) {
            int c0 = h * dh, c1 = (h + 1) * dh;
            NodeId qh = g.slice_cols(q, c0, c1);
            NodeId kh = g.slice_cols(k, c0, c1);
            NodeId vh = g.slice_cols(v, c0, c1);
            NodeId scores = g.scale(g.matmul(qh, g.transpose(kh)), att_scale);
            NodeId probs = g.causal_softmax(scores);
            heads.push_back(g.matmul(probs, vh));
        }
        NodeId attn = detail::site_output(g, p, stacks, li, SiteTag::attn_o, g.concat_cols(heads), stage, trace);
        x = g.add(x, attn);

        NodeId xf = g.rms_norm(x, g.param(layer.norm_ff_gain));
        NodeId up = detail::site_output(g, p, stacks, li, SiteTag::ff_in, xf, stage, trace);
        NodeId act = g.leaky_relu(up, 0.01);
        NodeId down = detail::site_output(g, p, stacks, li, SiteTag::ff_out, act, stage, trace);
        x = g.add(x, down);
    }

    NodeId xn = g.rms_norm(x, g.param(p.final_norm_gain));
    return g.matmul(xn, g.transpose(g.param(p.lm_head)));
}

}  // namespace modula
