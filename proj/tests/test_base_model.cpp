#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <thread>

#include "modula/base_model.hpp"
#include "modula/grad_check.hpp"

using namespace modula;

namespace {

BaseConfig tiny_config() {
    BaseConfig cfg;
    cfg.n_vocab = 16;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    cfg.max_seq = 8;
    return cfg;
}

std::vector<double> forward_values(BaseParams& p, const BaseConfig& cfg, StackMap& stacks,
                                   const std::vector<int>& tokens,
                                   const Stage& stage = Stage{StageKind::stage1, ""}) {
    Graph g;
    NodeId logits = base_forward(g, p, cfg, stacks, tokens, stage);
    return g.value(logits).data;
}

uint64_t params_hash(BaseParams& p) {
    uint64_t h = content_hash(p.tok_embed) ^ content_hash(p.pos_embed) ^ content_hash(p.lm_head) ^
                 content_hash(p.final_norm_gain);
    for (auto& l : p.layers)
        h ^= content_hash(l.attn_q) ^ content_hash(l.attn_k) ^ content_hash(l.attn_v) ^
             content_hash(l.attn_o) ^ content_hash(l.ff_in) ^ content_hash(l.ff_out) ^
             content_hash(l.norm_attn_gain) ^ content_hash(l.norm_ff_gain);
    return h;
}

}  // namespace

TEST_CASE("config validation") {
    BaseConfig cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.head_dim() == 4);

    BaseConfig odd = cfg;
    odd.d_model = 10;
    odd.n_heads = 4;
    CHECK_THROWS_WITH_AS(odd.validate(), doctest::Contains("not divisible"), std::invalid_argument);

    BaseConfig shallow = cfg;
    shallow.max_seq = 1;
    CHECK_THROWS_AS(shallow.validate(), std::invalid_argument);

    BaseConfig dup = cfg;
    dup.adapter_sites = {SiteTag::attn_q, SiteTag::attn_q};
    CHECK_THROWS_AS(dup.validate(), std::invalid_argument);

    CHECK(cfg.site_dims(SiteTag::ff_in) == std::pair<int, int>{8, 12});
    CHECK(cfg.site_dims(SiteTag::ff_out) == std::pair<int, int>{12, 8});
    CHECK(cfg.site_dims(SiteTag::attn_v) == std::pair<int, int>{8, 8});
}

TEST_CASE("init_base is deterministic and frozen") {
    BaseConfig cfg = tiny_config();
    BaseParams a = init_base(cfg, 42);
    BaseParams b = init_base(cfg, 42);
    CHECK(params_hash(a) == params_hash(b));
    BaseParams c = init_base(cfg, 43);
    CHECK(params_hash(a) != params_hash(c));

    CHECK_FALSE(a.tok_embed.requires_grad);
    for (auto& l : a.layers) CHECK_FALSE(l.attn_q.requires_grad);
    CHECK(a.layers[0].norm_attn_gain.data == std::vector<double>(8, 1.0));
}

TEST_CASE("forward shape, bounds and length errors") {
    BaseConfig cfg = tiny_config();
    BaseParams p = init_base(cfg, 1);
    StackMap none;
    std::vector<double> logits = forward_values(p, cfg, none, {3});
    CHECK(logits.size() == 16);  // seq 1 x vocab 16

    Graph g;
    CHECK_THROWS_WITH_AS(base_forward(g, p, cfg, none, {1, 2, 3, 4, 5, 6, 7, 8, 9}, Stage{}),
                         doctest::Contains("exceeds max_seq"), std::invalid_argument);
    CHECK_THROWS_AS(base_forward(g, p, cfg, none, {}, Stage{}), std::invalid_argument);
    CHECK_THROWS_WITH_AS(base_forward(g, p, cfg, none, {16}, Stage{}), doctest::Contains("vocabulary"),
                         std::invalid_argument);
}

TEST_CASE("zero adapters leave the base bit-exact at every site tag") {
    BaseConfig cfg = tiny_config();
    cfg.adapter_sites.assign(std::begin(kAllSiteTags), std::end(kAllSiteTags));
    BaseParams p = init_base(cfg, 7);
    std::vector<int> tokens = {1, 4, 9, 2};

    StackMap none;
    std::vector<double> bare = forward_values(p, cfg, none, tokens);

    for (Variant v : {Variant::plain, Variant::molora, Variant::flan, Variant::res}) {
        StackMap stacks;
        for (SiteTag tag : cfg.adapter_sites) {
            auto [din, dout] = cfg.site_dims(tag);
            AdapterStack st = make_stack(v, din, dout, 2, 4.0, derive_seed(9, site_tag_name(tag)));
            if (v != Variant::plain) {
                // two fresh domain experts; B stays zero
                add_expert(st, "a", 2, 4.0, derive_seed(10, site_tag_name(tag)));
                add_expert(st, "b", 2, 4.0, derive_seed(11, site_tag_name(tag)));
            }
            if (v == Variant::molora) ensure_router(st);
            stacks.emplace(SiteRef{0, tag}, std::move(st));
        }
        Stage stage = (v == Variant::plain || v == Variant::molora) ? Stage{StageKind::single_stage, ""}
                                                                    : Stage{StageKind::stage1, ""};
        std::vector<double> adapted = forward_values(p, cfg, stacks, tokens, stage);
        CHECK(adapted == bare);  // bit-exact
    }
}

TEST_CASE("causality: edits after position t never change logits at t") {
    BaseConfig cfg = tiny_config();
    BaseParams p = init_base(cfg, 21);
    StackMap none;
    std::vector<int> tokens = {1, 5, 3, 7, 2, 11, 8, 4};  // length 8
    std::vector<double> ref = forward_values(p, cfg, none, tokens);
    int v = cfg.n_vocab;

    for (size_t edit = 0; edit < tokens.size(); ++edit) {
        std::vector<int> mutated = tokens;
        mutated[edit] = (tokens[edit] + 5) % v;
        std::vector<double> out = forward_values(p, cfg, none, mutated);
        for (size_t pos = 0; pos < tokens.size(); ++pos) {
            bool should_match = pos < edit;
            bool does_match = true;
            for (int j = 0; j < v; ++j)
                does_match = does_match && out[pos * static_cast<size_t>(v) + static_cast<size_t>(j)] ==
                                               ref[pos * static_cast<size_t>(v) + static_cast<size_t>(j)];
            if (should_match) CHECK(does_match);
            if (pos == edit) CHECK_FALSE(does_match);  // the edited position itself must react
        }
    }
}

TEST_CASE("adapted sites change the forward once B is nonzero") {
    BaseConfig cfg = tiny_config();
    BaseParams p = init_base(cfg, 31);
    std::vector<int> tokens = {1, 2, 3};

    StackMap none;
    std::vector<double> bare = forward_values(p, cfg, none, tokens);

    StackMap stacks;
    AdapterStack st = make_stack(Variant::res, 8, 8, 2, 4.0, 5);
    Rng rng(6);
    for (double& x : st.universal->B.data) x = rng.normal(0.0, 0.3);
    stacks.emplace(SiteRef{0, SiteTag::attn_q}, std::move(st));
    std::vector<double> adapted = forward_values(p, cfg, stacks, tokens);
    CHECK(adapted != bare);
}

TEST_CASE("stack dimension mismatch is rejected") {
    BaseConfig cfg = tiny_config();
    BaseParams p = init_base(cfg, 41);
    StackMap stacks;
    stacks.emplace(SiteRef{0, SiteTag::ff_in}, make_stack(Variant::res, 8, 8, 2, 4.0, 5));  // d_out should be 12
    Graph g;
    CHECK_THROWS_WITH_AS(base_forward(g, p, cfg, stacks, {1, 2}, Stage{StageKind::stage1, ""}),
                         doctest::Contains("do not match"), std::invalid_argument);

    StackMap deep;
    deep.emplace(SiteRef{3, SiteTag::attn_q}, make_stack(Variant::res, 8, 8, 2, 4.0, 5));
    CHECK_THROWS_WITH_AS(base_forward(g, p, cfg, deep, {1, 2}, Stage{StageKind::stage1, ""}),
                         doctest::Contains("outside model"), std::invalid_argument);
}

TEST_CASE("full model gradients match finite differences") {
    BaseConfig cfg = tiny_config();
    BaseParams p = init_base(cfg, 51);
    StackMap stacks;
    AdapterStack st = make_stack(Variant::res, 8, 8, 2, 4.0, 52);
    Rng rng(53);
    for (double& v : st.universal->B.data) v = rng.normal(0.0, 0.4);
    add_expert(st, "m", 2, 4.0, 54);
    for (double& v : st.domain_experts[0].B.data) v = rng.normal(0.0, 0.4);
    ensure_router(st);
    for (double& v : st.router->W.data) v = rng.normal(0.0, 0.5);
    stacks.emplace(SiteRef{0, SiteTag::attn_q}, std::move(st));
    AdapterStack ff = make_stack(Variant::res, 8, 12, 2, 4.0, 55);
    for (double& v : ff.universal->B.data) v = rng.normal(0.0, 0.4);
    add_expert(ff, "m", 2, 4.0, 56);
    for (double& v : ff.domain_experts[0].B.data) v = rng.normal(0.0, 0.4);
    ensure_router(ff);
    stacks.emplace(SiteRef{0, SiteTag::ff_in}, std::move(ff));

    std::vector<int> tokens = {1, 7, 3};
    auto build = [&](Graph& g) {
        NodeId logits = base_forward(g, p, cfg, stacks, tokens, Stage{StageKind::stage3, ""});
        return g.cross_entropy_rows(logits, {7, 3, 9}, {1.0, 1.0, 1.0});
    };
    AdapterStack& sq = stacks.at(SiteRef{0, SiteTag::attn_q});
    AdapterStack& sf = stacks.at(SiteRef{0, SiteTag::ff_in});
    GradCheckReport r = grad_check(build,
                                   {{"q.uA", &sq.universal->A},
                                    {"q.uB", &sq.universal->B},
                                    {"q.eA", &sq.domain_experts[0].A},
                                    {"q.eB", &sq.domain_experts[0].B},
                                    {"q.rW", &sq.router->W},
                                    {"f.uA", &sf.universal->A},
                                    {"f.uB", &sf.universal->B},
                                    {"f.eA", &sf.domain_experts[0].A},
                                    {"f.eB", &sf.domain_experts[0].B},
                                    {"f.rW", &sf.router->W}},
                                   1e-5, 2e-5);
    for (const auto& e : r.entries) {
        INFO(e.name, " err=", e.max_rel_err);
        CHECK(e.ok);
    }
}

TEST_CASE("concurrent read-only forwards agree") {
    BaseConfig cfg = tiny_config();
    BaseParams p = init_base(cfg, 61);
    StackMap stacks;
    stacks.emplace(SiteRef{0, SiteTag::attn_v}, make_stack(Variant::res, 8, 8, 2, 4.0, 62));
    std::vector<int> tokens = {2, 9, 4, 1};

    std::vector<double> main_thread = forward_values(p, cfg, stacks, tokens);
    std::vector<double> worker1, worker2;
    std::thread t1([&] { worker1 = forward_values(p, cfg, stacks, tokens); });
    std::thread t2([&] { worker2 = forward_values(p, cfg, stacks, tokens); });
    t1.join();
    t2.join();
    CHECK(worker1 == main_thread);
    CHECK(worker2 == main_thread);
}
