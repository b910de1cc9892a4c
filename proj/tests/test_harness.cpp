#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "modula/audit.hpp"
#include "modula/evaluate.hpp"
#include "modula/router_analysis.hpp"

using namespace modula;
namespace fs = std::filesystem;

namespace {

RunConfig harness_config(Variant v = Variant::res) {
    RunConfig cfg;
    cfg.base.n_vocab = 32;
    cfg.base.d_model = 16;
    cfg.base.n_layers = 2;
    cfg.base.n_heads = 2;
    cfg.base.d_ff = 24;
    cfg.base.max_seq = 16;
    cfg.base.adapter_sites = {SiteTag::attn_o, SiteTag::ff_in};
    cfg.variant = v;
    cfg.universal_rank = 2;
    cfg.domain_rank = 1;
    cfg.universal_mix_samples = 64;
    cfg.eval_samples = 32;
    cfg.optimizer.batch_size = 16;
    cfg.seed = 9;
    TaskSpec a;
    a.id = "cp";
    a.kind = GenKind::copy;
    a.marker = 2;
    a.vocab_lo = 8;
    a.vocab_hi = 16;
    a.sample_count = 64;
    a.payload_len = 3;
    a.seed = 41;
    TaskSpec b = a;
    b.id = "rv";
    b.kind = GenKind::reverse;
    b.marker = 3;
    b.vocab_lo = 16;
    b.vocab_hi = 24;
    b.seed = 42;
    TaskSpec c = a;
    c.id = "pr";
    c.kind = GenKind::parity;
    c.marker = 4;
    c.vocab_lo = 24;
    c.vocab_hi = 32;
    c.seed = 43;
    cfg.tasks = {a, b, c};
    return cfg;
}

}  // namespace

TEST_CASE("macro averages are the plain arithmetic mean of per-task values") {
    RunConfig cfg = harness_config();
    TrainState s = init_state(cfg);
    EvalReport r = evaluate(s, cfg.tasks, 16);
    REQUIRE(r.per_task.size() == 3);
    double acc = 0.0, loss = 0.0;
    for (const auto& [id, m] : r.per_task) {
        acc += m.accuracy;
        loss += m.mean_loss;
        CHECK(m.n_examples == 16);
    }
    CHECK(r.macro_accuracy == doctest::Approx(acc / 3).epsilon(1e-15));
    CHECK(r.macro_loss == doctest::Approx(loss / 3).epsilon(1e-15));
}

TEST_CASE("a random-weight model scores at chance level") {
    RunConfig cfg = harness_config();
    TrainState s = init_state(cfg);  // no pretraining at all
    EvalReport r = evaluate(s, {cfg.tasks[0]}, 256);
    // vocab 32, answer length 3: chance is 32^-3 < 1e-3
    CHECK(r.per_task.at("cp").accuracy <= 1e-3);
    CHECK(r.per_task.at("cp").mean_loss > 1.0);
}

TEST_CASE("fresh res adapters leave metrics identical to the bare base") {
    RunConfig cfg = harness_config();
    TrainState with_stacks = init_state(cfg);
    EvalReport adapted = evaluate(with_stacks, cfg.tasks, 16);

    RunConfig bare_cfg = cfg;
    bare_cfg.base.adapter_sites = {};
    TrainState bare = init_state(bare_cfg);
    EvalReport plain = evaluate(bare, bare_cfg.tasks, 16);

    for (const auto& [id, m] : adapted.per_task) {
        CHECK(m.accuracy == plain.per_task.at(id).accuracy);
        CHECK(m.mean_loss == doctest::Approx(plain.per_task.at(id).mean_loss).epsilon(1e-14));
    }
}

TEST_CASE("batched training loss equals the mean of unbatched example losses") {
    RunConfig cfg = harness_config();
    TrainState s = init_state(cfg);
    std::vector<Example> examples = generate(cfg.bounded_tasks()[0]);
    examples.resize(8);

    // padded batch loss via the training path (no update: lr 0)
    std::vector<Batch> batches = batch(examples, 8);
    REQUIRE(batches.size() == 1);
    Graph g;
    NodeId total = -1;
    for (int r = 0; r < batches[0].rows(); ++r) {
        NodeId logits = base_forward(g, s.base, cfg.base, s.stacks, batches[0].tokens[static_cast<size_t>(r)], s.stage);
        NodeId l = g.cross_entropy_rows(logits, batches[0].targets[static_cast<size_t>(r)],
                                        batches[0].mask[static_cast<size_t>(r)]);
        total = total < 0 ? l : g.add(total, l);
    }
    double batched = g.value(g.scale(total, 1.0 / batches[0].rows())).data[0];

    double unbatched = 0.0;
    for (const Example& ex : examples) unbatched += example_loss(s, ex);
    unbatched /= static_cast<double>(examples.size());

    CHECK(std::fabs(batched - unbatched) <= 1e-10);
}

TEST_CASE("analyze_router: uniform cells for a zero router, sums to one") {
    RunConfig cfg = harness_config();
    TrainState s = init_state(cfg);
    for (const auto& t : cfg.tasks) add_expert_all(s, t.id);

    CHECK_THROWS_WITH_AS(analyze_router(s, cfg.tasks, 8), doctest::Contains("stage-3"),
                         std::invalid_argument);

    ensure_routers(s);
    s.stage = Stage{StageKind::stage3, ""};
    RouterReport r = analyze_router(s, cfg.tasks, 8);
    CHECK(r.cells.size() == 3 * 2 * 2);  // tasks x layers x sites
    for (const auto& cell : r.cells) {
        REQUIRE(cell.mean.size() == 3);
        double sum = 0.0;
        for (double w : cell.mean) {
            CHECK(w == doctest::Approx(1.0 / 3).epsilon(1e-12));  // zero router: uniform
            sum += w;
        }
        CHECK(std::fabs(sum - 1.0) <= 1e-6);
        CHECK(cell.entropy == doctest::Approx(std::log(3.0)).epsilon(1e-9));
    }
    for (const auto& t : cfg.tasks)
        CHECK(r.matching_weight(0, SiteTag::ff_in, t.id) == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("analyze_router respects the layer filter and writes the csv grid") {
    RunConfig cfg = harness_config();
    TrainState s = init_state(cfg);
    for (const auto& t : cfg.tasks) add_expert_all(s, t.id);
    ensure_routers(s);
    s.stage = Stage{StageKind::stage3, ""};

    RouterReport only1 = analyze_router(s, cfg.tasks, 4, {1});
    CHECK(only1.cells.size() == 3 * 1 * 2);
    for (const auto& c : only1.cells) CHECK(c.layer == 1);

    fs::path csv = fs::temp_directory_path() / "modula_router_test.csv";
    write_router_csv(only1, csv);
    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    CHECK(header == "layer,site,task,expert,mean_weight,entropy");
    int rows = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 3 * 1 * 2 * 3);  // one row per cell per expert
    fs::remove(csv);
}

TEST_CASE("param audit closed forms and cross-checks") {
    RunConfig cfg = harness_config();

    ParamAuditReport full = param_audit_from_config(cfg, 3, AuditScenario::full_retrain);
    CHECK(full.fraction == 1.0);
    CHECK(full.trained == full.total);

    ParamAuditReport plug = param_audit_from_config(cfg, 3, AuditScenario::plug_task);
    CHECK(plug.fraction < 1.0);
    CHECK(plug.trained == plug.router_params + plug.expert_params / 3);

    // one domain expert: the plug fraction is maximal over expert counts
    double prev = param_audit_from_config(cfg, 1, AuditScenario::plug_task).fraction;
    for (int n = 2; n <= 6; ++n) {
        double f = param_audit_from_config(cfg, n, AuditScenario::plug_task).fraction;
        CHECK(f < prev);
        prev = f;
    }

    // audit of an actual state matches the arithmetic audit exactly
    TrainState s = init_state(cfg);
    for (const auto& t : cfg.tasks) add_expert_all(s, t.id);
    ensure_routers(s);
    ParamAuditReport actual = param_audit(s, AuditScenario::plug_task);
    CHECK(actual.trained == plug.trained);
    CHECK(actual.total == plug.total);
    CHECK(actual.universal_params == plug.universal_params);
    CHECK(actual.router_params == plug.router_params);
    CHECK(actual.fraction == doctest::Approx(plug.fraction).epsilon(1e-15));

    // paper-scale dims go through the arithmetic path without allocating
    RunConfig big = cfg;
    big.base.n_vocab = 32000;
    big.base.d_model = 4096;
    big.base.d_ff = 11008;
    big.base.n_layers = 32;
    big.base.n_heads = 32;
    big.base.max_seq = 4096;
    big.universal_rank = 16;
    big.domain_rank = 8;
    ParamAuditReport paper = param_audit_from_config(big, 4, AuditScenario::plug_task);
    CHECK(paper.total > 0);
    CHECK(paper.fraction > 0.0);
    CHECK(paper.fraction < 0.5);
}

TEST_CASE("metrics json is stable and carries every field") {
    RunConfig cfg = harness_config();
    TrainState s = init_state(cfg);
    EvalReport r = evaluate(s, cfg.tasks, 4);
    nlohmann::json j = metrics_json(r);
    CHECK(j.contains("tasks"));
    CHECK(j.at("tasks").size() == 3);
    CHECK(j.contains("macro_accuracy"));
    CHECK(j.contains("macro_loss"));
    CHECK(j.contains("step"));
    CHECK(j.dump() == metrics_json(r).dump());

    fs::path out = fs::temp_directory_path() / "modula_metrics_test" / "metrics.json";
    write_metrics(r, out);
    std::ifstream in(out);
    nlohmann::json back;
    in >> back;
    CHECK(back == j);
    fs::remove_all(out.parent_path());
}

TEST_CASE("stage-2 states evaluate under their own forward semantics") {
    RunConfig cfg = harness_config();
    cfg.optimizer.epochs = 1;
    TrainState s = init_state(cfg);
    StageDatasets data = build_datasets(cfg);
    train_stage(s, Stage{StageKind::stage1, ""}, data.universal, cfg.optimizer);
    add_expert_all(s, "cp");
    train_stage(s, Stage{StageKind::stage2, "cp"}, data.domain("cp"), cfg.optimizer);
    EvalReport r = evaluate(s, {cfg.tasks[0]}, 8);
    CHECK(r.per_task.count("cp") == 1);  // forward path accepts the stage-2 state
}
