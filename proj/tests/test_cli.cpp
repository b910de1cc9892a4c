#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "modula/checkpoint.hpp"
#include "modula/config.hpp"
#include "modula/data.hpp"

using namespace modula;
namespace fs = std::filesystem;

namespace {

const char* cli_path() { return MODULA_CLI_PATH; }

struct RunResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

RunResult run_cli(const std::string& args) {
    fs::path tmp = fs::temp_directory_path();
    fs::path out_file = tmp / "modula_cli_out.txt";
    fs::path err_file = tmp / "modula_cli_err.txt";
    std::string cmd = std::string(cli_path()) + " " + args + " >" + out_file.string() + " 2>" + err_file.string();
    int status = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    r.out = slurp(out_file);
    r.err = slurp(err_file);
    return r;
}

/// Two tiny tasks, a couple dozen steps per stage: the whole pipeline in
/// a few seconds.
nlohmann::json tiny_config_json(const fs::path& out_dir) {
    RunConfig cfg;
    cfg.base.n_vocab = 24;
    cfg.base.d_model = 8;
    cfg.base.n_layers = 1;
    cfg.base.n_heads = 2;
    cfg.base.d_ff = 12;
    cfg.base.max_seq = 12;
    cfg.base.adapter_sites = {SiteTag::attn_o, SiteTag::ff_in};
    cfg.variant = Variant::res;
    cfg.universal_rank = 2;
    cfg.domain_rank = 1;
    cfg.universal_mix_samples = 32;
    cfg.eval_samples = 8;
    cfg.optimizer.batch_size = 8;
    cfg.optimizer.lr = 1e-3;
    cfg.pretrain.epochs = 1;
    cfg.seed = 7;
    cfg.out_dir = out_dir.string();
    TaskSpec a;
    a.id = "cp";
    a.kind = GenKind::copy;
    a.marker = 2;
    a.vocab_lo = 8;
    a.vocab_hi = 16;
    a.sample_count = 32;
    a.payload_len = 3;
    a.seed = 11;
    TaskSpec b = a;
    b.id = "rv";
    b.kind = GenKind::reverse;
    b.marker = 3;
    b.vocab_lo = 16;
    b.vocab_hi = 24;
    b.seed = 12;
    TaskSpec plug = a;
    plug.id = "sr";
    plug.kind = GenKind::sort;
    plug.marker = 4;
    plug.seed = 13;
    cfg.tasks = {a, b};
    cfg.plug_tasks = {plug};
    return to_json(cfg);
}

struct CliFixture {
    fs::path dir;
    fs::path config_path;

    CliFixture() {
        dir = fs::temp_directory_path() / "modula_cli_fixture";
        fs::remove_all(dir);
        fs::create_directories(dir);
        config_path = dir / "config.json";
        std::ofstream f(config_path, std::ios::binary);
        f << tiny_config_json(dir / "out").dump(2) << "\n";
    }
    ~CliFixture() { fs::remove_all(dir); }
};

}  // namespace

TEST_CASE("validation errors exit 1 and name the problem") {
    RunResult missing = run_cli("run-all");
    CHECK(missing.exit_code == 1);
    CHECK(missing.err.find("--config") != std::string::npos);

    RunResult unknown = run_cli("frobnicate --config x.json");
    CHECK(unknown.exit_code == 1);

    RunResult unreadable = run_cli("run-all --config /nonexistent/nope.json");
    CHECK(unreadable.exit_code == 1);
    CHECK(unreadable.err.find("nope.json") != std::string::npos);

    RunResult no_sub = run_cli("--config x.json");
    CHECK(no_sub.exit_code == 1);
}

TEST_CASE("full pipeline: run-all, eval, analyze-router, plug-task, audits, export") {
    CliFixture fx;
    fs::path out = fx.dir / "out";

    RunResult all = run_cli("run-all --config " + fx.config_path.string());
    INFO(all.err);
    REQUIRE(all.exit_code == 0);
    CHECK(fs::exists(out / "stage1" / "manifest.json"));
    CHECK(fs::exists(out / "stage2-cp" / "manifest.json"));
    CHECK(fs::exists(out / "stage2-rv" / "manifest.json"));
    CHECK(fs::exists(out / "stage3" / "manifest.json"));
    CHECK(fs::exists(out / "metrics.json"));
    CHECK(fs::exists(out / "timings.json"));
    nlohmann::json metrics = nlohmann::json::parse(all.out);
    CHECK(metrics.contains("macro_accuracy"));
    CHECK(metrics.at("tasks").size() == 2);

    // metrics.json carries no wall-clock fields; progress stays on stderr
    {
        std::ifstream in(out / "metrics.json");
        nlohmann::json from_file;
        in >> from_file;
        CHECK(from_file == metrics);
        CHECK(from_file.dump().find("time") == std::string::npos);
    }
    CHECK(all.err.find("stage1") != std::string::npos);

    RunResult eval = run_cli("eval --config " + fx.config_path.string() + " --from " + (out / "stage3").string());
    REQUIRE(eval.exit_code == 0);
    CHECK(nlohmann::json::parse(eval.out).contains("macro_accuracy"));

    RunResult router = run_cli("analyze-router --config " + fx.config_path.string() + " --from " +
                               (out / "stage3").string() + " --layers 0");
    REQUIRE(router.exit_code == 0);
    CHECK(fs::exists(out / "router_report.csv"));
    {
        std::ifstream in(out / "router_report.csv");
        std::string header;
        std::getline(in, header);
        CHECK(header == "layer,site,task,expert,mean_weight,entropy");
    }

    // analyzing a pre-stage-3 checkpoint is a validation error
    RunResult early = run_cli("analyze-router --config " + fx.config_path.string() + " --from " +
                              (out / "stage1").string());
    CHECK(early.exit_code == 1);
    CHECK(early.err.find("stage-3") != std::string::npos);

    RunResult plug = run_cli("plug-task --config " + fx.config_path.string() + " --task sr --from " +
                             (out / "stage3").string());
    INFO(plug.err);
    REQUIRE(plug.exit_code == 0);
    nlohmann::json audit = nlohmann::json::parse(plug.out);
    CHECK(audit.at("param_fraction").get<double>() < 1.0);
    CHECK(fs::exists(out / "plug-sr" / "stage3" / "manifest.json"));
    CHECK(fs::exists(out / "plug-sr" / "audit.json"));

    RunResult pa = run_cli("param-audit --config " + fx.config_path.string() + " --scenario plug_task");
    REQUIRE(pa.exit_code == 0);
    nlohmann::json pa_json = nlohmann::json::parse(pa.out);
    CHECK(pa_json.at("trained_fraction").get<double>() < 1.0);
    RunResult pf = run_cli("param-audit --config " + fx.config_path.string() + " --scenario full_retrain");
    REQUIRE(pf.exit_code == 0);
    CHECK(nlohmann::json::parse(pf.out).at("trained_fraction").get<double>() == 1.0);
    RunResult pbad = run_cli("param-audit --config " + fx.config_path.string() + " --scenario nonsense");
    CHECK(pbad.exit_code == 1);

    RunResult exp = run_cli("export-data --config " + fx.config_path.string());
    REQUIRE(exp.exit_code == 0);
    CHECK(fs::exists(out / "data" / "cp.train.tsv"));
    CHECK(fs::exists(out / "data" / "universal_mix.tsv"));
    // exported lines parse back into the generated examples
    RunConfig cfg = load_run_config(fx.config_path.string());
    std::vector<Example> want = generate(cfg.bounded_tasks()[0]);
    std::ifstream in(out / "data" / "cp.train.tsv");
    std::string line;
    size_t i = 0;
    while (std::getline(in, line)) {
        REQUIRE(i < want.size());
        CHECK(example_from_line(line) == want[i]);
        ++i;
    }
    CHECK(i == want.size());
}

TEST_CASE("eval on a fresh res checkpoint matches the bare base metrics") {
    CliFixture fx;
    fs::path out = fx.dir / "out";

    // save an untrained state (all adapters at zero contribution)
    RunConfig cfg = load_run_config(fx.config_path.string());
    TrainState fresh = init_state(cfg);
    save_checkpoint(fresh, out / "fresh");

    RunResult adapted = run_cli("eval --config " + fx.config_path.string() + " --from " + (out / "fresh").string());
    REQUIRE(adapted.exit_code == 0);

    RunConfig bare_cfg = cfg;
    bare_cfg.base.adapter_sites = {};
    TrainState bare = init_state(bare_cfg);
    save_checkpoint(bare, out / "bare");
    fs::path bare_config = fx.dir / "bare_config.json";
    {
        std::ofstream f(bare_config, std::ios::binary);
        f << to_json(bare_cfg).dump(2) << "\n";
    }
    RunResult base = run_cli("eval --config " + bare_config.string() + " --from " + (out / "bare").string());
    REQUIRE(base.exit_code == 0);

    nlohmann::json a = nlohmann::json::parse(adapted.out);
    nlohmann::json b = nlohmann::json::parse(base.out);
    CHECK(a.at("tasks") == b.at("tasks"));
}

TEST_CASE("staged subcommands compose and --parallel-experts matches their layout") {
    CliFixture fx;
    fs::path out = fx.dir / "out";
    std::string cfg_arg = " --config " + fx.config_path.string();

    REQUIRE(run_cli("pretrain-base" + cfg_arg).exit_code == 0);
    REQUIRE(run_cli("train-universal" + cfg_arg + " --from " + (out / "base").string()).exit_code == 0);
    REQUIRE(run_cli("train-expert" + cfg_arg + " --task cp --from " + (out / "stage1").string()).exit_code == 0);
    REQUIRE(run_cli("train-expert" + cfg_arg + " --task rv --from " + (out / "stage1").string()).exit_code == 0);
    RunResult rt = run_cli("train-router" + cfg_arg + " --from " + (out / "stage1").string() + " --merge " +
                           (out / "stage2-cp").string() + " --merge " + (out / "stage2-rv").string());
    INFO(rt.err);
    REQUIRE(rt.exit_code == 0);
    TrainState staged = load_checkpoint(out / "stage3");
    CHECK(staged.stage.kind == StageKind::stage3);
    for (auto& [ref, st] : staged.stacks) {
        CHECK(st.domain_experts.size() == 2);
        CHECK(st.router->n_experts() == 2);
    }

    // parallel run writes the same checkpoint layout
    fs::path pout = fx.dir / "pout";
    RunResult par = run_cli("run-all" + cfg_arg + " --parallel-experts --out " + pout.string());
    INFO(par.err);
    REQUIRE(par.exit_code == 0);
    CHECK(fs::exists(pout / "stage2-cp" / "manifest.json"));
    CHECK(fs::exists(pout / "stage2-rv" / "manifest.json"));
    CHECK(fs::exists(pout / "stage3" / "manifest.json"));
    CHECK(fs::exists(pout / "metrics.json"));
}

TEST_CASE("identical configs give byte-identical metrics files") {
    CliFixture fx;
    fs::path a = fx.dir / "a", b = fx.dir / "b";
    REQUIRE(run_cli("run-all --config " + fx.config_path.string() + " --out " + a.string()).exit_code == 0);
    REQUIRE(run_cli("run-all --config " + fx.config_path.string() + " --out " + b.string()).exit_code == 0);
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    std::string ma = slurp(a / "metrics.json");
    CHECK(!ma.empty());
    CHECK(ma == slurp(b / "metrics.json"));
}
