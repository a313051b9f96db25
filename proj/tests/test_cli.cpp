#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "test_util.hpp"

// Drives the command-line binary end to end. The binary path arrives in
// KVPROMPT_BIN (set by the test harness).

namespace {

using nlohmann::json;

std::string binary() {
    const char* bin = std::getenv("KVPROMPT_BIN");
    REQUIRE_MESSAGE(bin != nullptr, "KVPROMPT_BIN must point at the cli binary");
    return bin;
}

int run(const std::string& args, const std::filesystem::path& log = {}) {
    std::string cmd = binary() + " " + args;
    cmd += log.empty() ? " > /dev/null 2>&1" : " > " + log.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(rc));
    return WEXITSTATUS(rc);
}

json base_spec() {
    return json{
        {"version", 1},
        {"seed", 9},
        {"precision", 32},
        {"model",
         {{"image_size", 16},
          {"patch_size", 4},
          {"channels", 1},
          {"embed_dim", 8},
          {"num_layers", 1},
          {"num_heads", 2},
          {"ffn_mult", 2},
          {"num_classes", 3}}},
        {"prompt", {{"visual_len", 4}, {"kv_len", 2}, {"segments", 4}}},
        {"train",
         {{"base_lr", 0.5},
          {"weight_decay", 0.001},
          {"epochs", 4},
          {"warmup_epochs", 1},
          {"batch_size", 12},
          {"lr_grid", {0.5, 0.1}},
          {"wd_grid", {0.001}}}},
        {"data", {{"kind", "shift"}, {"classes", 3}, {"per_class", 12}}},
        {"prune", {{"token_ratio", 0.5}}},
    };
}

void write_spec(const std::filesystem::path& path, const json& j) {
    std::ofstream f(path);
    f << j.dump(2);
}

std::string slurp(const std::filesystem::path& p) { return testutil::read_file_bytes(p); }

}  // namespace

TEST_CASE("usage and config failures exit with code 2") {
    testutil::TempDir dir("cli_cfg");
    CHECK(run("--help") == 0);
    CHECK(run("finetune") == 2);          // --config is required
    CHECK(run("explode --config x") == 2);  // unknown subcommand

    const auto cfg = dir.path() / "bad.json";
    std::ofstream(cfg) << "{ \"version\": 1, ";
    CHECK(run("eval --config " + cfg.string() + " --out " + (dir.path() / "o").string()) == 2);

    write_spec(cfg, json{{"version", 1}, {"bogus", true}});
    const auto log = dir.path() / "log.txt";
    CHECK(run("eval --config " + cfg.string() + " --out " + (dir.path() / "o").string(), log) ==
          2);
    CHECK(slurp(log).find("bogus") != std::string::npos);

    write_spec(cfg, base_spec());  // no out_dir, no --out
    CHECK(run("eval --config " + cfg.string()) == 2);
}

TEST_CASE("stage chain produces self-describing run directories") {
    testutil::TempDir dir("cli_chain");
    const auto root = dir.path();
    auto spec = base_spec();
    const auto cfg = root / "exp.json";
    write_spec(cfg, spec);

    // pretrain
    CHECK(run("pretrain --config " + cfg.string() + " --out " + (root / "pre").string() +
              " --quiet") == 0);
    CHECK(std::filesystem::exists(root / "pre" / "checkpoint" / "manifest.json"));
    CHECK(std::filesystem::exists(root / "pre" / "metrics.csv"));
    CHECK(std::filesystem::exists(root / "pre" / "config.json"));

    // pruning straight after pretraining is a pipeline-order error
    auto spec_pre = spec;
    spec_pre["init_from"] = (root / "pre" / "checkpoint").string();
    const auto cfg_pre = root / "exp_pre.json";
    write_spec(cfg_pre, spec_pre);
    const auto log = root / "prune_refused.txt";
    CHECK(run("prune --config " + cfg_pre.string() + " --out " + (root / "px").string(), log) ==
          1);
    CHECK(slurp(log).find("finetune") != std::string::npos);

    // finetune from the pretrained backbone
    CHECK(run("finetune --config " + cfg_pre.string() + " --out " + (root / "ft").string() +
              " --quiet") == 0);

    // eval of the same starting point reproduces finetune's epoch-0 metric
    CHECK(run("eval --config " + cfg_pre.string() + " --out " + (root / "ev").string() +
              " --quiet") == 0);
    const json summary = json::parse(std::ifstream(root / "ft" / "summary.json"));
    std::ifstream evalcsv(root / "ev" / "eval.csv");
    std::string line;
    double eval_val_acc = -1.0;
    while (std::getline(evalcsv, line)) {
        if (line.rfind("val,", 0) == 0) {
            std::stringstream ss(line.substr(4));
            std::string loss, acc;
            std::getline(ss, loss, ',');
            std::getline(ss, acc, ',');
            eval_val_acc = std::stod(acc);
        }
    }
    CHECK(eval_val_acc == summary.at("init_val_acc").get<double>());

    // prune the finetuned checkpoint
    auto spec_ft = spec;
    spec_ft["init_from"] = (root / "ft" / "checkpoint").string();
    const auto cfg_ft = root / "exp_ft.json";
    write_spec(cfg_ft, spec_ft);
    CHECK(run("prune --config " + cfg_ft.string() + " --out " + (root / "pr").string() +
              " --quiet") == 0);
    CHECK(std::filesystem::exists(root / "pr" / "importance.csv"));
    {
        const json meta = json::parse(std::ifstream(root / "pr" / "checkpoint" / "manifest.json"));
        CHECK(meta.at("stage") == "prune");
        CHECK(meta.at("token_pruned").get<bool>());
        CHECK(meta.at("segment_pruned").get<bool>());
    }

    // double pruning is refused
    auto spec_pr = spec;
    spec_pr["init_from"] = (root / "pr" / "checkpoint").string();
    const auto cfg_pr = root / "exp_pr.json";
    write_spec(cfg_pr, spec_pr);
    CHECK(run("prune --config " + cfg_pr.string() + " --out " + (root / "p2").string()) == 1);

    // rewind the pruned checkpoint, then embed from the result
    CHECK(run("rewind --config " + cfg_pr.string() + " --out " + (root / "rw").string() +
              " --quiet") == 0);
    auto spec_rw = spec;
    spec_rw["init_from"] = (root / "rw" / "checkpoint").string();
    const auto cfg_rw = root / "exp_rw.json";
    write_spec(cfg_rw, spec_rw);
    CHECK(run("embed --config " + cfg_rw.string() + " --out " + (root / "emb").string() +
              " --quiet") == 0);
    CHECK(std::filesystem::exists(root / "emb" / "embeddings.csv"));
    CHECK(std::filesystem::exists(root / "emb" / "embeddings.svg"));
    CHECK(std::filesystem::exists(root / "emb" / "recall.csv"));
    CHECK(slurp(root / "emb" / "embeddings.csv").find("kv-prompted+pruned") != std::string::npos);

    // rewind demands a pruned checkpoint
    CHECK(run("rewind --config " + cfg_ft.string() + " --out " + (root / "r2").string()) == 1);
}

TEST_CASE("sweep and ablate emit their tables") {
    testutil::TempDir dir("cli_sweep");
    const auto root = dir.path();
    auto spec = base_spec();
    spec["train"]["epochs"] = 3;
    const auto cfg = root / "exp.json";
    write_spec(cfg, spec);

    CHECK(run("sweep --config " + cfg.string() + " --out " + (root / "sw").string() +
              " --quiet") == 0);
    std::ifstream sw(root / "sw" / "sweep.csv");
    std::string line;
    std::getline(sw, line);
    CHECK(line == "lr,wd,val_acc,status");
    std::size_t rows = 0;
    while (std::getline(sw, line)) ++rows;
    CHECK(rows == 2);  // 2 lr x 1 wd
    const json meta = json::parse(std::ifstream(root / "sw" / "checkpoint" / "manifest.json"));
    CHECK(meta.at("stage") == "finetune");  // a swept model is a finetuned model

    CHECK(run("ablate --config " + cfg.string() + " --out " + (root / "ab").string() +
              " --quiet") == 0);
    std::ifstream ab(root / "ab" / "ablate.csv");
    std::getline(ab, line);
    CHECK(line == "setting,pruning_percent,tuned_total_percent,accuracy");
    std::vector<std::string> settings;
    while (std::getline(ab, line)) settings.push_back(line.substr(0, line.find(',')));
    CHECK(settings == std::vector<std::string>({"visual", "visual+kv", "visual+prune", "full"}));
}

TEST_CASE("numeric divergence exits with code 3") {
    testutil::TempDir dir("cli_nan");
    auto spec = base_spec();
    spec["train"]["base_lr"] = 1e30;
    const auto cfg = dir.path() / "exp.json";
    write_spec(cfg, spec);
    CHECK(run("finetune --config " + cfg.string() + " --out " + (dir.path() / "o").string() +
              " --quiet") == 3);
}

TEST_CASE("reruns are byte-identical and flags override the spec") {
    testutil::TempDir dir("cli_det");
    const auto root = dir.path();
    const auto cfg = root / "exp.json";
    write_spec(cfg, base_spec());

    CHECK(run("finetune --config " + cfg.string() + " --out " + (root / "a").string() +
              " --quiet") == 0);
    CHECK(run("finetune --config " + cfg.string() + " --out " + (root / "b").string() +
              " --quiet") == 0);
    CHECK(slurp(root / "a" / "metrics.csv") == slurp(root / "b" / "metrics.csv"));
    CHECK(slurp(root / "a" / "summary.json") == slurp(root / "b" / "summary.json"));
    for (const auto& entry :
         std::filesystem::recursive_directory_iterator(root / "a" / "checkpoint")) {
        if (!entry.is_regular_file()) continue;
        const auto rel = std::filesystem::relative(entry.path(), root / "a" / "checkpoint");
        CHECK(slurp(entry.path()) == slurp(root / "b" / "checkpoint" / rel));
    }

    // --seed changes the trajectory; --precision 64 is recorded in the manifest.
    CHECK(run("finetune --config " + cfg.string() + " --out " + (root / "c").string() +
              " --seed 123 --quiet") == 0);
    CHECK(slurp(root / "a" / "metrics.csv") != slurp(root / "c" / "metrics.csv"));
    const json snap = json::parse(std::ifstream(root / "c" / "config.json"));
    CHECK(snap.at("seed").get<int>() == 123);

    CHECK(run("finetune --config " + cfg.string() + " --out " + (root / "d").string() +
              " --precision 64 --quiet") == 0);
    const json meta = json::parse(std::ifstream(root / "d" / "checkpoint" / "manifest.json"));
    CHECK(meta.at("precision").get<int>() == 64);
}
