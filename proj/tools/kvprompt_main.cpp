#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kvprompt/errors.hpp"
#include "kvprompt/pipeline.hpp"

// Exit codes: 0 success, 2 config/usage error, 3 training left the reals,
// 1 any other runtime failure.

int main(int argc, char** argv) {
    CLI::App app{"Prompt-tuning toolkit: train, prune, rewind and inspect "
                 "prompted vision transformers from a JSON experiment spec"};
    app.require_subcommand(1);

    std::string config_path, out_dir, chosen;
    std::int64_t seed = -1;
    int precision = 0;
    bool quiet = false;

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"pretrain", "train the full backbone on the pretraining task"},
        {"finetune", "train prompts + head on the target task"},
        {"prune", "score prompt importance, prune tokens then segments"},
        {"rewind", "retrain a pruned checkpoint with the original schedule"},
        {"eval", "evaluate a checkpoint on every split"},
        {"sweep", "grid-search lr/wd on a held-out fifth, retrain the winner"},
        {"embed", "export Poincaré-disk embeddings and recall@k"},
        {"ablate", "run the 4-row component matrix (visual/kv/prune)"},
    };
    for (const auto& [name, desc] : commands) {
        auto* sub = app.add_subcommand(name, desc);
        sub->add_option("--config", config_path, "experiment spec (JSON)")->required();
        sub->add_option("--out", out_dir, "run directory (overrides spec.out_dir)");
        sub->add_option("--seed", seed, "override spec.seed");
        sub->add_option("--precision", precision, "override spec.precision")
            ->check(CLI::IsMember({32, 64}));
        sub->add_flag("--quiet", quiet, "suppress progress output");
        sub->callback([&chosen, n = name] { chosen = n; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;  // usage problems share the config-error code
    }

    kvp::ExperimentSpec spec;
    try {
        spec = kvp::load_experiment(config_path);
        if (!out_dir.empty()) spec.out_dir = out_dir;
        if (seed >= 0) {
            spec.seed = static_cast<std::uint64_t>(seed);
            spec.train.seed = spec.seed;
        }
        if (precision != 0) spec.precision = precision;
        if (spec.out_dir.empty()) throw kvp::ConfigError("no out_dir in spec and no --out given");
        spec.validate();
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }

    try {
        kvp::run_command(chosen, spec, quiet);
    } catch (const kvp::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
