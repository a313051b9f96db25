#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "kvprompt/trainer.hpp"
#include "kvprompt/vit.hpp"

// Experiment specification: one strict JSON file binding the model, prompt,
// and training configuration to a dataset and an output directory. Unknown
// keys are rejected anywhere in the document, and the version field is
// mandatory, so stale or misspelled configs fail loudly instead of running
// with silent defaults.

namespace kvp {

enum class DataKind { Shift, Idx, Manifest };

struct DataSpec {
    DataKind kind = DataKind::Shift;
    // kind == Shift: synthetic source/target pair.
    std::size_t classes = 4;
    std::size_t per_class = 40;
    // kind == Idx: big-endian IDX image/label files.
    std::string train_images, train_labels, test_images, test_labels;
    // kind == Manifest: CSV of `path,label` rows referencing PGM files.
    std::string train_csv, test_csv;
    std::size_t num_classes = 0;  // required for idx/manifest
};

struct ExperimentSpec {
    int version = 0;
    std::uint64_t seed = 42;
    int precision = 32;  // 32 or 64
    std::string out_dir;
    std::string init_from;  // checkpoint directory consumed by later stages
    ModelConfig model;      // model.prompt comes from the "prompt" block
    TrainConfig train;
    DataSpec data;
    double prune_token_ratio = 0.5;
    double prune_segment_ratio = -1.0;  // < 0: reuse the token ratio

    double effective_segment_ratio() const {
        return prune_segment_ratio < 0.0 ? prune_token_ratio : prune_segment_ratio;
    }
    void validate() const;
};

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& tc);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Throws ParseError on malformed JSON and ConfigError on schema violations.
ExperimentSpec parse_experiment(const nlohmann::json& j);
ExperimentSpec load_experiment(const std::filesystem::path& path);
nlohmann::json experiment_to_json(const ExperimentSpec& spec);

}  // namespace kvp
