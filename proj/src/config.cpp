#include "kvprompt/config.hpp"

#include <fstream>
#include <set>

#include "kvprompt/errors.hpp"

namespace kvp {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::string& block, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError("config block `" + block + "` must be an object");
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) {
            throw ConfigError("unknown key `" + key + "` in config block `" + block + "`");
        }
    }
}

template <class V>
void get_to(const json& j, const char* key, V& out, const std::string& block) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const json::exception& e) {
        throw ConfigError("bad value for `" + block + "." + key + "`: " + e.what());
    }
}

}  // namespace

void ExperimentSpec::validate() const {
    if (version != 1) {
        throw ConfigError("unsupported config version " + std::to_string(version) +
                          " (expected 1)");
    }
    if (precision != 32 && precision != 64) {
        throw ConfigError("precision must be 32 or 64, got " + std::to_string(precision));
    }
    model.validate();
    train.validate();
    if (data.kind != DataKind::Shift && data.num_classes == 0) {
        throw ConfigError("data.num_classes is required for idx/manifest datasets");
    }
    if (data.kind == DataKind::Idx && (data.train_images.empty() || data.train_labels.empty())) {
        throw ConfigError("idx dataset needs data.train_images and data.train_labels");
    }
    if (data.kind == DataKind::Manifest && data.train_csv.empty()) {
        throw ConfigError("manifest dataset needs data.train_csv");
    }
    if (!(prune_token_ratio >= 0.0 && prune_token_ratio <= 1.0)) {
        throw ConfigError("prune.token_ratio must be in [0,1]");
    }
    if (prune_segment_ratio >= 0.0 && prune_segment_ratio > 1.0) {
        throw ConfigError("prune.segment_ratio must be in [0,1]");
    }
}

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
    return json{{"image_size", cfg.image_size},
                {"patch_size", cfg.patch_size},
                {"channels", cfg.channels},
                {"embed_dim", cfg.embed_dim},
                {"num_layers", cfg.num_layers},
                {"num_heads", cfg.num_heads},
                {"ffn_mult", cfg.ffn_mult},
                {"num_classes", cfg.num_classes},
                {"literal_sqrt_d", cfg.literal_sqrt_d},
                {"prompt",
                 json{{"visual_len", cfg.prompt.visual_len},
                      {"kv_len", cfg.prompt.kv_len},
                      {"kv_placement",
                       cfg.prompt.kv_placement == KvPlacement::Before ? "before" : "after"},
                      {"kv_shared", cfg.prompt.kv_shared},
                      {"init",
                       cfg.prompt.init == PromptInit::TruncatedNormal ? "truncated_normal" : "he"},
                      {"segments", cfg.prompt.segments}}}};
}

namespace {

PromptConfig prompt_config_from_json(const json& j, const std::string& block) {
    check_keys(j, block,
               {"visual_len", "kv_len", "kv_placement", "kv_shared", "init", "segments"});
    PromptConfig pc;
    get_to(j, "visual_len", pc.visual_len, block);
    get_to(j, "kv_len", pc.kv_len, block);
    get_to(j, "kv_shared", pc.kv_shared, block);
    get_to(j, "segments", pc.segments, block);
    if (j.contains("kv_placement")) {
        const std::string v = j.at("kv_placement").get<std::string>();
        if (v == "before") {
            pc.kv_placement = KvPlacement::Before;
        } else if (v == "after") {
            pc.kv_placement = KvPlacement::After;
        } else {
            throw ConfigError("kv_placement must be `before` or `after`, got `" + v + "`");
        }
    }
    if (j.contains("init")) {
        const std::string v = j.at("init").get<std::string>();
        if (v == "truncated_normal") {
            pc.init = PromptInit::TruncatedNormal;
        } else if (v == "he") {
            pc.init = PromptInit::He;
        } else {
            throw ConfigError("prompt init must be `truncated_normal` or `he`, got `" + v + "`");
        }
    }
    return pc;
}

}  // namespace

ModelConfig model_config_from_json(const nlohmann::json& j) {
    check_keys(j, "model",
               {"image_size", "patch_size", "channels", "embed_dim", "num_layers", "num_heads",
                "ffn_mult", "num_classes", "literal_sqrt_d", "prompt"});
    ModelConfig cfg;
    get_to(j, "image_size", cfg.image_size, "model");
    get_to(j, "patch_size", cfg.patch_size, "model");
    get_to(j, "channels", cfg.channels, "model");
    get_to(j, "embed_dim", cfg.embed_dim, "model");
    get_to(j, "num_layers", cfg.num_layers, "model");
    get_to(j, "num_heads", cfg.num_heads, "model");
    get_to(j, "ffn_mult", cfg.ffn_mult, "model");
    get_to(j, "num_classes", cfg.num_classes, "model");
    get_to(j, "literal_sqrt_d", cfg.literal_sqrt_d, "model");
    if (j.contains("prompt")) cfg.prompt = prompt_config_from_json(j.at("prompt"), "model.prompt");
    return cfg;
}

nlohmann::json train_config_to_json(const TrainConfig& tc) {
    return json{{"base_lr", tc.base_lr},
                {"weight_decay", tc.weight_decay},
                {"epochs", tc.epochs},
                {"warmup_epochs", tc.warmup_epochs},
                {"batch_size", tc.batch_size},
                {"momentum", tc.momentum},
                {"lr_grid", tc.lr_grid},
                {"wd_grid", tc.wd_grid},
                {"prune_ratio_grid", tc.prune_ratio_grid}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    check_keys(j, "train",
               {"base_lr", "weight_decay", "epochs", "warmup_epochs", "batch_size", "momentum",
                "lr_grid", "wd_grid", "prune_ratio_grid"});
    TrainConfig tc;
    get_to(j, "base_lr", tc.base_lr, "train");
    get_to(j, "weight_decay", tc.weight_decay, "train");
    get_to(j, "epochs", tc.epochs, "train");
    get_to(j, "warmup_epochs", tc.warmup_epochs, "train");
    get_to(j, "batch_size", tc.batch_size, "train");
    get_to(j, "momentum", tc.momentum, "train");
    get_to(j, "lr_grid", tc.lr_grid, "train");
    get_to(j, "wd_grid", tc.wd_grid, "train");
    get_to(j, "prune_ratio_grid", tc.prune_ratio_grid, "train");
    return tc;
}

namespace {

DataSpec data_spec_from_json(const json& j) {
    check_keys(j, "data",
               {"kind", "classes", "per_class", "train_images", "train_labels", "test_images",
                "test_labels", "train_csv", "test_csv", "num_classes"});
    DataSpec ds;
    std::string kind = "shift";
    get_to(j, "kind", kind, "data");
    if (kind == "shift") {
        ds.kind = DataKind::Shift;
    } else if (kind == "idx") {
        ds.kind = DataKind::Idx;
    } else if (kind == "manifest") {
        ds.kind = DataKind::Manifest;
    } else {
        throw ConfigError("data.kind must be `shift`, `idx` or `manifest`, got `" + kind + "`");
    }
    get_to(j, "classes", ds.classes, "data");
    get_to(j, "per_class", ds.per_class, "data");
    get_to(j, "train_images", ds.train_images, "data");
    get_to(j, "train_labels", ds.train_labels, "data");
    get_to(j, "test_images", ds.test_images, "data");
    get_to(j, "test_labels", ds.test_labels, "data");
    get_to(j, "train_csv", ds.train_csv, "data");
    get_to(j, "test_csv", ds.test_csv, "data");
    get_to(j, "num_classes", ds.num_classes, "data");
    return ds;
}

json data_spec_to_json(const DataSpec& ds) {
    json j;
    switch (ds.kind) {
        case DataKind::Shift:
            j["kind"] = "shift";
            j["classes"] = ds.classes;
            j["per_class"] = ds.per_class;
            break;
        case DataKind::Idx:
            j["kind"] = "idx";
            j["train_images"] = ds.train_images;
            j["train_labels"] = ds.train_labels;
            if (!ds.test_images.empty()) j["test_images"] = ds.test_images;
            if (!ds.test_labels.empty()) j["test_labels"] = ds.test_labels;
            j["num_classes"] = ds.num_classes;
            break;
        case DataKind::Manifest:
            j["kind"] = "manifest";
            j["train_csv"] = ds.train_csv;
            if (!ds.test_csv.empty()) j["test_csv"] = ds.test_csv;
            j["num_classes"] = ds.num_classes;
            break;
    }
    return j;
}

}  // namespace

ExperimentSpec parse_experiment(const nlohmann::json& j) {
    check_keys(j, "<root>",
               {"version", "seed", "precision", "out_dir", "init_from", "model", "prompt",
                "train", "data", "prune"});
    if (!j.contains("version")) throw ConfigError("config is missing the mandatory `version` key");
    ExperimentSpec spec;
    get_to(j, "version", spec.version, "<root>");
    get_to(j, "seed", spec.seed, "<root>");
    get_to(j, "precision", spec.precision, "<root>");
    get_to(j, "out_dir", spec.out_dir, "<root>");
    get_to(j, "init_from", spec.init_from, "<root>");
    if (j.contains("model")) spec.model = model_config_from_json(j.at("model"));
    if (j.contains("prompt")) {
        spec.model.prompt = prompt_config_from_json(j.at("prompt"), "prompt");
    }
    if (j.contains("train")) spec.train = train_config_from_json(j.at("train"));
    if (j.contains("data")) spec.data = data_spec_from_json(j.at("data"));
    if (j.contains("prune")) {
        const auto& p = j.at("prune");
        check_keys(p, "prune", {"token_ratio", "segment_ratio"});
        get_to(p, "token_ratio", spec.prune_token_ratio, "prune");
        get_to(p, "segment_ratio", spec.prune_segment_ratio, "prune");
    }
    spec.train.seed = spec.seed;
    spec.validate();
    return spec;
}

ExperimentSpec load_experiment(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open config file " + path.string());
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw ParseError("config " + path.string() + ": " + e.what());
    }
    return parse_experiment(j);
}

nlohmann::json experiment_to_json(const ExperimentSpec& spec) {
    json j;
    j["version"] = spec.version;
    j["seed"] = spec.seed;
    j["precision"] = spec.precision;
    j["out_dir"] = spec.out_dir;
    if (!spec.init_from.empty()) j["init_from"] = spec.init_from;
    json model = model_config_to_json(spec.model);
    j["prompt"] = model["prompt"];
    model.erase("prompt");
    j["model"] = model;
    j["train"] = train_config_to_json(spec.train);
    j["data"] = data_spec_to_json(spec.data);
    j["prune"] = json{{"token_ratio", spec.prune_token_ratio},
                      {"segment_ratio", spec.effective_segment_ratio()}};
    return j;
}

}  // namespace kvp
