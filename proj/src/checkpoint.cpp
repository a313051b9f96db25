#include "kvprompt/checkpoint.hpp"

#include <fstream>

#include <json.hpp>

#include "kvprompt/errors.hpp"

namespace kvp {

using nlohmann::json;

void write_checkpoint_manifest(const std::filesystem::path& dir, const CheckpointMeta& meta,
                               const std::vector<std::string>& tensor_names) {
    json j;
    j["format"] = "kvprompt-checkpoint";
    j["version"] = 1;
    j["stage"] = meta.stage;
    j["seed"] = meta.seed;
    j["precision"] = meta.precision;
    j["base_lr"] = meta.base_lr;
    j["weight_decay"] = meta.weight_decay;
    j["token_pruned"] = meta.token_pruned;
    j["segment_pruned"] = meta.segment_pruned;
    j["model"] = model_config_to_json(meta.model);
    j["tensors"] = tensor_names;
    std::ofstream f(dir / "manifest.json");
    if (!f) throw ParseError("cannot write " + (dir / "manifest.json").string());
    f << j.dump(2) << "\n";
}

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open checkpoint manifest " + path.string());
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw ParseError("checkpoint manifest " + path.string() + ": " + e.what());
    }
    if (!j.contains("format") || j.at("format") != "kvprompt-checkpoint") {
        throw ParseError(path.string() + " is not a checkpoint manifest");
    }
    CheckpointMeta meta;
    try {
        meta.stage = j.value("stage", std::string());
        meta.seed = j.value("seed", std::uint64_t(0));
        meta.precision = j.value("precision", 64);
        meta.base_lr = j.value("base_lr", 0.0);
        meta.weight_decay = j.value("weight_decay", 0.0);
        meta.token_pruned = j.value("token_pruned", false);
        meta.segment_pruned = j.value("segment_pruned", false);
        meta.model = model_config_from_json(j.at("model"));
    } catch (const json::exception& e) {
        throw ParseError("checkpoint manifest " + path.string() + ": " + e.what());
    }
    return meta;
}

}  // namespace kvp
