#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "kvprompt/config.hpp"
#include "kvprompt/serialize.hpp"
#include "kvprompt/vit.hpp"

// Checkpoint container: a directory holding one binary blob per named tensor
// under tensors/ plus a manifest.json with the model configuration, stage
// metadata, and the pruning state. Loading rebuilds the model from the
// manifest's config and then overwrites every tensor from its blob, so a
// save/load round trip is bit-exact.

namespace kvp {

struct CheckpointMeta {
    std::string stage;  // pretrain | finetune | prune | rewind
    std::uint64_t seed = 0;
    int precision = 64;
    double base_lr = 0.0;
    double weight_decay = 0.0;
    bool token_pruned = false;
    bool segment_pruned = false;
    ModelConfig model;
};

// Stable tensor naming shared by save and load. Visual prompts, the shared
// KV prompt, and the token masks keep one entry per layer; unshared KV
// prompts split into /k and /v; segment masks live under mask_seg.
template <class T>
std::vector<std::pair<std::string, TensorPtr<T>>> named_tensors(const Model<T>& m) {
    std::vector<std::pair<std::string, TensorPtr<T>>> out;
    m.backbone.for_each_backbone(
        [&](const std::string& name, const TensorPtr<T>& t) { out.emplace_back(name, t); });
    out.emplace_back("head/w", m.backbone.head_w);
    out.emplace_back("head/b", m.backbone.head_b);
    const auto& ps = m.prompts;
    for (std::size_t i = 0; i < ps.visual.size(); ++i) {
        const std::string l = std::to_string(i);
        out.emplace_back("prompts/visual/" + l, ps.visual[i]);
        out.emplace_back("prompts/mask/" + l, ps.token_mask[i]);
        out.emplace_back("prompts/mask_seg/" + l, ps.seg_mask[i]);
    }
    for (std::size_t i = 0; i < ps.kv_k.size(); ++i) {
        const std::string l = std::to_string(i);
        if (ps.kv_v[i] == ps.kv_k[i]) {
            out.emplace_back("prompts/kv/" + l, ps.kv_k[i]);
        } else {
            out.emplace_back("prompts/kv/" + l + "/k", ps.kv_k[i]);
            out.emplace_back("prompts/kv/" + l + "/v", ps.kv_v[i]);
        }
    }
    return out;
}

// Serialized backbone bytes (head and prompts excluded); the witness for the
// frozen-backbone contract.
template <class T>
std::string backbone_bytes(const Model<T>& m) {
    std::string out;
    m.backbone.for_each_backbone([&](const std::string&, const TensorPtr<T>& t) {
        out += tensor_to_bytes(*t);
    });
    return out;
}

void write_checkpoint_manifest(const std::filesystem::path& dir, const CheckpointMeta& meta,
                               const std::vector<std::string>& tensor_names);
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& dir);

template <class T>
void save_checkpoint(const std::filesystem::path& dir, const Model<T>& m,
                     CheckpointMeta meta) {
    meta.model = m.cfg;
    meta.precision = sizeof(T) == 4 ? 32 : 64;
    meta.token_pruned = m.prompts.token_pruned;
    meta.segment_pruned = m.prompts.segment_pruned;
    std::filesystem::create_directories(dir / "tensors");
    std::vector<std::string> names;
    for (const auto& [name, tensor] : named_tensors(m)) {
        const auto path = dir / "tensors" / (name + ".kvt");
        std::filesystem::create_directories(path.parent_path());
        std::ofstream f(path, std::ios::binary);
        if (!f) throw ParseError("cannot write tensor blob " + path.string());
        write_tensor(f, *tensor);
        names.push_back(name);
    }
    write_checkpoint_manifest(dir, meta, names);
}

template <class T>
Model<T> load_checkpoint(const std::filesystem::path& dir, CheckpointMeta* meta_out = nullptr) {
    const CheckpointMeta meta = read_checkpoint_meta(dir);
    const int want = sizeof(T) == 4 ? 32 : 64;
    if (meta.precision != want) {
        throw ConfigError("checkpoint " + dir.string() + " holds " +
                          std::to_string(meta.precision) + "-bit tensors, requested " +
                          std::to_string(want) + "-bit");
    }
    Model<T> m = make_model<T>(meta.model, meta.seed);
    for (auto& [name, tensor] : named_tensors(m)) {
        const auto path = dir / "tensors" / (name + ".kvt");
        std::ifstream f(path, std::ios::binary);
        if (!f) throw ParseError("checkpoint missing tensor blob " + path.string());
        Tensor<T> loaded = read_tensor<T>(f);
        if (loaded.shape != tensor->shape) {
            throw ShapeError("checkpoint tensor " + name + " has shape " +
                             shape_str(loaded.shape) + ", expected " + shape_str(tensor->shape));
        }
        tensor->data = std::move(loaded.data);
    }
    m.prompts.token_pruned = meta.token_pruned;
    m.prompts.segment_pruned = meta.segment_pruned;
    if (meta_out) *meta_out = meta;
    return m;
}

}  // namespace kvp
