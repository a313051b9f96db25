#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kvprompt/tensor.hpp"

// Trainable prompt parameters: per-layer visual prompts inserted into the
// token sequence, per-layer key/value prompts concatenated inside attention,
// and the {0,1} mask variables used as differentiable probes for pruning.

namespace kvp {

enum class KvPlacement { Before, After };
enum class PromptInit { TruncatedNormal, He };

struct PromptConfig {
    std::size_t visual_len = 0;  // M: visual prompt tokens per layer
    std::size_t kv_len = 0;      // M_kv: key/value prompt rows per layer
    KvPlacement kv_placement = KvPlacement::Before;
    bool kv_shared = true;  // one tensor serves as both K and V prompt
    PromptInit init = PromptInit::TruncatedNormal;
    std::size_t segments = 8;  // R: per-token embedding segments for pruning

    void validate(std::size_t embed_dim) const {
        if (segments < 1) throw ConfigError("prompt segments must be >= 1");
        if (embed_dim % segments != 0) {
            throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                              " not divisible by segments " + std::to_string(segments));
        }
    }
};

// All prompt state for one model. Aliasing rule: when kv_shared, kv_v[i] is
// the same tensor object as kv_k[i], so the trainable KV parameter count is
// exactly half the unshared count. Masks are plain {0,1} values and only
// carry gradients while an importance probe temporarily enables them.
template <class T>
struct PromptSet {
    std::vector<TensorPtr<T>> visual;      // per layer [M x d]
    std::vector<TensorPtr<T>> kv_k;        // per layer [M_kv x d]
    std::vector<TensorPtr<T>> kv_v;        // per layer [M_kv x d] (alias if shared)
    std::vector<TensorPtr<T>> token_mask;  // per layer [M]
    std::vector<TensorPtr<T>> seg_mask;    // per layer [M x R]
    bool token_pruned = false;
    bool segment_pruned = false;

    std::size_t num_layers() const { return visual.size(); }

    // Unique trainable prompt tensors (deduplicates shared KV aliases).
    std::vector<TensorPtr<T>> trainable() const {
        std::vector<TensorPtr<T>> out;
        for (const auto& t : visual) out.push_back(t);
        for (std::size_t i = 0; i < kv_k.size(); ++i) {
            out.push_back(kv_k[i]);
            if (kv_v[i] != kv_k[i]) out.push_back(kv_v[i]);
        }
        return out;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& t : trainable()) n += t->numel();
        return n;
    }

    void set_masks_trainable(bool on) {
        for (auto& t : token_mask) on ? t->enable_grad() : t->disable_grad();
        for (auto& t : seg_mask) on ? t->enable_grad() : t->disable_grad();
    }
};

namespace detail {

template <class T>
void init_prompt_tensor(Tensor<T>& t, Rng rng, PromptInit init, std::size_t fan_in) {
    if (init == PromptInit::He)
        fill_he_normal(t, rng, fan_in);
    else
        fill_trunc_normal(t, rng, 0.02);
}

}  // namespace detail

// Deterministic given (seed); every tensor draws from its own forked stream
// so layouts can change without reshuffling unrelated parameters.
template <class T>
PromptSet<T> init_prompts(std::size_t num_layers, std::size_t embed_dim, const PromptConfig& cfg,
                          std::uint64_t seed) {
    cfg.validate(embed_dim);
    PromptSet<T> ps;
    Rng root(seed);
    for (std::size_t i = 0; i < num_layers; ++i) {
        if (cfg.visual_len > 0) {
            auto p = make_tensor<T>({cfg.visual_len, embed_dim}, true);
            detail::init_prompt_tensor(*p, root.fork(3 * i), cfg.init, embed_dim);
            ps.visual.push_back(p);

            auto tm = make_tensor<T>({cfg.visual_len});
            fill_constant(*tm, T(1));
            ps.token_mask.push_back(tm);

            auto sm = make_tensor<T>({cfg.visual_len, cfg.segments});
            fill_constant(*sm, T(1));
            ps.seg_mask.push_back(sm);
        }
        if (cfg.kv_len > 0) {
            auto k = make_tensor<T>({cfg.kv_len, embed_dim}, true);
            detail::init_prompt_tensor(*k, root.fork(3 * i + 1), cfg.init, embed_dim);
            ps.kv_k.push_back(k);
            if (cfg.kv_shared) {
                ps.kv_v.push_back(k);
            } else {
                auto v = make_tensor<T>({cfg.kv_len, embed_dim}, true);
                detail::init_prompt_tensor(*v, root.fork(3 * i + 2), cfg.init, embed_dim);
                ps.kv_v.push_back(v);
            }
        }
    }
    return ps;
}

}  // namespace kvp
