#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "kvprompt/ops.hpp"
#include "kvprompt/prompts.hpp"
#include "kvprompt/tensor.hpp"

// Small pre-LN Vision Transformer with the two prompt entry points: visual
// prompt rows spliced into the token sequence between CLS and the patches
// (replaced fresh at every layer), and key/value prompt rows concatenated to
// the projected K and V matrices inside each attention head.

namespace kvp {

struct ModelConfig {
    std::size_t image_size = 16;
    std::size_t patch_size = 4;
    std::size_t channels = 1;
    std::size_t embed_dim = 32;  // d
    std::size_t num_layers = 3;  // N
    std::size_t num_heads = 4;   // H
    std::size_t ffn_mult = 4;
    std::size_t num_classes = 4;
    PromptConfig prompt;
    // Attention logits divide by sqrt(d/H) per head by default; this switch
    // selects the literal sqrt(d) divisor instead.
    bool literal_sqrt_d = false;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t num_patches() const { return grid() * grid(); }
    std::size_t patch_dim() const { return channels * patch_size * patch_size; }
    std::size_t head_dim() const { return embed_dim / num_heads; }
    std::size_t ffn_hidden() const { return ffn_mult * embed_dim; }
    std::size_t seq_len() const { return 1 + prompt.visual_len + num_patches(); }

    void validate() const {
        if (image_size == 0 || patch_size == 0 || channels == 0 || embed_dim == 0 ||
            num_layers == 0 || num_heads == 0 || ffn_mult == 0 || num_classes == 0) {
            throw ConfigError("model config fields must be positive");
        }
        if (image_size % patch_size != 0) {
            throw ConfigError("image_size " + std::to_string(image_size) +
                              " not divisible by patch_size " + std::to_string(patch_size));
        }
        if (embed_dim % num_heads != 0) {
            throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                              " not divisible by num_heads " + std::to_string(num_heads));
        }
        prompt.validate(embed_dim);
    }
};

template <class T>
struct EncoderLayerParams {
    TensorPtr<T> ln1_g, ln1_b;
    TensorPtr<T> wq, bq, wk, bk, wv, bv;
    TensorPtr<T> wo, bo;
    TensorPtr<T> ln2_g, ln2_b;
    TensorPtr<T> w1, b1, w2, b2;
};

// Backbone parameters plus the classification head. During fine-tuning the
// backbone tensors are frozen bit-identically; only the head (and prompts)
// train.
template <class T>
struct Backbone {
    TensorPtr<T> patch_w, patch_b;  // [patch_dim x d], [d]
    TensorPtr<T> cls;               // [1 x d]
    TensorPtr<T> pos;               // [(1+m) x d]
    std::vector<EncoderLayerParams<T>> layers;
    TensorPtr<T> final_ln_g, final_ln_b;
    TensorPtr<T> head_w, head_b;  // [d x classes], [classes]

    // Visits (name, tensor) for every backbone parameter, head excluded.
    void for_each_backbone(const std::function<void(const std::string&, const TensorPtr<T>&)>& fn) const {
        fn("backbone/patch_w", patch_w);
        fn("backbone/patch_b", patch_b);
        fn("backbone/cls", cls);
        fn("backbone/pos", pos);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& L = layers[i];
            const std::string p = "backbone/layer" + std::to_string(i) + "/";
            fn(p + "ln1_g", L.ln1_g);
            fn(p + "ln1_b", L.ln1_b);
            fn(p + "wq", L.wq);
            fn(p + "bq", L.bq);
            fn(p + "wk", L.wk);
            fn(p + "bk", L.bk);
            fn(p + "wv", L.wv);
            fn(p + "bv", L.bv);
            fn(p + "wo", L.wo);
            fn(p + "bo", L.bo);
            fn(p + "ln2_g", L.ln2_g);
            fn(p + "ln2_b", L.ln2_b);
            fn(p + "w1", L.w1);
            fn(p + "b1", L.b1);
            fn(p + "w2", L.w2);
            fn(p + "b2", L.b2);
        }
        fn("backbone/final_ln_g", final_ln_g);
        fn("backbone/final_ln_b", final_ln_b);
    }

    std::vector<TensorPtr<T>> backbone_tensors() const {
        std::vector<TensorPtr<T>> out;
        for_each_backbone([&](const std::string&, const TensorPtr<T>& t) { out.push_back(t); });
        return out;
    }

    std::vector<TensorPtr<T>> head_tensors() const { return {head_w, head_b}; }

    std::size_t backbone_param_count() const {
        std::size_t n = 0;
        for (const auto& t : backbone_tensors()) n += t->numel();
        return n;
    }
    std::size_t head_param_count() const { return head_w->numel() + head_b->numel(); }

    void set_backbone_trainable(bool on) {
        for (auto& t : backbone_tensors()) on ? t->enable_grad() : t->disable_grad();
    }
    void set_head_trainable(bool on) {
        for (auto& t : head_tensors()) on ? t->enable_grad() : t->disable_grad();
    }
};

// Deterministic backbone initialization: He for projection weights, zeros for
// biases, unit gains for layer norms, truncated normal (0.02) for CLS and
// positional embeddings.
template <class T>
Backbone<T> init_backbone(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Backbone<T> b;
    Rng root(seed);
    std::uint64_t stream = 0;
    auto he = [&](Shape s, std::size_t fan_in) {
        auto t = make_tensor<T>(std::move(s));
        Rng r = root.fork(stream++);
        fill_he_normal(*t, r, fan_in);
        return t;
    };
    auto tn = [&](Shape s) {
        auto t = make_tensor<T>(std::move(s));
        Rng r = root.fork(stream++);
        fill_trunc_normal(*t, r, 0.02);
        return t;
    };
    auto zeros = [&](Shape s) { return make_tensor<T>(std::move(s)); };
    auto ones = [&](Shape s) {
        auto t = make_tensor<T>(std::move(s));
        fill_constant(*t, T(1));
        return t;
    };

    const std::size_t d = cfg.embed_dim, hid = cfg.ffn_hidden();
    b.patch_w = he({cfg.patch_dim(), d}, cfg.patch_dim());
    b.patch_b = zeros({d});
    b.cls = tn({1, d});
    b.pos = tn({1 + cfg.num_patches(), d});
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
        EncoderLayerParams<T> L;
        L.ln1_g = ones({d});
        L.ln1_b = zeros({d});
        L.wq = he({d, d}, d);
        L.bq = zeros({d});
        L.wk = he({d, d}, d);
        L.bk = zeros({d});
        L.wv = he({d, d}, d);
        L.bv = zeros({d});
        L.wo = he({d, d}, d);
        L.bo = zeros({d});
        L.ln2_g = ones({d});
        L.ln2_b = zeros({d});
        L.w1 = he({d, hid}, d);
        L.b1 = zeros({hid});
        L.w2 = he({hid, d}, hid);
        L.b2 = zeros({d});
        b.layers.push_back(std::move(L));
    }
    b.final_ln_g = ones({d});
    b.final_ln_b = zeros({d});
    b.head_w = he({d, cfg.num_classes}, d);
    b.head_b = zeros({cfg.num_classes});
    return b;
}

// Full model: config + backbone + prompts. Seed derivation: backbone from
// fork(1), prompts from fork(2), so prompt re-initialization never disturbs
// backbone parameters.
template <class T>
struct Model {
    ModelConfig cfg;
    Backbone<T> backbone;
    PromptSet<T> prompts;
};

template <class T>
Model<T> make_model(const ModelConfig& cfg, std::uint64_t seed) {
    Model<T> m;
    m.cfg = cfg;
    Rng root(seed);
    m.backbone = init_backbone<T>(cfg, root.fork(1).next_u64());
    m.prompts = init_prompts<T>(cfg.num_layers, cfg.embed_dim, cfg.prompt,
                                root.fork(2).next_u64());
    return m;
}

struct TunableCount {
    std::size_t prompt_params = 0;
    std::size_t head_params = 0;
    std::size_t backbone_params = 0;
    // (prompt + head) / backbone as a percentage, two decimals.
    double ratio_percent = 0.0;
};

template <class T>
TunableCount count_tunable(const Model<T>& m) {
    TunableCount c;
    c.prompt_params = m.prompts.param_count();
    c.head_params = m.backbone.head_param_count();
    c.backbone_params = m.backbone.backbone_param_count();
    const double raw = 100.0 * static_cast<double>(c.prompt_params + c.head_params) /
                       static_cast<double>(c.backbone_params);
    c.ratio_percent = std::round(raw * 100.0) / 100.0;
    return c;
}

// ---- forward pass ----

// Flattens image patches into rows of [m x patch_dim]; pure data movement,
// images never carry gradients.
template <class T>
TensorPtr<T> extract_patches(const ModelConfig& cfg, const TensorPtr<T>& image) {
    if (image->shape != Shape{cfg.channels, cfg.image_size, cfg.image_size}) {
        throw ShapeError("image shape " + shape_str(image->shape) + " does not match config " +
                         shape_str({cfg.channels, cfg.image_size, cfg.image_size}));
    }
    const std::size_t g = cfg.grid(), p = cfg.patch_size, hw = cfg.image_size;
    auto patches = make_tensor<T>({g * g, cfg.patch_dim()});
    for (std::size_t pr = 0; pr < g; ++pr)
        for (std::size_t pc = 0; pc < g; ++pc) {
            T* dst = patches->data.data() + (pr * g + pc) * cfg.patch_dim();
            for (std::size_t c = 0; c < cfg.channels; ++c)
                for (std::size_t y = 0; y < p; ++y)
                    for (std::size_t x = 0; x < p; ++x)
                        *dst++ = image->data[c * hw * hw + (pr * p + y) * hw + (pc * p + x)];
        }
    return patches;
}

// CLS token prepended, patch projection applied, positional embeddings added:
// output is [(1+m) x d].
template <class T>
TensorPtr<T> patch_embed(Tape<T>& tape, const ModelConfig& cfg, const Backbone<T>& b,
                         const TensorPtr<T>& image) {
    auto patches = extract_patches(cfg, image);
    auto x = ops::add_rowvec(tape, ops::matmul(tape, patches, b.patch_w), b.patch_b);
    auto z = ops::concat(tape, {b.cls, x}, 0);
    return ops::add(tape, z, b.pos);
}

// Multi-head self-attention over z [s x d]. When KV prompts are given, the
// projected K and V matrices are extended by M_kv rows (placement decides
// which side); Q is never prompted, so the output stays [s x d] and each
// attention row spans s + M_kv columns. Pass attn_out to collect the per-head
// attention matrices.
template <class T>
TensorPtr<T> msa_forward(Tape<T>& tape, const ModelConfig& cfg, const EncoderLayerParams<T>& L,
                         const TensorPtr<T>& z, const TensorPtr<T>& pk, const TensorPtr<T>& pv,
                         std::vector<TensorPtr<T>>* attn_out = nullptr) {
    const std::size_t d = cfg.embed_dim, H = cfg.num_heads, dh = cfg.head_dim();
    if ((pk == nullptr) != (pv == nullptr)) {
        throw ShapeError("kv prompts must be given as a pair");
    }
    if (pk) {
        if (pk->rank() != 2 || pk->shape[1] != d || pv->rank() != 2 || pv->shape[1] != d ||
            pk->shape[0] != pv->shape[0]) {
            throw ShapeError("kv prompt shape mismatch: " + shape_str(pk->shape) + " / " +
                             shape_str(pv->shape) + " for embed_dim " + std::to_string(d));
        }
    }

    auto q = ops::add_rowvec(tape, ops::matmul(tape, z, L.wq), L.bq);
    auto k = ops::add_rowvec(tape, ops::matmul(tape, z, L.wk), L.bk);
    auto v = ops::add_rowvec(tape, ops::matmul(tape, z, L.wv), L.bv);
    if (pk) {
        const bool before = cfg.prompt.kv_placement == KvPlacement::Before;
        k = ops::concat(tape, before ? std::vector<TensorPtr<T>>{pk, k}
                                     : std::vector<TensorPtr<T>>{k, pk},
                        0);
        v = ops::concat(tape, before ? std::vector<TensorPtr<T>>{pv, v}
                                     : std::vector<TensorPtr<T>>{v, pv},
                        0);
    }

    const T divisor = std::sqrt(static_cast<T>(cfg.literal_sqrt_d ? d : dh));
    std::vector<TensorPtr<T>> heads;
    for (std::size_t h = 0; h < H; ++h) {
        auto qh = ops::slice(tape, q, 1, h * dh, dh);
        auto kh = ops::slice(tape, k, 1, h * dh, dh);
        auto vh = ops::slice(tape, v, 1, h * dh, dh);
        auto scores = ops::scale(tape, ops::matmul(tape, qh, ops::transpose(tape, kh)),
                                 T(1) / divisor);
        auto attn = ops::softmax_rows(tape, scores);
        if (attn_out) attn_out->push_back(attn);
        heads.push_back(ops::matmul(tape, attn, vh));
    }
    auto merged = heads.size() == 1 ? heads[0] : ops::concat(tape, heads, 1);
    return ops::add_rowvec(tape, ops::matmul(tape, merged, L.wo), L.bo);
}

// Pre-LN residual block: z + MSA(LN(z)), then + FFN(LN(.)).
template <class T>
TensorPtr<T> encoder_layer(Tape<T>& tape, const ModelConfig& cfg, const EncoderLayerParams<T>& L,
                           const TensorPtr<T>& z, const TensorPtr<T>& pk, const TensorPtr<T>& pv,
                           std::vector<TensorPtr<T>>* attn_out = nullptr) {
    auto attn_in = ops::layer_norm(tape, z, L.ln1_g, L.ln1_b, T(1e-5));
    auto h = ops::add(tape, z, msa_forward(tape, cfg, L, attn_in, pk, pv, attn_out));
    auto ffn_in = ops::layer_norm(tape, h, L.ln2_g, L.ln2_b, T(1e-5));
    auto hidden = ops::gelu(tape, ops::add_rowvec(tape, ops::matmul(tape, ffn_in, L.w1), L.b1));
    auto ffn = ops::add_rowvec(tape, ops::matmul(tape, hidden, L.w2), L.b2);
    return ops::add(tape, h, ffn);
}

// Visual prompt rows for layer i with segment and token masks applied. The
// mask products force exact +0 at zeroed positions, and rows whose token
// mask is exactly 0 are reported in `kept` so the caller can drop them from
// the sequence entirely — a pruned prompt must behave as if structurally
// removed, not as a zero vector (a zero row would still leak into attention
// through the layer-norm and projection biases).
template <class T>
TensorPtr<T> masked_visual_prompt(Tape<T>& tape, const Model<T>& m, std::size_t layer,
                                  std::vector<std::size_t>& kept) {
    const auto& ps = m.prompts;
    kept.clear();
    for (std::size_t k = 0; k < m.cfg.prompt.visual_len; ++k)
        if (ps.token_mask[layer]->data[k] != T(0)) kept.push_back(k);
    if (kept.empty()) return nullptr;
    auto seg_wide =
        ops::repeat_cols(tape, ps.seg_mask[layer], m.cfg.embed_dim / m.cfg.prompt.segments);
    auto masked = ops::mask_mul(tape, ps.visual[layer], seg_wide);
    auto scaled = ops::row_scale(tape, masked, ps.token_mask[layer]);
    if (kept.size() == m.cfg.prompt.visual_len) return scaled;
    return ops::take_rows(tape, scaled, kept);
}

// Full forward for one image: logits [1 x num_classes]. At every layer the
// visual-prompt rows are replaced with that layer's fresh parameters (deep
// prompting); prior-layer outputs at those positions are discarded. When
// M = 0 and M_kv = 0 the code path is exactly the plain ViT. Optional
// outputs: per-layer-head attention matrices and the final CLS embedding
// (after the last layer norm, before the head).
template <class T>
TensorPtr<T> forward(Tape<T>& tape, const Model<T>& m, const TensorPtr<T>& image,
                     std::vector<TensorPtr<T>>* attn_out = nullptr,
                     TensorPtr<T>* embed_out = nullptr) {
    const auto& cfg = m.cfg;
    const std::size_t M = cfg.prompt.visual_len, mp = cfg.num_patches();
    auto z = patch_embed(tape, cfg, m.backbone, image);
    std::size_t prev_kept = 0;
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
        if (M > 0) {
            auto cls_row = ops::slice(tape, z, 0, 0, 1);
            auto patch_rows = ops::slice(tape, z, 0, 1 + prev_kept, mp);
            std::vector<std::size_t> kept;
            auto pm = masked_visual_prompt(tape, m, i, kept);
            z = pm ? ops::concat(tape, {cls_row, pm, patch_rows}, 0)
                   : ops::concat(tape, {cls_row, patch_rows}, 0);
            prev_kept = kept.size();
        }
        const bool kv = cfg.prompt.kv_len > 0;
        z = encoder_layer(tape, cfg, m.backbone.layers[i], z,
                          kv ? m.prompts.kv_k[i] : nullptr, kv ? m.prompts.kv_v[i] : nullptr,
                          attn_out);
    }
    auto zf = ops::layer_norm(tape, z, m.backbone.final_ln_g, m.backbone.final_ln_b, T(1e-5));
    auto cls_final = ops::slice(tape, zf, 0, 0, 1);
    if (embed_out) *embed_out = cls_final;
    return ops::add_rowvec(tape, ops::matmul(tape, cls_final, m.backbone.head_w),
                           m.backbone.head_b);
}

// Stacks per-image logits into [batch x num_classes].
template <class T>
TensorPtr<T> batch_forward(Tape<T>& tape, const Model<T>& m,
                           const std::vector<TensorPtr<T>>& images) {
    if (images.empty()) throw ShapeError("batch_forward on empty batch");
    std::vector<TensorPtr<T>> rows;
    rows.reserve(images.size());
    for (const auto& img : images) rows.push_back(forward(tape, m, img));
    return rows.size() == 1 ? rows[0] : ops::concat(tape, rows, 0);
}

}  // namespace kvp
