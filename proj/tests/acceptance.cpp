// Release gate: one check per shipping criterion, one PASS/FAIL line each.
// Exit status is the number of failed criteria. Tolerances are pinned here
// and nowhere else; every numeric bound in this file is load-bearing.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "kvprompt/diag.hpp"
#include "kvprompt/pipeline.hpp"
#include "kvprompt/pruning.hpp"
#include "kvprompt/trainer.hpp"
#include "test_util.hpp"

using namespace kvp;

namespace {

struct Failure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void expect(bool ok, const std::string& msg) {
    if (!ok) throw Failure(msg);
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

ModelConfig small_cfg(std::size_t d, std::size_t layers, std::size_t heads, std::size_t m,
                      std::size_t mkv) {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.channels = 1;
    cfg.embed_dim = d;
    cfg.num_layers = layers;
    cfg.num_heads = heads;
    cfg.ffn_mult = 2;
    cfg.num_classes = 3;
    cfg.prompt.visual_len = m;
    cfg.prompt.kv_len = mkv;
    cfg.prompt.segments = 4;
    return cfg;
}

template <class T>
TensorPtr<T> random_image(const ModelConfig& cfg, Rng& r) {
    return testutil::random_tensor<T>({cfg.channels, cfg.image_size, cfg.image_size}, r, false);
}

template <class T>
double loss_of(const Model<T>& m, const TensorPtr<T>& img, int label) {
    Tape<T> tape;
    tape.set_recording(false);
    return static_cast<double>(
        ops::cross_entropy(tape, forward(tape, m, img), std::vector<int>{label})->data[0]);
}

template <class T>
void copy_backbone_and_head(Model<T>& dst, const Model<T>& src) {
    std::vector<TensorPtr<T>> a, b;
    dst.backbone.for_each_backbone([&](const std::string&, const TensorPtr<T>& t) { a.push_back(t); });
    src.backbone.for_each_backbone([&](const std::string&, const TensorPtr<T>& t) { b.push_back(t); });
    for (std::size_t i = 0; i < a.size(); ++i) a[i]->data = b[i]->data;
    dst.backbone.head_w->data = src.backbone.head_w->data;
    dst.backbone.head_b->data = src.backbone.head_b->data;
}

// ---- 1. gradient correctness -------------------------------------------

std::string c1_gradients() {
    ModelConfig cfg = small_cfg(16, 2, 2, 4, 2);
    cfg.prompt.kv_shared = false;  // P_K and P_V as distinct parameters
    auto m = make_model<double>(cfg, 101);
    m.backbone.set_backbone_trainable(false);
    m.backbone.set_head_trainable(true);
    m.prompts.set_masks_trainable(true);
    // The default prompt init is tiny; its layer-norm variance sits near the
    // 1e-5 epsilon where third derivatives blow up and finite differences
    // carry visible truncation error. Evaluate at a generic O(1) point.
    Rng rf(100);
    for (auto* group : {&m.prompts.visual, &m.prompts.kv_k, &m.prompts.kv_v})
        for (auto& t : *group)
            for (auto& x : t->data) x = rf.uniform(-0.5, 0.5);

    Rng r(102);
    std::vector<TensorPtr<double>> images = {random_image<double>(cfg, r),
                                             random_image<double>(cfg, r)};
    const std::vector<int> labels = {0, 1};

    std::vector<TensorPtr<double>> params;
    for (auto& t : m.prompts.visual) params.push_back(t);
    for (auto& t : m.prompts.kv_k) params.push_back(t);
    for (auto& t : m.prompts.kv_v) params.push_back(t);
    for (auto& t : m.prompts.token_mask) params.push_back(t);
    params.push_back(m.backbone.head_w);
    params.push_back(m.backbone.head_b);
    std::size_t n = 0;
    for (auto& p : params) n += p->numel();

    auto build = [&](Tape<double>& tp) {
        return ops::cross_entropy(tp, batch_forward(tp, m, images), labels);
    };
    const double err = testutil::max_grad_err_vs_fd<double>(build, params, 1e-5);
    expect(err <= 1e-6, fmt("max rel grad err %.3e > 1e-6", err));
    return fmt("max rel err %.2e over %zu params", err, n);
}

// ---- 2. attention mechanics with prompt columns --------------------------

std::string c2_attention() {
    double worst = 0.0;
    for (std::size_t mkv : {std::size_t{0}, std::size_t{1}, std::size_t{3}, std::size_t{5}}) {
        ModelConfig cfg = small_cfg(16, 2, 2, 3, mkv);
        auto m = make_model<double>(cfg, 103);
        Rng r(104);
        auto img = random_image<double>(cfg, r);
        Tape<double> tape;
        tape.set_recording(false);
        std::vector<TensorPtr<double>> attn;
        auto logits = forward(tape, m, img, &attn);
        expect(logits->numel() == cfg.num_classes,
               fmt("logits size changed at M_kv=%zu", mkv));
        expect(attn.size() == cfg.num_layers * cfg.num_heads, "attention map count");
        const std::size_t s = cfg.seq_len();
        for (const auto& a : attn) {
            expect(a->shape[0] == s && a->shape[1] == s + mkv,
                   fmt("attention shape %zux%zu != %zux%zu (queries never prompted)",
                       a->shape[0], a->shape[1], s, s + mkv));
            for (std::size_t i = 0; i < s; ++i) {
                double sum = 0.0;
                for (std::size_t j = 0; j < s + mkv; ++j) sum += a->data[i * (s + mkv) + j];
                worst = std::max(worst, std::abs(sum - 1.0));
            }
        }
    }
    expect(worst <= 1e-6, fmt("attention row sum off by %.3e", worst));
    return fmt("row sums within %.1e across M_kv in {0,1,3,5}", worst);
}

// ---- 3. identity reductions ----------------------------------------------

std::string c3_identity() {
    // (a) no prompts == an independently assembled plain encoder, bit for bit
    ModelConfig cfg = small_cfg(16, 2, 2, 0, 0);
    auto m = make_model<double>(cfg, 105);
    Rng r(106);
    auto image = random_image<double>(cfg, r);
    Tape<double> tape;
    tape.set_recording(false);
    auto logits = forward(tape, m, image);

    const auto& bb = m.backbone;
    auto patches = extract_patches(cfg, image);
    auto x = ops::add_rowvec(tape, ops::matmul(tape, patches, bb.patch_w), bb.patch_b);
    auto z = ops::add(tape, ops::concat(tape, {bb.cls, x}, 0), bb.pos);
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
        const auto& L = bb.layers[i];
        auto zn = ops::layer_norm(tape, z, L.ln1_g, L.ln1_b, 1e-5);
        auto q = ops::add_rowvec(tape, ops::matmul(tape, zn, L.wq), L.bq);
        auto k = ops::add_rowvec(tape, ops::matmul(tape, zn, L.wk), L.bk);
        auto v = ops::add_rowvec(tape, ops::matmul(tape, zn, L.wv), L.bv);
        std::vector<TensorPtr<double>> heads;
        const std::size_t dh = cfg.head_dim();
        for (std::size_t h = 0; h < cfg.num_heads; ++h) {
            auto qh = ops::slice(tape, q, 1, h * dh, dh);
            auto kh = ops::slice(tape, k, 1, h * dh, dh);
            auto vh = ops::slice(tape, v, 1, h * dh, dh);
            auto attn = ops::softmax_rows(
                tape, ops::scale(tape, ops::matmul(tape, qh, ops::transpose(tape, kh)),
                                 1.0 / std::sqrt(static_cast<double>(dh))));
            heads.push_back(ops::matmul(tape, attn, vh));
        }
        auto merged = heads.size() == 1 ? heads[0] : ops::concat(tape, heads, 1);
        auto msa = ops::add_rowvec(tape, ops::matmul(tape, merged, L.wo), L.bo);
        auto hres = ops::add(tape, z, msa);
        auto hn = ops::layer_norm(tape, hres, L.ln2_g, L.ln2_b, 1e-5);
        auto hid = ops::gelu(tape, ops::add_rowvec(tape, ops::matmul(tape, hn, L.w1), L.b1));
        auto ffn = ops::add_rowvec(tape, ops::matmul(tape, hid, L.w2), L.b2);
        z = ops::add(tape, hres, ffn);
    }
    auto zf = ops::layer_norm(tape, z, bb.final_ln_g, bb.final_ln_b, 1e-5);
    auto cls = ops::slice(tape, zf, 0, 0, 1);
    auto ref = ops::add_rowvec(tape, ops::matmul(tape, cls, bb.head_w), bb.head_b);
    expect(logits->data == ref->data, "M=0, M_kv=0 logits differ from the plain encoder");

    // (b) prepend vs append of KV prompt rows at equal parameters
    ModelConfig before = small_cfg(16, 2, 2, 3, 2);
    before.prompt.kv_placement = KvPlacement::Before;
    ModelConfig after = before;
    after.prompt.kv_placement = KvPlacement::After;
    auto mb = make_model<double>(before, 107);
    auto ma = make_model<double>(after, 107);
    expect(mb.prompts.kv_k[0]->data == ma.prompts.kv_k[0]->data, "placement changed init");
    auto img2 = random_image<double>(before, r);
    const auto lb = forward(tape, mb, img2);
    const auto la = forward(tape, ma, img2);
    const double diff = testutil::max_rel_err(lb->data, la->data);
    expect(diff <= 1e-6, fmt("before/after placement diverges: %.3e", diff));
    return fmt("plain reduction bit-exact; placement diff %.1e", diff);
}

// ---- 4. mask semantics ----------------------------------------------------

std::string c4_masks() {
    ModelConfig cfg = small_cfg(16, 2, 2, 4, 2);
    auto m4 = make_model<double>(cfg, 108);
    ModelConfig cfg3 = cfg;
    cfg3.prompt.visual_len = 3;
    auto m3 = make_model<double>(cfg3, 108);
    copy_backbone_and_head(m3, m4);

    const std::size_t d = cfg.embed_dim, drop = 2;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        m3.prompts.kv_k[l]->data = m4.prompts.kv_k[l]->data;
        m3.prompts.kv_v[l]->data = m4.prompts.kv_v[l]->data;
        std::size_t to = 0;
        for (std::size_t k = 0; k < 4; ++k) {
            if (k == drop) continue;
            for (std::size_t j = 0; j < d; ++j)
                m3.prompts.visual[l]->data[to * d + j] = m4.prompts.visual[l]->data[k * d + j];
            ++to;
        }
        m4.prompts.token_mask[l]->data[drop] = 0.0;
    }

    Rng r(109);
    auto img = random_image<double>(cfg, r);
    Tape<double> tape;
    tape.set_recording(false);
    const auto base = forward(tape, m4, img)->data;
    const auto removed = forward(tape, m3, img)->data;
    const double diff = testutil::max_rel_err(base, removed);
    expect(diff <= 1e-6, fmt("masked vs structurally removed: %.3e", diff));

    for (std::size_t l = 0; l < cfg.num_layers; ++l)
        for (std::size_t j = 0; j < d; ++j)
            m4.prompts.visual[l]->data[drop * d + j] = 1e9 + static_cast<double>(j);
    const auto perturbed = forward(tape, m4, img)->data;
    expect(perturbed == base, "perturbing a masked prompt changed the logits");
    return fmt("structural diff %.1e; masked row fully inert", diff);
}

// ---- 5. importance-score fidelity ----------------------------------------

std::string c5_importance() {
    const std::size_t M = 5, D = 16;
    // (a) score == |dL/d rho| on an ordinary model, checked against a
    // one-sided difference at rho = 1.
    double fd_natural = 0.0;
    {
        ModelConfig cfg = small_cfg(D, 1, 2, M, 2);
        auto m = make_model<double>(cfg, 110);
        Rng r(111);
        auto img = random_image<double>(cfg, r);
        const int label = 1;
        auto rep = importance_scores(m, {img}, {label});
        const double full = loss_of(m, img, label);
        for (std::size_t k = 0; k < M; ++k) {
            auto& mask = m.prompts.token_mask[0]->data;
            mask[k] = 1.0 - 1e-4;
            const double fd = std::abs((full - loss_of(m, img, label)) / 1e-4);
            mask[k] = 1.0;
            fd_natural = std::max(fd_natural, testutil::rel_err(rep.token_scores[0][k], fd));
        }
        expect(fd_natural <= 1e-2, fmt("score vs one-sided FD err %.3e > 1e-2", fd_natural));
    }

    // (b) score ranking == brute-force leave-one-out ranking. Removing a
    // token is discontinuous (it leaves the softmax everywhere), so the two
    // agree only where content outweighs mere presence. Build that regime
    // directly: queries zeroed (uniform attention - presence has no gradient
    // to hide in), anchor on the value bias (softmax weights sum to 1, so it
    // is invariant to removal), non-prompt tokens silenced, and prompt rows
    // graded in the regime where layer norm is still scale-sensitive, with a
    // compensator row making the prompt values sum to zero.
    ModelConfig cfg = small_cfg(D, 1, 2, M, 0);
    auto m = make_model<double>(cfg, 110);
    Rng dr(110 * 31);
    auto& L0 = m.backbone.layers[0];
    std::fill(L0.wq->data.begin(), L0.wq->data.end(), 0.0);
    std::fill(L0.bq->data.begin(), L0.bq->data.end(), 0.0);
    for (auto& x : L0.bv->data) x = dr.normal();
    std::fill(m.backbone.pos->data.begin(), m.backbone.pos->data.end(), 0.0);
    std::fill(m.backbone.cls->data.begin(), m.backbone.cls->data.end(), 0.0);
    auto& rows = m.prompts.visual[0]->data;
    std::fill(rows.begin(), rows.end(), 0.0);
    for (std::size_t k = 0; k + 1 < M; ++k) {
        const double a = 2e-5 * std::pow(1.8, -static_cast<double>(k));
        for (std::size_t j = 0; j < D; ++j) {
            rows[k * D + j] = a * dr.uniform(-1.0, 1.0);
            rows[(M - 1) * D + j] -= rows[k * D + j];
        }
    }

    auto img = make_tensor<double>({1, 8, 8});  // zero image: patches carry nothing
    const int label = 1;
    auto rep = importance_scores(m, {img}, {label});
    const auto& scores = rep.token_scores[0];
    const double full = loss_of(m, img, label);
    double fd_eng = 0.0;
    std::vector<double> loo(M);
    for (std::size_t k = 0; k < M; ++k) {
        auto& mask = m.prompts.token_mask[0]->data;
        mask[k] = 1.0 - 1e-4;
        const double fd = std::abs((full - loss_of(m, img, label)) / 1e-4);
        mask[k] = 0.0;  // leave-one-out: structural removal
        loo[k] = std::abs(loss_of(m, img, label) - full);
        mask[k] = 1.0;
        fd_eng = std::max(fd_eng, testutil::rel_err(scores[k], fd));
    }
    expect(fd_eng <= 1e-2, fmt("engineered-model FD err %.3e > 1e-2", fd_eng));
    const double rho = testutil::spearman(scores, loo);
    expect(rho >= 0.9, fmt("leave-one-out Spearman %.3f < 0.9", rho));
    return fmt("FD err %.1e/%.1e; leave-one-out Spearman %.2f", fd_natural, fd_eng, rho);
}

// ---- 6. frozen-backbone contract ------------------------------------------

std::string c6_frozen_backbone() {
    ModelConfig cfg = small_cfg(16, 2, 2, 4, 2);
    auto m = make_model<double>(cfg, 112);
    Rng r(113);
    Batchset<double> data;
    for (std::size_t i = 0; i < 9; ++i) {
        data.images.push_back(random_image<double>(cfg, r));
        data.labels.push_back(static_cast<int>(i % 3));
    }
    TrainConfig tc;
    tc.base_lr = 0.2;
    tc.epochs = 3;
    tc.warmup_epochs = 1;
    tc.batch_size = 4;
    tc.seed = 114;

    const std::string before = backbone_bytes(m);
    finetune(m, data, data, tc);
    auto rep = importance_scores(m, data.images, data.labels);
    token_prune(rep, m, 0.5);
    segment_prune(rep, m, 0.5);
    rewind(m, data, data, tc);
    expect(backbone_bytes(m) == before,
           "backbone serialization changed across finetune/prune/rewind");
    return fmt("%zu backbone bytes identical across finetune+prune+rewind", before.size());
}

// ---- 7. parameter sharing and counting ------------------------------------

std::string c7_sharing() {
    ModelConfig cfg = small_cfg(16, 2, 2, 2, 3);
    cfg.prompt.kv_shared = true;
    ModelConfig un = cfg;
    un.prompt.kv_shared = false;
    auto ms = make_model<double>(cfg, 115);
    auto mu = make_model<double>(un, 115);

    const std::size_t d = cfg.embed_dim, L = cfg.num_layers;
    const std::size_t visual = L * cfg.prompt.visual_len * d;
    const std::size_t kv_shared = L * cfg.prompt.kv_len * d;
    expect(ms.prompts.param_count() == visual + kv_shared, "shared count != hand count");
    expect(mu.prompts.param_count() == visual + 2 * kv_shared, "unshared count != hand count");
    expect(mu.prompts.param_count() - visual == 2 * (ms.prompts.param_count() - visual),
           "unshared KV params are not exactly double the shared ones");

    // count_tunable against independent arithmetic
    const auto c = count_tunable(ms);
    const std::size_t patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size;
    const std::size_t ffn_h = cfg.ffn_mult * d;
    const std::size_t per_layer = 2 * d + 3 * (d * d + d) + (d * d + d) + 2 * d +
                                  (d * ffn_h + ffn_h) + (ffn_h * d + d);
    const std::size_t backbone = (patch_dim * d + d) + d + (1 + cfg.num_patches()) * d +
                                 L * per_layer + 2 * d;
    const std::size_t head = d * cfg.num_classes + cfg.num_classes;
    expect(c.backbone_params == backbone,
           fmt("backbone params %zu != hand count %zu", c.backbone_params, backbone));
    expect(c.head_params == head, "head param count");
    expect(c.prompt_params == ms.prompts.param_count(), "prompt param count");
    const double ratio =
        std::round(10000.0 * static_cast<double>(c.prompt_params + head) / backbone) / 100.0;
    expect(c.ratio_percent == ratio, "tunable ratio rounding");
    return fmt("shared %zu, unshared %zu params; tunable %.2f%%", ms.prompts.param_count(),
               mu.prompts.param_count(), c.ratio_percent);
}

// ---- 8. desk-scale component study ----------------------------------------

std::string c8_component_study() {
    using T = float;
    const auto t0 = std::chrono::steady_clock::now();
    double sum_v = 0.0, sum_vk = 0.0, sum_rw = 0.0, pruned_pct = 0.0;
    for (std::uint64_t seed : {1, 2, 3}) {
        ModelConfig cfg;
        cfg.image_size = 16;
        cfg.patch_size = 4;
        cfg.channels = 1;
        cfg.embed_dim = 16;
        cfg.num_layers = 2;
        cfg.num_heads = 2;
        cfg.ffn_mult = 4;
        cfg.num_classes = 4;
        cfg.prompt.visual_len = 2;
        cfg.prompt.kv_len = 4;
        cfg.prompt.segments = 4;

        const auto [src, tgt] = make_shift_task(seed, 4, 60);
        TrainConfig tc;
        tc.base_lr = 0.5;
        tc.weight_decay = 1e-3;
        tc.epochs = 30;
        tc.warmup_epochs = 2;
        tc.batch_size = 16;
        tc.seed = seed;
        TrainConfig tp = tc;
        tp.epochs = 60;

        ModelConfig cfg0 = cfg;
        cfg0.prompt.visual_len = 0;
        cfg0.prompt.kv_len = 0;
        Model<T> pre = make_model<T>(cfg0, seed);
        const auto src_tr = to_batchset<T>(src.train, src.channel_mean, src.channel_std);
        const auto src_va = to_batchset<T>(src.val, src.channel_mean, src.channel_std);
        pretrain_backbone(pre, src_tr, src_va, tp);

        const auto tr = to_batchset<T>(tgt.train, tgt.channel_mean, tgt.channel_std);
        const auto va = to_batchset<T>(tgt.val, tgt.channel_mean, tgt.channel_std);

        auto arm = [&](std::size_t kv_len) {
            ModelConfig c2 = cfg;
            c2.prompt.kv_len = kv_len;
            Model<T> m = make_model<T>(c2, seed);
            copy_backbone_and_head(m, pre);
            // head shapes match (same class count) but start it fresh per arm
            Model<T> fresh = make_model<T>(c2, seed);
            m.backbone.head_w->data = fresh.backbone.head_w->data;
            m.backbone.head_b->data = fresh.backbone.head_b->data;
            return m;
        };

        Model<T> mv = arm(0);
        sum_v += finetune(mv, tr, va, tc).best_val_acc;
        Model<T> mvk = arm(cfg.prompt.kv_len);
        sum_vk += finetune(mvk, tr, va, tc).best_val_acc;

        auto rep = importance_scores(mvk, tr.images, tr.labels);
        token_prune(rep, mvk, 0.5);  // at least half the prompt tokens
        segment_prune(rep, mvk, 0.5);
        sum_rw += rewind(mvk, tr, va, tc).best_val_acc;

        std::size_t kept = 0, total = 0;
        const std::size_t d = cfg.embed_dim, R = cfg.prompt.segments, w = d / R;
        for (std::size_t l = 0; l < cfg.num_layers; ++l)
            for (std::size_t k = 0; k < cfg.prompt.visual_len; ++k)
                for (std::size_t rr = 0; rr < R; ++rr) {
                    total += w;
                    if (mvk.prompts.token_mask[l]->data[k] != 0.0f &&
                        mvk.prompts.seg_mask[l]->data[k * R + rr] != 0.0f)
                        kept += w;
                }
        pruned_pct = 100.0 * static_cast<double>(total - kept) / static_cast<double>(total);
    }
    const double v = sum_v / 3, vk = sum_vk / 3, rw = sum_rw / 3;
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    expect(dt.count() < 300.0, fmt("study took %.0fs, budget 300s", dt.count()));
    expect(vk > v, fmt("kv prompts did not help: visual %.4f vs visual+kv %.4f", v, vk));
    expect(rw >= vk - 0.01,
           fmt("rewound accuracy %.4f more than 1 point under unpruned %.4f", rw, vk));
    expect(pruned_pct >= 50.0, fmt("only %.1f%% of visual-prompt params pruned", pruned_pct));
    return fmt("margin +%.1fpt, rewind gap %+.1fpt at %.0f%% pruned, %.0fs/3 seeds",
               100.0 * (vk - v), 100.0 * (rw - vk), pruned_pct, dt.count());
}

// ---- 9. learning-rate schedule ---------------------------------------------

std::string c9_schedule() {
    const double base = 3.7;
    const std::size_t total = 2000, warmup = 200;
    expect(std::abs(lr_at(warmup, total, warmup, base) - base) <= 1e-9, "warmup end != base");
    const std::size_t mid = warmup + (total - warmup) / 2;
    expect(std::abs(lr_at(mid, total, warmup, base) - base / 2) <= 1e-9, "midpoint != base/2");
    expect(std::abs(lr_at(total, total, warmup, base)) <= 1e-9, "final step != 0");
    return "base at warmup end, base/2 at midpoint, 0 at final step";
}

// ---- 10. embedding diagnostics ---------------------------------------------

double oracle_recall(const EmbeddingSet& e, std::size_t k, Metric metric) {
    std::vector<std::vector<double>> pts = e.vectors;
    if (metric == Metric::Poincare)
        for (auto& row : pts) row = poincare_project(row, 1.0);
    std::size_t queried = 0, hits = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        bool has_peer = false;
        for (std::size_t j = 0; j < pts.size(); ++j)
            if (j != i && e.labels[j] == e.labels[i]) has_peer = true;
        if (!has_peer) continue;
        std::vector<std::pair<double, std::size_t>> all;
        for (std::size_t j = 0; j < pts.size(); ++j) {
            if (j == i) continue;
            double dist = 0.0;
            if (metric == Metric::Euclidean) {
                for (std::size_t t = 0; t < pts[i].size(); ++t)
                    dist += (pts[i][t] - pts[j][t]) * (pts[i][t] - pts[j][t]);
            } else {
                dist = poincare_distance(pts[i], pts[j], 1.0);
            }
            all.push_back({dist, j});
        }
        std::sort(all.begin(), all.end());
        bool hit = false;
        for (std::size_t t = 0; t < k; ++t) hit = hit || e.labels[all[t].second] == e.labels[i];
        hits += hit;
        ++queried;
    }
    return static_cast<double>(hits) / static_cast<double>(queried);
}

std::string c10_embeddings() {
    Rng r(116);
    for (double mag : {1e-3, 1.0, 1e2, 1e6, 1e300}) {
        std::vector<double> x(6);
        for (auto& v : x) v = r.normal() * mag;
        const auto y = poincare_project(x);
        double n = 0.0;
        for (double v : y) n += v * v;
        expect(std::sqrt(n) < 1.0, fmt("projection escaped the ball at |x|~%g", mag));
    }

    EmbeddingSet e;
    e.source = "acceptance";
    for (std::size_t i = 0; i < 200; ++i) {
        std::vector<double> row(5);
        for (auto& v : row) v = r.normal() * 0.6;
        e.vectors.push_back(row);
        e.labels.push_back(static_cast<int>(r.uniform_index(3)));
    }
    for (std::size_t k : {std::size_t{1}, std::size_t{5}}) {
        for (auto metric : {Metric::Euclidean, Metric::Poincare}) {
            const double mine = recall_at_k(e, k, metric).recall;
            const double ref = oracle_recall(e, k, metric);
            expect(mine == ref, fmt("recall@%zu differs from oracle: %.17g vs %.17g", k, mine, ref));
        }
    }

    EmbeddingSet clusters;
    clusters.source = "clusters";
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i < 10; ++i) {
            const double cx = 2.0 * std::cos(2.0 * M_PI * c / 4.0);
            const double cy = 2.0 * std::sin(2.0 * M_PI * c / 4.0);
            clusters.vectors.push_back({cx + 0.01 * r.normal(), cy + 0.01 * r.normal()});
            clusters.labels.push_back(c);
        }
    const double sep = recall_at_k(clusters, 1, Metric::Poincare).recall;
    expect(sep == 1.0, fmt("separable clusters give recall@1 = %.3f", sep));
    return "norms < 1, oracle-exact recall at n=200, clusters at 1.0";
}

// ---- 11. bit-level determinism ----------------------------------------------

std::map<std::string, std::string> dir_bytes(const std::filesystem::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        out[std::filesystem::relative(entry.path(), root).string()] =
            testutil::read_file_bytes(entry.path());
    }
    return out;
}

std::string c11_determinism() {
    testutil::TempDir dir("acceptance_det");
    ExperimentSpec spec;
    spec.version = 1;
    spec.seed = 17;
    spec.precision = 32;
    spec.out_dir = (dir.path() / "run").string();
    spec.model = small_cfg(8, 1, 2, 4, 2);
    spec.model.image_size = 16;
    spec.train.base_lr = 0.5;
    spec.train.weight_decay = 1e-3;
    spec.train.epochs = 4;
    spec.train.warmup_epochs = 1;
    spec.train.batch_size = 12;
    spec.train.seed = spec.seed;
    spec.data.kind = DataKind::Shift;
    spec.data.classes = 3;
    spec.data.per_class = 12;

    run_command("finetune", spec, true);
    const auto first = dir_bytes(spec.out_dir);
    std::filesystem::remove_all(spec.out_dir);
    run_command("finetune", spec, true);
    const auto second = dir_bytes(spec.out_dir);

    expect(first.size() == second.size(), "run directories hold different file sets");
    std::size_t files = 0;
    for (const auto& [name, bytes] : first) {
        const auto it = second.find(name);
        expect(it != second.end(), "missing " + name + " on rerun");
        expect(it->second == bytes, name + " differs between identical runs");
        ++files;
    }
    return fmt("%zu artifact files byte-identical across reruns", files);
}

}  // namespace

int main() {
    struct Entry {
        int id;
        const char* name;
        std::string (*fn)();
    };
    const Entry entries[] = {
        {1, "gradients match central finite differences (<= 1e-6)", c1_gradients},
        {2, "attention rows normalized; shape invariant in M_kv", c2_attention},
        {3, "identity reductions (no-prompt bit-exact; placement)", c3_identity},
        {4, "mask zero == structural removal; masked rows inert", c4_masks},
        {5, "importance scores: FD fidelity and leave-one-out rank", c5_importance},
        {6, "backbone bytes frozen through finetune/prune/rewind", c6_frozen_backbone},
        {7, "kv sharing halves params; counts match hand arithmetic", c7_sharing},
        {8, "component study: kv helps; prune+rewind holds accuracy", c8_component_study},
        {9, "lr schedule hits warmup/midpoint/final analytically", c9_schedule},
        {10, "poincare projection, recall oracle, separable clusters", c10_embeddings},
        {11, "identical spec+seed reproduces artifacts bit-exactly", c11_determinism},
    };

    int failures = 0;
    for (const auto& e : entries) {
        const auto t0 = std::chrono::steady_clock::now();
        std::string detail;
        bool ok = true;
        try {
            detail = e.fn();
        } catch (const std::exception& ex) {
            detail = ex.what();
            ok = false;
        }
        const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
        std::printf("%s %2d  %-58s %s [%.1fs]\n", ok ? "PASS" : "FAIL", e.id, e.name,
                    detail.c_str(), dt.count());
        std::fflush(stdout);
        if (!ok) ++failures;
    }
    if (failures == 0) {
        std::printf("all 11 criteria passed\n");
    } else {
        std::printf("%d criteria FAILED\n", failures);
    }
    return failures;
}
