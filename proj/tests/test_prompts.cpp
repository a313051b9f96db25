#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "kvprompt/prompts.hpp"
#include "kvprompt/vit.hpp"
#include "test_util.hpp"

using namespace kvp;

namespace {

PromptConfig pc(std::size_t m, std::size_t mkv, bool shared = true,
                PromptInit init = PromptInit::TruncatedNormal) {
    PromptConfig c;
    c.visual_len = m;
    c.kv_len = mkv;
    c.kv_shared = shared;
    c.init = init;
    c.segments = 8;
    return c;
}

}  // namespace

TEST_CASE("empty prompt config yields zero parameters") {
    auto ps = init_prompts<double>(3, 32, pc(0, 0), 1);
    CHECK(ps.param_count() == 0);
    CHECK(ps.trainable().empty());
    CHECK(ps.visual.empty());
    CHECK(ps.kv_k.empty());
}

TEST_CASE("same seed gives bit-identical prompts") {
    auto a = init_prompts<double>(2, 16, pc(4, 2, false), 99);
    auto b = init_prompts<double>(2, 16, pc(4, 2, false), 99);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(a.visual[i]->data == b.visual[i]->data);
        CHECK(a.kv_k[i]->data == b.kv_k[i]->data);
        CHECK(a.kv_v[i]->data == b.kv_v[i]->data);
    }
    auto c = init_prompts<double>(2, 16, pc(4, 2, false), 100);
    CHECK(a.visual[0]->data != c.visual[0]->data);
}

TEST_CASE("He init sample variance close to 2/fan_in") {
    // 1 layer, 196 x 512 = ~1e5 draws.
    PromptConfig c = pc(196, 0, true, PromptInit::He);
    auto ps = init_prompts<double>(1, 512, c, 7);
    double sum = 0, sumsq = 0;
    const auto& v = ps.visual[0]->data;
    for (double x : v) {
        sum += x;
        sumsq += x * x;
    }
    const double n = static_cast<double>(v.size());
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    const double expected = 2.0 / 512.0;
    CHECK(std::abs(var - expected) / expected < 0.10);
}

TEST_CASE("truncated-normal init respects the 2-sigma bound") {
    auto ps = init_prompts<double>(2, 64, pc(8, 4), 3);
    for (const auto& t : ps.trainable())
        for (double v : t->data) CHECK(std::abs(v) <= 0.04 + 1e-12);
}

TEST_CASE("shared KV aliases one tensor and halves the parameter count") {
    auto shared = init_prompts<double>(3, 32, pc(0, 5, true), 11);
    auto unshared = init_prompts<double>(3, 32, pc(0, 5, false), 11);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(shared.kv_k[i] == shared.kv_v[i]);  // same object
        CHECK(unshared.kv_k[i] != unshared.kv_v[i]);
    }
    CHECK(unshared.param_count() == 2 * shared.param_count());
    CHECK(shared.param_count() == 3 * 5 * 32);
}

TEST_CASE("masks start at 1 and are not trainable by default") {
    auto ps = init_prompts<double>(2, 16, pc(4, 2), 5);
    for (const auto& t : ps.token_mask) {
        CHECK(!t->requires_grad);
        for (double v : t->data) CHECK(v == 1.0);
    }
    for (const auto& t : ps.seg_mask) {
        CHECK(t->shape == Shape{4, 8});
        for (double v : t->data) CHECK(v == 1.0);
    }
    for (const auto& t : ps.trainable()) CHECK(t->requires_grad);
    ps.set_masks_trainable(true);
    for (const auto& t : ps.token_mask) CHECK(t->requires_grad);
    ps.set_masks_trainable(false);
    for (const auto& t : ps.token_mask) CHECK(!t->requires_grad);
}

TEST_CASE("segment divisibility is enforced") {
    PromptConfig c = pc(4, 0);
    c.segments = 7;
    CHECK_THROWS_AS(init_prompts<double>(1, 32, c, 1), ConfigError);
}

TEST_CASE("placement switch changes neither parameter count nor shapes") {
    PromptConfig before = pc(4, 2);
    PromptConfig after = pc(4, 2);
    after.kv_placement = KvPlacement::After;
    auto a = init_prompts<double>(2, 16, before, 42);
    auto b = init_prompts<double>(2, 16, after, 42);
    CHECK(a.param_count() == b.param_count());
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(a.visual[i]->shape == b.visual[i]->shape);
        CHECK(a.kv_k[i]->shape == b.kv_k[i]->shape);
        CHECK(a.visual[i]->data == b.visual[i]->data);
    }
}

TEST_CASE("tunable-parameter count matches an independent hand count") {
    // d=16, N=2, H=2, M=4, M_kv=2 shared, image 8 / patch 4 / 1 channel,
    // ffn x4, 3 classes.
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.channels = 1;
    cfg.embed_dim = 16;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.ffn_mult = 4;
    cfg.num_classes = 3;
    cfg.prompt = pc(4, 2);
    auto m = make_model<double>(cfg, 1);

    // Hand count. Prompts: visual 2*4*16 = 128, shared KV 2*2*16 = 64.
    CHECK(m.prompts.param_count() == 192);
    // Head: 16*3 + 3.
    CHECK(m.backbone.head_param_count() == 51);
    // Backbone: patch 16*16+16, cls 16, pos 5*16, per layer
    // (2*16 LN1 + 4*(16*16+16) QKVO + 2*16 LN2 + 16*64+64 + 64*16+16) = 3280,
    // two layers, final LN 32.
    const std::size_t backbone = 256 + 16 + 16 + 80 + 2 * 3280 + 32;
    CHECK(m.backbone.backbone_param_count() == backbone);
    CHECK(backbone == 6960);

    auto c = count_tunable(m);
    CHECK(c.prompt_params == 192);
    CHECK(c.head_params == 51);
    CHECK(c.backbone_params == 6960);
    // 100 * 243 / 6960 = 3.4913... -> 3.49 at two decimals.
    CHECK(c.ratio_percent == doctest::Approx(3.49).epsilon(1e-12));
}

TEST_CASE("no prompts and an empty head give ratio 0") {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.embed_dim = 16;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.num_classes = 2;
    auto m = make_model<double>(cfg, 1);
    auto c = count_tunable(m);
    CHECK(c.prompt_params == 0);
    // The head always exists; the zero-ratio case is prompts-only.
    const double expect =
        std::round(10000.0 * static_cast<double>(c.head_params) / static_cast<double>(c.backbone_params)) /
        100.0;
    CHECK(c.ratio_percent == doctest::Approx(expect));
}
