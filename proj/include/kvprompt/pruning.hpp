#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "kvprompt/errors.hpp"
#include "kvprompt/vit.hpp"

// Importance-guided cascade pruning of visual prompts. The {0,1} token and
// segment masks double as differentiable probes: with every mask at 1 the
// model is unchanged, and the mean absolute mask gradient over a data pass
// scores how much the loss reacts to each prompt token / embedding segment.
// Pruning zeroes the lowest-scoring tokens first, then the lowest-scoring
// segments inside the survivors (cascade order is enforced).

namespace kvp {

struct ImportanceReport {
    std::size_t num_layers = 0;
    std::size_t visual_len = 0;  // M, tokens per layer
    std::size_t segments = 0;    // R, segments per token
    std::size_t examples_accumulated = 0;
    std::vector<std::vector<double>> token_scores;    // [layer][M]
    std::vector<std::vector<double>> segment_scores;  // [layer][M*R]

    // Pruning plan; ratios stay negative until the matching stage ran.
    double token_ratio = -1.0;
    double segment_ratio = -1.0;
    std::vector<std::vector<char>> token_pruned;    // [layer][M], 0/1
    std::vector<std::vector<char>> segment_pruned;  // [layer][M*R], 0/1

    bool token_stage_done() const { return token_ratio >= 0.0; }

    // Rows: one per token (segment = -1), then one per (token, segment).
    // A segment row counts as pruned when its own mask or its token's
    // mask was zeroed.
    void write_csv(const std::filesystem::path& path) const {
        std::ofstream f(path);
        if (!f) throw ParseError("cannot write " + path.string());
        f << "layer,token,segment,score,pruned\n";
        char buf[64];
        const auto fmt = [&](double v) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            return std::string(buf);
        };
        for (std::size_t l = 0; l < num_layers; ++l) {
            for (std::size_t k = 0; k < visual_len; ++k) {
                const int pruned = token_pruned.empty() ? 0 : token_pruned[l][k];
                f << l << "," << k << ",-1," << fmt(token_scores[l][k]) << "," << pruned << "\n";
            }
            for (std::size_t k = 0; k < visual_len; ++k)
                for (std::size_t r = 0; r < segments; ++r) {
                    int pruned = 0;
                    if (!token_pruned.empty() && token_pruned[l][k]) pruned = 1;
                    if (!segment_pruned.empty() && segment_pruned[l][k * segments + r]) pruned = 1;
                    f << l << "," << k << "," << r << ","
                      << fmt(segment_scores[l][k * segments + r]) << "," << pruned << "\n";
                }
        }
    }
};

namespace detail {

template <class T>
void zero_probe_grads(Model<T>& m) {
    for (auto& t : m.prompts.token_mask) t->zero_grad();
    for (auto& t : m.prompts.seg_mask) t->zero_grad();
    for (auto& t : m.prompts.trainable()) t->zero_grad();
    for (auto& t : m.backbone.head_tensors()) t->zero_grad();
    for (auto& t : m.backbone.backbone_tensors())
        if (t->requires_grad) t->zero_grad();
}

}  // namespace detail

// Mean |dL/d mask| per token and per segment over the given examples; one
// backward pass per example, no parameter is updated. Requires every mask
// to sit at exactly 1 (the probe measures the unpruned model).
template <class T>
ImportanceReport importance_scores(Model<T>& m, const std::vector<TensorPtr<T>>& images,
                                   const std::vector<int>& labels) {
    if (images.empty()) throw ConfigError("importance_scores needs a non-empty data stream");
    if (images.size() != labels.size()) {
        throw ShapeError("importance_scores: " + std::to_string(images.size()) + " images vs " +
                         std::to_string(labels.size()) + " labels");
    }
    const auto& pc = m.cfg.prompt;
    if (pc.visual_len == 0) throw ConfigError("importance_scores requires visual prompts");
    for (const auto& tm : m.prompts.token_mask)
        for (T v : tm->data)
            if (v != T(1)) throw ConfigError("importance probe requires all token masks at 1");
    for (const auto& sm : m.prompts.seg_mask)
        for (T v : sm->data)
            if (v != T(1)) throw ConfigError("importance probe requires all segment masks at 1");

    ImportanceReport rep;
    rep.num_layers = m.cfg.num_layers;
    rep.visual_len = pc.visual_len;
    rep.segments = pc.segments;
    rep.token_scores.assign(rep.num_layers, std::vector<double>(rep.visual_len, 0.0));
    rep.segment_scores.assign(rep.num_layers,
                              std::vector<double>(rep.visual_len * rep.segments, 0.0));

    m.prompts.set_masks_trainable(true);
    for (std::size_t i = 0; i < images.size(); ++i) {
        detail::zero_probe_grads(m);
        Tape<T> tape;
        tape.set_recording(true);
        auto logits = forward(tape, m, images[i]);
        auto loss = ops::cross_entropy(tape, logits, {labels[i]});
        tape.backward(loss);
        for (std::size_t l = 0; l < rep.num_layers; ++l) {
            const auto& tg = m.prompts.token_mask[l]->grad;
            const auto& sg = m.prompts.seg_mask[l]->grad;
            for (std::size_t k = 0; k < rep.visual_len; ++k)
                rep.token_scores[l][k] += std::abs(static_cast<double>(tg[k]));
            for (std::size_t s = 0; s < rep.visual_len * rep.segments; ++s)
                rep.segment_scores[l][s] += std::abs(static_cast<double>(sg[s]));
        }
    }
    m.prompts.set_masks_trainable(false);
    detail::zero_probe_grads(m);

    const double n = static_cast<double>(images.size());
    for (auto& v : rep.token_scores)
        for (double& s : v) s /= n;
    for (auto& v : rep.segment_scores)
        for (double& s : v) s /= n;
    rep.examples_accumulated = images.size();
    return rep;
}

// Combines shard reports (weighted by example counts); shards must agree on
// geometry. Used when the probe pass is split across model replicas.
inline ImportanceReport merge_reports(const std::vector<ImportanceReport>& shards) {
    if (shards.empty()) throw ConfigError("merge_reports needs at least one shard");
    ImportanceReport out = shards[0];
    out.examples_accumulated = 0;
    for (auto& v : out.token_scores) std::fill(v.begin(), v.end(), 0.0);
    for (auto& v : out.segment_scores) std::fill(v.begin(), v.end(), 0.0);
    for (const auto& s : shards) {
        if (s.num_layers != out.num_layers || s.visual_len != out.visual_len ||
            s.segments != out.segments) {
            throw ShapeError("merge_reports: shard geometry mismatch");
        }
        const double w = static_cast<double>(s.examples_accumulated);
        for (std::size_t l = 0; l < out.num_layers; ++l) {
            for (std::size_t k = 0; k < out.visual_len; ++k)
                out.token_scores[l][k] += w * s.token_scores[l][k];
            for (std::size_t j = 0; j < out.visual_len * out.segments; ++j)
                out.segment_scores[l][j] += w * s.segment_scores[l][j];
        }
        out.examples_accumulated += s.examples_accumulated;
    }
    if (out.examples_accumulated == 0) throw ConfigError("merge_reports: no examples accumulated");
    const double n = static_cast<double>(out.examples_accumulated);
    for (auto& v : out.token_scores)
        for (double& x : v) x /= n;
    for (auto& v : out.segment_scores)
        for (double& x : v) x /= n;
    return out;
}

namespace detail {

// Indices of the `count` lowest scores; on ties the lower index is kept
// (i.e. among equals, higher indices are pruned first).
inline std::vector<std::size_t> lowest_k(const std::vector<double>& scores, std::size_t count) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] < scores[b];
        return a > b;
    });
    idx.resize(count);
    return idx;
}

}  // namespace detail

// Zeroes the floor(ratio*M) lowest-scoring token masks per layer and records
// the plan in the report. Must run before segment_prune.
template <class T>
void token_prune(ImportanceReport& rep, Model<T>& m, double ratio) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) {
        throw ConfigError("token prune ratio must be in [0,1], got " + std::to_string(ratio));
    }
    if (rep.examples_accumulated == 0) throw ConfigError("token_prune: report has no scores");
    if (rep.num_layers != m.cfg.num_layers || rep.visual_len != m.cfg.prompt.visual_len ||
        rep.segments != m.cfg.prompt.segments) {
        throw ShapeError("token_prune: report does not match model geometry");
    }
    const std::size_t count =
        static_cast<std::size_t>(std::floor(ratio * static_cast<double>(rep.visual_len)));
    rep.token_pruned.assign(rep.num_layers, std::vector<char>(rep.visual_len, 0));
    for (std::size_t l = 0; l < rep.num_layers; ++l) {
        for (std::size_t k : detail::lowest_k(rep.token_scores[l], count)) {
            rep.token_pruned[l][k] = 1;
            m.prompts.token_mask[l]->data[k] = T(0);
        }
    }
    rep.token_ratio = ratio;
    m.prompts.token_pruned = true;
}

// Zeroes the floor(ratio*R) lowest-scoring segments inside every surviving
// token. Rejects the call when token_prune has not run (cascade order).
template <class T>
void segment_prune(ImportanceReport& rep, Model<T>& m, double ratio) {
    if (!rep.token_stage_done()) {
        throw ConfigError("segment_prune called before token_prune (cascade order)");
    }
    if (!(ratio >= 0.0 && ratio <= 1.0)) {
        throw ConfigError("segment prune ratio must be in [0,1], got " + std::to_string(ratio));
    }
    if (rep.num_layers != m.cfg.num_layers || rep.visual_len != m.cfg.prompt.visual_len ||
        rep.segments != m.cfg.prompt.segments) {
        throw ShapeError("segment_prune: report does not match model geometry");
    }
    const std::size_t R = rep.segments;
    const std::size_t count = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(R)));
    rep.segment_pruned.assign(rep.num_layers, std::vector<char>(rep.visual_len * R, 0));
    for (std::size_t l = 0; l < rep.num_layers; ++l)
        for (std::size_t k = 0; k < rep.visual_len; ++k) {
            if (rep.token_pruned[l][k]) continue;
            const std::vector<double> local(rep.segment_scores[l].begin() + k * R,
                                            rep.segment_scores[l].begin() + (k + 1) * R);
            for (std::size_t r : detail::lowest_k(local, count)) {
                rep.segment_pruned[l][k * R + r] = 1;
                m.prompts.seg_mask[l]->data[k * R + r] = T(0);
            }
        }
    rep.segment_ratio = ratio;
    m.prompts.segment_pruned = true;
}

}  // namespace kvp
