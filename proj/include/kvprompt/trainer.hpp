#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "kvprompt/data.hpp"
#include "kvprompt/errors.hpp"
#include "kvprompt/serialize.hpp"
#include "kvprompt/vit.hpp"

// Training protocol: full-model pretraining on a source task, prompt+head
// fine-tuning against a frozen backbone, rewinding after pruning, and the
// (lr, weight-decay) grid sweep with an 80/20 tuning split per cell.

namespace kvp {

struct TrainConfig {
    double base_lr = 0.1;
    double weight_decay = 1e-4;
    std::size_t epochs = 100;
    std::size_t warmup_epochs = 10;
    std::size_t batch_size = 64;
    double momentum = 0.9;
    std::vector<double> lr_grid = {50.0, 25.0, 10.0, 5.0, 2.5, 1.0, 0.5, 0.25, 0.1, 0.05};
    std::vector<double> wd_grid = {0.01, 0.001, 0.0001, 0.0};
    std::vector<double> prune_ratio_grid = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs == 0) throw ConfigError("epochs must be positive");
        if (warmup_epochs >= epochs) {
            throw ConfigError("warmup_epochs " + std::to_string(warmup_epochs) +
                              " must be below epochs " + std::to_string(epochs));
        }
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (base_lr < 0 || weight_decay < 0) throw ConfigError("lr and weight decay must be >= 0");
        if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0,1)");
        if (lr_grid.empty() || wd_grid.empty() || prune_ratio_grid.empty()) {
            throw ConfigError("hyperparameter grids must be non-empty");
        }
    }
};

// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay that
// reaches exactly 0 at total_steps. step == total_steps is allowed so the
// closed-form endpoint is observable.
inline double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                    double base_lr) {
    if (warmup_steps >= total_steps) {
        throw ConfigError("warmup steps " + std::to_string(warmup_steps) +
                          " must be below total steps " + std::to_string(total_steps));
    }
    if (step > total_steps) {
        throw ConfigError("step " + std::to_string(step) + " past total " +
                          std::to_string(total_steps));
    }
    if (step < warmup_steps) {
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    const double t = static_cast<double>(step - warmup_steps) /
                     static_cast<double>(total_steps - warmup_steps);
    return 0.5 * base_lr * (1.0 + std::cos(t * 3.14159265358979323846));
}

// SGD with momentum and decoupled weight decay. An optional per-element
// update mask freezes individual entries: masked-out elements receive no
// gradient step, no weight decay, and no momentum accumulation, so pruned
// prompt coordinates stay bit-identical through a whole run.
template <class T>
class SgdM {
public:
    explicit SgdM(double momentum) : momentum_(momentum) {}

    void add(const TensorPtr<T>& p, std::vector<char> update_mask = {}) {
        if (!update_mask.empty() && update_mask.size() != p->numel()) {
            throw ShapeError("update mask size " + std::to_string(update_mask.size()) +
                             " does not match parameter " + shape_str(p->shape));
        }
        slots_.push_back({p, std::vector<T>(p->numel(), T(0)), std::move(update_mask)});
    }

    std::size_t size() const { return slots_.size(); }

    void step(double lr, double weight_decay) {
        for (auto& s : slots_) {
            T* x = s.param->data.data();
            const T* g = s.param->grad.data();
            for (std::size_t i = 0; i < s.param->numel(); ++i) {
                if (!s.mask.empty() && !s.mask[i]) continue;
                s.velocity[i] = static_cast<T>(momentum_) * s.velocity[i] + g[i];
                x[i] -= static_cast<T>(lr) * s.velocity[i];
                x[i] -= static_cast<T>(lr * weight_decay) * x[i];
            }
        }
    }

private:
    struct Slot {
        TensorPtr<T> param;
        std::vector<T> velocity;
        std::vector<char> mask;
    };
    std::vector<Slot> slots_;
    double momentum_;
};

// Per-epoch metrics plus the run-level summary. Wall time lives here for
// reporting but must never enter metric files (they are compared bit-exactly
// across reruns).
struct RunRecord {
    std::vector<double> train_loss, train_acc, val_loss, val_acc;
    double init_val_loss = 0.0, init_val_acc = 0.0;
    std::size_t best_epoch = 0;  // 0 = initialization snapshot
    double best_val_acc = 0.0;
    double test_acc = -1.0;
    double tunable_ratio_percent = 0.0;
    double base_lr = 0.0, weight_decay = 0.0;
    double wall_seconds = 0.0;
    std::size_t epochs() const { return train_loss.size(); }
};

template <class T>
struct Batchset {
    std::vector<TensorPtr<T>> images;
    std::vector<int> labels;
    std::size_t size() const { return labels.size(); }
};

template <class T>
Batchset<T> to_batchset(const DatasetSplit& s, const std::vector<double>& mean,
                        const std::vector<double>& stddev) {
    Batchset<T> b;
    b.images.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        b.images.push_back(image_input<T>(s, i, mean, stddev));
        b.labels.push_back(s.labels[i]);
    }
    return b;
}

template <class T>
struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
};

// Forward-only loss/accuracy over a whole batchset.
template <class T>
EvalResult<T> evaluate(const Model<T>& m, const Batchset<T>& data) {
    if (data.size() == 0) throw ConfigError("evaluate on empty split");
    Tape<T> tape;  // non-recording
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto logits = forward(tape, m, data.images[i]);
        auto loss = ops::cross_entropy(tape, logits, {data.labels[i]});
        loss_sum += static_cast<double>(loss->data[0]);
        std::size_t arg = 0;
        for (std::size_t j = 1; j < logits->shape[1]; ++j)
            if (logits->data[j] > logits->data[arg]) arg = j;
        correct += arg == static_cast<std::size_t>(data.labels[i]);
    }
    return {loss_sum / static_cast<double>(data.size()),
            static_cast<double>(correct) / static_cast<double>(data.size())};
}

enum class TrainScope { Full, PromptsAndHead };

namespace detail {

// FNV-1a over the serialized backbone tensors; cheap per-epoch witness that
// a frozen backbone stayed bit-identical.
template <class T>
std::uint64_t backbone_checksum(const Model<T>& m) {
    std::uint64_t h = 1469598103934665603ull;
    m.backbone.for_each_backbone([&](const std::string&, const TensorPtr<T>& t) {
        const std::string bytes = tensor_to_bytes(*t);
        for (unsigned char c : bytes) {
            h ^= c;
            h *= 1099511628211ull;
        }
    });
    return h;
}

// Per-element update masks for the visual prompts, derived from the current
// {0,1} mask values: a pruned token row or segment block is frozen.
template <class T>
std::vector<char> visual_update_mask(const Model<T>& m, std::size_t layer) {
    const auto& pc = m.cfg.prompt;
    const std::size_t d = m.cfg.embed_dim, R = pc.segments, seg_w = d / R;
    std::vector<char> mask(pc.visual_len * d, 1);
    for (std::size_t k = 0; k < pc.visual_len; ++k) {
        const bool token_dead = m.prompts.token_mask[layer]->data[k] == T(0);
        for (std::size_t r = 0; r < R; ++r) {
            const bool seg_dead = m.prompts.seg_mask[layer]->data[k * R + r] == T(0);
            if (!token_dead && !seg_dead) continue;
            for (std::size_t j = 0; j < seg_w; ++j) mask[k * d + r * seg_w + j] = 0;
        }
    }
    return mask;
}

template <class T>
std::vector<TensorPtr<T>> scoped_trainable(Model<T>& m, TrainScope scope) {
    std::vector<TensorPtr<T>> params;
    if (scope == TrainScope::Full) {
        m.backbone.set_backbone_trainable(true);
        for (auto& t : m.backbone.backbone_tensors()) params.push_back(t);
    } else {
        m.backbone.set_backbone_trainable(false);
    }
    m.backbone.set_head_trainable(true);
    for (auto& t : m.backbone.head_tensors()) params.push_back(t);
    for (auto& t : m.prompts.trainable()) {
        t->enable_grad();
        params.push_back(t);
    }
    m.prompts.set_masks_trainable(false);
    return params;
}

}  // namespace detail

// Shared training loop. Trains `scope` parameters of `m` in place; selects
// the epoch (or the initialization) with the best validation accuracy and
// restores that snapshot before returning. Ties go to the earlier epoch.
// A non-finite loss aborts with a diagnostic naming the epoch and step.
template <class T>
RunRecord train_loop(Model<T>& m, const Batchset<T>& train, const Batchset<T>& val,
                     const TrainConfig& tc, TrainScope scope) {
    tc.validate();
    if (train.size() == 0 || val.size() == 0) throw ConfigError("train/val split missing");

    auto params = detail::scoped_trainable(m, scope);
    SgdM<T> opt(tc.momentum);
    for (auto& p : params) {
        std::vector<char> mask;
        if (scope == TrainScope::PromptsAndHead) {
            for (std::size_t l = 0; l < m.prompts.visual.size(); ++l)
                if (p == m.prompts.visual[l]) mask = detail::visual_update_mask(m, l);
        }
        opt.add(p, std::move(mask));
    }

    const std::uint64_t frozen_sum =
        scope == TrainScope::PromptsAndHead ? detail::backbone_checksum(m) : 0;

    RunRecord rec;
    rec.base_lr = tc.base_lr;
    rec.weight_decay = tc.weight_decay;
    rec.tunable_ratio_percent = count_tunable(m).ratio_percent;

    const auto init_eval = evaluate(m, val);
    rec.init_val_loss = init_eval.loss;
    rec.init_val_acc = init_eval.accuracy;
    rec.best_val_acc = init_eval.accuracy;
    rec.best_epoch = 0;
    auto snapshot = [&] {
        std::vector<std::vector<T>> out;
        for (const auto& p : params) out.push_back(p->data);
        return out;
    };
    auto best_params = snapshot();

    const std::size_t steps_per_epoch = (train.size() + tc.batch_size - 1) / tc.batch_size;
    const std::size_t total_steps = steps_per_epoch * tc.epochs;
    const std::size_t warmup_steps = steps_per_epoch * tc.warmup_epochs;

    Rng root(tc.seed);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::size_t gstep = 0;

    for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
        Rng er = root.fork(epoch);
        er.shuffle(order);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < train.size(); start += tc.batch_size) {
            const std::size_t bs = std::min(tc.batch_size, train.size() - start);
            std::vector<TensorPtr<T>> images;
            std::vector<int> labels;
            images.reserve(bs);
            for (std::size_t i = 0; i < bs; ++i) {
                images.push_back(train.images[order[start + i]]);
                labels.push_back(train.labels[order[start + i]]);
            }
            Tape<T> tape;
            tape.set_recording(true);
            auto logits = batch_forward(tape, m, images);
            auto loss = ops::cross_entropy(tape, logits, labels);
            if (!std::isfinite(static_cast<double>(loss->data[0]))) {
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch) +
                                   " step " + std::to_string(gstep));
            }
            loss_sum += static_cast<double>(loss->data[0]) * static_cast<double>(bs);
            for (std::size_t i = 0; i < bs; ++i) {
                const T* row = logits->data.data() + i * logits->shape[1];
                std::size_t arg = 0;
                for (std::size_t j = 1; j < logits->shape[1]; ++j)
                    if (row[j] > row[arg]) arg = j;
                correct += arg == static_cast<std::size_t>(labels[i]);
            }
            for (auto& p : params) p->zero_grad();
            tape.backward(loss);
            opt.step(lr_at(gstep, total_steps, warmup_steps, tc.base_lr), tc.weight_decay);
            ++gstep;
        }
        rec.train_loss.push_back(loss_sum / static_cast<double>(train.size()));
        rec.train_acc.push_back(static_cast<double>(correct) /
                                static_cast<double>(train.size()));

        const auto ev = evaluate(m, val);
        rec.val_loss.push_back(ev.loss);
        rec.val_acc.push_back(ev.accuracy);
        if (ev.accuracy > rec.best_val_acc) {
            rec.best_val_acc = ev.accuracy;
            rec.best_epoch = epoch;
            best_params = snapshot();
        }

        if (scope == TrainScope::PromptsAndHead &&
            detail::backbone_checksum(m) != frozen_sum) {
            throw NumericError("frozen backbone changed during epoch " + std::to_string(epoch));
        }
    }

    for (std::size_t i = 0; i < params.size(); ++i) params[i]->data = best_params[i];
    return rec;
}

// Full-model source-task training (backbone, head, and any prompts present).
template <class T>
RunRecord pretrain_backbone(Model<T>& m, const Batchset<T>& train, const Batchset<T>& val,
                            const TrainConfig& tc) {
    return train_loop(m, train, val, tc, TrainScope::Full);
}

// Prompt + head training against a frozen backbone.
template <class T>
RunRecord finetune(Model<T>& m, const Batchset<T>& train, const Batchset<T>& val,
                   const TrainConfig& tc) {
    return train_loop(m, train, val, tc, TrainScope::PromptsAndHead);
}

// One post-pruning retraining pass with the originally selected lr/wd. The
// masks are frozen inputs here: rewinding never changes them, and pruned
// coordinates stay untouched via the optimizer's update masks.
template <class T>
RunRecord rewind(Model<T>& m, const Batchset<T>& train, const Batchset<T>& val,
                 const TrainConfig& tc) {
    if (!m.prompts.token_pruned) {
        throw ConfigError("rewind called before pruning");
    }
    return train_loop(m, train, val, tc, TrainScope::PromptsAndHead);
}

// ---- hyperparameter sweep ----

struct SweepCell {
    double lr = 0.0;
    double wd = 0.0;
    double val_acc = -1.0;
    bool failed = false;
};

struct SweepResult {
    std::vector<SweepCell> cells;  // grid order: lr-major, wd-minor
    std::size_t best_index = 0;
    RunRecord final_record;
};

// Argmax over successful cells; ties resolved toward the earlier grid
// position so sweeps are reproducible regardless of worker scheduling.
inline std::size_t pick_best_cell(const std::vector<SweepCell>& cells) {
    if (cells.empty()) throw ConfigError("sweep produced no cells");
    std::size_t best = cells.size();
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (cells[i].failed) continue;
        if (best == cells.size() || cells[i].val_acc > cells[best].val_acc) best = i;
    }
    if (best == cells.size()) throw ConfigError("every sweep cell failed");
    return best;
}

inline std::size_t worker_count(std::size_t cells) {
    std::size_t n = std::thread::hardware_concurrency();
    if (const char* env = std::getenv("KVPROMPT_THREADS")) {
        const long v = std::atol(env);
        if (v >= 1) n = static_cast<std::size_t>(v);
    }
    if (n == 0) n = 1;
    return std::min(n, cells);
}

// Grid search over (lr, wd). Every cell fine-tunes a fresh model (from
// `make_model_fn`) on an 80/20 split of the train split, scored by the best
// validation accuracy. Cells run on a bounded worker pool but results are
// merged in grid order. The winning pair then retrains on the full train
// split, validated against the dataset's own val split.
template <class T>
SweepResult sweep(const std::function<Model<T>()>& make_model_fn, const Dataset& data,
                  const TrainConfig& tc, Model<T>* final_model_out = nullptr) {
    tc.validate();
    if (data.train.size() == 0) throw ConfigError("sweep needs a train split");
    if (data.val.size() == 0) throw ConfigError("sweep needs a val split");

    const auto [tune_train, tune_val] = split_800_200(data.train, tc.seed);

    SweepResult result;
    for (double lr : tc.lr_grid)
        for (double wd : tc.wd_grid) result.cells.push_back({lr, wd, -1.0, false});

    std::atomic<std::size_t> next{0};
    auto run_cells = [&] {
        const auto train_bs = to_batchset<T>(tune_train, data.channel_mean, data.channel_std);
        const auto val_bs = to_batchset<T>(tune_val, data.channel_mean, data.channel_std);
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= result.cells.size()) break;
            auto& cell = result.cells[i];
            TrainConfig cell_tc = tc;
            cell_tc.base_lr = cell.lr;
            cell_tc.weight_decay = cell.wd;
            try {
                Model<T> m = make_model_fn();
                const RunRecord rec = finetune(m, train_bs, val_bs, cell_tc);
                cell.val_acc = rec.best_val_acc;
            } catch (const NumericError&) {
                cell.failed = true;  // diverged cell: marked, sweep continues
            }
        }
    };

    const std::size_t workers = worker_count(result.cells.size());
    if (workers <= 1) {
        run_cells();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run_cells);
        for (auto& t : pool) t.join();
    }

    result.best_index = pick_best_cell(result.cells);
    TrainConfig win = tc;
    win.base_lr = result.cells[result.best_index].lr;
    win.weight_decay = result.cells[result.best_index].wd;
    Model<T> final_model = make_model_fn();
    const auto full_train = to_batchset<T>(data.train, data.channel_mean, data.channel_std);
    const auto val_bs = to_batchset<T>(data.val, data.channel_mean, data.channel_std);
    result.final_record = finetune(final_model, full_train, val_bs, win);
    if (data.test.size() > 0) {
        const auto test_bs = to_batchset<T>(data.test, data.channel_mean, data.channel_std);
        result.final_record.test_acc = evaluate(final_model, test_bs).accuracy;
    }
    if (final_model_out) *final_model_out = final_model;
    return result;
}

}  // namespace kvp
