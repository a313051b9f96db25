#include "kvprompt/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <utility>

#include <json.hpp>

#include "kvprompt/diag.hpp"
#include "kvprompt/pruning.hpp"
#include "kvprompt/trainer.hpp"

namespace kvp {

namespace {

using nlohmann::json;

std::string g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void resize_to(Dataset& d, std::size_t hw) {
    for (DatasetSplit* s : {&d.train, &d.val, &d.test}) {
        if (s->size() > 0 && (s->height != hw || s->width != hw)) *s = resize_nearest(*s, hw);
    }
}

void check_labels(const Dataset& d) {
    for (const DatasetSplit* s : {&d.train, &d.val, &d.test}) {
        for (int l : s->labels) {
            if (l < 0 || static_cast<std::size_t>(l) >= d.num_classes) {
                throw ConfigError("label " + std::to_string(l) + " outside num_classes=" +
                                  std::to_string(d.num_classes));
            }
        }
    }
}

std::ofstream& null_stream() {
    static std::ofstream sink;  // never opened: writes are silently dropped
    return sink;
}

void write_config_snapshot(const std::filesystem::path& dir, const ExperimentSpec& spec) {
    std::ofstream f(dir / "config.json");
    if (!f) throw ParseError("cannot write " + (dir / "config.json").string());
    f << experiment_to_json(spec).dump(2) << "\n";
}

void write_metrics_csv(const std::filesystem::path& path, const RunRecord& rec) {
    std::ofstream f(path);
    if (!f) throw ParseError("cannot write " + path.string());
    f << "epoch,train_loss,train_acc,val_loss,val_acc\n";
    for (std::size_t e = 0; e < rec.epochs(); ++e) {
        f << e + 1 << ',' << g17(rec.train_loss[e]) << ',' << g17(rec.train_acc[e]) << ','
          << g17(rec.val_loss[e]) << ',' << g17(rec.val_acc[e]) << "\n";
    }
}

void write_summary_json(const std::filesystem::path& path, const RunRecord& rec,
                        json extra = json::object()) {
    json j = std::move(extra);
    j["init_val_loss"] = rec.init_val_loss;
    j["init_val_acc"] = rec.init_val_acc;
    j["best_epoch"] = rec.best_epoch;
    j["best_val_acc"] = rec.best_val_acc;
    if (rec.test_acc >= 0.0) j["test_acc"] = rec.test_acc;
    j["tunable_ratio_percent"] = rec.tunable_ratio_percent;
    j["base_lr"] = rec.base_lr;
    j["weight_decay"] = rec.weight_decay;
    std::ofstream f(path);
    if (!f) throw ParseError("cannot write " + path.string());
    f << j.dump(2) << "\n";  // wall-clock time deliberately excluded
}

// kept/total visual-prompt elements under the current token/segment masks.
template <class T>
std::pair<std::size_t, std::size_t> visual_kept_elements(const Model<T>& m) {
    const std::size_t d = m.cfg.embed_dim, M = m.cfg.prompt.visual_len;
    const std::size_t R = m.cfg.prompt.segments, w = R ? d / R : d;
    std::size_t kept = 0, total = 0;
    for (std::size_t l = 0; l < m.cfg.num_layers; ++l) {
        for (std::size_t k = 0; k < M; ++k) {
            for (std::size_t r = 0; r < R; ++r) {
                total += w;
                if (m.prompts.token_mask[l]->data[k] != T(0) &&
                    m.prompts.seg_mask[l]->data[k * R + r] != T(0))
                    kept += w;
            }
        }
    }
    return {kept, total};
}

template <class T>
double pruned_visual_percent(const Model<T>& m) {
    const auto [kept, total] = visual_kept_elements(m);
    if (total == 0) return 0.0;
    return 100.0 * static_cast<double>(total - kept) / static_cast<double>(total);
}

// (unpruned prompt params + head) / backbone, mirroring count_tunable but
// with masked-out visual elements removed.
template <class T>
double effective_tunable_percent(const Model<T>& m) {
    const auto c = count_tunable(m);
    const auto [kept, total] = visual_kept_elements(m);
    const std::size_t prompt = c.prompt_params - (total - kept);
    const double raw = 100.0 * static_cast<double>(prompt + c.head_params) /
                       static_cast<double>(c.backbone_params);
    return std::round(raw * 100.0) / 100.0;
}

template <class T>
CheckpointMeta meta_for(const ExperimentSpec& spec, const std::string& stage, double lr,
                        double wd) {
    CheckpointMeta meta;
    meta.stage = stage;
    meta.seed = spec.seed;
    meta.base_lr = lr;
    meta.weight_decay = wd;
    return meta;
}

template <class T>
void report_record(std::ostream& log, const std::string& stage, const RunRecord& rec) {
    log << stage << ": best_epoch=" << rec.best_epoch << " best_val_acc=" << g17(rec.best_val_acc)
        << " init_val_acc=" << g17(rec.init_val_acc);
    if (rec.test_acc >= 0.0) log << " test_acc=" << g17(rec.test_acc);
    log << " tunable=" << rec.tunable_ratio_percent << "%\n";
}

template <class T>
void copy_backbone(Model<T>& dst, const Model<T>& src) {
    std::vector<std::pair<std::string, TensorPtr<T>>> a, b;
    dst.backbone.for_each_backbone(
        [&](const std::string& n, const TensorPtr<T>& t) { a.push_back({n, t}); });
    src.backbone.for_each_backbone(
        [&](const std::string& n, const TensorPtr<T>& t) { b.push_back({n, t}); });
    if (a.size() != b.size()) throw ConfigError("checkpoint backbone does not match the model");
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].first != b[i].first || a[i].second->shape != b[i].second->shape) {
            throw ConfigError("checkpoint backbone does not match the model at " + a[i].first);
        }
        a[i].second->data = b[i].second->data;
    }
}

}  // namespace

StageData load_stage_data(const ExperimentSpec& spec) {
    StageData sd;
    const DataSpec& ds = spec.data;
    if (ds.kind == DataKind::Shift) {
        auto pair = make_shift_task(spec.seed, ds.classes, ds.per_class);
        sd.source = std::move(pair.first);
        sd.target = std::move(pair.second);
        sd.has_source = true;
    } else {
        Dataset d;
        DatasetSplit train;
        if (ds.kind == DataKind::Idx) {
            train = load_idx(ds.train_images, ds.train_labels);
            if (!ds.test_images.empty()) {
                if (ds.test_labels.empty()) throw ConfigError("test_images needs test_labels");
                d.test = load_idx(ds.test_images, ds.test_labels);
            }
        } else {
            train = load_manifest(ds.train_csv);
            if (!ds.test_csv.empty()) d.test = load_manifest(ds.test_csv);
        }
        std::tie(d.train, d.val) = split_800_200(train, spec.seed);
        d.num_classes = ds.num_classes;
        for (std::size_t c = 0; c < d.num_classes; ++c)
            d.class_names.push_back("class_" + std::to_string(c));
        fit_normalization(d);
        sd.target = std::move(d);
    }
    for (Dataset* d : {&sd.source, &sd.target}) {
        if (d->train.size() == 0) continue;
        if (d->train.channels != spec.model.channels) {
            throw ConfigError("dataset has " + std::to_string(d->train.channels) +
                              " channels but the model expects " +
                              std::to_string(spec.model.channels));
        }
        resize_to(*d, spec.model.image_size);
        check_labels(*d);
        if (d->num_classes != spec.model.num_classes) {
            throw ConfigError("dataset has " + std::to_string(d->num_classes) +
                              " classes but the model head has " +
                              std::to_string(spec.model.num_classes));
        }
    }
    return sd;
}

template <class T>
Model<T> stage_model(const ExperimentSpec& spec) {
    if (spec.init_from.empty()) return make_model<T>(spec.model, spec.seed);
    CheckpointMeta meta = read_checkpoint_meta(spec.init_from);
    if (model_config_to_json(meta.model) == model_config_to_json(spec.model)) {
        return load_checkpoint<T>(spec.init_from);
    }
    Model<T> m = make_model<T>(spec.model, spec.seed);
    const Model<T> src = load_checkpoint<T>(spec.init_from);
    copy_backbone(m, src);
    return m;
}

template Model<float> stage_model<float>(const ExperimentSpec&);
template Model<double> stage_model<double>(const ExperimentSpec&);

namespace {

template <class T>
struct StageIo {
    std::filesystem::path out;
    StageData data;
    Batchset<T> train, val, test;  // target task
};

template <class T>
StageIo<T> stage_io(const ExperimentSpec& spec) {
    if (spec.out_dir.empty()) throw ConfigError("out_dir is required");
    StageIo<T> io;
    io.out = spec.out_dir;
    std::filesystem::create_directories(io.out);
    write_config_snapshot(io.out, spec);
    io.data = load_stage_data(spec);
    const Dataset& t = io.data.target;
    io.train = to_batchset<T>(t.train, t.channel_mean, t.channel_std);
    io.val = to_batchset<T>(t.val, t.channel_mean, t.channel_std);
    if (t.test.size() > 0) io.test = to_batchset<T>(t.test, t.channel_mean, t.channel_std);
    return io;
}

template <class T>
void cmd_pretrain(const ExperimentSpec& spec, StageIo<T>& io, std::ostream& log) {
    ExperimentSpec pre = spec;
    pre.model.prompt.visual_len = 0;  // plain encoder: no prompt slots
    pre.model.prompt.kv_len = 0;
    Model<T> m = stage_model<T>(pre);
    const Dataset& d = io.data.has_source ? io.data.source : io.data.target;
    const auto train = to_batchset<T>(d.train, d.channel_mean, d.channel_std);
    const auto val = to_batchset<T>(d.val, d.channel_mean, d.channel_std);
    auto rec = pretrain_backbone(m, train, val, spec.train);
    if (d.test.size() > 0)
        rec.test_acc = evaluate(m, to_batchset<T>(d.test, d.channel_mean, d.channel_std)).accuracy;
    save_checkpoint(io.out / "checkpoint", m,
                    meta_for<T>(spec, "pretrain", spec.train.base_lr, spec.train.weight_decay));
    write_metrics_csv(io.out / "metrics.csv", rec);
    write_summary_json(io.out / "summary.json", rec);
    report_record<T>(log, "pretrain", rec);
}

template <class T>
void cmd_finetune(const ExperimentSpec& spec, StageIo<T>& io, std::ostream& log) {
    Model<T> m = stage_model<T>(spec);
    auto rec = finetune(m, io.train, io.val, spec.train);
    if (io.test.size() > 0) rec.test_acc = evaluate(m, io.test).accuracy;
    save_checkpoint(io.out / "checkpoint", m,
                    meta_for<T>(spec, "finetune", spec.train.base_lr, spec.train.weight_decay));
    write_metrics_csv(io.out / "metrics.csv", rec);
    write_summary_json(io.out / "summary.json", rec);
    report_record<T>(log, "finetune", rec);
}

template <class T>
void cmd_prune(const ExperimentSpec& spec, StageIo<T>& io, std::ostream& log) {
    if (spec.init_from.empty()) {
        throw ConfigError("prune needs init_from pointing at a finetuned checkpoint");
    }
    CheckpointMeta meta = read_checkpoint_meta(spec.init_from);
    if (meta.stage != "finetune") {
        throw ConfigError("prune requires a finetuned checkpoint; got stage `" + meta.stage +
                          "` (run finetune or sweep first)");
    }
    if (meta.token_pruned) throw ConfigError("checkpoint is already pruned");
    Model<T> m = load_checkpoint<T>(spec.init_from);
    auto rep = importance_scores(m, io.train.images, io.train.labels);
    token_prune(rep, m, spec.prune_token_ratio);
    segment_prune(rep, m, spec.effective_segment_ratio());
    rep.write_csv(io.out / "importance.csv");
    save_checkpoint(io.out / "checkpoint", m,
                    meta_for<T>(spec, "prune", meta.base_lr, meta.weight_decay));

    json j;
    j["token_ratio"] = spec.prune_token_ratio;
    j["segment_ratio"] = spec.effective_segment_ratio();
    j["pruned_visual_percent"] = pruned_visual_percent(m);
    j["tunable_ratio_percent"] = effective_tunable_percent(m);
    std::ofstream f(io.out / "summary.json");
    f << j.dump(2) << "\n";
    log << "prune: visual_params_pruned=" << g17(pruned_visual_percent(m))
        << "% tunable=" << effective_tunable_percent(m) << "%\n";
}

template <class T>
void cmd_rewind(const ExperimentSpec& spec, StageIo<T>& io, std::ostream& log) {
    if (spec.init_from.empty()) {
        throw ConfigError("rewind needs init_from pointing at a pruned checkpoint");
    }
    CheckpointMeta meta = read_checkpoint_meta(spec.init_from);
    if (meta.stage != "prune") {
        throw ConfigError("rewind requires a pruned checkpoint; got stage `" + meta.stage + "`");
    }
    Model<T> m = load_checkpoint<T>(spec.init_from);
    auto rec = rewind(m, io.train, io.val, spec.train);
    if (io.test.size() > 0) rec.test_acc = evaluate(m, io.test).accuracy;
    save_checkpoint(io.out / "checkpoint", m,
                    meta_for<T>(spec, "rewind", spec.train.base_lr, spec.train.weight_decay));
    write_metrics_csv(io.out / "metrics.csv", rec);
    json extra;
    extra["pruned_visual_percent"] = pruned_visual_percent(m);
    write_summary_json(io.out / "summary.json", rec, extra);
    report_record<T>(log, "rewind", rec);
}

template <class T>
void cmd_eval(const ExperimentSpec& spec, StageIo<T>& io, std::ostream& log) {
    const Model<T> m = stage_model<T>(spec);
    std::ofstream f(io.out / "eval.csv");
    if (!f) throw ParseError("cannot write " + (io.out / "eval.csv").string());
    f << "split,loss,accuracy,examples\n";
    auto one = [&](const char* name, const Batchset<T>& b) {
        if (b.size() == 0) return;
        const auto ev = evaluate(m, b);
        f << name << ',' << g17(ev.loss) << ',' << g17(ev.accuracy) << ',' << b.size() << "\n";
        log << "eval " << name << ": loss=" << g17(ev.loss) << " acc=" << g17(ev.accuracy)
            << "\n";
    };
    one("train", io.train);
    one("val", io.val);
    one("test", io.test);
}

template <class T>
void cmd_sweep(const ExperimentSpec& spec, StageIo<T>& io, std::ostream& log) {
    auto factory = [&spec] { return stage_model<T>(spec); };
    Model<T> final_model = make_model<T>(spec.model, spec.seed);
    const auto result = sweep<T>(factory, io.data.target, spec.train, &final_model);

    std::ofstream f(io.out / "sweep.csv");
    if (!f) throw ParseError("cannot write " + (io.out / "sweep.csv").string());
    f << "lr,wd,val_acc,status\n";
    for (const auto& c : result.cells) {
        f << g17(c.lr) << ',' << g17(c.wd) << ','
          << (c.failed ? std::string("") : g17(c.val_acc)) << ','
          << (c.failed ? "failed" : "ok") << "\n";
    }
    const auto& win = result.cells[result.best_index];
    save_checkpoint(io.out / "checkpoint", final_model,
                    meta_for<T>(spec, "finetune", win.lr, win.wd));
    write_metrics_csv(io.out / "metrics.csv", result.final_record);
    json extra;
    extra["winner_lr"] = win.lr;
    extra["winner_wd"] = win.wd;
    extra["cells"] = result.cells.size();
    write_summary_json(io.out / "summary.json", result.final_record, extra);
    log << "sweep: winner lr=" << g17(win.lr) << " wd=" << g17(win.wd) << "\n";
    report_record<T>(log, "sweep", result.final_record);
}

template <class T>
void cmd_embed(const ExperimentSpec& spec, StageIo<T>& io, std::ostream& log) {
    const Model<T> m = stage_model<T>(spec);
    const Dataset& t = io.data.target;
    const DatasetSplit& split = t.val.size() >= 2 ? t.val : t.train;
    if (split.size() < 2) throw ConfigError("embed needs at least two examples");

    EmbeddingSet set;
    if (m.cfg.prompt.visual_len == 0 && m.cfg.prompt.kv_len == 0) {
        set.source = "backbone";
    } else if (m.cfg.prompt.kv_len == 0) {
        set.source = "visual-only";
    } else {
        set.source = "kv-prompted";
    }
    if (m.prompts.token_pruned) set.source += "+pruned";

    Tape<T> tape;  // non-recording
    for (std::size_t i = 0; i < split.size(); ++i) {
        const auto img = image_input<T>(split, i, t.channel_mean, t.channel_std);
        TensorPtr<T> cls;
        forward<T>(tape, m, img, nullptr, &cls);
        set.vectors.emplace_back(cls->data.begin(), cls->data.end());
        set.labels.push_back(split.labels[i]);
    }

    std::ofstream f(io.out / "recall.csv");
    if (!f) throw ParseError("cannot write " + (io.out / "recall.csv").string());
    f << "metric,k,recall,queried,skipped\n";
    for (const auto metric : {Metric::Euclidean, Metric::Poincare}) {
        const char* name = metric == Metric::Euclidean ? "euclidean" : "poincare";
        for (std::size_t k : {std::size_t{1}, std::size_t{5}, std::size_t{10}}) {
            if (k >= set.size()) continue;
            const auto r = recall_at_k(set, k, metric);
            f << name << ',' << k << ',' << g17(r.recall) << ',' << r.queried << ',' << r.skipped
              << "\n";
            if (k == 1) log << "recall@1 (" << name << ") = " << g17(r.recall) << "\n";
        }
    }
    const auto disk = project_to_disk(set);
    write_embedding_csv(io.out / "embeddings.csv", disk);
    write_embedding_svg(io.out / "embeddings.svg", disk);
    const auto stats = border_stats(disk);
    log << "embed: n=" << set.size() << " source=" << set.source
        << " border_gap_mean=" << g17(stats.mean) << "\n";
}

template <class T>
void cmd_ablate(const ExperimentSpec& spec, StageIo<T>& io, std::ostream& log) {
    struct RowSpec {
        const char* name;
        bool kv, prune;
    };
    const RowSpec rows[] = {{"visual", false, false},
                            {"visual+kv", true, false},
                            {"visual+prune", false, true},
                            {"full", true, true}};
    std::ofstream f(io.out / "ablate.csv");
    if (!f) throw ParseError("cannot write " + (io.out / "ablate.csv").string());
    f << "setting,pruning_percent,tuned_total_percent,accuracy\n";
    char line[128];
    std::snprintf(line, sizeof line, "%-14s %10s %12s %10s", "setting", "Pruning", "Tuned/Total",
                  "Accuracy");
    log << line << "\n";

    for (const auto& row : rows) {
        ExperimentSpec rs = spec;
        if (!row.kv) rs.model.prompt.kv_len = 0;
        Model<T> m = stage_model<T>(rs);
        auto rec = finetune(m, io.train, io.val, spec.train);
        if (row.prune) {
            auto rep = importance_scores(m, io.train.images, io.train.labels);
            token_prune(rep, m, spec.prune_token_ratio);
            segment_prune(rep, m, spec.effective_segment_ratio());
            rec = rewind(m, io.train, io.val, spec.train);
        }
        const double acc =
            io.test.size() > 0 ? evaluate(m, io.test).accuracy : rec.best_val_acc;
        const double pruned = pruned_visual_percent(m);
        const double tuned = effective_tunable_percent(m);
        f << row.name << ',' << g17(pruned) << ',' << g17(tuned) << ',' << g17(acc) << "\n";
        std::snprintf(line, sizeof line, "%-14s %9.1f%% %11.2f%% %10.4f", row.name, pruned, tuned,
                      acc);
        log << line << "\n";
    }
}

template <class T>
void run_command_t(const std::string& command, const ExperimentSpec& spec, std::ostream& log) {
    auto io = stage_io<T>(spec);
    if (command == "pretrain") {
        cmd_pretrain<T>(spec, io, log);
    } else if (command == "finetune") {
        cmd_finetune<T>(spec, io, log);
    } else if (command == "prune") {
        cmd_prune<T>(spec, io, log);
    } else if (command == "rewind") {
        cmd_rewind<T>(spec, io, log);
    } else if (command == "eval") {
        cmd_eval<T>(spec, io, log);
    } else if (command == "sweep") {
        cmd_sweep<T>(spec, io, log);
    } else if (command == "embed") {
        cmd_embed<T>(spec, io, log);
    } else if (command == "ablate") {
        cmd_ablate<T>(spec, io, log);
    } else {
        throw ConfigError("unknown command `" + command + "`");
    }
}

}  // namespace

void run_command(const std::string& command, const ExperimentSpec& spec, bool quiet) {
    std::ostream& log = quiet ? static_cast<std::ostream&>(null_stream()) : std::cout;
    const auto t0 = std::chrono::steady_clock::now();
    if (spec.precision == 64) {
        run_command_t<double>(command, spec, log);
    } else {
        run_command_t<float>(command, spec, log);
    }
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s finished in %.2fs", command.c_str(), dt.count());
    log << buf << "\n";
}

}  // namespace kvp
