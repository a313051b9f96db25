#pragma once

#include <string>

#include "kvprompt/checkpoint.hpp"
#include "kvprompt/config.hpp"
#include "kvprompt/data.hpp"

// Experiment stages behind the CLI: each command reads an ExperimentSpec,
// builds its model and data, runs, and leaves a self-describing run directory
// (config snapshot, checkpoint, metric/report files). Metric files contain
// only deterministic numbers so identical spec + seed reproduce them
// byte-for-byte; wall-clock time goes to stdout only.

namespace kvp {

struct StageData {
    Dataset source;  // pretraining task (only the synthetic pair has one)
    Dataset target;  // the task being tuned / evaluated
    bool has_source = false;
};

// Loads the dataset named by the spec and resizes it to the model's input
// size (nearest neighbour) when the stored images differ.
StageData load_stage_data(const ExperimentSpec& spec);

// The model a stage starts from. With no init_from: fresh from the spec's
// seed. With init_from naming a checkpoint of identical model config: the
// full checkpoint. Otherwise: fresh model with the checkpoint's backbone
// copied in (how tuning stages consume a pretrained encoder whose prompt
// geometry differs).
template <class T>
Model<T> stage_model(const ExperimentSpec& spec);

// Runs one of: pretrain, finetune, prune, rewind, eval, sweep, embed,
// ablate. Throws ParseError/ConfigError for bad inputs, NumericError when
// training leaves the reals, std::runtime_error subclasses otherwise.
void run_command(const std::string& command, const ExperimentSpec& spec, bool quiet = false);

}  // namespace kvp
