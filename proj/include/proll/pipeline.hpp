#pragma once

#include <memory>
#include <string>

#include "proll/checkpoint.hpp"
#include "proll/config.hpp"
#include "proll/diffusion.hpp"

namespace proll {

struct PrepareArgs {
    std::string midi_dir;
    std::string out;
    uint64_t split_seed = 1;
    RunConfig cfg;
};

struct TrainArgs {
    std::string dataset;
    std::string checkpoint;
    std::string log;
    std::string resume;  // optional checkpoint to continue from
    RunConfig cfg;
};

struct SampleArgs {
    std::string checkpoint;
    std::string chords;   // chord text file, or
    std::string dataset;  // dataset whose `index`-th record supplies the chords
    int index = 0;
    int n = 1;
    std::string out_dir;
    RunConfig cfg;  // seed/guidance come from here
};

struct EvalArgs {
    std::string gen_dir;
    std::string ref_dir;      // directory of segment MIDI files, or
    std::string ref_dataset;  // dataset records decoded as the reference corpus
    std::string targets;      // chord text file applied to every generated segment
    std::string out;          // prefix for .csv / .txt reports
    RunConfig cfg;
};

void save_training_checkpoint(const std::string& path, const Model& model, const AdamT<float>& opt,
                              int step, const RunConfig& cfg);

struct LoadedCheckpoint {
    RunConfig cfg;
    std::unique_ptr<Model> model;
    std::vector<CheckpointEntry> entries;
    int step = 0;
};

LoadedCheckpoint load_training_checkpoint(const std::string& path);  // BadCheckpoint
void restore_adam(AdamT<float>& opt, const std::vector<CheckpointEntry>& entries);

int cmd_prepare(const PrepareArgs& args);
int cmd_train(const TrainArgs& args);
int cmd_sample(const SampleArgs& args);
int cmd_eval(const EvalArgs& args);

}  // namespace proll
