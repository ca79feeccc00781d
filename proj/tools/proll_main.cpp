#include <cstdio>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "proll/errors.hpp"
#include "proll/pipeline.hpp"

namespace {

struct ConfigCli {
    std::string config_path;
    std::map<std::string, std::string> overrides;

    void attach(CLI::App* sub) {
        sub->add_option("-c,--config", config_path, "config file of 'key = value' lines");
        for (const auto& key : proll::config_keys())
            sub->add_option("--" + key, overrides[key], "override config key " + key);
    }

    proll::RunConfig resolve() const {
        proll::RunConfig cfg =
            config_path.empty() ? proll::RunConfig{} : proll::load_config_file(config_path);
        for (const auto& [key, value] : overrides)
            if (!value.empty()) proll::set_config_key(cfg, key, value);
        return cfg;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"chord-conditioned pianoroll diffusion"};
    app.require_subcommand(1);

    auto* prepare = app.add_subcommand("prepare", "parse MIDI files into a training dataset");
    proll::PrepareArgs pa;
    ConfigCli pc;
    prepare->add_option("--midi_dir", pa.midi_dir, "directory of .mid files")->required();
    prepare->add_option("--out", pa.out, "output dataset path")->required();
    prepare->add_option("--split_seed", pa.split_seed, "song-level train/val split seed");
    pc.attach(prepare);

    auto* train = app.add_subcommand("train", "train the diffusion model");
    proll::TrainArgs ta;
    ConfigCli tc;
    train->add_option("--dataset", ta.dataset, "prepared dataset")->required();
    train->add_option("--checkpoint", ta.checkpoint, "checkpoint output path")->required();
    train->add_option("--log", ta.log, "CSV loss log path");
    train->add_option("--resume", ta.resume, "checkpoint to continue from");
    tc.attach(train);

    auto* sample = app.add_subcommand("sample", "generate pianorolls from a checkpoint");
    proll::SampleArgs sa;
    ConfigCli sc;
    sample->add_option("--checkpoint", sa.checkpoint, "trained checkpoint")->required();
    sample->add_option("--chords", sa.chords, "chord text file with the target progression");
    sample->add_option("--dataset", sa.dataset, "dataset supplying the chord condition");
    sample->add_option("--index", sa.index, "record index within --dataset");
    sample->add_option("--n", sa.n, "samples to generate");
    sample->add_option("--out_dir", sa.out_dir, "output directory")->required();
    sc.attach(sample);

    auto* eval = app.add_subcommand("eval", "compare generated and reference corpora");
    proll::EvalArgs ea;
    ConfigCli ec;
    eval->add_option("--gen_dir", ea.gen_dir, "directory of generated segment MIDI files")->required();
    eval->add_option("--ref_dir", ea.ref_dir, "directory of reference segment MIDI files");
    eval->add_option("--ref_dataset", ea.ref_dataset, "dataset used as the reference corpus");
    eval->add_option("--targets", ea.targets, "chord text file the samples were conditioned on");
    eval->add_option("--out", ea.out, "report path prefix (.csv/.txt)");
    ec.attach(eval);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (prepare->parsed()) {
            pa.cfg = pc.resolve();
            return proll::cmd_prepare(pa);
        }
        if (train->parsed()) {
            ta.cfg = tc.resolve();
            return proll::cmd_train(ta);
        }
        if (sample->parsed()) {
            sa.cfg = sc.resolve();
            return proll::cmd_sample(sa);
        }
        if (eval->parsed()) {
            ea.cfg = ec.resolve();
            return proll::cmd_eval(ea);
        }
    } catch (const proll::ConfigError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 3;
    }
    return 0;
}
