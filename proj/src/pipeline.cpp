#include "proll/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "proll/errors.hpp"
#include "proll/features.hpp"
#include "proll/midi.hpp"
#include "proll/pianoroll.hpp"

namespace proll {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> list_midi_files(const std::string& dir) {
    std::vector<std::string> out;
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        auto ext = e.path().extension().string();
        if (ext == ".mid" || ext == ".midi") out.push_back(e.path().string());
    }
    std::sort(out.begin(), out.end());
    return out;
}

Tensor config_as_tensor(const RunConfig& cfg) {
    std::string text = config_text(cfg);
    Tensor t({static_cast<int>(text.size())});
    for (size_t i = 0; i < text.size(); ++i) t[i] = static_cast<float>(static_cast<uint8_t>(text[i]));
    return t;
}

std::string tensor_as_text(const Tensor& t) {
    std::string s(t.size(), '\0');
    for (size_t i = 0; i < t.size(); ++i) s[i] = static_cast<char>(static_cast<uint8_t>(std::lround(t[i])));
    return s;
}

}  // namespace

void save_training_checkpoint(const std::string& path, const Model& model, const AdamT<float>& opt,
                              int step, const RunConfig& cfg) {
    std::vector<CheckpointEntry> entries;
    for (auto* p : model.params.all()) entries.push_back({p->name, p->value});
    const auto& ps = opt.params();
    auto& opt_mut = const_cast<AdamT<float>&>(opt);
    for (size_t i = 0; i < ps.size(); ++i) entries.push_back({"adam.m." + ps[i]->name, opt_mut.m()[i]});
    for (size_t i = 0; i < ps.size(); ++i) entries.push_back({"adam.v." + ps[i]->name, opt_mut.v()[i]});
    Tensor step_t({1});
    step_t[0] = static_cast<float>(step);
    entries.push_back({"adam.step", step_t});
    entries.push_back({"config", config_as_tensor(cfg)});
    save_checkpoint(path, entries);
}

LoadedCheckpoint load_training_checkpoint(const std::string& path) {
    LoadedCheckpoint out;
    out.entries = load_checkpoint(path);

    const Tensor* cfg_entry = nullptr;
    for (const auto& e : out.entries)
        if (e.name == "config") cfg_entry = &e.value;
    if (!cfg_entry) throw BadCheckpoint("missing config entry in " + path);
    try {
        out.cfg = parse_config_text(tensor_as_text(*cfg_entry));
    } catch (const ConfigError& e) {
        throw BadCheckpoint(std::string("embedded config unreadable: ") + e.what());
    }

    out.model = std::make_unique<Model>(out.cfg.unet, out.cfg.train.seed);
    for (auto* p : out.model->params.all()) {
        const Tensor* found = nullptr;
        for (const auto& e : out.entries)
            if (e.name == p->name) found = &e.value;
        if (!found) throw BadCheckpoint("missing parameter " + p->name);
        if (found->shape() != p->value.shape()) throw BadCheckpoint("shape mismatch for " + p->name);
        p->value = *found;
    }
    for (const auto& e : out.entries)
        if (e.name == "adam.step") out.step = static_cast<int>(std::lround(e.value[0]));
    return out;
}

void restore_adam(AdamT<float>& opt, const std::vector<CheckpointEntry>& entries) {
    const auto& ps = opt.params();
    for (size_t i = 0; i < ps.size(); ++i) {
        const Tensor *m = nullptr, *v = nullptr;
        for (const auto& e : entries) {
            if (e.name == "adam.m." + ps[i]->name) m = &e.value;
            if (e.name == "adam.v." + ps[i]->name) v = &e.value;
        }
        if (!m || !v) throw BadCheckpoint("missing optimizer state for " + ps[i]->name);
        opt.m()[i] = *m;
        opt.v()[i] = *v;
    }
    for (const auto& e : entries)
        if (e.name == "adam.step") opt.set_step_count(std::lround(e.value[0]));
}

int cmd_prepare(const PrepareArgs& args) {
    const RunConfig& cfg = args.cfg;
    if (kFullPitches / cfg.downsample != cfg.unet.image_size)
        throw ConfigError("image_size " + std::to_string(cfg.unet.image_size) +
                          " does not match 128/downsample");

    auto files = list_midi_files(args.midi_dir);
    SegmentDataset ds;
    ds.pitches = cfg.unet.image_size;
    ds.frames = cfg.unet.image_size;

    size_t n_train = 0, n_val = 0;
    int song_idx = 0;
    for (const auto& path : files) {
        MidiParseResult parsed;
        try {
            parsed = parse_midi(read_file_bytes(path));
        } catch (const std::exception& e) {
            std::fprintf(stderr, "skip %s: %s\n", path.c_str(), e.what());
            continue;
        }
        Rng split_rng = rng_stream(args.split_seed, "split", static_cast<uint64_t>(song_idx));
        Split split = split_rng.uniform() < 0.9 ? Split::Train : Split::Val;
        ++song_idx;

        for (const auto& seg : segment_song(parsed.notes)) {
            Tensor roll = encode_pianoroll(seg);
            if (cfg.downsample > 1) roll = downsample_roll(roll, cfg.downsample);
            SegmentRecord rec;
            rec.chords = extract_chords(roll, cfg.downsample);
            rec.roll = std::move(roll);
            rec.split = split;
            (split == Split::Train ? n_train : n_val)++;
            ds.records.push_back(std::move(rec));
        }
    }
    if (ds.records.empty()) throw NoValidSongs("no segments produced from " + args.midi_dir);

    save_dataset(args.out, ds);
    std::printf("train segments: %zu\nval segments: %zu\n", n_train, n_val);
    return 0;
}

int cmd_train(const TrainArgs& args) {
    RunConfig cfg = args.cfg;
    SegmentDataset ds = load_dataset(args.dataset);
    if (ds.pitches != cfg.unet.image_size || ds.frames != cfg.unet.image_size)
        throw ConfigError("dataset is " + std::to_string(ds.pitches) + "x" + std::to_string(ds.frames) +
                          " but image_size is " + std::to_string(cfg.unet.image_size));

    Model model(cfg.unet, cfg.train.seed);
    AdamT<float> opt(model.params.all(), static_cast<float>(cfg.train.lr));
    NoiseSchedule ns = cfg.schedule();

    int start_step = 0;
    if (!args.resume.empty()) {
        auto loaded = load_training_checkpoint(args.resume);
        if (config_text(loaded.cfg) != config_text(cfg))
            throw BadCheckpoint("resume config differs from the requested run");
        for (size_t i = 0; i < model.params.all().size(); ++i)
            model.params.all()[i]->value = loaded.model->params.all()[i]->value;
        restore_adam(opt, loaded.entries);
        start_step = loaded.step;
    }

    std::ofstream csv;
    std::ostream* csv_ptr = nullptr;
    if (!args.log.empty()) {
        csv.open(args.log);
        if (!csv) throw IoError("cannot write " + args.log);
        csv << "step,loss_diffusion,loss_wavelet,lr\n";
        csv_ptr = &csv;
    }

    auto save = [&](int step) { save_training_checkpoint(args.checkpoint, model, opt, step, cfg); };
    train_loop(ds, model, opt, cfg.train, ns, csv_ptr, save, start_step);
    save(cfg.train.max_steps);
    std::printf("trained to step %d; checkpoint %s\n", cfg.train.max_steps, args.checkpoint.c_str());
    return 0;
}

int cmd_sample(const SampleArgs& args) {
    auto loaded = load_training_checkpoint(args.checkpoint);
    RunConfig cfg = loaded.cfg;
    // sampling-time knobs come from the invocation, not the training run
    cfg.train.seed = args.cfg.train.seed;
    cfg.train.guidance = args.cfg.train.guidance;

    ChordSequence chords;
    if (!args.chords.empty()) {
        chords = read_chord_text(args.chords);
    } else if (!args.dataset.empty()) {
        SegmentDataset ds = load_dataset(args.dataset);
        if (args.index < 0 || args.index >= static_cast<int>(ds.records.size()))
            throw BadRange("dataset index " + std::to_string(args.index) + " out of range");
        chords = ds.records[args.index].chords;
    } else {
        throw ConfigError("sample needs --chords or --dataset");
    }

    fs::create_directories(args.out_dir);
    NoiseSchedule ns = cfg.schedule();
    double fpb = static_cast<double>(cfg.unet.image_size) / kSegmentBeats;
    int png_scale = std::max(1, 256 / cfg.unet.image_size);

    write_chord_text(args.out_dir + "/targets.txt", chords);
    for (int i = 0; i < args.n; ++i) {
        Rng rng = rng_stream(cfg.train.seed, "sample", static_cast<uint64_t>(i));
        Tensor roll = sample(*loaded.model, chords, cfg.train.guidance, ns, rng);
        auto notes = decode_pianoroll(roll, 0.5f, cfg.downsample, fpb);
        char name[64];
        std::snprintf(name, sizeof name, "sample_%03d", i);
        write_file_bytes(args.out_dir + "/" + name + ".mid", write_midi(notes));
        render_png(roll, args.out_dir + "/" + name + ".png", png_scale);
    }
    std::printf("wrote %d samples to %s\n", args.n, args.out_dir.c_str());
    return 0;
}

int cmd_eval(const EvalArgs& args) {
    const RunConfig& cfg = args.cfg;

    std::vector<std::vector<NoteEvent>> gen;
    for (const auto& path : list_midi_files(args.gen_dir)) {
        try {
            gen.push_back(parse_midi(read_file_bytes(path)).notes);
        } catch (const std::exception& e) {
            std::fprintf(stderr, "skip %s: %s\n", path.c_str(), e.what());
        }
    }

    std::vector<std::vector<NoteEvent>> ref;
    if (!args.ref_dataset.empty()) {
        SegmentDataset ds = load_dataset(args.ref_dataset);
        double fpb = static_cast<double>(ds.frames) / kSegmentBeats;
        for (const auto& rec : ds.records)
            ref.push_back(decode_pianoroll(rec.roll, 0.5f, cfg.downsample, fpb));
    } else if (!args.ref_dir.empty()) {
        for (const auto& path : list_midi_files(args.ref_dir)) {
            try {
                ref.push_back(parse_midi(read_file_bytes(path)).notes);
            } catch (const std::exception& e) {
                std::fprintf(stderr, "skip %s: %s\n", path.c_str(), e.what());
            }
        }
    } else {
        throw ConfigError("eval needs --ref_dir or --ref_dataset");
    }

    if (gen.size() != ref.size())
        std::fprintf(stderr, "warning: %zu generated vs %zu reference segments\n", gen.size(), ref.size());

    std::vector<std::pair<ChordSequence, ChordSequence>> pairs;
    if (!args.targets.empty()) {
        ChordSequence target = read_chord_text(args.targets);
        for (const auto& notes : gen) {
            Tensor roll = encode_pianoroll(notes);
            if (cfg.downsample > 1) roll = downsample_roll(roll, cfg.downsample);
            pairs.emplace_back(target, extract_chords(roll, cfg.downsample));
        }
    }

    OAReport rep = evaluate(gen, ref, pairs);
    std::string table = report_table(rep);
    std::fputs(table.c_str(), stdout);
    if (!args.out.empty()) {
        std::ofstream(args.out + ".csv") << report_csv(rep);
        std::ofstream(args.out + ".txt") << table;
    }
    return 0;
}

}  // namespace proll
