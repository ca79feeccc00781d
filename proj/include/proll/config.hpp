#pragma once

#include <string>
#include <vector>

#include "proll/diffusion.hpp"
#include "proll/unet.hpp"

namespace proll {

// Flat key-value run configuration; every key doubles as a CLI flag.
struct RunConfig {
    UNetConfig unet;
    TrainConfig train;
    int timesteps = 1000;
    double beta1 = 1e-4;
    double betaT = 0.02;
    int downsample = 1;  // OR-pool factor applied during prepare

    NoiseSchedule schedule() const { return make_schedule(timesteps, beta1, betaT); }
};

// All recognized keys, in canonical order.
const std::vector<std::string>& config_keys();

// Parses and assigns one key; ConfigError on unknown keys or bad values.
void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value);

// `key = value` lines, '#' comments. IoError on unreadable files.
RunConfig load_config_file(const std::string& path);

// Canonical echo of every key (also embedded into checkpoints).
std::string config_text(const RunConfig& cfg);

RunConfig parse_config_text(const std::string& text);

}  // namespace proll
