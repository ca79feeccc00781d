#include "proll/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "proll/errors.hpp"

namespace proll {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

long long parse_int(const std::string& key, const std::string& v) {
    long long out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError(key + ": expected integer, got '" + v + "'");
    return out;
}

double parse_real(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, ','))
        out.push_back(static_cast<int>(parse_int(key, trim(part))));
    if (out.empty()) throw ConfigError(key + ": empty list");
    return out;
}

std::string fmt_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

struct KeyDef {
    std::string name;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

const std::vector<KeyDef>& key_defs() {
    static const std::vector<KeyDef> defs = {
        {"image_size", [](RunConfig& c, const std::string& v) { c.unet.image_size = static_cast<int>(parse_int("image_size", v)); },
         [](const RunConfig& c) { return std::to_string(c.unet.image_size); }},
        {"base", [](RunConfig& c, const std::string& v) { c.unet.base = static_cast<int>(parse_int("base", v)); },
         [](const RunConfig& c) { return std::to_string(c.unet.base); }},
        {"mults", [](RunConfig& c, const std::string& v) { c.unet.mults = parse_int_list("mults", v); },
         [](const RunConfig& c) {
             std::string s;
             for (size_t i = 0; i < c.unet.mults.size(); ++i)
                 s += (i ? "," : "") + std::to_string(c.unet.mults[i]);
             return s;
         }},
        {"attn_max_hw", [](RunConfig& c, const std::string& v) { c.unet.attn_max_hw = static_cast<int>(parse_int("attn_max_hw", v)); },
         [](const RunConfig& c) { return std::to_string(c.unet.attn_max_hw); }},
        {"heads", [](RunConfig& c, const std::string& v) { c.unet.heads = static_cast<int>(parse_int("heads", v)); },
         [](const RunConfig& c) { return std::to_string(c.unet.heads); }},
        {"ssm_states", [](RunConfig& c, const std::string& v) { c.unet.ssm_states = static_cast<int>(parse_int("ssm_states", v)); },
         [](const RunConfig& c) { return std::to_string(c.unet.ssm_states); }},
        {"enable_wavelet_skips", [](RunConfig& c, const std::string& v) { c.unet.enable_wavelet_skips = parse_bool("enable_wavelet_skips", v); },
         [](const RunConfig& c) { return c.unet.enable_wavelet_skips ? std::string("true") : std::string("false"); }},
        {"enable_mamba", [](RunConfig& c, const std::string& v) { c.unet.enable_mamba = parse_bool("enable_mamba", v); },
         [](const RunConfig& c) { return c.unet.enable_mamba ? std::string("true") : std::string("false"); }},
        {"timesteps", [](RunConfig& c, const std::string& v) { c.timesteps = static_cast<int>(parse_int("timesteps", v)); },
         [](const RunConfig& c) { return std::to_string(c.timesteps); }},
        {"beta1", [](RunConfig& c, const std::string& v) { c.beta1 = parse_real("beta1", v); },
         [](const RunConfig& c) { return fmt_real(c.beta1); }},
        {"betaT", [](RunConfig& c, const std::string& v) { c.betaT = parse_real("betaT", v); },
         [](const RunConfig& c) { return fmt_real(c.betaT); }},
        {"lr", [](RunConfig& c, const std::string& v) { c.train.lr = parse_real("lr", v); },
         [](const RunConfig& c) { return fmt_real(c.train.lr); }},
        {"batch", [](RunConfig& c, const std::string& v) { c.train.batch = static_cast<int>(parse_int("batch", v)); },
         [](const RunConfig& c) { return std::to_string(c.train.batch); }},
        {"cond_dropout", [](RunConfig& c, const std::string& v) { c.train.cond_dropout = parse_real("cond_dropout", v); },
         [](const RunConfig& c) { return fmt_real(c.train.cond_dropout); }},
        {"guidance", [](RunConfig& c, const std::string& v) { c.train.guidance = parse_real("guidance", v); },
         [](const RunConfig& c) { return fmt_real(c.train.guidance); }},
        {"lambda_wavelet", [](RunConfig& c, const std::string& v) { c.train.lambda_wavelet = parse_real("lambda_wavelet", v); },
         [](const RunConfig& c) { return fmt_real(c.train.lambda_wavelet); }},
        {"seed", [](RunConfig& c, const std::string& v) { c.train.seed = static_cast<uint64_t>(parse_int("seed", v)); },
         [](const RunConfig& c) { return std::to_string(c.train.seed); }},
        {"max_steps", [](RunConfig& c, const std::string& v) { c.train.max_steps = static_cast<int>(parse_int("max_steps", v)); },
         [](const RunConfig& c) { return std::to_string(c.train.max_steps); }},
        {"checkpoint_every", [](RunConfig& c, const std::string& v) { c.train.checkpoint_every = static_cast<int>(parse_int("checkpoint_every", v)); },
         [](const RunConfig& c) { return std::to_string(c.train.checkpoint_every); }},
        {"downsample", [](RunConfig& c, const std::string& v) { c.downsample = static_cast<int>(parse_int("downsample", v)); },
         [](const RunConfig& c) { return std::to_string(c.downsample); }},
    };
    return defs;
}

void validate(const RunConfig& c) {
    if (c.train.cond_dropout < 0.0 || c.train.cond_dropout > 1.0)
        throw ConfigError("cond_dropout must lie in [0,1]");
    if (c.train.guidance < 0.0) throw ConfigError("guidance must be >= 0");
    if (c.train.lambda_wavelet < 0.0) throw ConfigError("lambda_wavelet must be >= 0");
    if (c.train.batch < 1) throw ConfigError("batch must be >= 1");
    if (c.unet.image_size < 4) throw ConfigError("image_size too small");
    if (c.downsample < 1) throw ConfigError("downsample must be >= 1");
}

}  // namespace

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const auto& d : key_defs()) k.push_back(d.name);
        return k;
    }();
    return keys;
}

void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& d : key_defs()) {
        if (d.name == key) {
            d.set(cfg, value);
            cfg.unet.max_steps = cfg.timesteps;  // time embedding bound follows the schedule
            return;
        }
    }
    throw ConfigError("unknown key '" + key + "'");
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
        set_config_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    validate(cfg);
    return cfg;
}

RunConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    try {
        return parse_config_text(buf.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

std::string config_text(const RunConfig& cfg) {
    std::string out;
    for (const auto& d : key_defs()) out += d.name + " = " + d.get(cfg) + "\n";
    return out;
}

}  // namespace proll
