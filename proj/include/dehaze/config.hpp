// Plain-text configuration: `[section]` headers with `key = value` lines
// mirroring the ModelConfig / TrainConfig / DatasetConfig field names.
// Comma-separated values fill list fields. After the file is applied,
// environment variables of the form DEHAZE_<SECTION>_<KEY> (upper case)
// override individual keys, e.g. DEHAZE_TRAIN_TOTAL_ITERS=500.

#pragma once

#include <cstdlib>
#include <fstream>
#include <map>

#include "dehaze/train.hpp"

namespace dehaze {

struct ConfigFile {
    // section -> key -> raw value string
    std::map<std::string, std::map<std::string, std::string>> values;

    static ConfigFile parse(std::istream& in) {
        ConfigFile cfg;
        std::string line, section = "";
        auto trim = [](std::string v) {
            const auto a = v.find_first_not_of(" \t\r");
            const auto b = v.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : v.substr(a, b - a + 1);
        };
        while (std::getline(in, line)) {
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw ParamError("config: malformed section header '" + line + "'");
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ParamError("config: expected 'key = value', got '" + line + "'");
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty()) throw ParamError("config: empty key in '" + line + "'");
            cfg.values[section][key] = value;
        }
        return cfg;
    }

    static ConfigFile load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ParamError("config: cannot open " + path);
        return parse(in);
    }

    // Environment overrides: DEHAZE_<SECTION>_<KEY>.
    void apply_env(const std::vector<std::pair<std::string, std::string>>& keys) {
        for (const auto& [section, key] : keys) {
            std::string name = "DEHAZE_" + section + "_" + key;
            for (char& c : name) c = static_cast<char>(std::toupper(
                                    static_cast<unsigned char>(c)));
            if (const char* v = std::getenv(name.c_str())) values[section][key] = v;
        }
    }

    const std::string* find(const std::string& section, const std::string& key) const {
        const auto s = values.find(section);
        if (s == values.end()) return nullptr;
        const auto k = s->second.find(key);
        return k == s->second.end() ? nullptr : &k->second;
    }
};

namespace detail {

inline std::int64_t parse_i64(const std::string& v, const std::string& what) {
    try {
        std::size_t pos = 0;
        const std::int64_t r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ParamError("config: expected integer for " + what + ", got '" + v + "'");
    }
}

inline double parse_f64(const std::string& v, const std::string& what) {
    try {
        std::size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ParamError("config: expected number for " + what + ", got '" + v + "'");
    }
}

inline std::vector<std::int64_t> parse_i64_list(const std::string& v,
                                                const std::string& what) {
    std::vector<std::int64_t> out;
    std::size_t start = 0;
    while (start <= v.size()) {
        const auto comma = v.find(',', start);
        const std::string item =
            comma == std::string::npos ? v.substr(start) : v.substr(start, comma - start);
        const auto a = item.find_first_not_of(" \t");
        const auto b = item.find_last_not_of(" \t");
        if (a == std::string::npos)
            throw ParamError("config: empty list element in " + what);
        out.push_back(parse_i64(item.substr(a, b - a + 1), what));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

}  // namespace detail

inline void apply_model_config(const ConfigFile& cfg, ModelConfig& m) {
    auto i64 = [&cfg](const char* key, std::int64_t& field) {
        if (const auto* v = cfg.find("model", key))
            field = detail::parse_i64(*v, std::string("model.") + key);
    };
    auto list = [&cfg](const char* key, std::vector<std::int64_t>& field) {
        if (const auto* v = cfg.find("model", key))
            field = detail::parse_i64_list(*v, std::string("model.") + key);
    };
    i64("levels", m.levels);
    list("blocks", m.blocks);
    list("experts", m.experts);
    list("topk", m.topk);
    i64("base_channels", m.base_channels);
    list("channel_mult", m.channel_mult);
    i64("d_state", m.d_state);
}

inline void apply_train_config(const ConfigFile& cfg, TrainConfig& t) {
    auto i64 = [&cfg](const char* key, std::int64_t& field) {
        if (const auto* v = cfg.find("train", key))
            field = detail::parse_i64(*v, std::string("train.") + key);
    };
    auto f64 = [&cfg](const char* key, double& field) {
        if (const auto* v = cfg.find("train", key))
            field = detail::parse_f64(*v, std::string("train.") + key);
    };
    i64("batch_size", t.batch_size);
    i64("total_iters", t.total_iters);
    f64("lr_start", t.lr_start);
    f64("lr_end", t.lr_end);
    i64("crop", t.crop);
    if (const auto* v = cfg.find("train", "seed"))
        t.seed = static_cast<std::uint64_t>(detail::parse_i64(*v, "train.seed"));
    i64("checkpoint_interval", t.checkpoint_interval);
    i64("log_interval", t.log_interval);
    f64("beta1", t.beta1);
    f64("beta2", t.beta2);
    f64("adam_eps", t.adam_eps);
    f64("weight_decay", t.weight_decay);
    if (const auto* v = cfg.find("train", "prior_window"))
        t.prior_window = static_cast<int>(detail::parse_i64(*v, "train.prior_window"));
}

inline void apply_dataset_config(const ConfigFile& cfg, DatasetConfig& d) {
    auto i64 = [&cfg](const char* key, std::int64_t& field) {
        if (const auto* v = cfg.find("dataset", key))
            field = detail::parse_i64(*v, std::string("dataset.") + key);
    };
    auto f64 = [&cfg](const char* key, double& field) {
        if (const auto* v = cfg.find("dataset", key))
            field = detail::parse_f64(*v, std::string("dataset.") + key);
    };
    if (const auto* v = cfg.find("dataset", "input_dir")) d.input_dir = *v;
    if (const auto* v = cfg.find("dataset", "out_dir")) d.out_dir = *v;
    i64("scenes", d.scenes);
    i64("size", d.size);
    i64("num_betas", d.num_betas);
    f64("beta_min", d.beta_min);
    f64("beta_max", d.beta_max);
    if (const auto* v = cfg.find("dataset", "depth_kind")) {
        if (*v == "linear-ramp") d.depth_kind = DepthKind::LinearRamp;
        else if (*v == "radial") d.depth_kind = DepthKind::Radial;
        else if (*v == "from-file") d.depth_kind = DepthKind::FromFile;
        else throw ParamError("config: unknown depth_kind '" + *v + "'");
    }
    f64("d_min", d.d_min);
    f64("d_max", d.d_max);
    f64("airlight_min", d.airlight_min);
    f64("airlight_max", d.airlight_max);
    f64("train_frac", d.train_frac);
    f64("q1", d.q1);
    f64("q2", d.q2);
    if (const auto* v = cfg.find("dataset", "dark_window"))
        d.dark_window = static_cast<int>(detail::parse_i64(*v, "dataset.dark_window"));
    if (const auto* v = cfg.find("dataset", "seed"))
        d.seed = static_cast<std::uint64_t>(detail::parse_i64(*v, "dataset.seed"));
}

// Every (section, key) the env override mechanism recognizes.
inline std::vector<std::pair<std::string, std::string>> known_config_keys() {
    return {
        {"model", "levels"},        {"model", "blocks"},
        {"model", "experts"},       {"model", "topk"},
        {"model", "base_channels"}, {"model", "channel_mult"},
        {"model", "d_state"},       {"train", "batch_size"},
        {"train", "total_iters"},   {"train", "lr_start"},
        {"train", "lr_end"},        {"train", "crop"},
        {"train", "seed"},          {"train", "checkpoint_interval"},
        {"train", "log_interval"},  {"train", "beta1"},
        {"train", "beta2"},         {"train", "adam_eps"},
        {"train", "weight_decay"},  {"train", "prior_window"},
        {"dataset", "input_dir"},   {"dataset", "out_dir"},
        {"dataset", "scenes"},      {"dataset", "size"},
        {"dataset", "num_betas"},   {"dataset", "beta_min"},
        {"dataset", "beta_max"},    {"dataset", "depth_kind"},
        {"dataset", "d_min"},       {"dataset", "d_max"},
        {"dataset", "airlight_min"},{"dataset", "airlight_max"},
        {"dataset", "train_frac"},  {"dataset", "q1"},
        {"dataset", "q2"},          {"dataset", "dark_window"},
        {"dataset", "seed"},
    };
}

}  // namespace dehaze
