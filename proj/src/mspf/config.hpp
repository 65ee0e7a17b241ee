#pragma once

// Run configuration: one INI document with [model], [train], [snow] and
// [io] sections. Every field is addressable as section.key, unknown keys
// are rejected, and serialize(parse(s)) is a fixed point because numbers
// are emitted with shortest round-trip formatting.

#include "model.hpp"
#include "optim.hpp"
#include "snowsynth.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace mspf {

struct TrainConfig {
    int epochs = 40;            // target epoch index to stop at
    int batch = 2;
    int crop = 64;
    uint64_t seed = 0;
    int checkpoint_every = 10;  // epochs between periodic checkpoints
    bool clip = false;
    double clip_norm = 1.0;
    double loss_eps = 1e-3;
    Schedule schedule;
    AdamWHyper adamw;

    void validate() const {
        schedule.validate();
        adamw.validate();
        if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
        if (epochs > schedule.total_epochs)
            throw ConfigError("train: epochs must not exceed schedule total_epochs");
        if (batch < 1) throw ConfigError("train: batch must be >= 1");
        if (crop < 1) throw ConfigError("train: crop must be >= 1");
        if (checkpoint_every < 1) throw ConfigError("train: checkpoint_every must be >= 1");
        if (!(clip_norm > 0)) throw ConfigError("train: clip_norm must be positive");
        if (!(loss_eps > 0)) throw ConfigError("train: loss_eps must be positive");
    }
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    SnowParams snow;
    int threads = 0;            // 0: take the environment cap
    bool deterministic = false;

    void validate() const {
        model.validate();
        train.validate();
        snow.validate();
        if (threads < 0) throw ConfigError("io: threads must be >= 0");
    }
};

namespace detail {

[[noreturn]] inline void cfg_fail(int line, const std::string& what) {
    throw ConfigError("config line " + std::to_string(line) + ": " + what);
}

inline std::string cfg_trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline double cfg_f64(const std::string& v, int line) {
    double out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) cfg_fail(line, "expected a number: " + v);
    return out;
}

inline int64_t cfg_i64(const std::string& v, int line) {
    int64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) cfg_fail(line, "expected an integer: " + v);
    return out;
}

inline uint64_t cfg_u64(const std::string& v, int line) {
    uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        cfg_fail(line, "expected an unsigned integer: " + v);
    return out;
}

inline bool cfg_bool(const std::string& v, int line) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    cfg_fail(line, "expected true/false: " + v);
}

inline std::vector<std::string> cfg_split(const std::string& v) {
    std::vector<std::string> parts;
    size_t start = 0;
    for (;;) {
        const size_t comma = v.find(',', start);
        parts.push_back(cfg_trim(v.substr(start, comma - start)));
        if (comma == std::string::npos) return parts;
        start = comma + 1;
    }
}

inline std::vector<int> cfg_ivec(const std::string& v, size_t n, int line) {
    const auto parts = cfg_split(v);
    if (parts.size() != n)
        cfg_fail(line, "expected " + std::to_string(n) + " comma-separated integers: " + v);
    std::vector<int> out;
    for (const auto& p : parts) out.push_back(int(cfg_i64(p, line)));
    return out;
}

inline void cfg_range(const std::string& v, double& lo, double& hi, int line) {
    const auto parts = cfg_split(v);
    if (parts.size() != 2) cfg_fail(line, "expected lo,hi: " + v);
    lo = cfg_f64(parts[0], line);
    hi = cfg_f64(parts[1], line);
}

inline std::string cfg_num(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, p);
}

inline std::string cfg_num(int v) { return std::to_string(v); }
inline std::string cfg_num(uint64_t v) { return std::to_string(v); }
inline std::string cfg_bool_str(bool v) { return v ? "true" : "false"; }

inline std::string cfg_range_str(double lo, double hi) {
    return cfg_num(lo) + "," + cfg_num(hi);
}

inline const char* variant_name(AttnVariant v) {
    switch (v) {
        case AttnVariant::kAA: return "aa";
        case AttnVariant::kMA: return "ma";
        case AttnVariant::kSRA: return "sra";
        case AttnVariant::kSSP: return "ssp";
    }
    return "aa";
}

inline AttnVariant variant_from(const std::string& v, int line) {
    if (v == "aa") return AttnVariant::kAA;
    if (v == "ma") return AttnVariant::kMA;
    if (v == "sra") return AttnVariant::kSRA;
    if (v == "ssp") return AttnVariant::kSSP;
    cfg_fail(line, "unknown attention variant: " + v);
}

inline void apply_model_key(ModelConfig& m, const std::string& key, const std::string& val,
                            int line) {
    if (key == "dims") {
        const auto v = cfg_ivec(val, 4, line);
        for (int i = 0; i < 4; ++i) m.stage_dims[size_t(i)] = int64_t(v[size_t(i)]);
    } else if (key == "encoder_depths") {
        const auto v = cfg_ivec(val, 4, line);
        for (int i = 0; i < 4; ++i) m.encoder_depths[size_t(i)] = v[size_t(i)];
    } else if (key == "decoder_depths") {
        const auto v = cfg_ivec(val, 3, line);
        for (int i = 0; i < 3; ++i) m.decoder_depths[size_t(i)] = v[size_t(i)];
    } else if (key == "r1") {
        const auto v = cfg_ivec(val, 4, line);
        for (int i = 0; i < 4; ++i) m.r1[size_t(i)] = v[size_t(i)];
    } else if (key == "r2") {
        const auto v = cfg_ivec(val, 4, line);
        for (int i = 0; i < 4; ++i) m.r2[size_t(i)] = v[size_t(i)];
    } else if (key == "refine_depth") {
        m.refine_depth = int(cfg_i64(val, line));
    } else if (key == "refine_r1") {
        m.refine_r1 = int(cfg_i64(val, line));
    } else if (key == "refine_r2") {
        m.refine_r2 = int(cfg_i64(val, line));
    } else if (key == "expansion") {
        m.expansion = int(cfg_i64(val, line));
    } else if (key == "variant") {
        m.variant = variant_from(val, line);
    } else if (key == "use_lcb") {
        m.use_lcb = cfg_bool(val, line);
    } else if (key == "use_shuffle") {
        m.use_shuffle = cfg_bool(val, line);
    } else if (key == "global_residual") {
        m.global_residual = cfg_bool(val, line);
    } else if (key == "size_multiple") {
        m.size_multiple = int(cfg_i64(val, line));
    } else if (key == "reflect_pad_outer") {
        m.reflect_pad_outer = cfg_bool(val, line);
    } else {
        cfg_fail(line, "unknown key model." + key);
    }
}

inline void apply_train_key(TrainConfig& t, const std::string& key, const std::string& val,
                            int line) {
    if (key == "epochs") t.epochs = int(cfg_i64(val, line));
    else if (key == "batch") t.batch = int(cfg_i64(val, line));
    else if (key == "crop") t.crop = int(cfg_i64(val, line));
    else if (key == "seed") t.seed = cfg_u64(val, line);
    else if (key == "checkpoint_every") t.checkpoint_every = int(cfg_i64(val, line));
    else if (key == "clip") t.clip = cfg_bool(val, line);
    else if (key == "clip_norm") t.clip_norm = cfg_f64(val, line);
    else if (key == "loss_eps") t.loss_eps = cfg_f64(val, line);
    else if (key == "lr0") t.schedule.lr0 = cfg_f64(val, line);
    else if (key == "hold_epochs") t.schedule.hold_epochs = int(cfg_i64(val, line));
    else if (key == "total_epochs") t.schedule.total_epochs = int(cfg_i64(val, line));
    else if (key == "beta1") t.adamw.beta1 = cfg_f64(val, line);
    else if (key == "beta2") t.adamw.beta2 = cfg_f64(val, line);
    else if (key == "adam_eps") t.adamw.eps = cfg_f64(val, line);
    else if (key == "weight_decay") t.adamw.weight_decay = cfg_f64(val, line);
    else cfg_fail(line, "unknown key train." + key);
}

inline void apply_snow_key(SnowParams& s, const std::string& key, const std::string& val,
                           int line) {
    if (key == "density") s.mask_density = cfg_f64(val, line);
    else if (key == "flake_radius") cfg_range(val, s.flake_radius_lo, s.flake_radius_hi, line);
    else if (key == "streak_length") cfg_range(val, s.streak_len_lo, s.streak_len_hi, line);
    else if (key == "streak_angle") cfg_range(val, s.streak_angle_lo, s.streak_angle_hi, line);
    else if (key == "chroma") cfg_range(val, s.chroma_lo, s.chroma_hi, line);
    else if (key == "transmission") cfg_range(val, s.t_lo, s.t_hi, line);
    else if (key == "atmospheric") cfg_range(val, s.a_lo, s.a_hi, line);
    else if (key == "streak_fraction") s.streak_fraction = cfg_f64(val, line);
    else if (key == "seed") s.seed = cfg_u64(val, line);
    else cfg_fail(line, "unknown key snow." + key);
}

inline void apply_io_key(RunConfig& c, const std::string& key, const std::string& val, int line) {
    if (key == "threads") c.threads = int(cfg_i64(val, line));
    else if (key == "deterministic") c.deterministic = cfg_bool(val, line);
    else cfg_fail(line, "unknown key io." + key);
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string raw;
    std::string section;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        const std::string s = detail::cfg_trim(raw);
        if (s.empty() || s[0] == '#' || s[0] == ';') continue;
        if (s.front() == '[') {
            if (s.back() != ']') detail::cfg_fail(line, "unterminated section header");
            section = s.substr(1, s.size() - 2);
            if (section != "model" && section != "train" && section != "snow" && section != "io")
                detail::cfg_fail(line, "unknown section [" + section + "]");
            continue;
        }
        const size_t eq = s.find('=');
        if (eq == std::string::npos) detail::cfg_fail(line, "expected key = value");
        const std::string key = detail::cfg_trim(s.substr(0, eq));
        const std::string val = detail::cfg_trim(s.substr(eq + 1));
        if (key.empty()) detail::cfg_fail(line, "empty key");
        if (section.empty()) detail::cfg_fail(line, "key outside any section: " + key);
        if (section == "model") detail::apply_model_key(cfg.model, key, val, line);
        else if (section == "train") detail::apply_train_key(cfg.train, key, val, line);
        else if (section == "snow") detail::apply_snow_key(cfg.snow, key, val, line);
        else detail::apply_io_key(cfg, key, val, line);
    }
    cfg.validate();
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

inline std::string serialize_run_config(const RunConfig& c) {
    using namespace detail;
    std::ostringstream o;
    auto ivec = [](const auto& v, size_t n) {
        std::string s;
        for (size_t i = 0; i < n; ++i) {
            if (i) s += ",";
            s += std::to_string(v[i]);
        }
        return s;
    };
    o << "[model]\n";
    o << "dims = " << ivec(c.model.stage_dims, 4) << "\n";
    o << "encoder_depths = " << ivec(c.model.encoder_depths, 4) << "\n";
    o << "decoder_depths = " << ivec(c.model.decoder_depths, 3) << "\n";
    o << "r1 = " << ivec(c.model.r1, 4) << "\n";
    o << "r2 = " << ivec(c.model.r2, 4) << "\n";
    o << "refine_depth = " << cfg_num(c.model.refine_depth) << "\n";
    o << "refine_r1 = " << cfg_num(c.model.refine_r1) << "\n";
    o << "refine_r2 = " << cfg_num(c.model.refine_r2) << "\n";
    o << "expansion = " << cfg_num(c.model.expansion) << "\n";
    o << "variant = " << variant_name(c.model.variant) << "\n";
    o << "use_lcb = " << cfg_bool_str(c.model.use_lcb) << "\n";
    o << "use_shuffle = " << cfg_bool_str(c.model.use_shuffle) << "\n";
    o << "global_residual = " << cfg_bool_str(c.model.global_residual) << "\n";
    o << "size_multiple = " << cfg_num(c.model.size_multiple) << "\n";
    o << "reflect_pad_outer = " << cfg_bool_str(c.model.reflect_pad_outer) << "\n";
    o << "\n[train]\n";
    o << "epochs = " << cfg_num(c.train.epochs) << "\n";
    o << "batch = " << cfg_num(c.train.batch) << "\n";
    o << "crop = " << cfg_num(c.train.crop) << "\n";
    o << "seed = " << cfg_num(c.train.seed) << "\n";
    o << "checkpoint_every = " << cfg_num(c.train.checkpoint_every) << "\n";
    o << "clip = " << cfg_bool_str(c.train.clip) << "\n";
    o << "clip_norm = " << cfg_num(c.train.clip_norm) << "\n";
    o << "loss_eps = " << cfg_num(c.train.loss_eps) << "\n";
    o << "lr0 = " << cfg_num(c.train.schedule.lr0) << "\n";
    o << "hold_epochs = " << cfg_num(c.train.schedule.hold_epochs) << "\n";
    o << "total_epochs = " << cfg_num(c.train.schedule.total_epochs) << "\n";
    o << "beta1 = " << cfg_num(c.train.adamw.beta1) << "\n";
    o << "beta2 = " << cfg_num(c.train.adamw.beta2) << "\n";
    o << "adam_eps = " << cfg_num(c.train.adamw.eps) << "\n";
    o << "weight_decay = " << cfg_num(c.train.adamw.weight_decay) << "\n";
    o << "\n[snow]\n";
    o << "density = " << cfg_num(c.snow.mask_density) << "\n";
    o << "flake_radius = " << cfg_range_str(c.snow.flake_radius_lo, c.snow.flake_radius_hi) << "\n";
    o << "streak_length = " << cfg_range_str(c.snow.streak_len_lo, c.snow.streak_len_hi) << "\n";
    o << "streak_angle = " << cfg_range_str(c.snow.streak_angle_lo, c.snow.streak_angle_hi) << "\n";
    o << "chroma = " << cfg_range_str(c.snow.chroma_lo, c.snow.chroma_hi) << "\n";
    o << "transmission = " << cfg_range_str(c.snow.t_lo, c.snow.t_hi) << "\n";
    o << "atmospheric = " << cfg_range_str(c.snow.a_lo, c.snow.a_hi) << "\n";
    o << "streak_fraction = " << cfg_num(c.snow.streak_fraction) << "\n";
    o << "seed = " << cfg_num(c.snow.seed) << "\n";
    o << "\n[io]\n";
    o << "threads = " << cfg_num(c.threads) << "\n";
    o << "deterministic = " << cfg_bool_str(c.deterministic) << "\n";
    return o.str();
}

}  // namespace mspf
