#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "engine.hpp"
#include "error.hpp"
#include "losses.hpp"
#include "network.hpp"

namespace duetmatch {

/// Everything a run needs: model, optimization, flags, data and output locations.
struct ExperimentConfig {
    ModelConfig model;
    TrainConfig train;
    AblationFlags flags;
    std::string data_dir;
    std::string split_path;  // empty: split data_dir with the parameters below
    std::size_t n_labeled = 6;
    std::size_t n_val = 10;
    std::size_t n_test = 20;
    std::uint64_t split_seed = 0;
    std::string out_dir = "runs/default";

    void validate() const {
        model.validate();
        train.validate();
        flags.validate();
        if (train.patch % model.side_multiple() != 0)
            throw ConfigError("patch " + std::to_string(train.patch) + " must be divisible by 2^(depth-1) = " +
                              std::to_string(model.side_multiple()));
    }

    /// Referenced inputs must exist before a run starts.
    void validate_paths() const {
        if (!data_dir.empty() && !std::filesystem::is_directory(data_dir)) throw ConfigError("data_dir does not exist: " + data_dir);
        if (!split_path.empty() && !std::filesystem::is_regular_file(split_path))
            throw ConfigError("split_path does not exist: " + split_path);
    }

    bool operator==(const ExperimentConfig&) const = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <class I>
I parse_uint(const std::string& v) {
    I out{};
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("expected a non-negative integer, got '" + v + "'");
    return out;
}

inline double parse_real(const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used == v.size() && std::isfinite(d)) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError("expected a real number, got '" + v + "'");
}

inline bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("expected true or false, got '" + v + "'");
}

inline std::string fmt_real(double d) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", d);
    return buf;
}

struct Field {
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

#define DM_UINT(key, member, type) \
    {key, {[](ExperimentConfig& c, const std::string& v) { c.member = parse_uint<type>(v); }, [](const ExperimentConfig& c) { return std::to_string(c.member); }}}
#define DM_REAL(key, member) \
    {key, {[](ExperimentConfig& c, const std::string& v) { c.member = parse_real(v); }, [](const ExperimentConfig& c) { return fmt_real(c.member); }}}
#define DM_BOOL(key, member) \
    {key, {[](ExperimentConfig& c, const std::string& v) { c.member = parse_bool(v); }, [](const ExperimentConfig& c) { return std::string(c.member ? "true" : "false"); }}}
#define DM_STR(key, member) \
    {key, {[](ExperimentConfig& c, const std::string& v) { c.member = v; }, [](const ExperimentConfig& c) { return c.member; }}}

// Ordered as written by serialize_config.
inline const std::vector<std::pair<std::string, Field>>& fields() {
    static const std::vector<std::pair<std::string, Field>> f{
        DM_UINT("in_channels", model.in_channels, std::size_t),
        DM_UINT("n_classes", model.n_classes, std::size_t),
        DM_UINT("base_channels", model.base_channels, std::size_t),
        DM_UINT("depth", model.depth, std::size_t),
        DM_REAL("lr", train.lr),
        DM_REAL("momentum", train.momentum),
        DM_REAL("weight_decay", train.weight_decay),
        DM_UINT("batch_labeled", train.batch_labeled, std::size_t),
        DM_UINT("batch_unlabeled", train.batch_unlabeled, std::size_t),
        DM_UINT("iters_pretrain", train.iters_pretrain, std::size_t),
        DM_UINT("iters_main", train.iters_main, std::size_t),
        DM_UINT("patch", train.patch, std::size_t),
        DM_REAL("dropout_ratio", train.dropout_ratio),
        DM_REAL("ema_w", train.ema_w),
        DM_REAL("alpha", train.alpha),
        DM_REAL("beta", train.beta),
        DM_UINT("seed", train.seed, std::uint64_t),
        DM_UINT("val_every", train.val_every, std::size_t),
        {"method",
         {[](ExperimentConfig& c, const std::string& v) {
              if (v == "duetmatch") c.train.method = Method::duetmatch;
              else if (v == "supervised") c.train.method = Method::supervised;
              else throw ConfigError("expected duetmatch or supervised, got '" + v + "'");
          },
          [](const ExperimentConfig& c) { return std::string(c.train.method == Method::duetmatch ? "duetmatch" : "supervised"); }}},
        {"pretrain_mode",
         {[](ExperimentConfig& c, const std::string& v) {
              if (v == "clone") c.train.pretrain_mode = PretrainMode::clone;
              else if (v == "dual_seed") c.train.pretrain_mode = PretrainMode::dual_seed;
              else throw ConfigError("expected clone or dual_seed, got '" + v + "'");
          },
          [](const ExperimentConfig& c) { return std::string(c.train.pretrain_mode == PretrainMode::clone ? "clone" : "dual_seed"); }}},
        DM_BOOL("soft_targets", train.soft_targets),
        {"gating",
         {[](ExperimentConfig& c, const std::string& v) {
              if (v == "hard") c.train.gating = Gating::hard;
              else if (v == "soft") c.train.gating = Gating::soft;
              else throw ConfigError("expected hard or soft, got '" + v + "'");
          },
          [](const ExperimentConfig& c) { return std::string(c.train.gating == Gating::hard ? "hard" : "soft"); }}},
        DM_BOOL("per_sample_mask", train.per_sample_mask),
        DM_REAL("cutmix_lo", train.cutmix_lo),
        DM_REAL("cutmix_hi", train.cutmix_hi),
        DM_UINT("unsup_rampup", train.unsup_rampup, std::size_t),
        DM_BOOL("augment", train.augment),
        DM_BOOL("flags.duet", flags.duet),
        DM_BOOL("flags.ddp", flags.ddp),
        DM_BOOL("flags.pcmcg", flags.pcmcg),
        DM_BOOL("flags.cm", flags.cm),
        DM_STR("data_dir", data_dir),
        DM_STR("split_path", split_path),
        DM_UINT("n_labeled", n_labeled, std::size_t),
        DM_UINT("n_val", n_val, std::size_t),
        DM_UINT("n_test", n_test, std::size_t),
        DM_UINT("split_seed", split_seed, std::uint64_t),
        DM_STR("out_dir", out_dir),
    };
    return f;
}

#undef DM_UINT
#undef DM_REAL
#undef DM_BOOL
#undef DM_STR

}  // namespace detail

/// Parse `key = value` lines; `#` starts a comment. Absent keys keep their
/// defaults. Errors carry the line number; invariant violations that involve
/// several keys name the line of the last key involved.
inline ExperimentConfig parse_config(const std::string& text, std::ostream* echo = nullptr) {
    ExperimentConfig c;
    std::map<std::string, std::size_t> line_of;
    std::istringstream is(text);
    std::string raw;
    std::size_t lineno = 0;
    const auto& fields = detail::fields();
    while (std::getline(is, raw)) {
        ++lineno;
        const auto hash = raw.find('#');
        const std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
        auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.first == key; });
        if (it == fields.end()) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        if (line_of.count(key)) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
        try {
            it->second.set(c, value);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(lineno) + ": " + key + ": " + e.what());
        }
        line_of[key] = lineno;
    }
    try {
        c.validate();
    } catch (const ConfigError& e) {
        // Attribute the violation to the latest line among the keys it mentions.
        const std::string msg = e.what();
        std::size_t at = 0;
        for (const auto& [key, ln] : line_of) {
            if (msg.find(key) != std::string::npos) at = std::max(at, ln);
        }
        throw ConfigError((at ? "line " + std::to_string(at) + ": " : std::string("config: ")) + msg);
    }
    if (echo)
        for (const auto& [key, f] : fields) *echo << "config " << key << " = " << f.get(c) << '\n';
    return c;
}

inline std::string serialize_config(const ExperimentConfig& c) {
    std::string out;
    for (const auto& [key, f] : detail::fields()) out += key + " = " + f.get(c) + '\n';
    return out;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, std::ostream* echo = nullptr) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read config " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str(), echo);
}

}  // namespace duetmatch
