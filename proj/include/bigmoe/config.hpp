#pragma once

// Run configuration: model, data and optimizer settings as one flat
// "section.key = value" text format. Every field has a default; dumping a
// config prints every field so a run is fully described by its dump, and the
// dump's FNV-1a hash identifies the run.

#include "bigmoe/backbone.hpp"
#include "bigmoe/data.hpp"
#include "bigmoe/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace bigmoe {

struct DataConfig {
    std::vector<std::string> domains{"alpha", "beta", "gamma"};
    std::string held_out = "gamma";
    std::size_t n_per_domain = 300;
    std::uint64_t seed = 7;
};

struct OptimConfig {
    double lr = 1e-3;
    double weight_decay = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::size_t epochs = 12;
    std::size_t batch_size = 16;
};

struct RunConfig {
    ModelConfig model;
    DataConfig data;
    OptimConfig optim;
    std::uint64_t seed = 1;

    void validate() const
    {
        model.validate();
        if (data.domains.size() < 2)
            throw ConfigError("data.domains must list at least two domains");
        for (std::size_t i = 0; i < data.domains.size(); ++i) {
            find_domain(data.domains[i]);
            for (std::size_t j = 0; j < i; ++j)
                if (data.domains[i] == data.domains[j])
                    throw ConfigError("data.domains lists '" + data.domains[i] + "' twice");
        }
        if (std::find(data.domains.begin(), data.domains.end(), data.held_out) == data.domains.end())
            throw ConfigError("data.held_out '" + data.held_out + "' is not one of data.domains");
        if (data.n_per_domain == 0 || data.n_per_domain % 2 != 0)
            throw ConfigError("data.n_per_domain must be positive and even");
        if (!(optim.lr >= 0.0))
            throw ConfigError("optim.lr must be >= 0");
        if (!(optim.weight_decay >= 0.0))
            throw ConfigError("optim.weight_decay must be >= 0");
        if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0))
            throw ConfigError("optim.beta1 must lie in [0, 1)");
        if (!(optim.beta2 >= 0.0 && optim.beta2 < 1.0))
            throw ConfigError("optim.beta2 must lie in [0, 1)");
        if (optim.epochs == 0)
            throw ConfigError("optim.epochs must be positive");
        if (optim.batch_size == 0)
            throw ConfigError("optim.batch_size must be positive");
    }
};

namespace detail {

inline std::string fmt_double(double v)
{
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
        return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text)
{
    T v{};
    const char* end = text.data() + text.size();
    auto r = std::from_chars(text.data(), end, v);
    if (r.ec != std::errc() || r.ptr != end)
        throw ConfigError(key + ": cannot parse '" + text + "' as a number");
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& text)
{
    if (text == "true" || text == "1")
        return true;
    if (text == "false" || text == "0")
        return false;
    throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

inline std::vector<std::string> split_list(const std::string& text)
{
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        if (auto t = trim(item); !t.empty())
            out.push_back(t);
    return out;
}

struct ConfigField {
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

#define BIGMOE_FIELD(KEY, EXPR, KIND)                                                                          \
    ConfigField                                                                                                \
    {                                                                                                          \
        KEY, [](const RunConfig& c) { return KIND##_out(c.EXPR); },                                           \
            [](RunConfig& c, const std::string& v) { c.EXPR = KIND##_in<decltype(c.EXPR)>(KEY, v); }           \
    }

template <typename T>
std::string num_out(T v)
{
    return std::to_string(v);
}
inline std::string real_out(double v) { return fmt_double(v); }
inline std::string flag_out(bool v) { return v ? "true" : "false"; }

template <typename T>
T num_in(const std::string& key, const std::string& v)
{
    return parse_number<T>(key, v);
}
template <typename T>
T real_in(const std::string& key, const std::string& v)
{
    return parse_number<double>(key, v);
}
template <typename T>
T flag_in(const std::string& key, const std::string& v)
{
    return parse_bool(key, v);
}

inline const std::vector<ConfigField>& config_fields()
{
    static const std::vector<ConfigField> fields{
        BIGMOE_FIELD("backbone.image_size", model.backbone.image_size, num),
        BIGMOE_FIELD("backbone.patch_size", model.backbone.patch_size, num),
        BIGMOE_FIELD("backbone.token_dim", model.backbone.token_dim, num),
        BIGMOE_FIELD("backbone.depth", model.backbone.depth, num),
        BIGMOE_FIELD("backbone.attn_heads", model.backbone.attn_heads, num),
        BIGMOE_FIELD("backbone.mlp_ratio", model.backbone.mlp_ratio, num),
        BIGMOE_FIELD("backbone.n_classes", model.backbone.n_classes, num),
        BIGMOE_FIELD("igma.n_experts", model.igma.n_experts, num),
        BIGMOE_FIELD("igma.top_k", model.igma.top_k, num),
        BIGMOE_FIELD("igma.n_heads", model.igma.n_heads, num),
        BIGMOE_FIELD("igma.query_dim", model.igma.query_dim, num),
        BIGMOE_FIELD("igma.hidden_dim", model.igma.hidden_dim, num),
        BIGMOE_FIELD("igma.noise_scale", model.igma.noise_scale, real),
        BIGMOE_FIELD("cpb.theta", model.cpb.theta, real),
        BIGMOE_FIELD("cpb.prompt_dim", model.cpb.prompt_dim, num),
        BIGMOE_FIELD("cpb.n_task", model.cpb.n_task, num),
        BIGMOE_FIELD("cpb.clue_grid", model.cpb.clue_grid, num),
        BIGMOE_FIELD("cpb.eca_kernel", model.cpb.eca_kernel, num),
        BIGMOE_FIELD("cpb.mask_rate", model.cpb.mask_rate, real),
        BIGMOE_FIELD("mode.disable_igma", model.disable_igma, flag),
        BIGMOE_FIELD("mode.disable_cpb", model.disable_cpb, flag),
        BIGMOE_FIELD("mode.coarse_moe", model.coarse_moe, flag),
        ConfigField{"mode.prompts", [](const RunConfig& c) { return prompt_set_name(c.model.prompts); },
                    [](RunConfig& c, const std::string& v) { c.model.prompts = parse_prompt_set(v); }},
        ConfigField{"data.domains",
                    [](const RunConfig& c) {
                        std::string s;
                        for (const auto& d : c.data.domains)
                            s += (s.empty() ? "" : ",") + d;
                        return s;
                    },
                    [](RunConfig& c, const std::string& v) { c.data.domains = split_list(v); }},
        ConfigField{"data.held_out", [](const RunConfig& c) { return c.data.held_out; },
                    [](RunConfig& c, const std::string& v) { c.data.held_out = v; }},
        BIGMOE_FIELD("data.n_per_domain", data.n_per_domain, num),
        BIGMOE_FIELD("data.seed", data.seed, num),
        BIGMOE_FIELD("optim.lr", optim.lr, real),
        BIGMOE_FIELD("optim.weight_decay", optim.weight_decay, real),
        BIGMOE_FIELD("optim.beta1", optim.beta1, real),
        BIGMOE_FIELD("optim.beta2", optim.beta2, real),
        BIGMOE_FIELD("optim.epochs", optim.epochs, num),
        BIGMOE_FIELD("optim.batch_size", optim.batch_size, num),
        BIGMOE_FIELD("run.seed", seed, num),
    };
    return fields;
}

#undef BIGMOE_FIELD

} // namespace detail

/// Desk-scale defaults: 32x32 captures, three domains, one core.
inline RunConfig desk_preset() { return RunConfig{}; }

/// Full-scale settings: ViT-Base geometry, 1600 experts, paper optimizer.
inline RunConfig paper_preset()
{
    RunConfig c;
    auto& b = c.model.backbone;
    b.image_size = 224;
    b.patch_size = 16;
    b.token_dim = 768;
    b.depth = 12;
    b.attn_heads = 12;
    b.mlp_ratio = 4;
    c.model.igma.n_experts = 1600;
    c.model.igma.top_k = 2;
    c.model.igma.hidden_dim = 8;
    c.model.igma.query_dim = 64;
    c.model.cpb.prompt_dim = 64;
    c.model.cpb.clue_grid = 7;
    c.model.cpb.eca_kernel = 5;
    c.data.domains = {"alpha", "beta", "gamma", "delta"};
    c.data.held_out = "delta";
    c.data.n_per_domain = 1000;
    c.optim.lr = 5e-5;
    c.optim.weight_decay = 1e-3;
    c.optim.epochs = 100;
    c.optim.batch_size = 32;
    return c;
}

inline RunConfig preset(const std::string& name)
{
    if (name == "desk")
        return desk_preset();
    if (name == "paper")
        return paper_preset();
    throw UsageError("unknown preset '" + name + "' (expected desk or paper)");
}

/// Sets one field by its dotted key.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value)
{
    for (const auto& f : detail::config_fields())
        if (f.key == key) {
            f.set(cfg, value);
            return;
        }
    throw ConfigError("unknown config key '" + key + "'");
}

/// Applies "key = value" lines on top of `base`. Blank lines and lines
/// starting with '#' are skipped. The result is validated.
inline RunConfig parse_config(const std::string& text, RunConfig base = desk_preset())
{
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string t = detail::trim(line);
        if (t.empty() || t.front() == '#')
            continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        set_config_value(base, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
    }
    base.validate();
    return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = desk_preset())
{
    std::ifstream is(path);
    if (!is)
        throw InputError("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str(), std::move(base));
}

/// Canonical dump: every field, fixed order, one "key = value" per line.
inline std::string config_to_text(const RunConfig& cfg)
{
    std::string out;
    for (const auto& f : detail::config_fields())
        out += f.key + " = " + f.get(cfg) + "\n";
    return out;
}

inline std::uint64_t fnv1a64(const std::string& bytes)
{
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(config_to_text(cfg)); }

inline std::string hex64(std::uint64_t v)
{
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4)
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
}

} // namespace bigmoe
