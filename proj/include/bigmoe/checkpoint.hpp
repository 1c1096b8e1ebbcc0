#pragma once

// Checkpoint files: versioned header, the run config that built the model,
// and every named parameter as raw float64.
//
// little-endian:
//   "BGMC" u32 version u64 config_hash (u32 len, config text)
//   u32 n_params, n_params x (u32 len, name, u32 rank, u64 dims[rank], f64 data[])

#include "bigmoe/backbone.hpp"
#include "bigmoe/config.hpp"
#include "bigmoe/data.hpp"
#include "bigmoe/errors.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

namespace bigmoe {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    RunConfig config;
    Model model;
};

inline void save_checkpoint(const Model& model, const RunConfig& cfg, const std::string& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw InputError("cannot open '" + path + "' for writing");
    os.write("BGMC", 4);
    detail::put<std::uint32_t>(os, kCheckpointVersion);
    detail::put<std::uint64_t>(os, config_hash(cfg));
    detail::put_string(os, config_to_text(cfg));
    const auto params = model.named_parameters();
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        detail::put_string(os, name);
        detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t e : t.shape())
            detail::put<std::uint64_t>(os, e);
        os.write(reinterpret_cast<const char*>(t.values().data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    if (!os)
        throw InputError("write to '" + path + "' failed");
}

/// Rebuilds the model from the embedded config and overwrites every
/// parameter. Any mismatch in version, config hash, names or shapes is a
/// format error; nothing is migrated.
inline Checkpoint load_checkpoint(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw InputError("cannot open checkpoint '" + path + "'");
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "BGMC", 4) != 0)
        throw FormatError("'" + path + "' is not a checkpoint file");
    const auto version = detail::get<std::uint32_t>(is, "checkpoint header");
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    const auto stored_hash = detail::get<std::uint64_t>(is, "checkpoint header");
    const std::string text = detail::get_string(is, "checkpoint config");

    Checkpoint ck;
    try {
        ck.config = parse_config(text);
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint config is invalid: ") + e.what());
    }
    if (config_to_text(ck.config) != text || config_hash(ck.config) != stored_hash)
        throw FormatError("checkpoint config hash mismatch (stored " + hex64(stored_hash) + ", computed " +
                          hex64(config_hash(ck.config)) + ")");

    ck.model = Model::create(ck.config.model, ck.config.seed);
    auto params = ck.model.named_parameters();
    const auto n = detail::get<std::uint32_t>(is, "parameter count");
    if (n != params.size())
        throw FormatError("checkpoint holds " + std::to_string(n) + " parameters, model expects " +
                          std::to_string(params.size()));
    for (auto& [name, t] : params) {
        const std::string got = detail::get_string(is, "parameter name", 4096);
        if (got != name)
            throw FormatError("expected parameter '" + name + "', found '" + got + "'");
        const auto rank = detail::get<std::uint32_t>(is, "parameter rank");
        Shape shape;
        for (std::uint32_t r = 0; r < rank && r < 8; ++r)
            shape.push_back(detail::get<std::uint64_t>(is, "parameter shape"));
        if (shape != t.shape())
            throw FormatError("parameter '" + name + "' has shape " + shape_str(shape) + ", expected " +
                              shape_str(t.shape()));
        auto dst = t.mutable_data();
        if (!is.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(double))))
            throw FormatError("truncated data for parameter '" + name + "'");
    }
    if (is.peek() != std::char_traits<char>::eof())
        throw FormatError("trailing bytes after checkpoint payload");
    return ck;
}

/// FNV-1a over a file's bytes.
inline std::uint64_t file_hash(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw InputError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    return fnv1a64(ss.str());
}

} // namespace bigmoe
