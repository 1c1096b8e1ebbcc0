#pragma once

// Procedural RGB / depth / IR face captures over a small set of domains.
//
// Every sample is a soft elliptical "face" over a domain-coloured background
// with a dome-shaped depth relief and a warm IR blob. Spoofs reuse the same
// base and add the two planted cues: a high-frequency print texture on the
// RGB frame and a flattened depth map. Domains shift background, tint,
// sensor noise and the cue parameters themselves.

#include "bigmoe/cpb.hpp"
#include "bigmoe/errors.hpp"
#include "bigmoe/seed.hpp"
#include "bigmoe/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace bigmoe {

struct DomainSpec {
    std::string name;
    double bg_mean = 0.4;
    double bg_std = 0.05;                         // per-sample spread of the background level
    double noise = 0.02;                          // per-pixel sensor noise
    std::array<double, 3> tint{1.0, 1.0, 1.0};   // RGB channel gains
    double texture_period = 2.5;                  // pixels per cycle of the spoof texture
    double texture_amp = 0.08;
    double texture_angle = 45.0;                  // degrees
    double depth_flatness = 0.85;                 // fraction of face relief removed on spoofs
};

/// Built-in domains, addressable by name from run configs.
inline const std::vector<DomainSpec>& domain_catalog()
{
    static const std::vector<DomainSpec> catalog{
        {"alpha", 0.25, 0.05, 0.015, {1.00, 0.92, 0.85}, 2.0, 0.08, 45.0, 0.90},
        {"beta", 0.55, 0.06, 0.020, {0.90, 0.95, 1.08}, 2.5, 0.07, 30.0, 0.80},
        {"gamma", 0.40, 0.04, 0.025, {1.06, 1.00, 0.90}, 3.0, 0.09, 60.0, 0.85},
        {"delta", 0.70, 0.05, 0.010, {0.95, 1.05, 0.95}, 2.2, 0.06, 75.0, 0.95},
    };
    return catalog;
}

inline const DomainSpec& find_domain(const std::string& name)
{
    for (const auto& d : domain_catalog())
        if (d.name == name)
            return d;
    throw ConfigError("unknown domain '" + name + "'");
}

enum Label : int { Spoof = 0, Live = 1 };

struct MultimodalSample {
    Modalities m;
    int label = Live;
    std::size_t domain = 0;  // index into Dataset::domains
};

struct Dataset {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::string> domains;
    std::vector<MultimodalSample> samples;

    std::size_t size() const { return samples.size(); }
};

namespace detail {

inline double to_float_grid(double v) { return static_cast<double>(static_cast<float>(std::clamp(v, 0.0, 1.0))); }

inline MultimodalSample synth_sample(const DomainSpec& spec, std::size_t size, int label, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> nd(0.0, 1.0);
    const double s = static_cast<double>(size);

    const double cx = s * (0.5 + 0.08 * (2.0 * u(rng) - 1.0));
    const double cy = s * (0.5 + 0.08 * (2.0 * u(rng) - 1.0));
    const double rx = s * (0.28 + 0.08 * u(rng));
    const double ry = s * (0.34 + 0.08 * u(rng));
    const double bg = spec.bg_mean + spec.bg_std * nd(rng);
    const double grad_x = 0.1 * (2.0 * u(rng) - 1.0), grad_y = 0.1 * (2.0 * u(rng) - 1.0);
    std::array<double, 3> skin{0.80 + 0.05 * nd(rng), 0.60 + 0.05 * nd(rng), 0.50 + 0.05 * nd(rng)};
    const double warmth = 0.55 + 0.1 * u(rng);

    const double angle = (spec.texture_angle + 10.0 * (2.0 * u(rng) - 1.0)) * std::numbers::pi / 180.0;
    const double phase = 2.0 * std::numbers::pi * u(rng);
    const double tilt_x = 0.05 * (2.0 * u(rng) - 1.0), tilt_y = 0.05 * (2.0 * u(rng) - 1.0);
    const bool spoof = label == Spoof;
    const double relief = spoof ? 1.0 - spec.depth_flatness : 1.0;

    const std::size_t hw = size * size;
    std::vector<double> rgb(3 * hw), depth(hw), ir(hw);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
            const double dx = (px - cx) / rx, dy = (py - cy) / ry;
            const double r2 = dx * dx + dy * dy;
            const double face = std::clamp((1.0 - r2) * 4.0, 0.0, 1.0);
            const double dome = std::sqrt(std::max(0.0, 1.0 - r2));
            const double light = bg + grad_x * (px / s - 0.5) + grad_y * (py / s - 0.5);
            double texture = 0.0;
            if (spoof) {
                const double along = px * std::cos(angle) + py * std::sin(angle);
                texture = spec.texture_amp * std::cos(2.0 * std::numbers::pi * along / spec.texture_period + phase);
            }
            const std::size_t i = y * size + x;
            for (std::size_t c = 0; c < 3; ++c) {
                const double surface = skin[c] * (0.7 + 0.3 * dome);
                const double v = (light * (1.0 - face) + surface * face) * spec.tint[c];
                rgb[c * hw + i] = to_float_grid(v + texture + spec.noise * nd(rng));
            }
            double z = 0.1 + face * relief * (0.3 + 0.5 * dome);
            if (spoof)
                z += 0.25 + tilt_x * (px / s - 0.5) + tilt_y * (py / s - 0.5);
            depth[i] = to_float_grid(z + spec.noise * nd(rng));
            ir[i] = to_float_grid(0.15 + warmth * face * (0.6 + 0.4 * dome) + spec.noise * nd(rng));
        }
    MultimodalSample out;
    out.m.rgb = Tensor({3, size, size}, std::move(rgb));
    out.m.depth = Tensor({1, size, size}, std::move(depth));
    out.m.ir = Tensor({1, size, size}, std::move(ir));
    out.label = label;
    return out;
}

} // namespace detail

/// n_per_domain samples for every spec, alternating live / spoof.
inline Dataset generate_dataset(const std::vector<DomainSpec>& specs, std::size_t n_per_domain, std::size_t image_size,
                                std::uint64_t seed)
{
    if (specs.empty())
        throw UsageError("generate_dataset needs at least one domain");
    if (n_per_domain == 0 || n_per_domain % 2 != 0)
        throw UsageError("n_per_domain must be positive and even, got " + std::to_string(n_per_domain));
    if (image_size < 4)
        throw UsageError("image_size must be at least 4");
    Dataset ds;
    ds.height = ds.width = image_size;
    for (std::size_t d = 0; d < specs.size(); ++d) {
        for (std::size_t e = 0; e < d; ++e)
            if (specs[e].name == specs[d].name)
                throw UsageError("duplicate domain '" + specs[d].name + "'");
        ds.domains.push_back(specs[d].name);
        const std::uint64_t dseed = derive_seed(seed, {d});
        for (std::size_t i = 0; i < n_per_domain; ++i) {
            auto s = detail::synth_sample(specs[d], image_size, i % 2 == 0 ? Live : Spoof, derive_seed(dseed, {i}));
            s.domain = d;
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

/// (train, test): test is exactly the held-out domain, train all others.
inline std::pair<Dataset, Dataset> leave_one_out_split(const Dataset& all, const std::string& held_out)
{
    const auto it = std::find(all.domains.begin(), all.domains.end(), held_out);
    if (it == all.domains.end())
        throw UsageError("held-out domain '" + held_out + "' not in dataset");
    const auto hold = static_cast<std::size_t>(it - all.domains.begin());
    Dataset train, test;
    for (Dataset* d : {&train, &test}) {
        d->height = all.height;
        d->width = all.width;
        d->domains = all.domains;
    }
    for (const auto& s : all.samples)
        (s.domain == hold ? test : train).samples.push_back(s);
    return {std::move(train), std::move(test)};
}

/// Mean absolute 4-neighbour Laplacian of the RGB channels over interior pixels.
inline double laplacian_energy(const Tensor& image)
{
    detail::require_rank(image, 3, "laplacian input");
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (h < 3 || w < 3)
        throw DimensionError("laplacian needs at least 3x3 pixels");
    const auto& v = image.values();
    double acc = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 1; y + 1 < h; ++y)
            for (std::size_t x = 1; x + 1 < w; ++x) {
                const std::size_t i = (ch * h + y) * w + x;
                acc += std::abs(4.0 * v[i] - v[i - 1] - v[i + 1] - v[i - w] - v[i + w]);
            }
    return acc / static_cast<double>(c * (h - 2) * (w - 2));
}

// ---- on-disk format ----
//
// little-endian:
//   "BGMD" u32 version u64 count u32 height u32 width u32 n_domains
//   n_domains x (u32 len, bytes)
//   count x (u8 label, u32 domain, f32 rgb[3HW], f32 depth[HW], f32 ir[HW])

inline constexpr std::uint32_t kDatasetVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <typename T>
void put(std::ostream& os, T v)
{
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& what)
{
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw FormatError("truncated " + what);
    return v;
}

inline void put_string(std::ostream& os, const std::string& s)
{
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, const std::string& what, std::size_t limit = 1u << 24)
{
    const auto n = get<std::uint32_t>(is, what);
    if (n > limit)
        throw FormatError(what + " length " + std::to_string(n) + " is implausible");
    std::string s(n, '\0');
    if (n && !is.read(s.data(), n))
        throw FormatError("truncated " + what);
    return s;
}

inline void put_floats(std::ostream& os, const Tensor& t)
{
    for (double v : t.values())
        put<float>(os, static_cast<float>(v));
}

inline Tensor get_floats(std::istream& is, Shape shape)
{
    std::vector<float> buf(shape_numel(shape));
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float))))
        throw FormatError("truncated sample payload");
    return Tensor(std::move(shape), std::vector<double>(buf.begin(), buf.end()));
}

} // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw InputError("cannot open '" + path + "' for writing");
    os.write("BGMD", 4);
    detail::put<std::uint32_t>(os, kDatasetVersion);
    detail::put<std::uint64_t>(os, ds.samples.size());
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.height));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.width));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.domains.size()));
    for (const auto& d : ds.domains)
        detail::put_string(os, d);
    for (const auto& s : ds.samples) {
        detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(s.label));
        detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.domain));
        for (const Tensor* t : s.m.list())
            detail::put_floats(os, *t);
    }
    if (!os)
        throw InputError("write to '" + path + "' failed");
}

inline Dataset load_dataset(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw InputError("cannot open dataset '" + path + "'");
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "BGMD", 4) != 0)
        throw FormatError("'" + path + "' is not a dataset file");
    const auto version = detail::get<std::uint32_t>(is, "header");
    if (version != kDatasetVersion)
        throw FormatError("dataset version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kDatasetVersion) + ")");
    Dataset ds;
    const auto count = detail::get<std::uint64_t>(is, "header");
    ds.height = detail::get<std::uint32_t>(is, "header");
    ds.width = detail::get<std::uint32_t>(is, "header");
    const auto n_domains = detail::get<std::uint32_t>(is, "header");
    if (ds.height == 0 || ds.width == 0 || n_domains == 0)
        throw FormatError("dataset header has empty extents");
    for (std::uint32_t d = 0; d < n_domains; ++d)
        ds.domains.push_back(detail::get_string(is, "domain name", 4096));
    for (std::uint64_t i = 0; i < count; ++i) {
        MultimodalSample s;
        s.label = detail::get<std::uint8_t>(is, "record");
        s.domain = detail::get<std::uint32_t>(is, "record");
        if (s.label != Live && s.label != Spoof)
            throw FormatError("record " + std::to_string(i) + " has label " + std::to_string(s.label));
        if (s.domain >= n_domains)
            throw FormatError("record " + std::to_string(i) + " references unknown domain");
        s.m.rgb = detail::get_floats(is, {3, ds.height, ds.width});
        s.m.depth = detail::get_floats(is, {1, ds.height, ds.width});
        s.m.ir = detail::get_floats(is, {1, ds.height, ds.width});
        ds.samples.push_back(std::move(s));
    }
    if (is.peek() != std::char_traits<char>::eof())
        throw FormatError("trailing bytes after " + std::to_string(count) + " records");
    return ds;
}

/// Sidecar manifest: one "id,label,domain" row per sample.
inline void save_manifest(const Dataset& ds, const std::string& path)
{
    std::ofstream os(path);
    if (!os)
        throw InputError("cannot open '" + path + "' for writing");
    os << "id,label,domain\n";
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
        os << i << ',' << (ds.samples[i].label == Live ? "live" : "spoof") << ',' << ds.domains[ds.samples[i].domain]
           << '\n';
}

} // namespace bigmoe
