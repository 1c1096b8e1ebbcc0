#pragma once

// Convolutional prompt bypass: clue prompts from central-difference
// convolution over the stacked modalities, mask prompts from the modality
// dropout indicator, static task prompts, and the per-layer residual
// attention refinement P_{i+1} = P_i + ECA(Attn(Cat(P_i, x_c))).
// Prompt tokens feed the router only; they never enter the token stream.

#include "bigmoe/errors.hpp"
#include "bigmoe/tensor.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace bigmoe {

struct CPBConfig {
    double theta = 0.7;
    std::size_t prompt_dim = 16;
    std::size_t n_task = 2;
    std::size_t clue_grid = 2;
    std::size_t eca_kernel = 3;
    double mask_rate = 0.3;

    void validate() const
    {
        if (!(theta >= 0.0 && theta <= 1.0))
            throw ConfigError("cpb.theta must lie in [0, 1]");
        if (prompt_dim == 0 || n_task == 0 || clue_grid == 0)
            throw ConfigError("cpb.prompt_dim, cpb.n_task and cpb.clue_grid must be positive");
        if (eca_kernel % 2 == 0 || eca_kernel > prompt_dim)
            throw ConfigError("cpb.eca_kernel must be odd and <= prompt_dim");
        if (!(mask_rate >= 0.0 && mask_rate <= 1.0))
            throw ConfigError("cpb.mask_rate must lie in [0, 1]");
    }
};

/// 3x3 (or any odd) kernel plus the central-difference weight theta.
struct CDCKernel {
    Tensor weights;  // [C_out x C_in x kh x kw]
    double theta = 0.7;
};

/// Central difference convolution:
///   y = conv(x, w) - theta * x_center * sum(w taps)
/// where x_center is the input sample under the kernel's center tap.
inline Tensor cdc_forward(const Tensor& x, const CDCKernel& k, std::size_t stride = 1, std::size_t padding = 1)
{
    if (!(k.theta >= 0.0 && k.theta <= 1.0))
        throw ConfigError("CDC theta " + std::to_string(k.theta) + " outside [0, 1]");
    detail::require_rank(k.weights, 4, "cdc kernel");
    const std::size_t co = k.weights.dim(0), ci = k.weights.dim(1), kh = k.weights.dim(2), kw = k.weights.dim(3);
    if (kh % 2 == 0 || kw % 2 == 0)
        throw ConfigError("CDC kernel extents must be odd, got " + shape_str(k.weights.shape()));
    Tensor vanilla = conv2d(x, k.weights, stride, padding);
    if (k.theta == 0.0)
        return vanilla;
    Tensor tap_sum = reshape(sum_axis(reshape(k.weights, {co * ci, kh * kw}), 1), {co, ci, 1, 1});
    const long offset = static_cast<long>(padding) - static_cast<long>(kh / 2);
    Tensor center = detail::conv2d_window(x, tap_sum, stride, offset, vanilla.dim(1), vanilla.dim(2));
    return sub(vanilla, scale(center, k.theta));
}

/// The three aligned input modalities of a sample.
struct Modalities {
    Tensor rgb;    // [3 x H x W]
    Tensor depth;  // [1 x H x W]
    Tensor ir;     // [1 x H x W]

    std::array<const Tensor*, 3> list() const { return {&rgb, &depth, &ir}; }
    std::size_t channels() const { return rgb.dim(0) + depth.dim(0) + ir.dim(0); }
};

/// Strided CDC stack mapping stacked modalities to a grid of prompt tokens.
struct ClueEncoder {
    std::vector<CDCKernel> layers;
    std::vector<std::size_t> strides;

    /// Two stride-2 layers then one layer whose stride lands on `grid` cells.
    static ClueEncoder random(std::size_t in_channels, std::size_t image_size, const CPBConfig& cfg,
                              std::mt19937_64& rng)
    {
        if (image_size % 4 != 0 || image_size / 4 < cfg.clue_grid || (image_size / 4) % cfg.clue_grid != 0)
            throw ConfigError("cpb.clue_grid " + std::to_string(cfg.clue_grid) + " does not divide image_size/4 = " +
                              std::to_string(image_size / 4));
        const std::size_t mid = std::max<std::size_t>(8, cfg.prompt_dim / 2);
        const std::array<std::size_t, 4> widths{in_channels, mid, cfg.prompt_dim, cfg.prompt_dim};
        ClueEncoder enc;
        for (std::size_t l = 0; l < 3; ++l) {
            const std::size_t fan_in = widths[l] * 9;
            std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
            std::vector<double> w(widths[l + 1] * fan_in);
            for (double& v : w)
                v = nd(rng);
            enc.layers.push_back({Tensor({widths[l + 1], widths[l], 3, 3}, std::move(w), true), cfg.theta});
        }
        enc.strides = {2, 2, image_size / 4 / cfg.clue_grid};
        return enc;
    }
};

/// Clue prompts P_c [n_c x d_p]: channel-stack the modalities, run the CDC
/// stack, and read each output cell's channel vector as one token.
inline Tensor generate_clue_prompt(const Modalities& m, const ClueEncoder& enc)
{
    for (const Tensor* t : m.list()) {
        detail::require_rank(*t, 3, "modality");
        if (t->dim(1) != m.rgb.dim(1) || t->dim(2) != m.rgb.dim(2))
            throw InputError("modalities are not spatially aligned: " + shape_str(m.rgb.shape()) + " vs " +
                             shape_str(t->shape()));
    }
    Tensor x = concat({m.rgb, m.depth, m.ir}, 0);
    for (std::size_t l = 0; l < enc.layers.size(); ++l) {
        x = cdc_forward(x, enc.layers[l], enc.strides[l], 1);
        if (l + 1 < enc.layers.size())
            x = gelu(x);
    }
    const std::size_t d = x.dim(0), cells = x.dim(1) * x.dim(2);
    return transpose(reshape(x, {d, cells}));
}

struct MaskResult {
    Modalities masked;
    Tensor indicator;  // [3], 1 = masked
};

/// Zeroes each modality independently with probability `rate`. When all
/// three come up masked, one of them (uniformly chosen) is restored, so at
/// least one modality always survives.
inline MaskResult apply_modality_mask(const Modalities& m, double rate, std::uint64_t seed)
{
    if (!(rate >= 0.0 && rate <= 1.0))
        throw UsageError("mask rate must lie in [0, 1]");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::array<bool, 3> masked{};
    for (bool& b : masked)
        b = u(rng) < rate;
    if (masked[0] && masked[1] && masked[2])
        masked[std::uniform_int_distribution<int>(0, 2)(rng)] = false;

    MaskResult r{m, Tensor::zeros({3})};
    std::array<Tensor*, 3> out{&r.masked.rgb, &r.masked.depth, &r.masked.ir};
    for (std::size_t i = 0; i < 3; ++i)
        if (masked[i]) {
            *out[i] = Tensor::zeros(out[i]->shape());
            r.indicator.mutable_data()[i] = 1.0;
        }
    return r;
}

/// Mask prompts P_m [3 x d_p]: token i is table row 2*i + indicator[i],
/// i.e. the learned "present" or "masked" embedding of modality i.
inline Tensor build_mask_prompt(const Tensor& indicator, const Tensor& table)
{
    if (indicator.numel() != 3)
        throw InputError("mask indicator must have 3 entries");
    if (table.rank() != 2 || table.dim(0) != 6)
        throw DimensionError("mask embedding table must be [6 x d_p], got " + shape_str(table.shape()));
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < 3; ++i) {
        const double b = indicator[i];
        if (b != 0.0 && b != 1.0)
            throw InputError("mask indicator entries must be 0 or 1");
        rows.push_back(2 * i + (b == 1.0 ? 1 : 0));
    }
    return select_rows(table, rows);
}

/// Efficient channel attention over x[n x d_p]: token-mean channel
/// descriptor, zero-padded 1-D conv across channels, sigmoid, rescale.
inline Tensor eca_forward(const Tensor& x, const Tensor& kernel)
{
    detail::require_rank(x, 2, "eca input");
    if (kernel.numel() % 2 == 0)
        throw ConfigError("ECA kernel size must be odd, got " + std::to_string(kernel.numel()));
    if (kernel.numel() > x.dim(1))
        throw ConfigError("ECA kernel size exceeds channel count");
    Tensor gate = sigmoid(conv1d_same(mean_axis(x, 0), kernel));
    return scale_columns(x, gate);
}

/// Single-head attention weights of the prompt refinement step.
struct PromptAttention {
    Tensor wq, wk, wv;  // [d_p x d_p]
    Tensor eca;         // [eca_kernel]
};

/// P_{i+1} = P_i + ECA(Attn(Cat(P_i, x_c))[prompt rows]).
inline Tensor prompt_update(const Tensor& prompts, const Tensor& x_c, const PromptAttention& attn)
{
    if (!prompts.defined() || prompts.rank() != 2)
        throw ConfigError("prompt_update needs a non-empty prompt block");
    detail::require_rank(x_c, 2, "prompt_update x_c");
    const std::size_t d_p = prompts.dim(1);
    if (x_c.dim(1) != d_p)
        throw DimensionError("x_c width " + std::to_string(x_c.dim(1)) + " != prompt width " + std::to_string(d_p));
    Tensor z = concat({prompts, x_c}, 0);
    Tensor q = matmul(prompts, attn.wq);  // queries only at prompt rows
    Tensor k = matmul(z, attn.wk);
    Tensor v = matmul(z, attn.wv);
    Tensor a = softmax(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d_p))), 1);
    Tensor o = matmul(a, v);
    return add(prompts, eca_forward(o, attn.eca));
}

/// Prompt blocks of one forward pass. per_layer[0] is the merged input
/// prompt [P_t; P_c; P_m]; entry i+1 is the refinement of entry i.
struct PromptState {
    Tensor p_task;
    Tensor p_clue;
    Tensor p_mask;
    std::vector<Tensor> per_layer;

    Tensor merged() const
    {
        std::vector<Tensor> parts;
        for (const Tensor* t : {&p_task, &p_clue, &p_mask})
            if (t->defined())
                parts.push_back(*t);
        if (parts.empty())
            return {};
        return concat(parts, 0);
    }
};

} // namespace bigmoe
