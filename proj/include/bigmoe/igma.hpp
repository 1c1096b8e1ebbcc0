#pragma once

// Isolated gating mechanism adapter.
//
// Two inputs, two roles. The gating vector x_g is built from the feature
// token and the layer's prompt summary and only ever reaches the product-key
// router. The expert vector x_e is the raw feature token and is the only
// thing the experts see. Prompts therefore steer which experts fire and how
// strongly, and nothing else.
//
// The query halves come from different sources: q_a from the feature token,
// q_b from the prompt summary. Prompt semantics thus live in one sub-key space.

#include "bigmoe/routing.hpp"
#include "bigmoe/seed.hpp"
#include "bigmoe/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace bigmoe {

enum class Mode { Train, Eval };

struct IGMAConfig {
    std::size_t n_experts = 256;
    std::size_t top_k = 2;
    std::size_t n_heads = 2;
    std::size_t query_dim = 16;
    std::size_t token_dim = 64;
    std::size_t hidden_dim = 8;
    std::size_t prompt_dim = 16;
    double noise_scale = 1e-2;

    void validate() const
    {
        const auto m = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n_experts))));
        if (n_experts == 0 || m * m != n_experts)
            throw ConfigError("igma.n_experts must be a perfect square, got " + std::to_string(n_experts));
        if (top_k == 0 || top_k > n_experts)
            throw ConfigError("igma.top_k must be in [1, n_experts]");
        if (n_heads == 0)
            throw ConfigError("igma.n_heads must be positive");
        if (query_dim == 0 || query_dim % 2 != 0)
            throw ConfigError("igma.query_dim must be positive and even");
        if (token_dim == 0 || hidden_dim == 0 || prompt_dim == 0)
            throw ConfigError("igma dimensions must be positive");
        if (!(noise_scale >= 0.0))
            throw ConfigError("igma.noise_scale must be >= 0");
    }
};

/// Per-expert two-layer maps: expert i is x -> gelu(x . down_i) . up_i.
struct ExpertPool {
    Tensor down;  // [N x d x h]
    Tensor up;    // [N x h x d]

    std::size_t n_experts() const { return down.dim(0); }
    std::size_t token_dim() const { return down.dim(1); }
    std::size_t hidden_dim() const { return down.dim(2); }

    static ExpertPool random(const IGMAConfig& cfg, std::mt19937_64& rng, bool zero_up)
    {
        const std::size_t n = cfg.n_experts, d = cfg.token_dim, h = cfg.hidden_dim;
        std::normal_distribution<double> nd_down(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
        std::normal_distribution<double> nd_up(0.0, 1.0 / std::sqrt(static_cast<double>(h)));
        std::vector<double> down(n * d * h), up(n * h * d, 0.0);
        for (double& v : down)
            v = nd_down(rng);
        if (!zero_up)
            for (double& v : up)
                v = nd_up(rng);
        return {Tensor({n, d, h}, std::move(down), true), Tensor({n, h, d}, std::move(up), true)};
    }
};

/// Query network and product-key index of one routing head.
struct GatingHead {
    Tensor feat_proj;    // [d x d_q/2]
    Tensor feat_bias;    // [d_q/2]
    Tensor prompt_proj;  // [d_p x d_q/2]
    Tensor prompt_bias;  // [d_q/2]
    ProductKeyIndex index;
    ScoreTransform score_transform;
};

struct GatingTransforms {
    std::vector<GatingHead> heads;

    static GatingTransforms random(const IGMAConfig& cfg, std::mt19937_64& rng)
    {
        const std::size_t half = cfg.query_dim / 2;
        auto dense = [&rng](std::size_t in, std::size_t out) {
            std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
            std::vector<double> v(in * out);
            for (double& x : v)
                x = nd(rng);
            return Tensor({in, out}, std::move(v), true);
        };
        GatingTransforms g;
        for (std::size_t i = 0; i < cfg.n_heads; ++i) {
            GatingHead head;
            head.feat_proj = dense(cfg.token_dim, half);
            head.feat_bias = Tensor::zeros({half}, true);
            head.prompt_proj = dense(cfg.prompt_dim, half);
            head.prompt_bias = Tensor::zeros({half}, true);
            head.index = ProductKeyIndex::random(cfg.n_experts, cfg.query_dim, rng, true);
            head.score_transform = ScoreTransform::identity_like(true);
            g.heads.push_back(std::move(head));
        }
        return g;
    }
};

/// Routing of one head over T tokens: ids and weights are row-major [T x k].
struct HeadRouting {
    std::vector<std::size_t> ids;
    std::vector<double> weights;
};

/// Captured routing of one adapter call, replayable to freeze the gate.
struct RoutingTrace {
    std::vector<HeadRouting> heads;
};

struct IGMAContext {
    Mode mode = Mode::Eval;
    std::uint64_t seed = 0;
    RoutingTrace* capture = nullptr;
    const RoutingTrace* replay = nullptr;
};

/// Sparse weighted expert mixture. Row t of the output is
///   sum_s weights[t,s] * expert_{ids[t*k+s]}(tokens[t]).
/// Only the listed experts are evaluated, so unlisted experts get exactly
/// zero output contribution and zero gradient.
inline Tensor expert_mixture(const Tensor& tokens, const ExpertPool& pool, const std::vector<std::size_t>& ids,
                             const Tensor& weights)
{
    detail::require_rank(tokens, 2, "expert_mixture tokens");
    const std::size_t t_count = tokens.dim(0), d = tokens.dim(1);
    const std::size_t n = pool.n_experts(), h = pool.hidden_dim();
    if (pool.token_dim() != d || pool.up.dim(1) != h || pool.up.dim(2) != d)
        throw DimensionError("expert pool " + shape_str(pool.down.shape()) + "/" + shape_str(pool.up.shape()) +
                             " does not fit tokens " + shape_str(tokens.shape()));
    if (weights.numel() != ids.size() || ids.size() % t_count != 0)
        throw DimensionError("expert_mixture: " + std::to_string(ids.size()) + " ids, " +
                             std::to_string(weights.numel()) + " weights for " + std::to_string(t_count) + " tokens");
    const std::size_t k = ids.size() / t_count;
    for (std::size_t e : ids)
        if (e >= n)
            throw UsageError("expert index " + std::to_string(e) + " out of range " + std::to_string(n));

    const auto& xv = tokens.values();
    const auto& dv = pool.down.values();
    const auto& uv = pool.up.values();
    const auto& wv = weights.values();
    std::vector<double> pre(ids.size() * h), act(ids.size() * h), out(t_count * d, 0.0);
    for (std::size_t t = 0; t < t_count; ++t)
        for (std::size_t s = 0; s < k; ++s) {
            const std::size_t slot = t * k + s, e = ids[slot];
            const double* x = xv.data() + t * d;
            const double* dn = dv.data() + e * d * h;
            double* p = pre.data() + slot * h;
            for (std::size_t a = 0; a < d; ++a)
                for (std::size_t r = 0; r < h; ++r)
                    p[r] += x[a] * dn[a * h + r];
            for (std::size_t r = 0; r < h; ++r)
                act[slot * h + r] = detail::gelu_value(p[r]);
            const double* upm = uv.data() + e * h * d;
            double* o = out.data() + t * d;
            for (std::size_t c = 0; c < d; ++c) {
                double y = 0.0;
                for (std::size_t r = 0; r < h; ++r)
                    y += act[slot * h + r] * upm[r * d + c];
                o[c] += wv[slot] * y;
            }
        }

    detail::ImplPtr xi = tokens.impl(), di = pool.down.impl(), ui = pool.up.impl(), wi = weights.impl();
    return detail::make_result(
        {t_count, d}, std::move(out), {&tokens, &pool.down, &pool.up, &weights},
        [xi, di, ui, wi, ids, pre, act, t_count, k, d, h](const std::vector<double>& g) {
            auto* gx = detail::grad_sink(xi);
            auto* gd = detail::grad_sink(di);
            auto* gu = detail::grad_sink(ui);
            auto* gw = detail::grad_sink(wi);
            std::vector<double> gpre(h);
            for (std::size_t t = 0; t < t_count; ++t)
                for (std::size_t s = 0; s < k; ++s) {
                    const std::size_t slot = t * k + s, e = ids[slot];
                    const double w = wi->data[slot];
                    const double* gout = g.data() + t * d;
                    const double* upm = ui->data.data() + e * h * d;
                    const double* a = act.data() + slot * h;
                    if (gw) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < d; ++c) {
                            double y = 0.0;
                            for (std::size_t r = 0; r < h; ++r)
                                y += a[r] * upm[r * d + c];
                            acc += gout[c] * y;
                        }
                        (*gw)[slot] += acc;
                    }
                    for (std::size_t r = 0; r < h; ++r) {
                        double gact = 0.0;
                        for (std::size_t c = 0; c < d; ++c) {
                            gact += upm[r * d + c] * gout[c];
                            if (gu)
                                (*gu)[e * h * d + r * d + c] += a[r] * w * gout[c];
                        }
                        gpre[r] = w * gact * detail::gelu_derivative(pre[slot * h + r]);
                    }
                    const double* x = xi->data.data() + t * d;
                    const double* dn = di->data.data() + e * d * h;
                    for (std::size_t p = 0; p < d; ++p)
                        for (std::size_t r = 0; r < h; ++r) {
                            if (gd)
                                (*gd)[e * d * h + p * h + r] += x[p] * gpre[r];
                            if (gx)
                                (*gx)[t * d + p] += dn[p * h + r] * gpre[r];
                        }
                }
        });
}

/// Single expert applied to x[d]: up_i . gelu(down_i^T x).
inline Tensor expert_forward(const Tensor& x, const ExpertPool& pool, std::size_t i)
{
    if (i >= pool.n_experts())
        throw UsageError("expert index " + std::to_string(i) + " out of range " + std::to_string(pool.n_experts()));
    const std::size_t d = x.numel();
    Tensor out = expert_mixture(reshape(x, {1, d}), pool, {i}, Tensor::scalar(1.0));
    return reshape(out, {d});
}

namespace detail {

/// Differentiable gate weights [T x k] and chosen expert ids for one head.
inline std::pair<Tensor, std::vector<std::size_t>> gate_head(const Tensor& tokens, const Tensor& prompt_row,
                                                             const GatingHead& head, const IGMAConfig& cfg,
                                                             double noise_scale, std::uint64_t seed)
{
    const std::size_t t_count = tokens.dim(0), k = cfg.top_k;
    const std::size_t m = head.index.side();
    Tensor qa = linear(tokens, head.feat_proj, head.feat_bias);
    Tensor score_a = matmul(qa, transpose(head.index.sub_keys_a()));  // [T x m]
    Tensor qb = linear(prompt_row, head.prompt_proj, head.prompt_bias);
    Tensor score_b = matmul(qb, transpose(head.index.sub_keys_b()));  // [1 x m]

    std::vector<std::size_t> ids, flat_a, flat_b;
    std::vector<double> noise;
    const auto& sav = score_a.values();
    std::span<const double> sb(score_b.values());
    for (std::size_t t = 0; t < t_count; ++t) {
        std::span<const double> sa(sav.data() + t * m, m);
        const auto chosen = gated_select(sa, sb, k, head.score_transform, noise_scale, derive_seed(seed, {t}));
        for (const auto& c : chosen) {
            ids.push_back(c.expert);
            flat_a.push_back(t * m + c.row_a);
            flat_b.push_back(c.row_b);
            noise.push_back(c.noise);
        }
    }
    Tensor s = add(gather(score_a, flat_a), gather(score_b, flat_b));
    if (noise_scale > 0.0) {
        const std::size_t n = noise.size();
        s = add(s, Tensor({n}, std::move(noise)));
    }
    Tensor logits = tanh(add(mul(s, head.score_transform.gain), head.score_transform.bias));
    Tensor weights = softmax(reshape(logits, {t_count, k}), 1);
    return {weights, ids};
}

} // namespace detail

/// Adapter residual for tokens[T x d] given the layer prompt summary[d_p].
/// Output rows are the weighted sum over heads and selected experts.
inline Tensor igma_forward(const Tensor& tokens, const Tensor& prompt_summary, const ExpertPool& pool,
                           const GatingTransforms& gates, const IGMAConfig& cfg, const IGMAContext& ctx = {})
{
    detail::require_rank(tokens, 2, "igma tokens");
    if (tokens.dim(1) != cfg.token_dim)
        throw ConfigError("igma tokens width " + std::to_string(tokens.dim(1)) + " != token_dim " +
                          std::to_string(cfg.token_dim));
    if (prompt_summary.numel() != cfg.prompt_dim)
        throw ConfigError("prompt summary has " + std::to_string(prompt_summary.numel()) + " values, prompt_dim is " +
                          std::to_string(cfg.prompt_dim));
    if (gates.heads.size() != cfg.n_heads)
        throw ConfigError("gating transforms carry " + std::to_string(gates.heads.size()) + " heads, config wants " +
                          std::to_string(cfg.n_heads));
    if (pool.n_experts() != cfg.n_experts)
        throw ConfigError("expert pool size does not match igma.n_experts");

    const std::size_t t_count = tokens.dim(0), k = cfg.top_k;
    const double noise_scale = ctx.mode == Mode::Train ? cfg.noise_scale : 0.0;
    const Tensor prompt_row = reshape(prompt_summary, {1, cfg.prompt_dim});
    if (ctx.replay && ctx.replay->heads.size() != cfg.n_heads)
        throw UsageError("replayed routing has the wrong head count");
    if (ctx.capture)
        ctx.capture->heads.assign(cfg.n_heads, {});

    Tensor out;
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
        Tensor weights;
        std::vector<std::size_t> ids;
        if (ctx.replay) {
            const HeadRouting& r = ctx.replay->heads[hd];
            if (r.ids.size() != t_count * k || r.weights.size() != t_count * k)
                throw UsageError("replayed routing does not match token count");
            ids = r.ids;
            weights = Tensor({t_count, k}, r.weights);
        } else {
            std::tie(weights, ids) =
                detail::gate_head(tokens, prompt_row, gates.heads[hd], cfg, noise_scale, derive_seed(ctx.seed, {hd}));
        }
        if (ctx.capture)
            ctx.capture->heads[hd] = {ids, weights.values()};
        Tensor part = expert_mixture(tokens, pool, ids, weights);
        out = out.defined() ? add(out, part) : part;
    }
    return out;
}

} // namespace bigmoe
