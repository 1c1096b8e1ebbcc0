#pragma once

// Desk-scale ViT carrying one IGMA adapter per encoder block and the CPB
// prompt path alongside it.
//
// Token stream: RGB patches + class token. Depth and IR reach the model only
// through the clue prompts. Per block b:
//   P_{b+1} = prompt_update(P_b, x_c(tokens))       (gating side)
//   tokens  = tokens + MHSA(LN(tokens))
//   tokens  = tokens + MLP(LN(tokens))
//   tokens  = tokens + IGMA(tokens | mean(P_{b+1}))  (prompts steer routing only)

#include "bigmoe/cpb.hpp"
#include "bigmoe/igma.hpp"
#include "bigmoe/seed.hpp"
#include "bigmoe/tensor.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace bigmoe {

struct BackboneConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t in_channels = 3;
    std::size_t token_dim = 64;
    std::size_t depth = 4;
    std::size_t attn_heads = 4;
    std::size_t mlp_ratio = 2;
    std::size_t n_classes = 2;

    std::size_t patches_per_side() const { return image_size / patch_size; }
    std::size_t token_count() const { return patches_per_side() * patches_per_side() + 1; }

    void validate() const
    {
        if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0)
            throw ConfigError("backbone.image_size must be a positive multiple of backbone.patch_size");
        if (token_dim == 0 || attn_heads == 0 || token_dim % attn_heads != 0)
            throw ConfigError("backbone.token_dim must be a positive multiple of backbone.attn_heads");
        if (depth == 0 || mlp_ratio == 0 || in_channels == 0)
            throw ConfigError("backbone.depth, backbone.mlp_ratio and backbone.in_channels must be positive");
        if (n_classes != 2)
            throw ConfigError("backbone.n_classes must be 2");
    }
};

/// Which prompt components feed the gate.
enum class PromptSet { None, Task, TaskClue, Full };

inline std::string prompt_set_name(PromptSet p)
{
    switch (p) {
        case PromptSet::None: return "none";
        case PromptSet::Task: return "t";
        case PromptSet::TaskClue: return "t+c";
        case PromptSet::Full: return "t+c+m";
    }
    return "?";
}

inline PromptSet parse_prompt_set(const std::string& s)
{
    if (s == "none") return PromptSet::None;
    if (s == "t") return PromptSet::Task;
    if (s == "t+c") return PromptSet::TaskClue;
    if (s == "t+c+m") return PromptSet::Full;
    throw ConfigError("mode.prompts must be one of none, t, t+c, t+c+m (got '" + s + "')");
}

struct ModelConfig {
    BackboneConfig backbone;
    IGMAConfig igma;
    CPBConfig cpb;
    bool disable_igma = false;
    bool disable_cpb = false;
    bool coarse_moe = false;
    PromptSet prompts = PromptSet::Full;

    bool cpb_active() const { return !disable_cpb && prompts != PromptSet::None; }

    /// Adapter settings with widths taken from the backbone and prompt
    /// configs. The coarse-MoE switch swaps in four wide experts, all active.
    IGMAConfig effective_igma() const
    {
        IGMAConfig c = igma;
        c.token_dim = backbone.token_dim;
        c.prompt_dim = cpb.prompt_dim;
        if (coarse_moe) {
            c.n_experts = 4;
            c.top_k = 4;
            c.hidden_dim = backbone.token_dim;
        }
        return c;
    }

    void validate() const
    {
        backbone.validate();
        cpb.validate();
        effective_igma().validate();
        if (backbone.image_size % 4 != 0 || (backbone.image_size / 4) % cpb.clue_grid != 0)
            throw ConfigError("cpb.clue_grid must divide backbone.image_size/4");
    }
};

struct EncoderBlock {
    Tensor ln1_g, ln1_b;
    Tensor qkv_w, qkv_b;
    Tensor proj_w, proj_b;
    Tensor ln2_g, ln2_b;
    Tensor fc1_w, fc1_b;
    Tensor fc2_w, fc2_b;
};

struct AdapterParams {
    ExpertPool pool;
    GatingTransforms gates;
};

/// Gating-side projection x_c and the refinement attention of one block.
struct PromptBlock {
    Tensor xc_w, xc_b;
    PromptAttention attn;
};

struct CPBParams {
    Tensor task;        // P_t [n_t x d_p]
    ClueEncoder clue;
    Tensor mask_table;  // [6 x d_p]
    std::vector<PromptBlock> blocks;
};

using NamedTensor = std::pair<std::string, Tensor>;

class Model {
public:
    ModelConfig config;
    Tensor patch_w, patch_b, cls_token, pos_embed;
    std::vector<EncoderBlock> blocks;
    std::vector<AdapterParams> adapters;  // empty when the adapter is disabled
    std::optional<CPBParams> cpb;         // empty when no prompts are used
    Tensor norm_g, norm_b, head_w, head_b;

    /// Backbone, adapter and prompt parameters draw from independent streams
    /// derived from `seed`, so toggling a component leaves the others unchanged.
    static Model create(const ModelConfig& cfg, std::uint64_t seed)
    {
        cfg.validate();
        Model m;
        m.config = cfg;
        const auto& b = cfg.backbone;
        const std::size_t d = b.token_dim, t = b.token_count();
        const std::size_t patch_in = b.in_channels * b.patch_size * b.patch_size;

        std::mt19937_64 rng(derive_seed(seed, {1}));
        m.patch_w = normal({patch_in, d}, 1.0 / std::sqrt(static_cast<double>(patch_in)), rng);
        m.patch_b = Tensor::zeros({d}, true);
        m.cls_token = normal({1, d}, 0.02, rng);
        m.pos_embed = normal({t, d}, 0.02, rng);
        for (std::size_t i = 0; i < b.depth; ++i) {
            EncoderBlock blk;
            blk.ln1_g = Tensor::full({d}, 1.0, true);
            blk.ln1_b = Tensor::zeros({d}, true);
            blk.qkv_w = normal({d, 3 * d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
            blk.qkv_b = Tensor::zeros({3 * d}, true);
            blk.proj_w = normal({d, d}, 0.02, rng);
            blk.proj_b = Tensor::zeros({d}, true);
            blk.ln2_g = Tensor::full({d}, 1.0, true);
            blk.ln2_b = Tensor::zeros({d}, true);
            blk.fc1_w = normal({d, b.mlp_ratio * d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
            blk.fc1_b = Tensor::zeros({b.mlp_ratio * d}, true);
            blk.fc2_w = normal({b.mlp_ratio * d, d}, 0.02, rng);
            blk.fc2_b = Tensor::zeros({d}, true);
            m.blocks.push_back(std::move(blk));
        }
        m.norm_g = Tensor::full({d}, 1.0, true);
        m.norm_b = Tensor::zeros({d}, true);
        m.head_w = normal({d, b.n_classes}, 0.02, rng);
        m.head_b = Tensor::zeros({b.n_classes}, true);

        if (!cfg.disable_igma) {
            const IGMAConfig ic = cfg.effective_igma();
            for (std::size_t i = 0; i < b.depth; ++i) {
                std::mt19937_64 arng(derive_seed(seed, {2, i}));
                AdapterParams a{ExpertPool::random(ic, arng, true), GatingTransforms::random(ic, arng)};
                m.adapters.push_back(std::move(a));
            }
        }
        if (cfg.cpb_active()) {
            const auto& c = cfg.cpb;
            std::mt19937_64 prng(derive_seed(seed, {3}));
            CPBParams p;
            p.task = normal({c.n_task, c.prompt_dim}, 0.5, prng);
            p.clue = ClueEncoder::random(b.in_channels + 2, b.image_size, c, prng);
            p.mask_table = normal({6, c.prompt_dim}, 0.5, prng);
            for (std::size_t i = 0; i < b.depth; ++i) {
                PromptBlock pb;
                pb.xc_w = normal({d, c.prompt_dim}, 1.0 / std::sqrt(static_cast<double>(d)), prng);
                pb.xc_b = Tensor::zeros({c.prompt_dim}, true);
                const double s = 1.0 / std::sqrt(static_cast<double>(c.prompt_dim));
                pb.attn.wq = normal({c.prompt_dim, c.prompt_dim}, s, prng);
                pb.attn.wk = normal({c.prompt_dim, c.prompt_dim}, s, prng);
                pb.attn.wv = Tensor::zeros({c.prompt_dim, c.prompt_dim}, true);
                pb.attn.eca = normal({c.eca_kernel}, 0.1, prng);
                p.blocks.push_back(std::move(pb));
            }
            m.cpb = std::move(p);
        }
        return m;
    }

    /// Every trainable tensor with a stable dotted name, in a fixed order.
    std::vector<NamedTensor> named_parameters() const
    {
        std::vector<NamedTensor> out;
        auto add = [&out](std::string name, const Tensor& t) { out.emplace_back(std::move(name), t); };
        add("patch.w", patch_w);
        add("patch.b", patch_b);
        add("cls_token", cls_token);
        add("pos_embed", pos_embed);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const auto& b = blocks[i];
            const std::string p = "blocks." + std::to_string(i) + ".";
            add(p + "ln1.g", b.ln1_g);
            add(p + "ln1.b", b.ln1_b);
            add(p + "qkv.w", b.qkv_w);
            add(p + "qkv.b", b.qkv_b);
            add(p + "proj.w", b.proj_w);
            add(p + "proj.b", b.proj_b);
            add(p + "ln2.g", b.ln2_g);
            add(p + "ln2.b", b.ln2_b);
            add(p + "fc1.w", b.fc1_w);
            add(p + "fc1.b", b.fc1_b);
            add(p + "fc2.w", b.fc2_w);
            add(p + "fc2.b", b.fc2_b);
        }
        for (std::size_t i = 0; i < adapters.size(); ++i) {
            const auto& a = adapters[i];
            const std::string p = "adapters." + std::to_string(i) + ".";
            add(p + "experts.down", a.pool.down);
            add(p + "experts.up", a.pool.up);
            for (std::size_t h = 0; h < a.gates.heads.size(); ++h) {
                const auto& g = a.gates.heads[h];
                const std::string q = p + "heads." + std::to_string(h) + ".";
                add(q + "feat_proj", g.feat_proj);
                add(q + "feat_bias", g.feat_bias);
                add(q + "prompt_proj", g.prompt_proj);
                add(q + "prompt_bias", g.prompt_bias);
                add(q + "keys_a", g.index.sub_keys_a());
                add(q + "keys_b", g.index.sub_keys_b());
                add(q + "fg_gain", g.score_transform.gain);
                add(q + "fg_bias", g.score_transform.bias);
            }
        }
        if (cpb) {
            add("cpb.task", cpb->task);
            for (std::size_t l = 0; l < cpb->clue.layers.size(); ++l)
                add("cpb.clue." + std::to_string(l), cpb->clue.layers[l].weights);
            add("cpb.mask_table", cpb->mask_table);
            for (std::size_t i = 0; i < cpb->blocks.size(); ++i) {
                const auto& pb = cpb->blocks[i];
                const std::string p = "cpb.blocks." + std::to_string(i) + ".";
                add(p + "xc.w", pb.xc_w);
                add(p + "xc.b", pb.xc_b);
                add(p + "wq", pb.attn.wq);
                add(p + "wk", pb.attn.wk);
                add(p + "wv", pb.attn.wv);
                add(p + "eca", pb.attn.eca);
            }
        }
        add("norm.g", norm_g);
        add("norm.b", norm_b);
        add("head.w", head_w);
        add("head.b", head_b);
        return out;
    }

    std::vector<Tensor> parameters() const
    {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_parameters())
            out.push_back(t);
        return out;
    }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (auto& [name, t] : named_parameters())
            n += t.numel();
        return n;
    }

private:
    static Tensor normal(Shape shape, double stddev, std::mt19937_64& rng)
    {
        std::normal_distribution<double> nd(0.0, stddev);
        std::vector<double> v(shape_numel(shape));
        for (double& x : v)
            x = nd(rng);
        return Tensor(std::move(shape), std::move(v), true);
    }
};

/// Non-overlapping patches of image[C x H x W] as rows [n_patches x C*p*p],
/// patches in row-major grid order, each flattened as (channel, y, x).
inline Tensor extract_patches(const Tensor& image, std::size_t patch)
{
    detail::require_rank(image, 3, "image");
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (patch == 0 || h % patch != 0 || w % patch != 0)
        throw ConfigError("image " + shape_str(image.shape()) + " is not divisible into " + std::to_string(patch) +
                          "-pixel patches");
    const std::size_t gy = h / patch, gx = w / patch, len = c * patch * patch;
    const auto& v = image.values();
    std::vector<double> out(gy * gx * len);
    for (std::size_t py = 0; py < gy; ++py)
        for (std::size_t px = 0; px < gx; ++px) {
            double* row = out.data() + (py * gx + px) * len;
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = 0; y < patch; ++y)
                    for (std::size_t x = 0; x < patch; ++x)
                        *row++ = v[(ch * h + py * patch + y) * w + px * patch + x];
        }
    return Tensor({gy * gx, len}, std::move(out));
}

/// Patch embedding with prepended class token and positional embeddings: [T x d].
inline Tensor patchify(const Tensor& image, const Model& model)
{
    const auto& b = model.config.backbone;
    if (image.rank() != 3 || image.dim(0) != b.in_channels || image.dim(1) != b.image_size ||
        image.dim(2) != b.image_size)
        throw ConfigError("image " + shape_str(image.shape()) + " does not match backbone config [" +
                          std::to_string(b.in_channels) + "x" + std::to_string(b.image_size) + "x" +
                          std::to_string(b.image_size) + "]");
    Tensor patches = linear(extract_patches(image, b.patch_size), model.patch_w, model.patch_b);
    return add(concat({model.cls_token, patches}, 0), model.pos_embed);
}

/// Multi-head self-attention on x[T x d]; optionally returns each head's
/// attention matrix.
inline Tensor self_attention(const Tensor& x, const EncoderBlock& blk, std::size_t heads,
                             std::vector<Tensor>* attn_out = nullptr)
{
    const std::size_t d = x.dim(1), dh = d / heads;
    Tensor qkv = linear(x, blk.qkv_w, blk.qkv_b);
    std::vector<Tensor> outs;
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor q = slice(qkv, 1, h * dh, (h + 1) * dh);
        Tensor k = slice(qkv, 1, d + h * dh, d + (h + 1) * dh);
        Tensor v = slice(qkv, 1, 2 * d + h * dh, 2 * d + (h + 1) * dh);
        Tensor a = softmax(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh))), 1);
        if (attn_out)
            attn_out->push_back(a);
        outs.push_back(matmul(a, v));
    }
    return linear(heads == 1 ? outs.front() : concat(outs, 1), blk.proj_w, blk.proj_b);
}

/// Pre-norm transformer block with an optional adapter residual.
inline Tensor encoder_block(const Tensor& tokens, const EncoderBlock& blk, std::size_t heads,
                            const AdapterParams* adapter = nullptr, const Tensor& prompt_summary = Tensor(),
                            const IGMAConfig* igma_cfg = nullptr, const IGMAContext& ctx = {})
{
    Tensor x = add(tokens, self_attention(layer_norm(tokens, blk.ln1_g, blk.ln1_b), blk, heads));
    Tensor hidden = gelu(linear(layer_norm(x, blk.ln2_g, blk.ln2_b), blk.fc1_w, blk.fc1_b));
    x = add(x, linear(hidden, blk.fc2_w, blk.fc2_b));
    if (adapter)
        x = add(x, igma_forward(x, prompt_summary, adapter->pool, adapter->gates, *igma_cfg, ctx));
    return x;
}

struct ForwardOptions {
    Mode mode = Mode::Eval;
    std::uint64_t seed = 0;
    /// Per-block routing capture / replay (one RoutingTrace per block).
    std::vector<RoutingTrace>* capture = nullptr;
    const std::vector<RoutingTrace>* replay = nullptr;
    /// Applied to each layer's prompt block right before it reaches the gate.
    std::function<Tensor(std::size_t layer, const Tensor& prompts)> prompt_hook;
    /// Receives the prompt blocks of this pass when set.
    PromptState* prompts_out = nullptr;
};

/// Builds the layer-0 prompt block for a sample. In training mode with the
/// full prompt set, modalities are randomly masked before the clue encoder.
inline PromptState initial_prompts(const Modalities& sample, const Model& model, const ForwardOptions& opt)
{
    PromptState st;
    const auto& cfg = model.config;
    if (!cfg.cpb_active())
        return st;
    st.p_task = model.cpb->task;
    Modalities clue_in = sample;
    Tensor indicator = Tensor::zeros({3});
    if (cfg.prompts == PromptSet::Full && opt.mode == Mode::Train) {
        auto masked = apply_modality_mask(sample, cfg.cpb.mask_rate, derive_seed(opt.seed, {0x6d61736b}));
        clue_in = masked.masked;
        indicator = masked.indicator;
    }
    if (cfg.prompts == PromptSet::TaskClue || cfg.prompts == PromptSet::Full)
        st.p_clue = generate_clue_prompt(clue_in, model.cpb->clue);
    if (cfg.prompts == PromptSet::Full)
        st.p_mask = build_mask_prompt(indicator, model.cpb->mask_table);
    st.per_layer.push_back(st.merged());
    return st;
}

/// Class logits [2] for one sample.
inline Tensor model_forward(const Modalities& sample, const Model& model, const ForwardOptions& opt = {})
{
    const auto& cfg = model.config;
    const IGMAConfig icfg = cfg.effective_igma();
    if (opt.replay && opt.replay->size() != cfg.backbone.depth)
        throw UsageError("replayed routing must hold one trace per block");
    if (opt.capture)
        opt.capture->assign(cfg.backbone.depth, {});

    Tensor tokens = patchify(sample.rgb, model);
    PromptState prompts = initial_prompts(sample, model, opt);
    Tensor p = cfg.cpb_active() ? prompts.per_layer.front() : Tensor();
    const Tensor no_prompt = Tensor::zeros({cfg.cpb.prompt_dim});

    for (std::size_t b = 0; b < cfg.backbone.depth; ++b) {
        Tensor summary = no_prompt;
        if (cfg.cpb_active()) {
            const PromptBlock& pb = model.cpb->blocks[b];
            p = prompt_update(p, linear(tokens, pb.xc_w, pb.xc_b), pb.attn);
            if (opt.prompt_hook)
                p = opt.prompt_hook(b, p);
            prompts.per_layer.push_back(p);
            summary = mean_axis(p, 0);
        }
        const AdapterParams* adapter = model.adapters.empty() ? nullptr : &model.adapters[b];
        IGMAContext ctx;
        ctx.mode = opt.mode;
        ctx.seed = derive_seed(opt.seed, {0x69676d61, b});
        ctx.capture = opt.capture ? &(*opt.capture)[b] : nullptr;
        ctx.replay = opt.replay ? &(*opt.replay)[b] : nullptr;
        tokens = encoder_block(tokens, model.blocks[b], cfg.backbone.attn_heads, adapter, summary, &icfg, ctx);
    }
    if (opt.prompts_out)
        *opt.prompts_out = std::move(prompts);
    Tensor cls = layer_norm(slice(tokens, 0, 0, 1), model.norm_g, model.norm_b);
    return reshape(linear(cls, model.head_w, model.head_b), {cfg.backbone.n_classes});
}

} // namespace bigmoe
