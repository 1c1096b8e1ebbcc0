#pragma once

// Oracle suites runnable on demand (CLI `gradcheck` / `oracle`) and from the
// test binaries: every differentiable op and a small full model against
// central differences, product-key retrieval against brute force, the
// metrics against their enumeration oracles, plus the structural checks
// (CDC identities, masking statistics, gate isolation and sparsity,
// transparency at init).

#include "bigmoe/backbone.hpp"
#include "bigmoe/cpb.hpp"
#include "bigmoe/igma.hpp"
#include "bigmoe/metrics.hpp"
#include "bigmoe/oracles.hpp"
#include "bigmoe/routing.hpp"
#include "bigmoe/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace bigmoe {

struct CheckLine {
    std::string name;
    double value = 0.0;      // error measure (relative error, mismatch count, ...)
    double tolerance = 0.0;  // passes when value < tolerance (or == 0 for counts)
    bool passed = false;
};

namespace detail {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0)
{
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v)
        x = u(rng);
    return Tensor(std::move(shape), std::move(v));
}

/// Projects an op output onto fixed random weights so every output element
/// contributes a distinct gradient.
inline Tensor probe(const Tensor& out, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    return sum(mul(out, random_tensor(out.shape(), rng)));
}

inline CheckLine grad_line(const std::string& name, double tol, const std::function<Tensor()>& f,
                           std::vector<std::pair<std::string, Tensor>> inputs)
{
    const auto r = oracle::gradcheck(f, std::move(inputs));
    const double err = r.max_rel_error();
    return {name, err, tol, err < tol};
}

/// Replaces every all-zero parameter tensor (biases, expert up-projections,
/// prompt value maps) with N(0, stddev) draws.
inline void randomize_zero_parameters(const Model& model, std::mt19937_64& rng, double stddev)
{
    std::normal_distribution<double> nd(0.0, stddev);
    for (auto& [name, t] : model.named_parameters()) {
        bool all_zero = true;
        for (double v : t.values())
            all_zero = all_zero && v == 0.0;
        if (all_zero)
            for (double& v : t.mutable_data())
                v = nd(rng);
    }
}

inline Modalities random_modalities(std::size_t size, std::mt19937_64& rng)
{
    return {random_tensor({3, size, size}, rng, 0.0, 1.0), random_tensor({1, size, size}, rng, 0.0, 1.0),
            random_tensor({1, size, size}, rng, 0.0, 1.0)};
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b)
{
    if (a.size() != b.size())
        return std::numeric_limits<double>::infinity();
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline std::vector<double> grad_copy(const Tensor& t)
{
    if (!t.has_grad())
        return std::vector<double>(t.numel(), 0.0);
    return {t.grad().begin(), t.grad().end()};
}

} // namespace detail

/// Central-difference check of every differentiable op on random inputs.
/// Elementary ops are held to 1e-5, composite layers to 1e-4.
inline std::vector<CheckLine> op_gradient_suite(std::uint64_t seed = 11)
{
    std::mt19937_64 rng(seed);
    auto R = [&rng](Shape s) { return detail::random_tensor(std::move(s), rng); };
    constexpr double elem = 1e-5, comp = 1e-4;
    std::vector<CheckLine> out;
    auto check = [&out](const std::string& name, double tol, std::function<Tensor(const std::vector<Tensor>&)> op,
                        std::vector<Tensor> in) {
        std::vector<std::pair<std::string, Tensor>> named;
        for (std::size_t i = 0; i < in.size(); ++i)
            named.emplace_back(name + "." + std::to_string(i), in[i]);
        out.push_back(detail::grad_line(name, tol, [op, in] { return detail::probe(op(in), 99); }, named));
    };
    using V = const std::vector<Tensor>&;

    check("add", elem, [](V x) { return add(x[0], x[1]); }, {R({3, 4}), R({3, 4})});
    check("sub", elem, [](V x) { return sub(x[0], x[1]); }, {R({3, 4}), R({3, 4})});
    check("mul", elem, [](V x) { return mul(x[0], x[1]); }, {R({3, 4}), R({3, 4})});
    check("mul_scalar", elem, [](V x) { return mul(x[0], x[1]); }, {R({3, 4}), R({1})});
    check("add_scalar_lhs", elem, [](V x) { return add(x[1], x[0]); }, {R({3, 4}), R({1})});
    check("scale", elem, [](V x) { return scale(x[0], -1.7); }, {R({5})});
    check("add_scalar", elem, [](V x) { return add_scalar(x[0], 0.3); }, {R({5})});
    check("exp", elem, [](V x) { return exp(x[0]); }, {R({2, 3})});
    check("tanh", elem, [](V x) { return tanh(x[0]); }, {R({2, 3})});
    check("sigmoid", elem, [](V x) { return sigmoid(x[0]); }, {R({2, 3})});
    check("gelu", elem, [](V x) { return gelu(scale(x[0], 3.0)); }, {R({2, 5})});
    check("square", elem, [](V x) { return square(x[0]); }, {R({2, 3})});
    check("reshape", elem, [](V x) { return reshape(x[0], {3, 2}); }, {R({2, 3})});
    check("transpose", elem, [](V x) { return transpose(x[0]); }, {R({2, 3})});
    check("concat_rows", elem, [](V x) { return concat({x[0], x[1]}, 0); }, {R({2, 3}), R({1, 3})});
    check("concat_cols", elem, [](V x) { return concat({x[0], x[1]}, 1); }, {R({2, 3}), R({2, 2})});
    check("slice", elem, [](V x) { return slice(x[0], 1, 1, 3); }, {R({3, 4})});
    check("select_rows", elem, [](V x) { return select_rows(x[0], {2, 0, 2}); }, {R({3, 4})});
    check("gather", elem, [](V x) { return gather(x[0], {5, 1, 5, 0}); }, {R({2, 3})});
    check("sum", elem, [](V x) { return sum(x[0]); }, {R({2, 3})});
    check("mean", elem, [](V x) { return mean(x[0]); }, {R({2, 3})});
    check("sum_axis0", elem, [](V x) { return sum_axis(x[0], 0); }, {R({3, 4})});
    check("sum_axis1", elem, [](V x) { return sum_axis(x[0], 1); }, {R({3, 4})});
    check("mean_axis0", elem, [](V x) { return mean_axis(x[0], 0); }, {R({3, 4})});
    check("matmul", elem, [](V x) { return matmul(x[0], x[1]); }, {R({3, 4}), R({4, 2})});
    check("linear", elem, [](V x) { return linear(x[0], x[1], x[2]); }, {R({3, 4}), R({4, 2}), R({2})});
    check("scale_columns", elem, [](V x) { return scale_columns(x[0], x[1]); }, {R({3, 4}), R({4})});
    check("softmax_rows", elem, [](V x) { return softmax(x[0], 1); }, {R({3, 4})});
    check("softmax_cols", elem, [](V x) { return softmax(x[0], 0); }, {R({3, 4})});
    check("layer_norm", elem, [](V x) { return layer_norm(x[0], x[1], x[2]); }, {R({3, 5}), R({5}), R({5})});
    check("cross_entropy", elem,
          [](V x) {
              const std::vector<int> labels{1, 0, 3};
              return cross_entropy(x[0], labels);
          },
          {R({3, 4})});
    check("conv2d", elem, [](V x) { return conv2d(x[0], x[1], 2, 1); }, {R({2, 5, 5}), R({3, 2, 3, 3})});
    check("conv1d_same", elem, [](V x) { return conv1d_same(x[0], x[1]); }, {R({6}), R({3})});

    check("cdc", comp, [](V x) { return cdc_forward(x[0], CDCKernel{x[1], 0.7}, 1, 1); },
          {R({2, 5, 5}), R({3, 2, 3, 3})});
    check("eca", comp, [](V x) { return eca_forward(x[0], x[1]); }, {R({4, 6}), R({3})});
    check("prompt_update", comp,
          [](V x) { return prompt_update(x[0], x[1], PromptAttention{x[2], x[3], x[4], x[5]}); },
          {R({3, 4}), R({5, 4}), R({4, 4}), R({4, 4}), R({4, 4}), R({3})});
    check("expert_mixture", comp,
          [](V x) {
              ExpertPool pool{x[1], x[2]};
              return expert_mixture(x[0], pool, {0, 3, 2, 2, 1, 0}, x[3]);
          },
          {R({3, 4}), R({4, 4, 2}), R({4, 2, 4}), R({3, 2})});

    {
        IGMAConfig cfg;
        cfg.n_experts = 16;
        cfg.top_k = 2;
        cfg.n_heads = 2;
        cfg.query_dim = 6;
        cfg.token_dim = 4;
        cfg.hidden_dim = 3;
        cfg.prompt_dim = 5;
        std::mt19937_64 init(seed + 1);
        ExpertPool pool = ExpertPool::random(cfg, init, false);
        GatingTransforms gates = GatingTransforms::random(cfg, init);
        for (auto& h : gates.heads) {
            h.score_transform.gain.mutable_data()[0] = 0.8;
            h.score_transform.bias.mutable_data()[0] = 0.1;
        }
        Tensor tokens = R({3, 4}), summary = R({5});
        std::vector<std::pair<std::string, Tensor>> named{{"tokens", tokens}, {"summary", summary},
                                                          {"down", pool.down}, {"up", pool.up}};
        for (std::size_t h = 0; h < gates.heads.size(); ++h) {
            auto& g = gates.heads[h];
            const std::string p = "head" + std::to_string(h) + ".";
            named.insert(named.end(), {{p + "feat_proj", g.feat_proj},
                                       {p + "feat_bias", g.feat_bias},
                                       {p + "prompt_proj", g.prompt_proj},
                                       {p + "prompt_bias", g.prompt_bias},
                                       {p + "keys_a", g.index.sub_keys_a()},
                                       {p + "keys_b", g.index.sub_keys_b()},
                                       {p + "gain", g.score_transform.gain},
                                       {p + "bias", g.score_transform.bias}});
        }
        out.push_back(detail::grad_line(
            "igma", comp,
            [=] { return detail::probe(igma_forward(tokens, summary, pool, gates, cfg), 99); }, named));
    }
    return out;
}

/// Small full model (d=16, depth 2, 4 experts, all prompt components) in
/// evaluation mode, every parameter checked. Zero-initialized projections
/// are randomized first so every path carries gradient.
inline ModelConfig gradcheck_model_config()
{
    ModelConfig c;
    c.backbone.image_size = 16;
    c.backbone.patch_size = 8;
    c.backbone.token_dim = 16;
    c.backbone.depth = 2;
    c.backbone.attn_heads = 2;
    c.backbone.mlp_ratio = 2;
    c.igma.n_experts = 4;
    c.igma.top_k = 2;
    c.igma.n_heads = 2;
    c.igma.query_dim = 4;
    c.igma.hidden_dim = 4;
    c.cpb.prompt_dim = 8;
    c.cpb.clue_grid = 2;
    c.prompts = PromptSet::Full;
    return c;
}

inline CheckLine model_gradient_check(std::uint64_t seed = 5)
{
    const ModelConfig cfg = gradcheck_model_config();
    Model model = Model::create(cfg, seed);
    std::mt19937_64 rng(seed ^ 0xabcdef);
    detail::randomize_zero_parameters(model, rng, 0.3);
    const Modalities sample = detail::random_modalities(cfg.backbone.image_size, rng);
    // A linear probe of the logits rather than cross-entropy: a saturated
    // softmax would shrink the deep gating gradients below the difference
    // quotient's round-off.
    auto loss = [&] { return detail::probe(model_forward(sample, model), 99); };
    auto named = model.named_parameters();
    return detail::grad_line("model", 1e-4, loss, {named.begin(), named.end()});
}

/// Fast PKR vs brute force over `trials` random (query, index) pairs for
/// each expert count; value = number of mismatching trials.
inline std::vector<CheckLine> pkr_oracle_suite(std::size_t trials = 200, std::uint64_t seed = 3)
{
    std::vector<CheckLine> out;
    std::mt19937_64 rng(seed);
    for (std::size_t n : {4, 16, 64, 256, 1600}) {
        std::size_t bad = 0;
        for (std::size_t t = 0; t < trials; ++t) {
            const std::size_t dq = 2 * (1 + rng() % 8);
            const std::size_t k = std::min<std::size_t>(n, 1 + rng() % 8);
            const auto index = ProductKeyIndex::random(n, dq, rng, false);
            const Tensor q = detail::random_tensor({dq}, rng);
            const auto fast = pkr_scores(q, index, k);
            const auto ref = brute_force_topk(q, index, k);
            bool ok = fast.expert_ids == ref.expert_ids;
            for (std::size_t i = 0; ok && i < k; ++i)
                ok = std::abs(fast.raw_scores[i] - ref.raw_scores[i]) <= 1e-9;
            bad += !ok;
        }
        out.push_back({"pkr N=" + std::to_string(n), static_cast<double>(bad), 0.0, bad == 0});
    }
    return out;
}

/// Random score set with ties: n in [2, max_n], both classes present.
inline ScoreSet random_score_set(std::mt19937_64& rng, std::size_t max_n = 200)
{
    ScoreSet s;
    const std::size_t n = 2 + rng() % (max_n - 1);
    const int levels = 2 + static_cast<int>(rng() % 50);  // coarse grid forces ties
    std::uniform_int_distribution<int> lvl(0, levels);
    for (std::size_t i = 0; i < n; ++i) {
        s.labels.push_back(static_cast<int>(rng() % 2));
        s.scores.push_back(static_cast<double>(lvl(rng)) / levels);
    }
    s.labels[0] = 1;
    s.labels[1] = 0;
    return s;
}

/// auc / hter / eer_threshold against the enumeration oracles on `sets`
/// random score sets; value = number of mismatching sets.
inline std::vector<CheckLine> metrics_oracle_suite(std::size_t sets = 100, std::uint64_t seed = 17)
{
    std::mt19937_64 rng(seed);
    std::size_t bad_auc = 0, bad_hter = 0, bad_eer = 0, bad_inv = 0;
    for (std::size_t i = 0; i < sets; ++i) {
        const ScoreSet s = random_score_set(rng);
        bad_auc += auc(s) != oracle::pairwise_auc(s);
        const double thr = s.scores[rng() % s.scores.size()];
        bad_hter += hter(s, thr) != oracle::counted_hter(s, thr);
        const auto e = eer_threshold(s), o = oracle::sweep_eer(s);
        bad_eer += e.threshold != o.threshold || e.eer != o.eer;
        ScoreSet t = s;
        for (double& v : t.scores)
            v = std::exp(3.0 * v) - 7.0;
        bad_inv += auc(t) != auc(s);
    }
    return {{"auc vs pairwise", static_cast<double>(bad_auc), 0.0, bad_auc == 0},
            {"hter vs counting", static_cast<double>(bad_hter), 0.0, bad_hter == 0},
            {"eer vs sweep", static_cast<double>(bad_eer), 0.0, bad_eer == 0},
            {"auc monotone invariance", static_cast<double>(bad_inv), 0.0, bad_inv == 0}};
}

/// CDC against plain convolution: theta = 0 reproduces it, theta = 1 on a
/// constant image cancels every full window, and outputs are affine in
/// theta. Values are max absolute deviations over `trials` random kernels.
inline std::vector<CheckLine> cdc_identity_suite(std::size_t trials = 50, std::uint64_t seed = 29)
{
    std::mt19937_64 rng(seed);
    double vanilla = 0.0, constant = 0.0, affine = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
        const std::size_t ci = 1 + rng() % 4, co = 1 + rng() % 4, ks = rng() % 2 ? 3 : 5;
        const std::size_t stride = 1 + rng() % 2, pad = rng() % 3, size = ks + rng() % 6;
        const Tensor w = detail::random_tensor({co, ci, ks, ks}, rng);
        const Tensor x = detail::random_tensor({ci, size, size}, rng);
        const auto y0 = cdc_forward(x, {w, 0.0}, stride, pad).values();
        vanilla = std::max(vanilla, detail::max_abs_diff(y0, conv2d(x, w, stride, pad).values()));

        std::uniform_real_distribution<double> cu(-2.0, 2.0);
        const Tensor flat = Tensor::full({ci, size, size}, cu(rng));
        for (double v : cdc_forward(flat, {w, 1.0}, stride, 0).values())
            constant = std::max(constant, std::abs(v));

        const auto y1 = cdc_forward(x, {w, 1.0}, stride, pad).values();
        const double theta = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        const auto yt = cdc_forward(x, {w, theta}, stride, pad).values();
        for (std::size_t i = 0; i < yt.size(); ++i)
            affine = std::max(affine, std::abs(yt[i] - ((1.0 - theta) * y0[i] + theta * y1[i])));
    }
    return {{"cdc theta=0 vs conv", vanilla, 1e-9, vanilla <= 1e-9},
            {"cdc theta=1 constant", constant, 1e-9, constant <= 1e-9},
            {"cdc affine in theta", affine, 1e-9, affine <= 1e-9}};
}

/// Empirical per-modality mask rate over `draws` independent masks, and
/// the number of draws that masked all three modalities.
inline std::vector<CheckLine> mask_statistics_check(std::size_t draws = 10000, double rate = 0.3,
                                                    std::uint64_t seed = 31)
{
    const Modalities m{Tensor::full({3, 2, 2}, 1.0), Tensor::full({1, 2, 2}, 1.0), Tensor::full({1, 2, 2}, 1.0)};
    std::array<std::size_t, 3> hits{};
    std::size_t violations = 0;
    for (std::size_t i = 0; i < draws; ++i) {
        const auto r = apply_modality_mask(m, rate, derive_seed(seed, {i}));
        std::size_t kept = 0;
        for (std::size_t j = 0; j < 3; ++j) {
            const bool masked = r.indicator[j] == 1.0;
            hits[j] += masked;
            const Tensor& t = *r.masked.list()[j];
            bool all_zero = true;
            for (double v : t.values())
                all_zero = all_zero && v == 0.0;
            if (masked != all_zero)
                ++violations;  // indicator disagrees with the data
            kept += !masked;
        }
        violations += kept == 0;
    }
    std::vector<CheckLine> out;
    const char* names[3] = {"rgb", "depth", "ir"};
    for (std::size_t j = 0; j < 3; ++j) {
        const double r = static_cast<double>(hits[j]) / static_cast<double>(draws);
        out.push_back({std::string("mask rate ") + names[j], std::abs(r - rate), 0.02, std::abs(r - rate) <= 0.02});
    }
    out.push_back({"mask keeps one modality", static_cast<double>(violations), 0.0, violations == 0});
    return out;
}

/// Gate isolation on the small full model: routing captured once, then
/// replayed while the prompt blocks are left alone, perturbed, or zeroed.
/// Logits must match bit for bit and so must every expert gradient.
/// Value = number of failing trials.
inline CheckLine isolation_check(std::size_t trials = 50, std::uint64_t seed = 37)
{
    const ModelConfig cfg = gradcheck_model_config();
    std::size_t bad = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        Model model = Model::create(cfg, derive_seed(seed, {t}));
        std::mt19937_64 rng(derive_seed(seed, {t, 1}));
        detail::randomize_zero_parameters(model, rng, 0.3);
        const Modalities sample = detail::random_modalities(cfg.backbone.image_size, rng);

        ForwardOptions base;
        base.mode = t % 2 ? Mode::Train : Mode::Eval;
        base.seed = t;
        std::vector<RoutingTrace> trace;
        base.capture = &trace;
        const auto reference = model_forward(sample, model, base).values();

        auto run = [&](std::function<Tensor(std::size_t, const Tensor&)> hook) {
            for (auto& a : model.adapters) {
                a.pool.down.zero_grad();
                a.pool.up.zero_grad();
            }
            ForwardOptions opt;
            opt.mode = base.mode;
            opt.seed = base.seed;
            opt.replay = &trace;
            opt.prompt_hook = std::move(hook);
            const Tensor logits = model_forward(sample, model, opt);
            backward(detail::probe(logits, 7));
            std::vector<double> grads;
            for (const auto& a : model.adapters)
                for (const Tensor* p : {&a.pool.down, &a.pool.up}) {
                    const auto g = detail::grad_copy(*p);
                    grads.insert(grads.end(), g.begin(), g.end());
                }
            return std::make_pair(logits.values(), grads);
        };
        const std::uint64_t noise_seed = derive_seed(seed, {t, 2});
        const auto plain = run({});
        const auto perturbed = run([noise_seed](std::size_t layer, const Tensor& p) {
            std::mt19937_64 r(derive_seed(noise_seed, {layer}));
            return add(p, detail::random_tensor(p.shape(), r, -3.0, 3.0));
        });
        const auto zeroed = run([](std::size_t, const Tensor& p) { return Tensor::zeros(p.shape()); });
        const bool ok = plain.first == reference && perturbed.first == reference && zeroed.first == reference &&
                        perturbed.second == plain.second && zeroed.second == plain.second;
        bad += !ok;
    }
    return {"isolation under replay", static_cast<double>(bad), 0.0, bad == 0};
}

/// Gating contracts on random adapters: per-head selected weights sum to
/// one, unselected experts neither change the output nor receive gradient,
/// and zero noise makes training-mode routing equal evaluation routing.
inline std::vector<CheckLine> gating_contract_suite(std::size_t trials = 50, std::uint64_t seed = 41)
{
    std::mt19937_64 rng(seed);
    double sum_err = 0.0;
    std::size_t bad_output = 0, bad_grad = 0, bad_noise = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        IGMAConfig cfg;
        const std::size_t side = 2 + rng() % 7;
        cfg.n_experts = side * side;
        cfg.top_k = 1 + rng() % std::min<std::size_t>(cfg.n_experts, 6);
        cfg.n_heads = 1 + rng() % 3;
        cfg.query_dim = 2 * (1 + rng() % 4);
        cfg.token_dim = 2 + rng() % 5;
        cfg.hidden_dim = 1 + rng() % 4;
        cfg.prompt_dim = 2 + rng() % 4;
        cfg.noise_scale = 0.5;
        ExpertPool pool = ExpertPool::random(cfg, rng, false);
        const GatingTransforms gates = GatingTransforms::random(cfg, rng);
        const std::size_t tokens_n = 1 + rng() % 5;
        const Tensor tokens = detail::random_tensor({tokens_n, cfg.token_dim}, rng);
        const Tensor summary = detail::random_tensor({cfg.prompt_dim}, rng);

        RoutingTrace trace;
        IGMAContext ctx;
        ctx.mode = Mode::Train;
        ctx.seed = t;
        ctx.capture = &trace;
        pool.down.zero_grad();
        pool.up.zero_grad();
        const auto y = igma_forward(tokens, summary, pool, gates, cfg, ctx);
        backward(detail::probe(y, t));
        std::vector<bool> used(cfg.n_experts, false);
        for (const auto& h : trace.heads)
            for (std::size_t row = 0; row < tokens_n; ++row) {
                double s = 0.0;
                for (std::size_t j = 0; j < cfg.top_k; ++j) {
                    s += h.weights[row * cfg.top_k + j];
                    used[h.ids[row * cfg.top_k + j]] = true;
                }
                sum_err = std::max(sum_err, std::abs(s - 1.0));
            }

        const std::size_t block = cfg.token_dim * cfg.hidden_dim;
        const auto gd = detail::grad_copy(pool.down), gu = detail::grad_copy(pool.up);
        bool grads_ok = true;
        for (std::size_t e = 0; e < cfg.n_experts; ++e)
            if (!used[e])
                for (std::size_t i = 0; i < block; ++i)
                    grads_ok = grads_ok && gd[e * block + i] == 0.0 && gu[e * block + i] == 0.0;
        bad_grad += !grads_ok;

        // Scramble every unselected expert; the replayed output must not move.
        ExpertPool scrambled{Tensor(pool.down.shape(), pool.down.values()), Tensor(pool.up.shape(), pool.up.values())};
        for (std::size_t e = 0; e < cfg.n_experts; ++e)
            if (!used[e])
                for (std::size_t i = 0; i < block; ++i) {
                    scrambled.down.mutable_data()[e * block + i] += 5.0;
                    scrambled.up.mutable_data()[e * block + i] -= 5.0;
                }
        IGMAContext rep;
        rep.replay = &trace;
        bad_output += igma_forward(tokens, summary, scrambled, gates, cfg, rep).values() != y.values();

        IGMAConfig quiet = cfg;
        quiet.noise_scale = 0.0;
        IGMAContext train;
        train.mode = Mode::Train;
        train.seed = t + 1000;
        bad_noise += igma_forward(tokens, summary, pool, gates, quiet, train).values() !=
                     igma_forward(tokens, summary, pool, gates, quiet).values();
    }
    return {{"gate weights sum to 1", sum_err, 1e-12, sum_err <= 1e-12},
            {"unselected output", static_cast<double>(bad_output), 0.0, bad_output == 0},
            {"unselected gradient", static_cast<double>(bad_grad), 0.0, bad_grad == 0},
            {"zero noise determinism", static_cast<double>(bad_noise), 0.0, bad_noise == 0}};
}

/// At initialization the adapters' up-projections and the prompt value maps
/// are zero, so the full model must reproduce the plain backbone (same
/// seed, adapters and prompts disabled) bit for bit. Value = number of
/// differing samples.
inline CheckLine transparency_check(const ModelConfig& cfg, std::size_t samples = 8, std::uint64_t seed = 43)
{
    ModelConfig plain_cfg = cfg;
    plain_cfg.disable_igma = true;
    plain_cfg.disable_cpb = true;
    std::size_t bad = 0;
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < samples; ++i) {
        const Model full = Model::create(cfg, derive_seed(seed, {i}));
        const Model plain = Model::create(plain_cfg, derive_seed(seed, {i}));
        const Modalities m = detail::random_modalities(cfg.backbone.image_size, rng);
        ForwardOptions train;
        train.mode = Mode::Train;
        train.seed = i;
        const auto ref = model_forward(m, plain).values();
        bad += model_forward(m, full).values() != ref || model_forward(m, full, train).values() != ref;
    }
    return {"transparency at init", static_cast<double>(bad), 0.0, bad == 0};
}

} // namespace bigmoe
