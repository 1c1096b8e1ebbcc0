#include "bigmoe/igma.hpp"
#include "bigmoe/oracles.hpp"
#include "bigmoe/selfcheck.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace bigmoe;

namespace {

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

IGMAConfig small_cfg(std::size_t n, std::size_t k, std::size_t heads)
{
    IGMAConfig c;
    c.n_experts = n;
    c.top_k = k;
    c.n_heads = heads;
    c.query_dim = 6;
    c.token_dim = 5;
    c.hidden_dim = 3;
    c.prompt_dim = 4;
    c.noise_scale = 0.05;
    return c;
}

struct Adapter {
    IGMAConfig cfg;
    ExpertPool pool;
    GatingTransforms gates;
};

Adapter make_adapter(const IGMAConfig& cfg, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    Adapter a{cfg, ExpertPool::random(cfg, rng, false), GatingTransforms::random(cfg, rng)};
    for (auto& h : a.gates.heads) {
        h.score_transform.gain.mutable_data()[0] = 0.9;
        h.score_transform.bias.mutable_data()[0] = 0.05;
    }
    return a;
}

/// Dense mixture: every expert evaluated by hand, gate computed by scoring
/// all N composed keys, non-selected weights zero.
std::vector<double> dense_oracle(const Tensor& tokens, const Tensor& summary, const Adapter& a)
{
    const auto& cfg = a.cfg;
    const std::size_t T = tokens.dim(0), d = cfg.token_dim, h = cfg.hidden_dim, half = cfg.query_dim / 2;
    const std::size_t n = cfg.n_experts, m = static_cast<std::size_t>(std::llround(std::sqrt(double(n))));
    std::vector<double> out(T * d, 0.0);
    for (const auto& head : a.gates.heads) {
        std::vector<double> qb(half);
        for (std::size_t j = 0; j < half; ++j) {
            qb[j] = head.prompt_bias[j];
            for (std::size_t p = 0; p < cfg.prompt_dim; ++p)
                qb[j] += summary[p] * head.prompt_proj.at({p, j});
        }
        for (std::size_t t = 0; t < T; ++t) {
            std::vector<double> qa(half);
            for (std::size_t j = 0; j < half; ++j) {
                qa[j] = head.feat_bias[j];
                for (std::size_t c = 0; c < d; ++c)
                    qa[j] += tokens.at({t, c}) * head.feat_proj.at({c, j});
            }
            std::vector<std::pair<double, std::size_t>> logits;
            for (std::size_t e = 0; e < n; ++e) {
                double s = 0.0;
                for (std::size_t j = 0; j < half; ++j)
                    s += qa[j] * head.index.sub_keys_a().at({e / m, j}) + qb[j] * head.index.sub_keys_b().at({e % m, j});
                logits.emplace_back(std::tanh(head.score_transform.gain.item() * s + head.score_transform.bias.item()), e);
            }
            std::sort(logits.begin(), logits.end(), [](const auto& x, const auto& y) {
                return x.first != y.first ? x.first > y.first : x.second < y.second;
            });
            std::vector<double> w(n, 0.0);
            double z = 0.0;
            for (std::size_t r = 0; r < cfg.top_k; ++r)
                z += std::exp(logits[r].first - logits[0].first);
            for (std::size_t r = 0; r < cfg.top_k; ++r)
                w[logits[r].second] = std::exp(logits[r].first - logits[0].first) / z;
            for (std::size_t e = 0; e < n; ++e) {
                std::vector<double> hid(h, 0.0);
                for (std::size_t u = 0; u < h; ++u) {
                    for (std::size_t c = 0; c < d; ++c)
                        hid[u] += tokens.at({t, c}) * a.pool.down.at({e, c, u});
                    hid[u] = gelu_ref(hid[u]);
                }
                for (std::size_t c = 0; c < d; ++c) {
                    double y = 0.0;
                    for (std::size_t u = 0; u < h; ++u)
                        y += hid[u] * a.pool.up.at({e, u, c});
                    out[t * d + c] += w[e] * y;
                }
            }
        }
    }
    return out;
}

Tensor rnd(Shape s, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    return detail::random_tensor(std::move(s), rng);
}

} // namespace

TEST(ExpertForward, ZeroInputGivesZero)
{
    const auto a = make_adapter(small_cfg(4, 2, 1), 1);
    for (double v : expert_forward(Tensor::zeros({5}), a.pool, 2).values())
        EXPECT_EQ(v, 0.0);
    EXPECT_THROW(expert_forward(Tensor::zeros({5}), a.pool, 4), UsageError);
}

TEST(ExpertForward, UnitHiddenHandCase)
{
    // h = 1, down = e1, up = e1^T, x = e1 -> gelu(1) e1.
    ExpertPool pool{Tensor::from({1, 3, 1}, {1, 0, 0}), Tensor::from({1, 1, 3}, {1, 0, 0})};
    const Tensor y = expert_forward(Tensor::from({3}, {1, 0, 0}), pool, 0);
    EXPECT_NEAR(y[0], gelu_ref(1.0), 1e-15);
    EXPECT_EQ(y[1], 0.0);
    EXPECT_EQ(y[2], 0.0);
}

TEST(ExpertForward, DownGradientMatchesFiniteDifferences)
{
    auto a = make_adapter(small_cfg(4, 2, 1), 2);
    const Tensor x = rnd({5}, 3);
    const auto r = oracle::gradcheck([&] { return detail::probe(expert_forward(x, a.pool, 1), 7); },
                                     {{"down", a.pool.down}, {"up", a.pool.up}});
    EXPECT_LT(r.max_rel_error(), 1e-6);
}

TEST(Igma, SingleExpertIdentityLike)
{
    IGMAConfig cfg = small_cfg(1, 1, 1);
    cfg.token_dim = 3;
    cfg.hidden_dim = 3;
    std::mt19937_64 rng(4);
    const Tensor eye = Tensor::from({1, 3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    ExpertPool pool{eye, reshape(eye, {1, 3, 3})};
    const auto gates = GatingTransforms::random(cfg, rng);
    const Tensor tokens = rnd({2, 3}, 5);
    const Tensor y = igma_forward(tokens, rnd({4}, 6), pool, gates, cfg);
    for (std::size_t i = 0; i < tokens.numel(); ++i)
        EXPECT_NEAR(y[i], gelu_ref(tokens[i]), 1e-15);
}

TEST(Igma, ZeroTokensGiveZeroOutput)
{
    const auto a = make_adapter(small_cfg(16, 2, 2), 7);
    const Tensor y = igma_forward(Tensor::zeros({3, 5}), rnd({4}, 8), a.pool, a.gates, a.cfg);
    for (double v : y.values())
        EXPECT_EQ(v, 0.0);
}

TEST(Igma, MatchesDenseMixtureOracle)
{
    for (std::size_t n : {4, 16})
        for (std::size_t k : {1, 2, 3})
            for (std::uint64_t seed = 0; seed < 5; ++seed) {
                const auto a = make_adapter(small_cfg(n, k, 2), 100 + seed);
                const Tensor tokens = rnd({4, 5}, 200 + seed), summary = rnd({4}, 300 + seed);
                const Tensor y = igma_forward(tokens, summary, a.pool, a.gates, a.cfg);
                const auto ref = dense_oracle(tokens, summary, a);
                for (std::size_t i = 0; i < ref.size(); ++i)
                    EXPECT_NEAR(y[i], ref[i], 1e-9) << "n=" << n << " k=" << k;
            }
}

TEST(Igma, SummaryWidthMismatchIsConfigError)
{
    const auto a = make_adapter(small_cfg(4, 2, 1), 9);
    EXPECT_THROW(igma_forward(rnd({2, 5}, 1), rnd({3}, 2), a.pool, a.gates, a.cfg), ConfigError);
}

TEST(Igma, WeightsNormalizedPerHead)
{
    const auto a = make_adapter(small_cfg(64, 4, 3), 10);
    RoutingTrace trace;
    IGMAContext ctx;
    ctx.mode = Mode::Train;
    ctx.seed = 5;
    ctx.capture = &trace;
    igma_forward(rnd({6, 5}, 11), rnd({4}, 12), a.pool, a.gates, a.cfg, ctx);
    ASSERT_EQ(trace.heads.size(), 3u);
    for (const auto& h : trace.heads)
        for (std::size_t t = 0; t < 6; ++t) {
            double s = 0.0;
            for (std::size_t j = 0; j < 4; ++j) {
                EXPECT_GT(h.weights[t * 4 + j], 0.0);
                s += h.weights[t * 4 + j];
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
}

TEST(Igma, UnselectedExpertsGetExactlyZeroGradient)
{
    auto a = make_adapter(small_cfg(64, 2, 2), 13);
    RoutingTrace trace;
    IGMAContext ctx;
    ctx.capture = &trace;
    const Tensor tokens = rnd({3, 5}, 14);
    a.pool.down.zero_grad();
    a.pool.up.zero_grad();
    backward(detail::probe(igma_forward(tokens, rnd({4}, 15), a.pool, a.gates, a.cfg, ctx), 3));
    std::vector<bool> used(64, false);
    for (const auto& h : trace.heads)
        for (std::size_t e : h.ids)
            used[e] = true;
    const std::size_t dh = 5 * 3;
    std::size_t n_used = 0;
    for (std::size_t e = 0; e < 64; ++e) {
        double mag = 0.0;
        for (std::size_t i = 0; i < dh; ++i)
            mag += std::abs(a.pool.down.grad()[e * dh + i]) + std::abs(a.pool.up.grad()[e * dh + i]);
        if (used[e]) {
            ++n_used;
            EXPECT_GT(mag, 0.0);
        } else {
            EXPECT_EQ(mag, 0.0) << "expert " << e;
        }
    }
    EXPECT_LE(n_used, 3u * 2u * 2u);
}

TEST(Igma, ReplayedRoutingIsolatesPrompts)
{
    auto a = make_adapter(small_cfg(16, 2, 2), 16);
    const Tensor tokens = rnd({4, 5}, 17);
    RoutingTrace trace;
    IGMAContext cap;
    cap.capture = &trace;
    const Tensor y0 = igma_forward(tokens, rnd({4}, 18), a.pool, a.gates, a.cfg, cap);

    IGMAContext rep;
    rep.replay = &trace;
    auto grads = [&](const Tensor& summary) {
        a.pool.down.zero_grad();
        a.pool.up.zero_grad();
        const Tensor y = igma_forward(tokens, summary, a.pool, a.gates, a.cfg, rep);
        backward(detail::probe(y, 4));
        return std::make_tuple(y.values(), std::vector<double>(a.pool.down.grad().begin(), a.pool.down.grad().end()),
                               std::vector<double>(a.pool.up.grad().begin(), a.pool.up.grad().end()));
    };
    const auto [ya, da, ua] = grads(rnd({4}, 19));
    const auto [yb, db, ub] = grads(Tensor::zeros({4}));
    EXPECT_EQ(ya, y0.values());
    EXPECT_EQ(ya, yb);
    EXPECT_EQ(da, db);
    EXPECT_EQ(ua, ub);
}

TEST(Igma, ZeroNoiseTrainingEqualsEvaluation)
{
    IGMAConfig cfg = small_cfg(64, 2, 2);
    cfg.noise_scale = 0.0;
    const auto a = make_adapter(cfg, 20);
    const Tensor tokens = rnd({5, 5}, 21), summary = rnd({4}, 22);
    IGMAContext train;
    train.mode = Mode::Train;
    train.seed = 77;
    EXPECT_EQ(igma_forward(tokens, summary, a.pool, a.gates, cfg, train).values(),
              igma_forward(tokens, summary, a.pool, a.gates, cfg).values());
}

TEST(Igma, TrainingNoiseIsSeeded)
{
    IGMAConfig cfg = small_cfg(64, 2, 2);
    cfg.noise_scale = 1.0;
    const auto a = make_adapter(cfg, 23);
    const Tensor tokens = rnd({5, 5}, 24), summary = rnd({4}, 25);
    IGMAContext c1;
    c1.mode = Mode::Train;
    c1.seed = 1;
    IGMAContext c2 = c1;
    c2.seed = 2;
    const auto y1 = igma_forward(tokens, summary, a.pool, a.gates, cfg, c1).values();
    EXPECT_EQ(y1, igma_forward(tokens, summary, a.pool, a.gates, cfg, c1).values());
    EXPECT_NE(y1, igma_forward(tokens, summary, a.pool, a.gates, cfg, c2).values());
}

TEST(Igma, GatingParametersNeverTouchExpertPath)
{
    // Expert gradients must not depend on the query projections once the
    // routing is frozen.
    auto a = make_adapter(small_cfg(16, 2, 1), 26);
    auto b = a;
    std::mt19937_64 other(999);
    b.gates = GatingTransforms::random(a.cfg, other);
    const Tensor tokens = rnd({3, 5}, 27);
    RoutingTrace trace;
    IGMAContext cap;
    cap.capture = &trace;
    igma_forward(tokens, rnd({4}, 28), a.pool, a.gates, a.cfg, cap);
    IGMAContext rep;
    rep.replay = &trace;
    a.pool.down.zero_grad();
    backward(detail::probe(igma_forward(tokens, rnd({4}, 28), a.pool, a.gates, a.cfg, rep), 1));
    const std::vector<double> ga(a.pool.down.grad().begin(), a.pool.down.grad().end());
    a.pool.down.zero_grad();
    backward(detail::probe(igma_forward(tokens, rnd({4}, 28), b.pool, b.gates, b.cfg, rep), 1));
    const std::vector<double> gb(a.pool.down.grad().begin(), a.pool.down.grad().end());
    EXPECT_EQ(ga, gb);
    for (const auto& h : a.gates.heads)
        EXPECT_FALSE(h.feat_proj.has_grad() && std::any_of(h.feat_proj.grad().begin(), h.feat_proj.grad().end(),
                                                          [](double g) { return g != 0.0; }));
}
