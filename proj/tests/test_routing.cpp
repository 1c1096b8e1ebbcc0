#include "bigmoe/routing.hpp"
#include "bigmoe/selfcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

using namespace bigmoe;

namespace {

ProductKeyIndex basis_index()
{
    // m = 2, half_dim = 2: sub-keys are the standard basis rows.
    return ProductKeyIndex(Tensor::from({2, 2}, {1, 0, 0, 1}), Tensor::from({2, 2}, {1, 0, 0, 1}));
}

} // namespace

TEST(ProductKeyIndex, RejectsNonSquareAndOddQuery)
{
    std::mt19937_64 rng(1);
    EXPECT_THROW(ProductKeyIndex::random(15, 4, rng), ConfigError);
    EXPECT_THROW(ProductKeyIndex::random(16, 5, rng), ConfigError);
    const auto idx = ProductKeyIndex::random(1600, 8, rng);
    EXPECT_EQ(idx.side(), 40u);
    EXPECT_EQ(idx.n_experts(), 1600u);
}

TEST(Pkr, BasisKeysHandCase)
{
    const auto idx = basis_index();
    const Tensor q = Tensor::from({4}, {1, 0, 1, 0});
    const auto d = pkr_scores(q, idx, 1);
    ASSERT_EQ(d.expert_ids.size(), 1u);
    EXPECT_EQ(d.expert_ids[0], 0u);
    EXPECT_EQ(d.raw_scores[0], 2.0);
    // All four composed scores by enumeration: e=i*2+j -> q_a.a_i + q_b.b_j.
    const auto all = pkr_scores(q, idx, 4);
    EXPECT_EQ(all.expert_ids, (std::vector<std::size_t>{0, 1, 2, 3}));
    EXPECT_EQ(all.raw_scores, (std::vector<double>{2, 1, 1, 0}));
}

TEST(Pkr, OrthogonalQueryTiesBreakByIndex)
{
    const auto idx = basis_index();
    const Tensor q = Tensor::zeros({4});
    const auto d = pkr_scores(q, idx, 3);
    EXPECT_EQ(d.expert_ids, (std::vector<std::size_t>{0, 1, 2}));
    for (double s : d.raw_scores)
        EXPECT_EQ(s, 0.0);
    EXPECT_EQ(brute_force_topk(q, idx, 3).expert_ids, d.expert_ids);
}

TEST(Pkr, ErrorsFollowContract)
{
    const auto idx = basis_index();
    EXPECT_THROW(pkr_scores(Tensor::zeros({4}), idx, 5), UsageError);
    EXPECT_THROW(pkr_scores(Tensor::zeros({4}), idx, 0), UsageError);
    EXPECT_THROW(pkr_scores(Tensor::zeros({3}), idx, 1), ConfigError);
    EXPECT_THROW(pkr_scores(Tensor::zeros({6}), idx, 1), DimensionError);
    EXPECT_THROW(brute_force_topk(Tensor::zeros({4}), idx, 5), UsageError);
}

TEST(Pkr, SingleExpertAndFullK)
{
    std::mt19937_64 rng(2);
    const auto one = ProductKeyIndex::random(1, 4, rng);
    const Tensor q = detail::random_tensor({4}, rng);
    EXPECT_EQ(brute_force_topk(q, one, 1).expert_ids, (std::vector<std::size_t>{0}));
    EXPECT_EQ(pkr_scores(q, one, 1).expert_ids, (std::vector<std::size_t>{0}));

    const auto idx = ProductKeyIndex::random(16, 6, rng);
    const auto full = brute_force_topk(detail::random_tensor({6}, rng), idx, 16);
    std::vector<std::size_t> sorted = full.expert_ids;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> expect(16);
    std::iota(expect.begin(), expect.end(), 0u);
    EXPECT_EQ(sorted, expect);
    for (std::size_t i = 1; i < 16; ++i)
        EXPECT_GE(full.raw_scores[i - 1], full.raw_scores[i]);
}

TEST(Pkr, MatchesBruteForceAcrossSizes)
{
    for (const auto& line : pkr_oracle_suite(200, 41))
        EXPECT_TRUE(line.passed) << line.name << ": " << line.value << " mismatches";
}

TEST(Pkr, PaperScaleTopTwo)
{
    std::mt19937_64 rng(77);
    for (int t = 0; t < 50; ++t) {
        const auto idx = ProductKeyIndex::random(1600, 16, rng);
        const Tensor q = detail::random_tensor({16}, rng);
        const auto a = pkr_scores(q, idx, 2), b = brute_force_topk(q, idx, 2);
        EXPECT_EQ(a.expert_ids, b.expert_ids);
        for (std::size_t i = 0; i < 2; ++i)
            EXPECT_NEAR(a.raw_scores[i], b.raw_scores[i], 1e-9);
    }
}

TEST(Pkr, ConstantShiftOfHalfScoresKeepsSelection)
{
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd;
    for (int t = 0; t < 100; ++t) {
        std::vector<double> sa(8), sb(8);
        for (double& v : sa)
            v = nd(rng);
        for (double& v : sb)
            v = nd(rng);
        const auto base = pkr_select(sa, sb, 4);
        auto shifted = sa;
        for (double& v : shifted)
            v += 2.5;
        const auto moved = pkr_select(shifted, sb, 4);
        EXPECT_EQ(base.expert_ids, moved.expert_ids);
        for (std::size_t i = 0; i < 4; ++i)
            EXPECT_NEAR(moved.raw_scores[i], base.raw_scores[i] + 2.5, 1e-12);
    }
}

TEST(NoisyGate, NoiselessReducesToTransformedRetrieval)
{
    std::mt19937_64 rng(9);
    for (int t = 0; t < 50; ++t) {
        const auto idx = ProductKeyIndex::random(64, 8, rng);
        const Tensor q = detail::random_tensor({8}, rng);
        const ScoreTransform fg{Tensor::scalar(0.7), Tensor::scalar(-0.2)};
        const auto g = noisy_topk_gate(q, idx, fg, 3, 0.0, 1234);
        const auto r = pkr_scores(q, idx, 3);
        EXPECT_EQ(g.expert_ids, r.expert_ids);
        std::vector<double> logits;
        for (double s : r.raw_scores)
            logits.push_back(fg.apply(s));
        EXPECT_EQ(g.raw_scores, logits);
        const double mx = logits[0];
        double z = 0.0;
        for (double l : logits)
            z += std::exp(l - mx);
        for (std::size_t i = 0; i < 3; ++i)
            EXPECT_EQ(g.weights[i], std::exp(logits[i] - mx) / z);
        EXPECT_NEAR(std::accumulate(g.weights.begin(), g.weights.end(), 0.0), 1.0, 1e-12);
    }
}

TEST(NoisyGate, NegativeGainStillRanksExactly)
{
    std::mt19937_64 rng(10);
    for (int t = 0; t < 50; ++t) {
        const auto idx = ProductKeyIndex::random(64, 8, rng);
        const Tensor q = detail::random_tensor({8}, rng);
        const ScoreTransform fg{Tensor::scalar(-1.3), Tensor::scalar(0.0)};
        const auto g = noisy_topk_gate(q, idx, fg, 2, 0.0, 0);
        // Reference: transform every composed score and rank.
        const auto all = brute_force_topk(q, idx, 64);
        std::vector<std::pair<double, std::size_t>> ranked;
        for (std::size_t i = 0; i < 64; ++i)
            ranked.emplace_back(fg.apply(all.raw_scores[i]), all.expert_ids[i]);
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            return a.first != b.first ? a.first > b.first : a.second < b.second;
        });
        EXPECT_EQ(g.expert_ids[0], ranked[0].second);
        EXPECT_EQ(g.expert_ids[1], ranked[1].second);
    }
}

TEST(NoisyGate, SingletonWeightIsOne)
{
    std::mt19937_64 rng(11);
    const auto idx = ProductKeyIndex::random(16, 4, rng);
    const auto g = noisy_topk_gate(detail::random_tensor({4}, rng), idx, ScoreTransform::identity_like(), 1, 0.5, 3);
    ASSERT_EQ(g.weights.size(), 1u);
    EXPECT_EQ(g.weights[0], 1.0);
}

TEST(NoisyGate, SeededNoiseIsReproducible)
{
    std::mt19937_64 rng(12);
    const auto idx = ProductKeyIndex::random(256, 8, rng);
    const Tensor q = detail::random_tensor({8}, rng);
    const auto fg = ScoreTransform::identity_like();
    const auto a = noisy_topk_gate(q, idx, fg, 4, 1.0, 99);
    const auto b = noisy_topk_gate(q, idx, fg, 4, 1.0, 99);
    EXPECT_EQ(a.expert_ids, b.expert_ids);
    EXPECT_EQ(a.weights, b.weights);
    EXPECT_EQ(a.raw_scores, b.raw_scores);
    bool differs = false;
    for (std::uint64_t s = 100; s < 120 && !differs; ++s)
        differs = noisy_topk_gate(q, idx, fg, 4, 1.0, s).raw_scores != a.raw_scores;
    EXPECT_TRUE(differs);
    EXPECT_THROW(noisy_topk_gate(q, idx, fg, 4, -1.0, 0), UsageError);
}
