#pragma once

// Product-key retrieval over N = m*m experts and the noisy top-k gate.
//
// Expert e = i*m + j owns the composed key (a_i, b_j). Its score against a
// query q = [q_a | q_b] is dot(q_a, a_i) + dot(q_b, b_j). The score is
// separable, so the global top-k always lies inside the k x k grid formed by
// the per-half top-k sub-keys; ranking that grid is exact, not approximate.
// Ordering is score descending, ties by ascending expert index.

#include "bigmoe/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace bigmoe {

/// Two sub-key tables whose Cartesian product defines the expert keys.
class ProductKeyIndex {
public:
    ProductKeyIndex() = default;
    ProductKeyIndex(Tensor sub_keys_a, Tensor sub_keys_b) : a_(std::move(sub_keys_a)), b_(std::move(sub_keys_b))
    {
        detail::require_rank(a_, 2, "ProductKeyIndex sub_keys_a");
        detail::require_rank(b_, 2, "ProductKeyIndex sub_keys_b");
        if (a_.shape() != b_.shape())
            throw ConfigError("sub-key tables differ in shape: " + shape_str(a_.shape()) + " vs " +
                              shape_str(b_.shape()));
    }

    /// Random sub-keys ~ N(0, 1/half_dim). N must be a perfect square and query_dim even.
    static ProductKeyIndex random(std::size_t n_experts, std::size_t query_dim, std::mt19937_64& rng,
                                  bool trainable = true)
    {
        const std::size_t m = side_for(n_experts);
        if (query_dim == 0 || query_dim % 2 != 0)
            throw ConfigError("query_dim must be positive and even, got " + std::to_string(query_dim));
        const std::size_t half = query_dim / 2;
        std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(half)));
        std::vector<double> a(m * half), b(m * half);
        for (double& v : a)
            v = nd(rng);
        for (double& v : b)
            v = nd(rng);
        return ProductKeyIndex(Tensor({m, half}, std::move(a), trainable), Tensor({m, half}, std::move(b), trainable));
    }

    static std::size_t side_for(std::size_t n_experts)
    {
        const auto m = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n_experts))));
        if (n_experts == 0 || m * m != n_experts)
            throw ConfigError("expert count " + std::to_string(n_experts) + " is not a perfect square");
        return m;
    }

    std::size_t side() const { return a_.dim(0); }
    std::size_t n_experts() const { return side() * side(); }
    std::size_t half_dim() const { return a_.dim(1); }
    std::size_t query_dim() const { return 2 * half_dim(); }
    const Tensor& sub_keys_a() const { return a_; }
    const Tensor& sub_keys_b() const { return b_; }
    Tensor& sub_keys_a() { return a_; }
    Tensor& sub_keys_b() { return b_; }

private:
    Tensor a_;
    Tensor b_;
};

/// Selected experts for one query. `raw_scores` are the pre-softmax values the
/// ranking used; `weights` is empty for the retrieval-only calls.
struct GateDecision {
    std::vector<std::size_t> expert_ids;
    std::vector<double> weights;
    std::vector<double> raw_scores;
};

namespace detail {

inline double dot(const double* a, const double* b, std::size_t n)
{
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        s += a[i] * b[i];
    return s;
}

inline void check_query(std::size_t query_numel, const ProductKeyIndex& index, std::size_t k)
{
    if (query_numel % 2 != 0)
        throw ConfigError("query dimension " + std::to_string(query_numel) + " is odd");
    if (query_numel != index.query_dim())
        throw DimensionError("query dimension " + std::to_string(query_numel) + " != index query_dim " +
                             std::to_string(index.query_dim()));
    if (k == 0 || k > index.n_experts())
        throw UsageError("k=" + std::to_string(k) + " outside [1, " + std::to_string(index.n_experts()) + "]");
}

/// Scores of one query half against every row of a sub-key table.
inline std::vector<double> half_scores(std::span<const double> q_half, const Tensor& keys)
{
    const std::size_t m = keys.dim(0), h = keys.dim(1);
    std::vector<double> s(m);
    for (std::size_t i = 0; i < m; ++i)
        s[i] = dot(q_half.data(), keys.values().data() + i * h, h);
    return s;
}

/// Indices of the k best entries; `descending=false` ranks smallest first.
/// Ties go to the lower index.
inline std::vector<std::size_t> rank_top(std::span<const double> v, std::size_t k, bool descending)
{
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    k = std::min(k, v.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t x, std::size_t y) {
                          if (v[x] != v[y])
                              return descending ? v[x] > v[y] : v[x] < v[y];
                          return x < y;
                      });
    idx.resize(k);
    return idx;
}

/// One candidate of the k x k grid.
struct GridCandidate {
    std::size_t expert = 0;
    std::size_t row_a = 0;
    std::size_t row_b = 0;
    double score = 0.0;  // sa[row_a] + sb[row_b] (+ noise once drawn)
    double noise = 0.0;
    double logit = 0.0;  // f_g(score)
};

inline void sort_candidates(std::vector<GridCandidate>& c, bool by_logit)
{
    std::sort(c.begin(), c.end(), [by_logit](const GridCandidate& x, const GridCandidate& y) {
        const double vx = by_logit ? x.logit : x.score;
        const double vy = by_logit ? y.logit : y.score;
        if (vx != vy)
            return vx > vy;
        return x.expert < y.expert;
    });
}

/// Builds the per-half candidate grid. With descending=false the grid holds
/// the bottom-k sub-keys, which is what a decreasing score transform ranks first.
inline std::vector<GridCandidate> candidate_grid(std::span<const double> sa, std::span<const double> sb,
                                                 std::size_t k, bool descending)
{
    const std::size_t m = sa.size();
    const auto ia = rank_top(sa, k, descending);
    const auto ib = rank_top(sb, k, descending);
    std::vector<GridCandidate> grid;
    grid.reserve(ia.size() * ib.size());
    for (std::size_t i : ia)
        for (std::size_t j : ib)
            grid.push_back({i * m + j, i, j, sa[i] + sb[j], 0.0, 0.0});
    return grid;
}

} // namespace detail

/// Exact top-k from precomputed half scores sa[m], sb[m].
inline GateDecision pkr_select(std::span<const double> sa, std::span<const double> sb, std::size_t k)
{
    if (sa.size() != sb.size())
        throw DimensionError("half score vectors differ in length");
    if (k == 0 || k > sa.size() * sa.size())
        throw UsageError("k=" + std::to_string(k) + " outside [1, " + std::to_string(sa.size() * sa.size()) + "]");
    auto grid = detail::candidate_grid(sa, sb, k, true);
    detail::sort_candidates(grid, false);
    GateDecision d;
    for (std::size_t r = 0; r < k; ++r) {
        d.expert_ids.push_back(grid[r].expert);
        d.raw_scores.push_back(grid[r].score);
    }
    return d;
}

/// Product-key retrieval of the k best experts for query q[d_q].
inline GateDecision pkr_scores(const Tensor& q, const ProductKeyIndex& index, std::size_t k)
{
    detail::check_query(q.numel(), index, k);
    const std::size_t h = index.half_dim();
    std::span<const double> qv = q.data();
    const auto sa = detail::half_scores(qv.first(h), index.sub_keys_a());
    const auto sb = detail::half_scores(qv.subspan(h, h), index.sub_keys_b());
    return pkr_select(sa, sb, k);
}

/// Reference retrieval: scores all N composed keys and sorts them.
inline GateDecision brute_force_topk(const Tensor& q, const ProductKeyIndex& index, std::size_t k)
{
    detail::check_query(q.numel(), index, k);
    const std::size_t m = index.side(), h = index.half_dim(), n = index.n_experts();
    const double* qa = q.values().data();
    const double* qb = qa + h;
    const double* ka = index.sub_keys_a().values().data();
    const double* kb = index.sub_keys_b().values().data();
    std::vector<std::pair<double, std::size_t>> all(n);
    for (std::size_t e = 0; e < n; ++e) {
        const std::size_t i = e / m, j = e % m;
        all[e] = {detail::dot(qa, ka + i * h, h) + detail::dot(qb, kb + j * h, h), e};
    }
    std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) {
        if (x.first != y.first)
            return x.first > y.first;
        return x.second < y.second;
    });
    GateDecision d;
    for (std::size_t r = 0; r < k; ++r) {
        d.expert_ids.push_back(all[r].second);
        d.raw_scores.push_back(all[r].first);
    }
    return d;
}

/// The learned score transform f_g(s) = tanh(gain * s + bias), gain and bias scalars.
struct ScoreTransform {
    Tensor gain;
    Tensor bias;

    static ScoreTransform identity_like(bool trainable = true)
    {
        return {Tensor::scalar(1.0, trainable), Tensor::scalar(0.0, trainable)};
    }
    double apply(double s) const { return std::tanh(gain.item() * s + bias.item()); }
};

namespace detail {

/// Gaussian noise, f_g and top-k over the candidate grid. Returns the k
/// survivors ranked by transformed logit. The grid orientation follows the
/// sign of the gain so the ranking stays exact without noise.
inline std::vector<GridCandidate> gated_select(std::span<const double> sa, std::span<const double> sb, std::size_t k,
                                               const ScoreTransform& fg, double noise_scale, std::uint64_t seed)
{
    if (!(noise_scale >= 0.0))
        throw UsageError("noise_scale must be >= 0");
    const double gain = fg.gain.item();
    const double bias = fg.bias.item();
    auto grid = candidate_grid(sa, sb, k, gain >= 0.0);
    if (noise_scale > 0.0) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> nd(0.0, noise_scale);
        for (auto& c : grid) {
            c.noise = nd(rng);
            c.score += c.noise;
        }
    }
    for (auto& c : grid)
        c.logit = std::tanh(gain * c.score + bias);
    sort_candidates(grid, true);
    grid.resize(k);
    return grid;
}

} // namespace detail

/// Noisy top-k gating for a single query: f_g(PKR(q) + noise), top-k, softmax.
/// noise_scale = 0 is the deterministic evaluation path.
inline GateDecision noisy_topk_gate(const Tensor& q, const ProductKeyIndex& index, const ScoreTransform& fg,
                                    std::size_t k, double noise_scale, std::uint64_t rng_seed)
{
    detail::check_query(q.numel(), index, k);
    const std::size_t h = index.half_dim();
    std::span<const double> qv = q.data();
    const auto sa = detail::half_scores(qv.first(h), index.sub_keys_a());
    const auto sb = detail::half_scores(qv.subspan(h, h), index.sub_keys_b());
    const auto chosen = detail::gated_select(sa, sb, k, fg, noise_scale, rng_seed);

    GateDecision d;
    const double mx = chosen.front().logit;
    double z = 0.0;
    for (const auto& c : chosen) {
        d.expert_ids.push_back(c.expert);
        d.raw_scores.push_back(c.logit);
        d.weights.push_back(std::exp(c.logit - mx));
        z += d.weights.back();
    }
    for (double& w : d.weights)
        w /= z;
    return d;
}

} // namespace bigmoe
