#pragma once

// HTER / AUC / EER threshold for liveness scores (label 1 = live, higher
// score = more live).

#include "bigmoe/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

namespace bigmoe {

struct ScoreSet {
    std::vector<double> scores;
    std::vector<int> labels;
};

namespace detail {

struct ClassCounts {
    std::size_t live = 0;
    std::size_t spoof = 0;
};

inline ClassCounts check_scores(const ScoreSet& s)
{
    if (s.scores.size() != s.labels.size())
        throw DimensionError("score set has " + std::to_string(s.scores.size()) + " scores but " +
                             std::to_string(s.labels.size()) + " labels");
    ClassCounts c;
    for (std::size_t i = 0; i < s.scores.size(); ++i) {
        if (!std::isfinite(s.scores[i]))
            throw InputError("score " + std::to_string(i) + " is not finite");
        if (s.labels[i] == 1)
            ++c.live;
        else if (s.labels[i] == 0)
            ++c.spoof;
        else
            throw InputError("label " + std::to_string(i) + " is " + std::to_string(s.labels[i]) + ", expected 0 or 1");
    }
    if (c.live == 0 || c.spoof == 0)
        throw UsageError("score set needs both live and spoof samples");
    return c;
}

inline double half_error(std::size_t false_accepts, std::size_t spoof, std::size_t false_rejects, std::size_t live)
{
    const double far = static_cast<double>(false_accepts) / static_cast<double>(spoof);
    const double frr = static_cast<double>(false_rejects) / static_cast<double>(live);
    return 0.5 * (far + frr);
}

} // namespace detail

/// (FAR + FRR) / 2 with accept = score >= threshold.
inline double hter(const ScoreSet& s, double threshold)
{
    const auto c = detail::check_scores(s);
    std::size_t fa = 0, fr = 0;
    for (std::size_t i = 0; i < s.scores.size(); ++i) {
        if (s.labels[i] == 0 && s.scores[i] >= threshold)
            ++fa;
        if (s.labels[i] == 1 && s.scores[i] < threshold)
            ++fr;
    }
    return detail::half_error(fa, c.spoof, fr, c.live);
}

/// Mann-Whitney AUC, ties counted half: (2*wins + ties) / (2 * live * spoof).
inline double auc(const ScoreSet& s)
{
    const auto c = detail::check_scores(s);
    std::vector<std::size_t> order(s.scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });

    std::uint64_t twice = 0;        // 2*wins + ties
    std::uint64_t spoof_below = 0;  // spoofs strictly below the current tie group
    for (std::size_t g = 0; g < order.size();) {
        std::size_t e = g;
        std::uint64_t live_g = 0, spoof_g = 0;
        while (e < order.size() && s.scores[order[e]] == s.scores[order[g]]) {
            (s.labels[order[e]] == 1 ? live_g : spoof_g) += 1;
            ++e;
        }
        twice += live_g * (2 * spoof_below + spoof_g);
        spoof_below += spoof_g;
        g = e;
    }
    return static_cast<double>(twice) / (2.0 * static_cast<double>(c.live) * static_cast<double>(c.spoof));
}

struct EERResult {
    double threshold = 0.0;
    double eer = 0.0;  // (FAR + FRR) / 2 at `threshold`
    double far = 0.0;
    double frr = 0.0;
};

/// Threshold among midpoints of consecutive unique scores minimising
/// |FAR - FRR|; ties go to the lower threshold. A single unique score is its
/// own (degenerate) midpoint.
inline EERResult eer_threshold(const ScoreSet& s)
{
    const auto c = detail::check_scores(s);
    std::vector<std::pair<double, int>> v(s.scores.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = {s.scores[i], s.labels[i]};
    std::sort(v.begin(), v.end());

    // Unique values with per-value class counts.
    std::vector<double> uniq;
    std::vector<std::size_t> live_at, spoof_at;
    for (const auto& [score, label] : v) {
        if (uniq.empty() || uniq.back() != score) {
            uniq.push_back(score);
            live_at.push_back(0);
            spoof_at.push_back(0);
        }
        (label == 1 ? live_at.back() : spoof_at.back()) += 1;
    }

    auto at = [&](double thr, std::size_t fa, std::size_t fr) {
        EERResult r;
        r.threshold = thr;
        r.far = static_cast<double>(fa) / static_cast<double>(c.spoof);
        r.frr = static_cast<double>(fr) / static_cast<double>(c.live);
        r.eer = detail::half_error(fa, c.spoof, fr, c.live);
        return r;
    };
    if (uniq.size() == 1)
        return at(uniq.front(), c.spoof, 0);

    EERResult best;
    double best_gap = 0.0;
    std::size_t live_le = 0, spoof_le = 0;  // counts with score <= uniq[i]
    for (std::size_t i = 0; i + 1 < uniq.size(); ++i) {
        live_le += live_at[i];
        spoof_le += spoof_at[i];
        const double thr = 0.5 * (uniq[i] + uniq[i + 1]);
        const EERResult r = at(thr, c.spoof - spoof_le, live_le);
        const double gap = std::abs(r.far - r.frr);
        if (i == 0 || gap < best_gap) {
            best = r;
            best_gap = gap;
        }
    }
    return best;
}

} // namespace bigmoe
