#pragma once

// Slow reference implementations used to cross-check the fast paths:
// exhaustive pairwise AUC, a brute threshold sweep for EER, and central
// finite-difference gradient checks.

#include "bigmoe/metrics.hpp"
#include "bigmoe/tensor.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace bigmoe::oracle {

/// AUC by enumerating every (live, spoof) pair.
inline double pairwise_auc(const ScoreSet& s)
{
    std::uint64_t twice = 0, nl = 0, ns = 0;
    for (std::size_t i = 0; i < s.scores.size(); ++i) {
        if (s.labels[i] != 1)
            continue;
        ++nl;
        for (std::size_t j = 0; j < s.scores.size(); ++j) {
            if (s.labels[j] != 0)
                continue;
            if (s.scores[i] > s.scores[j])
                twice += 2;
            else if (s.scores[i] == s.scores[j])
                twice += 1;
        }
    }
    for (int l : s.labels)
        ns += l == 0;
    if (nl == 0 || ns == 0)
        throw UsageError("pairwise_auc needs both classes");
    return static_cast<double>(twice) / (2.0 * static_cast<double>(nl) * static_cast<double>(ns));
}

/// HTER by direct counting.
inline double counted_hter(const ScoreSet& s, double threshold)
{
    std::size_t fa = 0, fr = 0, nl = 0, ns = 0;
    for (std::size_t i = 0; i < s.scores.size(); ++i) {
        if (s.labels[i] == 1) {
            ++nl;
            fr += s.scores[i] < threshold;
        } else {
            ++ns;
            fa += s.scores[i] >= threshold;
        }
    }
    if (nl == 0 || ns == 0)
        throw UsageError("counted_hter needs both classes");
    const double far = static_cast<double>(fa) / static_cast<double>(ns);
    const double frr = static_cast<double>(fr) / static_cast<double>(nl);
    return 0.5 * (far + frr);
}

/// EER threshold by recounting FAR / FRR from scratch at every candidate
/// midpoint, scanning candidates in ascending order.
inline EERResult sweep_eer(const ScoreSet& s)
{
    std::vector<double> u = s.scores;
    std::sort(u.begin(), u.end());
    u.erase(std::unique(u.begin(), u.end()), u.end());
    std::vector<double> cands;
    if (u.size() == 1)
        cands.push_back(u.front());
    for (std::size_t i = 0; i + 1 < u.size(); ++i)
        cands.push_back(0.5 * (u[i] + u[i + 1]));

    EERResult best;
    double best_gap = 0.0;
    for (std::size_t c = 0; c < cands.size(); ++c) {
        std::size_t fa = 0, fr = 0, nl = 0, ns = 0;
        for (std::size_t i = 0; i < s.scores.size(); ++i) {
            if (s.labels[i] == 1) {
                ++nl;
                fr += s.scores[i] < cands[c];
            } else {
                ++ns;
                fa += s.scores[i] >= cands[c];
            }
        }
        EERResult r;
        r.threshold = cands[c];
        r.far = static_cast<double>(fa) / static_cast<double>(ns);
        r.frr = static_cast<double>(fr) / static_cast<double>(nl);
        r.eer = 0.5 * (r.far + r.frr);
        const double gap = std::abs(r.far - r.frr);
        if (c == 0 || gap < best_gap) {
            best = r;
            best_gap = gap;
        }
    }
    return best;
}

struct GradCheckEntry {
    std::string name;
    double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8)
};

struct GradCheckResult {
    std::vector<GradCheckEntry> entries;

    double max_rel_error() const
    {
        double m = 0.0;
        for (const auto& e : entries)
            m = std::max(m, e.rel_error);
        return m;
    }
};

/// Compares backward() of the scalar `loss()` against central differences
/// with respect to every element of every listed input.
inline GradCheckResult gradcheck(const std::function<Tensor()>& loss, std::vector<std::pair<std::string, Tensor>> inputs,
                                 double h = 1e-5)
{
    for (auto& [name, t] : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    backward(loss());

    GradCheckResult out;
    for (auto& [name, t] : inputs) {
        const std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                          : std::vector<double>(t.numel(), 0.0);
        double diff = 0.0, na = 0.0, nn = 0.0;
        auto data = t.mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            data[i] = orig + h;
            const double up = loss().item();
            data[i] = orig - h;
            const double down = loss().item();
            data[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            diff += (analytic[i] - numeric) * (analytic[i] - numeric);
            na += analytic[i] * analytic[i];
            nn += numeric * numeric;
        }
        const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
        out.entries.push_back({name, std::sqrt(diff) / denom});
    }
    return out;
}

} // namespace bigmoe::oracle
