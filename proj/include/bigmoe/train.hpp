#pragma once

// Training loop, evaluation reports and the ablation runner.

#include "bigmoe/backbone.hpp"
#include "bigmoe/config.hpp"
#include "bigmoe/data.hpp"
#include "bigmoe/errors.hpp"
#include "bigmoe/metrics.hpp"
#include "bigmoe/seed.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace bigmoe {

struct Splits {
    Dataset train;
    Dataset test;
};

/// Generates the configured domains and splits off the held-out one.
inline Splits make_splits(const RunConfig& cfg)
{
    std::vector<DomainSpec> specs;
    for (const auto& name : cfg.data.domains)
        specs.push_back(find_domain(name));
    auto all = generate_dataset(specs, cfg.data.n_per_domain, cfg.model.backbone.image_size, cfg.data.seed);
    auto [train, test] = leave_one_out_split(all, cfg.data.held_out);
    return {std::move(train), std::move(test)};
}

struct SplitMetrics {
    std::string split;
    std::size_t n = 0;
    double auc = 0.0;
    double hter = 0.0;  // at the EER threshold of this split
    double eer = 0.0;
    double threshold = 0.0;
};

struct MetricsReport {
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    std::vector<SplitMetrics> splits;
    std::vector<double> loss_curve;  // mean training loss per epoch
    double wall_clock_s = 0.0;

    const SplitMetrics& split(const std::string& name) const
    {
        for (const auto& s : splits)
            if (s.split == name)
                return s;
        throw UsageError("report has no split '" + name + "'");
    }

    std::string to_text() const
    {
        std::ostringstream os;
        os << "config " << hex64(config_hash) << "  seed " << seed << "  wall " << std::fixed << std::setprecision(1)
           << wall_clock_s << " s\n";
        os << "HTER is taken at the EER threshold of the split being scored.\n";
        os << std::left << std::setw(8) << "split" << std::right << std::setw(6) << "n" << std::setw(10) << "HTER%"
           << std::setw(10) << "AUC%" << std::setw(12) << "threshold" << '\n';
        for (const auto& s : splits)
            os << std::left << std::setw(8) << s.split << std::right << std::setw(6) << s.n << std::setprecision(2)
               << std::setw(10) << 100.0 * s.hter << std::setw(10) << 100.0 * s.auc << std::setprecision(6)
               << std::setw(12) << s.threshold << '\n';
        if (!loss_curve.empty()) {
            os << "loss";
            for (double l : loss_curve)
                os << ' ' << std::setprecision(4) << l;
            os << '\n';
        }
        return os.str();
    }

    static std::string csv_header() { return "config_hash,seed,split,n,hter,auc,eer,threshold"; }

    std::string csv_rows() const
    {
        std::ostringstream os;
        os << std::setprecision(17);
        for (const auto& s : splits)
            os << hex64(config_hash) << ',' << seed << ',' << s.split << ',' << s.n << ',' << s.hter << ',' << s.auc
               << ',' << s.eer << ',' << s.threshold << '\n';
        return os.str();
    }
};

/// Live-class softmax probability of every sample, eval mode.
inline ScoreSet score_dataset(const Model& model, const Dataset& ds)
{
    ScoreSet s;
    ForwardOptions opt;
    opt.mode = Mode::Eval;
    for (const auto& sample : ds.samples) {
        const Tensor logits = model_forward(sample.m, model, opt);
        s.scores.push_back(1.0 / (1.0 + std::exp(logits[0] - logits[1])));
        s.labels.push_back(sample.label);
    }
    return s;
}

inline SplitMetrics evaluate(const Model& model, const Dataset& ds, const std::string& name)
{
    if (ds.samples.empty())
        throw UsageError("split '" + name + "' is empty");
    const ScoreSet s = score_dataset(model, ds);
    const EERResult e = eer_threshold(s);
    SplitMetrics m;
    m.split = name;
    m.n = ds.size();
    m.auc = auc(s);
    m.threshold = e.threshold;
    m.eer = e.eer;
    m.hter = hter(s, e.threshold);
    return m;
}

inline MetricsReport evaluate_report(const Model& model, const RunConfig& cfg, const Splits& splits)
{
    MetricsReport r;
    r.config_hash = config_hash(cfg);
    r.seed = cfg.seed;
    r.splits.push_back(evaluate(model, splits.train, "train"));
    r.splits.push_back(evaluate(model, splits.test, "test"));
    return r;
}

using LogFn = std::function<void(const std::string&)>;

struct TrainResult {
    Model model;
    MetricsReport report;
};

/// Mini-batch AdamW on per-sample cross-entropy, averaged over each batch.
/// Sample order, gating noise and modality masks all derive from cfg.seed.
inline TrainResult train(const RunConfig& cfg, const Splits& splits, const LogFn& log = {})
{
    cfg.validate();
    if (splits.train.samples.empty())
        throw UsageError("training split is empty");
    const auto t0 = std::chrono::steady_clock::now();

    TrainResult out{Model::create(cfg.model, cfg.seed), {}};
    std::vector<Tensor> params = out.model.parameters();
    AdamState adam({cfg.optim.lr, cfg.optim.beta1, cfg.optim.beta2, 1e-8, cfg.optim.weight_decay});

    std::vector<std::size_t> order(splits.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, {0x73687566}));
    const std::size_t bs = cfg.optim.batch_size;

    for (std::size_t epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(order.size(), start + bs);
            for (Tensor& p : params)
                p.zero_grad();
            for (std::size_t i = start; i < end; ++i) {
                const auto& sample = splits.train.samples[order[i]];
                ForwardOptions opt;
                opt.mode = Mode::Train;
                opt.seed = derive_seed(cfg.seed, {epoch, i});
                const Tensor logits = model_forward(sample.m, out.model, opt);
                const int label = sample.label;
                Tensor loss = cross_entropy(reshape(logits, {1, 2}), std::span<const int>(&label, 1));
                if (!std::isfinite(loss.item()))
                    throw NumericError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", sample " +
                                       std::to_string(order[i]));
                epoch_loss += loss.item();
                backward(scale(loss, 1.0 / static_cast<double>(end - start)));
            }
            adam_step(params, adam);
        }
        out.report.loss_curve.push_back(epoch_loss / static_cast<double>(order.size()));
        if (log) {
            std::ostringstream os;
            os << "epoch " << epoch + 1 << '/' << cfg.optim.epochs << "  loss " << std::setprecision(5)
               << out.report.loss_curve.back();
            log(os.str());
        }
    }

    auto curve = std::move(out.report.loss_curve);
    out.report = evaluate_report(out.model, cfg, splits);
    out.report.loss_curve = std::move(curve);
    out.report.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

enum class AblationAxis { Prompts, NExperts, TopK };

inline AblationAxis parse_axis(const std::string& s)
{
    if (s == "prompts")
        return AblationAxis::Prompts;
    if (s == "n_experts")
        return AblationAxis::NExperts;
    if (s == "top_k")
        return AblationAxis::TopK;
    throw UsageError("unknown ablation axis '" + s + "' (expected prompts, n_experts or top_k)");
}

inline std::string axis_name(AblationAxis a)
{
    switch (a) {
        case AblationAxis::Prompts: return "prompts";
        case AblationAxis::NExperts: return "n_experts";
        case AblationAxis::TopK: return "top_k";
    }
    return "?";
}

struct AblationRow {
    std::string setting;
    MetricsReport report;
};

struct AblationTable {
    AblationAxis axis = AblationAxis::Prompts;
    std::vector<AblationRow> rows;

    std::string to_text() const
    {
        std::ostringstream os;
        os << std::left << std::setw(12) << axis_name(axis) << std::setw(18) << "config" << std::right
           << std::setw(10) << "HTER%" << std::setw(10) << "AUC%" << '\n';
        for (const auto& r : rows) {
            const auto& t = r.report.split("test");
            os << std::left << std::setw(12) << r.setting << std::setw(18) << hex64(r.report.config_hash)
               << std::right << std::fixed << std::setprecision(2) << std::setw(10) << 100.0 * t.hter
               << std::setw(10) << 100.0 * t.auc << '\n';
        }
        return os.str();
    }

    std::string to_csv() const
    {
        std::ostringstream os;
        os << "axis,setting," << MetricsReport::csv_header() << '\n';
        for (const auto& r : rows) {
            std::istringstream rows_in(r.report.csv_rows());
            std::string line;
            while (std::getline(rows_in, line))
                os << axis_name(axis) << ',' << r.setting << ',' << line << '\n';
        }
        return os.str();
    }
};

/// The settings swept along an axis, as (label, config) pairs.
inline std::vector<std::pair<std::string, RunConfig>> ablation_settings(const RunConfig& base, AblationAxis axis)
{
    std::vector<std::pair<std::string, RunConfig>> out;
    switch (axis) {
        case AblationAxis::Prompts:
            for (PromptSet p : {PromptSet::None, PromptSet::Task, PromptSet::TaskClue, PromptSet::Full}) {
                RunConfig c = base;
                c.model.prompts = p;
                out.emplace_back(prompt_set_name(p), c);
            }
            break;
        case AblationAxis::NExperts:
            for (std::size_t n : {16, 64, 256, 1024}) {
                RunConfig c = base;
                c.model.igma.n_experts = n;
                out.emplace_back(std::to_string(n), c);
            }
            break;
        case AblationAxis::TopK:
            for (std::size_t k : {1, 2, 4, 8}) {
                RunConfig c = base;
                c.model.igma.top_k = k;
                out.emplace_back(std::to_string(k), c);
            }
            break;
    }
    for (auto& [label, c] : out)
        c.validate();
    return out;
}

/// One training run per setting, sequentially, on shared data and seed.
inline AblationTable run_ablation(const RunConfig& base, AblationAxis axis, const Splits& splits,
                                  const LogFn& log = {})
{
    AblationTable t;
    t.axis = axis;
    for (auto& [label, c] : ablation_settings(base, axis)) {
        if (log)
            log(axis_name(axis) + " = " + label);
        t.rows.push_back({label, train(c, splits, log).report});
    }
    return t;
}

} // namespace bigmoe
