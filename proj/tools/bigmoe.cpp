// bigmoe: dataset generation, training, evaluation, ablations and the oracle
// suites behind one binary. Exit codes follow bigmoe::ErrorCategory.

#include "bigmoe/checkpoint.hpp"
#include "bigmoe/config.hpp"
#include "bigmoe/data.hpp"
#include "bigmoe/selfcheck.hpp"
#include "bigmoe/train.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace bigmoe;

namespace {

struct GlobalOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir = ".";
    std::string preset_name = "desk";
    std::vector<std::string> overrides;
    bool print_config = false;
};

RunConfig resolve_config(const GlobalOptions& g)
{
    RunConfig cfg = preset(g.preset_name);
    if (!g.config_path.empty())
        cfg = load_config(g.config_path, cfg);
    for (const auto& kv : g.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw UsageError("--set expects KEY=VALUE, got '" + kv + "'");
        set_config_value(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    if (g.seed)
        cfg.seed = *g.seed;
    cfg.validate();
    return cfg;
}

fs::path out_dir(const GlobalOptions& g)
{
    fs::path p(g.out_dir);
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec)
        throw InputError("cannot create output directory '" + g.out_dir + "': " + ec.message());
    return p;
}

void write_file(const fs::path& path, const std::string& text)
{
    std::ofstream os(path);
    if (!os || !(os << text))
        throw InputError("cannot write '" + path.string() + "'");
}

void print_lines(const std::vector<CheckLine>& lines, bool& all_ok)
{
    for (const auto& l : lines) {
        std::cout << (l.passed ? "[PASS] " : "[FAIL] ") << std::left << std::setw(28) << l.name << " value "
                  << std::setprecision(3) << l.value << "  (tolerance " << l.tolerance << ")\n";
        all_ok = all_ok && l.passed;
    }
}

int cmd_datagen(const GlobalOptions& g)
{
    const RunConfig cfg = resolve_config(g);
    const fs::path dir = out_dir(g);
    const Splits s = make_splits(cfg);
    save_dataset(s.train, (dir / "train.bin").string());
    save_dataset(s.test, (dir / "test.bin").string());
    save_manifest(s.train, (dir / "train.csv").string());
    save_manifest(s.test, (dir / "test.csv").string());
    std::cout << "train " << s.train.size() << " samples, test " << s.test.size() << " samples (held out "
              << cfg.data.held_out << ") -> " << dir.string() << '\n';
    for (std::size_t d = 0; d < s.train.domains.size(); ++d) {
        double e[2] = {0, 0};
        std::size_t n[2] = {0, 0};
        for (const Dataset* ds : {&s.train, &s.test})
            for (const auto& smp : ds->samples)
                if (smp.domain == d) {
                    e[smp.label] += laplacian_energy(smp.m.rgb);
                    ++n[smp.label];
                }
        std::cout << "  " << std::left << std::setw(8) << s.train.domains[d] << " laplacian live "
                  << std::setprecision(4) << e[Live] / static_cast<double>(n[Live]) << "  spoof "
                  << e[Spoof] / static_cast<double>(n[Spoof]) << '\n';
    }
    return 0;
}

int cmd_train(const GlobalOptions& g)
{
    const RunConfig cfg = resolve_config(g);
    const fs::path dir = out_dir(g);
    const Splits s = make_splits(cfg);
    std::cout << "config " << hex64(config_hash(cfg)) << ", " << s.train.size() << " train / " << s.test.size()
              << " test samples\n";
    const auto result = train(cfg, s, [](const std::string& line) { std::cout << line << std::endl; });
    const fs::path ck = dir / "checkpoint.bin";
    save_checkpoint(result.model, cfg, ck.string());
    write_file(dir / "report.txt", result.report.to_text());
    write_file(dir / "report.csv", MetricsReport::csv_header() + "\n" + result.report.csv_rows());
    std::cout << result.report.to_text() << "checkpoint " << ck.string() << " (hash " << hex64(file_hash(ck.string()))
              << ")\n";
    return 0;
}

int cmd_eval(const GlobalOptions& g, const std::string& checkpoint, const std::string& split, const std::string& data)
{
    const Checkpoint ck = load_checkpoint(checkpoint);
    MetricsReport report;
    report.config_hash = config_hash(ck.config);
    report.seed = ck.config.seed;
    if (!data.empty()) {
        report.splits.push_back(evaluate(ck.model, load_dataset(data), fs::path(data).stem().string()));
    } else {
        const Splits s = make_splits(ck.config);
        if (split != "test")
            report.splits.push_back(evaluate(ck.model, s.train, "train"));
        if (split != "train")
            report.splits.push_back(evaluate(ck.model, s.test, "test"));
    }
    std::cout << report.to_text();
    if (!g.out_dir.empty() && g.out_dir != ".")
        write_file(out_dir(g) / "eval.csv", MetricsReport::csv_header() + "\n" + report.csv_rows());
    return 0;
}

int cmd_ablate(const GlobalOptions& g, const std::string& axis_text)
{
    const RunConfig cfg = resolve_config(g);
    const AblationAxis axis = parse_axis(axis_text);
    const fs::path dir = out_dir(g);
    const Splits s = make_splits(cfg);
    const auto table = run_ablation(cfg, axis, s, [](const std::string& line) { std::cout << line << std::endl; });
    write_file(dir / ("ablation_" + axis_name(axis) + ".txt"), table.to_text());
    write_file(dir / ("ablation_" + axis_name(axis) + ".csv"), table.to_csv());
    std::cout << table.to_text();
    return 0;
}

int cmd_gradcheck()
{
    bool ok = true;
    print_lines(op_gradient_suite(), ok);
    print_lines({model_gradient_check()}, ok);
    return ok ? 0 : static_cast<int>(ErrorCategory::Numeric);
}

int cmd_oracle()
{
    bool ok = true;
    print_lines(pkr_oracle_suite(), ok);
    print_lines(metrics_oracle_suite(), ok);
    return ok ? 0 : static_cast<int>(ErrorCategory::Numeric);
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Fine-grained mixture-of-experts adapters with convolutional prompts for multimodal face "
                 "anti-spoofing, at desk scale."};
    app.fallthrough();
    GlobalOptions g;
    app.add_option("--config", g.config_path, "key = value config file applied on top of the preset");
    app.add_option("--seed", g.seed, "training seed (overrides run.seed)");
    app.add_option("--out", g.out_dir, "output directory");
    app.add_option("--preset", g.preset_name, "base settings")->check(CLI::IsMember({"desk", "paper"}));
    app.add_option("--set", g.overrides, "KEY=VALUE override, repeatable");
    app.add_flag("--print-config", g.print_config, "print the resolved config and exit");

    auto* datagen = app.add_subcommand("datagen", "generate the train / held-out datasets and manifests");
    auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoint + report");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string checkpoint, split = "all", data;
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("--split", split, "split to score")->check(CLI::IsMember({"train", "test", "all"}));
    eval->add_option("--data", data, "score this dataset file instead of regenerating the splits");
    auto* ablate = app.add_subcommand("ablate", "sweep one axis and tabulate held-out metrics");
    std::string axis;
    ablate->add_option("--axis", axis, "prompts, n_experts or top_k")->required();
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every op and a small model");
    auto* oracle = app.add_subcommand("oracle", "product-key retrieval and metric oracle suites");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ErrorCategory::Usage);
    }

    try {
        if (g.print_config) {
            std::cout << config_to_text(resolve_config(g));
            return 0;
        }
        if (datagen->parsed())
            return cmd_datagen(g);
        if (train_cmd->parsed())
            return cmd_train(g);
        if (eval->parsed())
            return cmd_eval(g, checkpoint, split, data);
        if (ablate->parsed())
            return cmd_ablate(g, axis);
        if (gradcheck->parsed())
            return cmd_gradcheck();
        if (oracle->parsed())
            return cmd_oracle();
        std::cerr << app.help();
        return static_cast<int>(ErrorCategory::Usage);
    } catch (const bigmoe::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
