#include "bigmoe/checkpoint.hpp"
#include "bigmoe/config.hpp"
#include "bigmoe/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace bigmoe;
namespace fs = std::filesystem;

namespace {

/// A run small enough to train in well under a second.
RunConfig small_run()
{
    return parse_config(R"(
backbone.image_size = 16
backbone.patch_size = 8
backbone.token_dim = 16
backbone.depth = 1
backbone.attn_heads = 2
igma.n_experts = 16
igma.query_dim = 4
igma.hidden_dim = 4
cpb.prompt_dim = 8
cpb.clue_grid = 2
data.n_per_domain = 8
optim.epochs = 2
optim.batch_size = 4
)");
}

fs::path temp_file(const std::string& name)
{
    const fs::path dir = fs::temp_directory_path() / "bigmoe_test_harness";
    fs::create_directories(dir);
    return dir / name;
}

std::string read_bytes(const fs::path& p)
{
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_bytes(const fs::path& p, const std::string& bytes)
{
    std::ofstream os(p, std::ios::binary);
    os << bytes;
}

} // namespace

TEST(Config, DumpParsesBackToSameConfig)
{
    for (const RunConfig& c : {desk_preset(), paper_preset(), small_run()}) {
        const std::string text = config_to_text(c);
        const RunConfig back = parse_config(text, RunConfig{});
        EXPECT_EQ(config_to_text(back), text);
        EXPECT_EQ(config_hash(back), config_hash(c));
    }
}

TEST(Config, EveryFieldHasAKey)
{
    const std::string text = config_to_text(desk_preset());
    for (const char* key : {"backbone.image_size", "igma.n_experts", "igma.noise_scale", "cpb.theta", "cpb.mask_rate",
                            "mode.prompts", "data.held_out", "optim.lr", "optim.batch_size", "run.seed"})
        EXPECT_NE(text.find(std::string(key) + " = "), std::string::npos) << key;
}

TEST(Config, PaperPresetHyperparameters)
{
    const RunConfig p = paper_preset();
    EXPECT_EQ(p.optim.lr, 5e-5);
    EXPECT_EQ(p.optim.weight_decay, 1e-3);
    EXPECT_EQ(p.optim.epochs, 100u);
    EXPECT_EQ(p.optim.batch_size, 32u);
    EXPECT_EQ(p.model.igma.n_experts, 1600u);
    EXPECT_EQ(p.model.igma.top_k, 2u);
    EXPECT_EQ(p.model.cpb.mask_rate, 0.3);
    EXPECT_EQ(p.model.backbone.token_dim, 768u);
    EXPECT_NO_THROW(p.validate());
}

TEST(Config, DeskPresetFitsTheBudget)
{
    const RunConfig d = desk_preset();
    EXPECT_EQ(d.data.domains.size(), 3u);
    EXPECT_EQ(d.data.n_per_domain * (d.data.domains.size() - 1), 600u);
    EXPECT_LE(d.optim.epochs, 30u);
    EXPECT_NO_THROW(d.validate());
}

TEST(Config, ErrorsNameTheField)
{
    auto message = [](const std::string& text) {
        try {
            parse_config(text);
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    EXPECT_NE(message("igma.n_experts = 15").find("igma.n_experts"), std::string::npos);
    EXPECT_NE(message("igma.top_k = abc").find("igma.top_k"), std::string::npos);
    EXPECT_NE(message("bogus.key = 1").find("bogus.key"), std::string::npos);
    EXPECT_NE(message("data.held_out = delta").find("data.held_out"), std::string::npos);
    EXPECT_NE(message("cpb.mask_rate = 1.5").find("cpb.mask_rate"), std::string::npos);
    EXPECT_NE(message("mode.disable_cpb = maybe").find("mode.disable_cpb"), std::string::npos);
    EXPECT_NE(message("just words").find("line 1"), std::string::npos);
    EXPECT_NE(message("optim.epochs = 0").find("optim.epochs"), std::string::npos);
}

TEST(Config, CommentsAndWhitespace)
{
    const RunConfig c = parse_config("# comment\n\n  optim.lr =  0.5 \nmode.prompts = t+c\ndata.domains = beta, gamma\n"
                                     "data.held_out = beta\n");
    EXPECT_EQ(c.optim.lr, 0.5);
    EXPECT_EQ(c.model.prompts, PromptSet::TaskClue);
    EXPECT_EQ(c.data.domains, (std::vector<std::string>{"beta", "gamma"}));
}

TEST(Config, HashSeesEveryChange)
{
    RunConfig a = desk_preset(), b = a;
    b.model.igma.noise_scale = 0.02;
    EXPECT_NE(config_hash(a), config_hash(b));
    EXPECT_EQ(hex64(0xabcull), "0000000000000abc");
    EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ull);
    EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cull);
}

TEST(Train, ZeroLearningRateLeavesParameters)
{
    RunConfig c = small_run();
    c.optim.lr = 0.0;
    const Splits s = make_splits(c);
    const auto r = train(c, s);
    const Model init = Model::create(c.model, c.seed);
    const auto a = r.model.named_parameters(), b = init.named_parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_EQ(a[i].second.values(), b[i].second.values()) << a[i].first;
}

TEST(Train, SameSeedSameCheckpoint)
{
    const RunConfig c = small_run();
    const Splits s = make_splits(c);
    const auto a = train(c, s), b = train(c, s);
    const fs::path pa = temp_file("a.bin"), pb = temp_file("b.bin");
    save_checkpoint(a.model, c, pa.string());
    save_checkpoint(b.model, c, pb.string());
    EXPECT_EQ(file_hash(pa.string()), file_hash(pb.string()));
    EXPECT_EQ(a.report.loss_curve, b.report.loss_curve);
    EXPECT_EQ(a.report.csv_rows(), b.report.csv_rows());

    RunConfig other = c;
    other.seed = 2;
    const fs::path pc = temp_file("c.bin");
    save_checkpoint(train(other, s).model, other, pc.string());
    EXPECT_NE(file_hash(pa.string()), file_hash(pc.string()));
}

TEST(Train, ReportShapeAndLossCurve)
{
    const RunConfig c = small_run();
    std::vector<std::string> lines;
    const auto r = train(c, make_splits(c), [&lines](const std::string& l) { lines.push_back(l); });
    EXPECT_EQ(lines.size(), c.optim.epochs);
    EXPECT_EQ(r.report.loss_curve.size(), c.optim.epochs);
    EXPECT_EQ(r.report.split("train").n, 16u);
    EXPECT_EQ(r.report.split("test").n, 8u);
    EXPECT_THROW(r.report.split("dev"), UsageError);
    EXPECT_EQ(r.report.config_hash, config_hash(c));
    for (const auto& sm : r.report.splits) {
        EXPECT_TRUE(std::isfinite(sm.auc));
        EXPECT_GE(sm.hter, 0.0);
        EXPECT_LE(sm.hter, 1.0);
    }
    EXPECT_NE(r.report.to_text().find("HTER%"), std::string::npos);
    EXPECT_EQ(MetricsReport::csv_header(), "config_hash,seed,split,n,hter,auc,eer,threshold");
}

TEST(Train, DivergenceIsNumericError)
{
    RunConfig c = small_run();
    c.optim.lr = 1e300;
    EXPECT_THROW(train(c, make_splits(c)), NumericError);
}

TEST(Train, ImprovesTrainingFit)
{
    RunConfig c = small_run();
    c.data.n_per_domain = 20;
    c.optim.epochs = 6;
    const Splits s = make_splits(c);
    const double before = evaluate(Model::create(c.model, c.seed), s.train, "train").auc;
    const auto r = train(c, s);
    EXPECT_GE(r.report.split("train").auc, before);
    EXPECT_LT(r.report.loss_curve.back(), r.report.loss_curve.front());
}

TEST(Checkpoint, RoundTripReproducesEvaluation)
{
    const RunConfig c = small_run();
    const Splits s = make_splits(c);
    const auto r = train(c, s);
    const fs::path p = temp_file("ck.bin");
    save_checkpoint(r.model, c, p.string());
    const Checkpoint ck = load_checkpoint(p.string());
    EXPECT_EQ(config_to_text(ck.config), config_to_text(c));
    const auto again = evaluate_report(ck.model, ck.config, s);
    for (std::size_t i = 0; i < again.splits.size(); ++i) {
        EXPECT_EQ(again.splits[i].auc, r.report.splits[i].auc);
        EXPECT_EQ(again.splits[i].hter, r.report.splits[i].hter);
        EXPECT_EQ(again.splits[i].threshold, r.report.splits[i].threshold);
    }
    EXPECT_EQ(score_dataset(ck.model, s.test).scores, score_dataset(r.model, s.test).scores);

    const fs::path q = temp_file("ck2.bin");
    save_checkpoint(ck.model, ck.config, q.string());
    EXPECT_EQ(read_bytes(p), read_bytes(q));
}

TEST(Checkpoint, RejectsTampering)
{
    const RunConfig c = small_run();
    const fs::path p = temp_file("tamper.bin");
    save_checkpoint(Model::create(c.model, c.seed), c, p.string());
    const std::string bytes = read_bytes(p);
    const fs::path bad = temp_file("tamper_bad.bin");

    std::string hash = bytes;
    hash[8] ^= 0x01;
    write_bytes(bad, hash);
    EXPECT_THROW(load_checkpoint(bad.string()), FormatError);

    std::string version = bytes;
    version[4] = 2;
    write_bytes(bad, version);
    EXPECT_THROW(load_checkpoint(bad.string()), FormatError);

    write_bytes(bad, "NOPE" + bytes.substr(4));
    EXPECT_THROW(load_checkpoint(bad.string()), FormatError);

    write_bytes(bad, bytes.substr(0, bytes.size() - 8));
    EXPECT_THROW(load_checkpoint(bad.string()), FormatError);

    write_bytes(bad, bytes + "x");
    EXPECT_THROW(load_checkpoint(bad.string()), FormatError);

    // Config text edited (seed changed) without updating the stored hash.
    std::string edited = bytes;
    const auto at = edited.find("run.seed = 1");
    ASSERT_NE(at, std::string::npos);
    edited[at + 11] = '2';
    write_bytes(bad, edited);
    EXPECT_THROW(load_checkpoint(bad.string()), FormatError);
}

TEST(Ablation, SettingsPerAxis)
{
    const RunConfig base = desk_preset();
    const auto prompts = ablation_settings(base, AblationAxis::Prompts);
    ASSERT_EQ(prompts.size(), 4u);
    EXPECT_EQ(prompts[0].first, "none");
    EXPECT_EQ(prompts[1].first, "t");
    EXPECT_EQ(prompts[2].first, "t+c");
    EXPECT_EQ(prompts[3].first, "t+c+m");
    std::vector<std::size_t> n, k;
    for (const auto& [label, c] : ablation_settings(base, AblationAxis::NExperts))
        n.push_back(c.model.igma.n_experts);
    for (const auto& [label, c] : ablation_settings(base, AblationAxis::TopK))
        k.push_back(c.model.igma.top_k);
    EXPECT_EQ(n, (std::vector<std::size_t>{16, 64, 256, 1024}));
    EXPECT_EQ(k, (std::vector<std::size_t>{1, 2, 4, 8}));
    EXPECT_EQ(parse_axis(axis_name(AblationAxis::TopK)), AblationAxis::TopK);
    EXPECT_THROW(parse_axis("depth"), UsageError);
}

TEST(Ablation, TableCarriesHashes)
{
    RunConfig c = small_run();
    c.optim.epochs = 1;
    const Splits s = make_splits(c);
    const auto t = run_ablation(c, AblationAxis::TopK, s);
    ASSERT_EQ(t.rows.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = i + 1; j < 4; ++j)
            EXPECT_NE(t.rows[i].report.config_hash, t.rows[j].report.config_hash);
    const std::string csv = t.to_csv();
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "axis,setting,config_hash,seed,split,n,hter,auc,eer,threshold");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 4 * 2);
    EXPECT_NE(t.to_text().find(hex64(t.rows[2].report.config_hash)), std::string::npos);
}
