#include "sqs/autodiff/checkpoint.hpp"
#include "sqs/cli/commands.hpp"
#include "sqs/cli/config.hpp"
#include "sqs/core/error.hpp"
#include "sqs/io/binary.hpp"
#include "sqs/pretrain/pretrain.hpp"
#include "sqs/render/image_io.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <unistd.h>

using namespace sqs;
using namespace sqs::cli;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

// Relative path -> bytes for every regular file under dir.
std::map<std::string, std::vector<char>> snapshot(const fs::path& dir) {
    std::map<std::string, std::vector<char>> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = io::read_file(e.path());
    return files;
}

std::vector<std::vector<double>> read_csv(const fs::path& path, std::string* header = nullptr) {
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    if (header) *header = line;
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            char* end = nullptr;
            const double v = std::strtod(cell.c_str(), &end);
            row.push_back(*end == '\0' && !cell.empty() ? v : std::nan(""));  // text cells read as NaN
        }
        rows.push_back(row);
    }
    return rows;
}

std::size_t count_files(const fs::path& dir, const std::string& ext) {
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ext;
    return n;
}

// Small scenes so each command runs in seconds.
const std::vector<std::string> kData = {"--set", "data.n_views=2",  "--set", "data.width=32",
                                        "--set", "data.height=32", "--set", "data.gaussians_per_object=24"};
const std::vector<std::string> kModel = {"--set", "model.queries=32", "--set", "train.steps=20",
                                         "--set", "opt.warmup_steps=4", "--set", "opt.lr_peak=1e-3",
                                         "--set", "train.checkpoint_every=10", "--set", "train.snapshot_every=10"};

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

class CliTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        root_ = fs::temp_directory_path() / ("sqs_cli_" + std::to_string(::getpid()));
        fs::remove_all(root_);
        fs::create_directories(root_);
        const auto r = run(cat({"gen-data", "--out", (root_ / "data").string(), "--seed", "3", "--set",
                                "data.n_scenes=4"},
                               kData));
        ASSERT_EQ(r.code, 0) << r.err;
        const auto p = run(cat(cat({"pretrain", "--data", data(), "--out", (root_ / "pre").string()}, kData), kModel));
        ASSERT_EQ(p.code, 0) << p.err;
    }
    static void TearDownTestSuite() { fs::remove_all(root_); }

    static std::string data() { return (root_ / "data").string(); }
    static std::string pretrained() { return (root_ / "pre" / "model.sqsckpt").string(); }
    static fs::path dir(const std::string& name) { return root_ / name; }

    // Fine-tune flags for a quick run on the shared dataset.
    static std::vector<std::string> finetune_args(const std::string& out) {
        return cat(cat({"finetune", "--data", data(), "--pretrained", pretrained(), "--out", out, "--grid", "8",
                        "--steps", "6", "--set", "finetune.warmup_steps=2", "--set", "finetune.task_dim=16",
                        "--set", "finetune.head_hidden=16"},
                       kData),
                   {"--set", "model.queries=32"});
    }

    static fs::path root_;
};

fs::path CliTest::root_;

} // namespace

TEST(CliConfig, EveryKeyHasDefaultAndDoc) {
    RunConfig c;
    for (const auto& k : config_keys()) {
        EXPECT_FALSE(k.doc.empty()) << k.key;
        EXPECT_EQ(c.get(k.key), k.default_value) << k.key;
    }
    EXPECT_NO_THROW(c.validate());
}

TEST(CliConfig, UnknownAndMistypedKeysNamed) {
    RunConfig c;
    try {
        c.apply_assignment("opt.lr_peek=1");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("opt.lr_peek"), std::string::npos);
    }
    try {
        c.merge_document(json::parse(R"({"train": {"steps": "many"}})"), "test");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("train.steps"), std::string::npos);
    }
    EXPECT_THROW(c.merge_document(json::parse(R"({"model": {"queries": 4, "depth": 3}})"), "test"), ConfigError);
}

TEST(CliConfig, ResolvedIsSortedAndRoundTrips) {
    RunConfig a;
    a.apply_assignment("opt.lr_peak=0.001");
    RunConfig b;
    b.merge_document(json::parse(a.resolved()), "resolved");
    EXPECT_EQ(a.resolved(), b.resolved());
    EXPECT_DOUBLE_EQ(b.number("opt.lr_peak"), 1e-3);
}

TEST(CliConfig, PublishedConstantsAreDefaults) {
    RunConfig c;
    const auto p = c.pretrain_config();
    EXPECT_EQ(p.loss.w_rgb, 1.0);
    EXPECT_EQ(p.loss.w_depth, 0.05);
    EXPECT_EQ(p.lr_peak, 2e-4);
    EXPECT_EQ(p.warmup_steps, 500u);
    EXPECT_EQ(p.weight_decay, 0.01);
    EXPECT_EQ(p.decoder.n_layers, 2u);
}

TEST(CliUsage, ExitCodes) {
    EXPECT_EQ(run({}).code, kExitUsage);
    EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
    EXPECT_EQ(run({"gen-data", "--bogus"}).code, kExitUsage);
    EXPECT_EQ(run({"gen-data", "--help"}).code, kExitOk);
    const auto bad = run({"gen-data", "--dry-run", "--set", "data.n_scene=3"});
    EXPECT_EQ(bad.code, kExitUsage);
    EXPECT_NE(bad.err.find("data.n_scene"), std::string::npos);
    EXPECT_EQ(run({"pretrain", "--dry-run", "--set", "data.width=40"}).code, kExitUsage);
}

TEST(CliUsage, DryRunValidatesAndWritesNothing) {
    const auto out = fs::temp_directory_path() / ("sqs_dry_" + std::to_string(::getpid()));
    fs::remove_all(out);
    const auto r = run({"pretrain", "--dry-run", "--out", out.string()});
    EXPECT_EQ(r.code, kExitOk) << r.err;
    EXPECT_NE(r.out.find("\"lr_peak\""), std::string::npos);
    EXPECT_FALSE(fs::exists(out));
}

TEST(CliUsage, SeedFallbackFromEnvironment) {
    ::setenv("SQS_SEED", "41", 1);
    auto r = run({"gen-data", "--dry-run"});
    EXPECT_NE(r.out.find("\"seed\": 41"), std::string::npos) << r.out;
    r = run({"gen-data", "--dry-run", "--seed", "5"});
    EXPECT_NE(r.out.find("\"seed\": 5"), std::string::npos);
    ::setenv("SQS_SEED", "x", 1);
    EXPECT_EQ(run({"gen-data", "--dry-run"}).code, kExitUsage);
    ::unsetenv("SQS_SEED");
    r = run({"gen-data", "--dry-run"});
    EXPECT_NE(r.out.find("\"seed\": 0"), std::string::npos);
}

TEST(CliUsage, ConfigFileThenFlags) {
    const auto path = fs::temp_directory_path() / ("sqs_cfg_" + std::to_string(::getpid()) + ".json");
    io::write_text(path, R"({"seed": 9, "opt": {"lr_peak": 0.5}})");
    auto r = run({"pretrain", "--dry-run", "--config", path.string()});
    EXPECT_NE(r.out.find("\"seed\": 9"), std::string::npos);
    EXPECT_NE(r.out.find("\"lr_peak\": 0.5"), std::string::npos);
    r = run({"pretrain", "--dry-run", "--config", path.string(), "--seed", "2", "--set", "opt.lr_peak=0.25"});
    EXPECT_NE(r.out.find("\"seed\": 2"), std::string::npos);
    EXPECT_NE(r.out.find("\"lr_peak\": 0.25"), std::string::npos);
    io::write_text(path, R"({"opt": {"lr": 0.5}})");
    r = run({"pretrain", "--dry-run", "--config", path.string()});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_NE(r.err.find("opt.lr"), std::string::npos);
    fs::remove(path);
}

TEST_F(CliTest, GenDataCountsAndIdempotence) {
    const auto out = dir("gen10");
    auto args = cat({"gen-data", "--out", out.string(), "--set", "data.n_scenes=10", "--set", "data.n_views=1",
                     "--set", "data.gaussians_per_object=4", "--set", "data.width=32", "--set", "data.height=32"},
                    {});
    ASSERT_EQ(run(args).code, 0);
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(out / "scenes")) n += e.is_directory();
    EXPECT_EQ(n, 10u);
    EXPECT_TRUE(fs::exists(out / "config.resolved"));
    const auto first = snapshot(out);

    // Non-empty directory needs --force; the rerun is byte-identical.
    EXPECT_EQ(run(args).code, kExitUsage);
    args.push_back("--force");
    ASSERT_EQ(run(args).code, 0);
    EXPECT_TRUE(snapshot(out) == first);

    // A smaller rerun leaves no stale scenes behind.
    args.insert(args.end(), {"--set", "data.n_scenes=3"});
    ASSERT_EQ(run(args).code, 0);
    n = 0;
    for (const auto& e : fs::directory_iterator(out / "scenes")) n += e.is_directory();
    EXPECT_EQ(n, 3u);
    EXPECT_TRUE(snapshot(out / "scenes" / "scene_0001") == snapshot(dir("gen10") / "scenes" / "scene_0001"));
}

TEST_F(CliTest, PretrainOutputs) {
    const auto out = dir("pre");
    std::string header;
    const auto rows = read_csv(out / "loss.csv", &header);
    EXPECT_EQ(header, "step,loss,lr");
    ASSERT_EQ(rows.size(), 20u);
    for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(rows[i][0], static_cast<double>(i + 1));
    EXPECT_TRUE(fs::exists(out / "model.sqsckpt"));
    EXPECT_TRUE(fs::exists(out / "checkpoints" / "step_000010.sqsckpt"));
    EXPECT_TRUE(fs::exists(out / "checkpoints" / "step_000020.sqsckpt"));
    EXPECT_EQ(count_files(out / "snapshots", ".ppm"), 4u);  // 2 snapshots x 2 views
    EXPECT_EQ(count_files(out / "snapshots", ".pfm"), 4u);
    EXPECT_EQ(io::read_file(out / "config.resolved").empty(), false);
    const auto ckpt = ad::load_checkpoint(out / "model.sqsckpt");
    EXPECT_EQ(ad::find_record(ckpt, pretrain::kOptStepRecord).item(), 20.0);
}

TEST_F(CliTest, PretrainRejectsMissingDatasetAndBusyDir) {
    EXPECT_EQ(run({"pretrain", "--data", dir("nowhere").string(), "--out", dir("p0").string()}).code, kExitUsage);
    EXPECT_EQ(run(cat(cat({"pretrain", "--data", data(), "--out", dir("pre").string()}, kData), kModel)).code,
              kExitUsage);
    // Dataset resolution must match the configured one.
    EXPECT_EQ(run(cat({"pretrain", "--data", data(), "--out", dir("p1").string()}, kModel)).code, kExitUsage);
}

TEST_F(CliTest, SmokeRunLossDecreases) {
    const auto out = dir("smoke");
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = run(cat(cat({"pretrain", "--data", data(), "--out", out.string(), "--set", "model.queries=64",
                                "--set", "train.steps=100", "--set", "opt.warmup_steps=10", "--set",
                                "opt.lr_peak=2e-3", "--set", "train.checkpoint_every=0", "--set",
                                "train.snapshot_every=0"},
                               kData),
                           {}));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_LT(secs, 60.0);
    const auto rows = read_csv(out / "loss.csv");
    ASSERT_EQ(rows.size(), 100u);
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 10; ++i) {
        head += rows[i][1];
        tail += rows[90 + i][1];
    }
    EXPECT_LT(tail, head);
}

TEST_F(CliTest, ResumeReproducesUninterruptedRun) {
    const auto out = dir("resume");
    fs::copy(dir("pre"), out, fs::copy_options::recursive);
    const auto before = snapshot(out);
    const auto r = run(cat(cat({"pretrain", "--data", data(), "--out", out.string(), "--resume",
                                (out / "checkpoints" / "step_000010.sqsckpt").string()},
                               kData),
                           kModel));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto after = snapshot(out);
    for (const auto& [name, bytes] : before) {
        if (name == "config.resolved") continue;  // records train.resume
        EXPECT_TRUE(after.at(name) == bytes) << name;
    }
}

TEST_F(CliTest, NonFiniteLossExitsWithDiagnostics) {
    const auto out = dir("nan");
    const auto r = run(cat(cat({"pretrain", "--data", data(), "--out", out.string(), "--set", "loss.w_rgb=1e308",
                                "--set", "opt.lr_peak=1e300"},
                               kData),
                           kModel));
    EXPECT_EQ(r.code, kExitRuntime) << r.err;
    ASSERT_TRUE(fs::exists(out / "diagnostics.txt"));
    const auto text = io::read_file(out / "diagnostics.txt");
    EXPECT_NE(std::string(text.begin(), text.end()).find("grad_norm"), std::string::npos);
}

TEST_F(CliTest, RenderWritesPredictionsAndGroundTruth) {
    const auto out = dir("render");
    auto args = cat(cat({"render", "--data", data(), "--checkpoint", pretrained(), "--out", out.string()}, kData),
                    {"--set", "model.queries=32"});
    ASSERT_EQ(run(args).code, 0);
    EXPECT_EQ(count_files(out, ".ppm"), 4u);  // 2 views predicted + 2 ground truth
    EXPECT_EQ(count_files(out, ".pfm"), 4u);
    const auto first = snapshot(out);
    args.push_back("--force");
    ASSERT_EQ(run(args).code, 0);
    EXPECT_TRUE(snapshot(out) == first);

    // Query count differs from the checkpoint.
    auto mismatch = cat(cat({"render", "--data", data(), "--checkpoint", pretrained(), "--out",
                             dir("render_bad").string()},
                            kData),
                        {"--set", "model.queries=16"});
    EXPECT_EQ(run(mismatch).code, kExitUsage);
}

TEST_F(CliTest, RenderUntrainedModelIsDarkAndFinite) {
    const auto rec = scene::read_scene_dir(scene::list_scene_dirs(data()).front());
    RunConfig c;
    c.apply_assignment("model.queries=32");
    pretrain::PretrainModel m(c.pretrain_config(), rec.scene.bounds, 2, 32, 32, false);
    const auto ckpt = dir("untrained.sqsckpt");
    ad::save_checkpoint(ckpt, m.parameters());
    const auto out = dir("render_untrained");
    ASSERT_EQ(run(cat(cat({"render", "--data", data(), "--checkpoint", ckpt.string(), "--out", out.string()}, kData),
                      {"--set", "model.queries=32"}))
                  .code,
              0);
    const auto rgb = render::read_ppm(out / "pred_view0.ppm");
    const auto depth = render::read_pfm(out / "pred_view0.pfm");
    EXPECT_TRUE(depth.all_finite());
    double mean = 0.0;
    for (double v : rgb.values()) mean += v / static_cast<double>(rgb.size());
    EXPECT_LT(mean, 0.5);
}

TEST_F(CliTest, FinetuneTrainFractionAndFreeze) {
    const auto before = io::read_file(pretrained());
    const auto out = dir("ft_frac");
    auto args = finetune_args(out.string());
    args.insert(args.end(), {"--train-fraction", "0.25", "--set", "finetune.eval_fraction=0"});
    const auto r = run(args);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("interaction: 1 training scenes"), std::string::npos) << r.out;  // ceil(0.25 * 4)
    EXPECT_TRUE(io::read_file(pretrained()) == before);
    std::string header;
    const auto rows = read_csv(out / "finetune_interaction.csv", &header);
    EXPECT_EQ(header, "step,loss,iou_occupied,miou");
    EXPECT_EQ(rows.size(), 6u);
}

TEST_F(CliTest, PairedRunEmitsBothVariants) {
    const auto out = dir("ft_paired");
    auto args = finetune_args(out.string());
    args.push_back("--paired");
    const auto r = run(args);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("3 training scenes"), std::string::npos);  // one of four held out
    for (const char* v : {"baseline", "interaction"}) {
        EXPECT_EQ(read_csv(out / (std::string("finetune_") + v + ".csv")).size(), 6u) << v;
        EXPECT_TRUE(fs::exists(out / (std::string("task_") + v + ".sqsckpt"))) << v;
    }
    std::string header;
    const auto table = read_csv(out / "ablation.csv", &header);
    EXPECT_EQ(header, "variant,steps,final_loss,iou_occupied,miou,eval_iou_occupied,eval_miou");
    EXPECT_EQ(table.size(), 2u);

    // Eval reloads the task checkpoint of the matching variant only.
    auto eval = cat(cat({"eval", "--data", data(), "--pretrained", pretrained(), "--task",
                         (out / "task_interaction.sqsckpt").string(), "--out", dir("eval").string(), "--grid", "8",
                         "--set", "finetune.task_dim=16", "--set", "finetune.head_hidden=16", "--set",
                         "model.queries=32"},
                        kData),
                    {});
    const auto e = run(eval);
    ASSERT_EQ(e.code, 0) << e.err;
    const auto metrics = read_csv(dir("eval") / "eval.csv");
    ASSERT_EQ(metrics.size(), 1u);
    EXPECT_EQ(metrics[0][0], 1.0);
    auto wrong = eval;
    wrong.insert(wrong.end(), {"--no-interaction", "--out", dir("eval_bad").string()});
    EXPECT_EQ(run(wrong).code, kExitUsage);
}

TEST_F(CliTest, EvalPerfectPredictor) {
    const auto r = run(cat({"eval", "--data", data(), "--perfect", "--out", dir("perfect").string()}, kData));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rows = read_csv(dir("perfect") / "eval.csv");
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0][3], 1.0);
}

TEST_F(CliTest, FinetuneNeedsPretrainedCheckpoint) {
    auto args = finetune_args(dir("ft_missing").string());
    args.insert(args.end(), {"--pretrained", dir("absent.sqsckpt").string()});
    EXPECT_EQ(run(args).code, kExitUsage);
}

TEST_F(CliTest, DeterministicAcrossThreadCounts) {
    struct Case {
        std::string name;
        std::vector<std::string> args;
    };
    const std::vector<Case> cases = {
        {"gen", cat({"gen-data", "--set", "data.n_scenes=2"}, kData)},
        {"pre", cat(cat({"pretrain", "--data", data()}, kData), kModel)},
        {"ren", cat(cat({"render", "--data", data(), "--checkpoint", pretrained()}, kData),
                    {"--set", "model.queries=32"})},
    };
    for (const auto& c : cases) {
        const auto out = dir("threads_" + c.name);
        auto a = c.args;
        a.insert(a.end(), {"--out", out.string(), "--force", "--threads", "1"});
        ASSERT_EQ(run(a).code, 0) << c.name;
        const auto one = snapshot(out);
        a.back() = "3";
        ASSERT_EQ(run(a).code, 0) << c.name;
        EXPECT_TRUE(snapshot(out) == one) << c.name;
    }
    const auto out = dir("threads_ft");
    auto a = finetune_args(out.string());
    a.insert(a.end(), {"--paired", "--force", "--threads", "1"});
    ASSERT_EQ(run(a).code, 0);
    const auto one = snapshot(out);
    a.back() = "3";
    ASSERT_EQ(run(a).code, 0);
    EXPECT_TRUE(snapshot(out) == one);
}

TEST(CliGradcheck, PassesAndFaultFails) {
    const auto base = fs::temp_directory_path() / ("sqs_gc_" + std::to_string(::getpid()));
    fs::remove_all(base);
    auto r = run({"gradcheck", "--out", (base / "ok").string()});
    EXPECT_EQ(r.code, kExitOk) << r.out;
    for (const char* group : {"renderer,mu", "renderer,quat", "renderer,scale", "renderer,opacity", "renderer,color",
                              "decoder,decoder.anchors", "decoder,encoder.stem.w", "interaction,task_features"})
        EXPECT_NE(r.out.find(group), std::string::npos) << group;
    r = run({"gradcheck", "--out", (base / "bad").string(), "--inject-fault", "renderer"});
    EXPECT_EQ(r.code, kExitRuntime);
    EXPECT_EQ(run({"gradcheck", "--dry-run", "--inject-fault", "nothing"}).code, kExitUsage);
    fs::remove_all(base);
}
