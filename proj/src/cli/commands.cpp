#include "sqs/cli/commands.hpp"

#include "sqs/autodiff/checkpoint.hpp"
#include "sqs/cli/config.hpp"
#include "sqs/cli/gradcheck_suite.hpp"
#include "sqs/core/error.hpp"
#include "sqs/core/parallel.hpp"
#include "sqs/finetune/finetune.hpp"
#include "sqs/io/binary.hpp"
#include "sqs/pretrain/pretrain.hpp"
#include "sqs/render/image_io.hpp"
#include "sqs/scene/scene.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

namespace sqs::cli {

namespace fs = std::filesystem;
using ad::Array;

namespace {

std::string fmt(const char* format, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, format, v);
    return buf;
}

std::string g17(double v) { return fmt("%.17g", v); }

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Per-scene seed; scene i does not depend on n_scenes.
std::uint64_t scene_seed(std::uint64_t seed, std::size_t i) { return splitmix(splitmix(seed) ^ (i + 1)); }

std::string scene_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "scene_%04zu", i);
    return buf;
}

std::string step_name(const char* prefix, std::size_t step, const char* suffix) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s%06zu%s", prefix, step, suffix);
    return buf;
}

bool non_empty_dir(const fs::path& dir) { return fs::is_directory(dir) && !fs::is_empty(dir); }

void prepare_out_dir(const fs::path& dir, bool force, bool reuse = false) {
    if (fs::exists(dir) && !fs::is_directory(dir)) throw ConfigError("out_dir '" + dir.string() + "' is not a directory");
    if (non_empty_dir(dir) && !force && !reuse)
        throw ConfigError("out_dir '" + dir.string() + "' is not empty; pass --force to write into it");
    fs::create_directories(dir);
}

struct Dataset {
    std::vector<scene::SceneRecord> records;
    scene::Bounds bounds;
};

Dataset load_dataset(const RunConfig& cfg) {
    const fs::path root = cfg.text("data.dir");
    const auto dirs = scene::list_scene_dirs(root);
    if (dirs.empty()) throw InvalidArgument("no scenes under '" + (root / "scenes").string() + "'; run gen-data first");
    Dataset d;
    for (const auto& dir : dirs) d.records.push_back(scene::read_scene_dir(dir));
    d.bounds = d.records.front().scene.bounds;
    for (const auto& r : d.records) {
        if (r.scene.bounds.min != d.bounds.min || r.scene.bounds.max != d.bounds.max)
            throw InvalidArgument("scene '" + r.id + "' has different bounds from '" + d.records.front().id + "'");
        if (r.sample.views() != d.records.front().sample.views())
            throw InvalidArgument("scene '" + r.id + "' has a different view count");
    }
    return d;
}

// Dataset images must match the configured model resolution.
void check_resolution(const RunConfig& cfg, const scene::SceneRecord& rec) {
    const auto& cam = rec.sample.cameras.front();
    if (cam.width != static_cast<int>(cfg.count("data.width")) || cam.height != static_cast<int>(cfg.count("data.height")))
        throw ConfigError("scene '" + rec.id + "' is " + std::to_string(cam.width) + "x" + std::to_string(cam.height) +
                          " but data.width/data.height are " + std::to_string(cfg.count("data.width")) + "x" +
                          std::to_string(cfg.count("data.height")));
}

// Renders [H,W,5] split into an RGB image and a depth map.
std::pair<Array, Array> split_render(const Array& r) {
    const std::size_t h = r.dim(0), w = r.dim(1);
    Array rgb({h, w, 3}), depth({h, w});
    for (std::size_t p = 0; p < h * w; ++p) {
        for (int c = 0; c < 3; ++c) rgb[p * 3 + c] = r[p * 5 + c];
        depth[p] = r[p * 5 + 3];
    }
    return {rgb, depth};
}

void write_views(pretrain::PretrainModel& model, const fs::path& dir, const std::string& prefix) {
    fs::create_directories(dir);
    for (std::size_t v = 0; v < model.views(); ++v) {
        const auto [rgb, depth] = split_render(model.graph().value(model.render(v)));
        render::write_ppm(dir / (prefix + "view" + std::to_string(v) + ".ppm"), rgb);
        render::write_pfm(dir / (prefix + "view" + std::to_string(v) + ".pfm"), depth);
    }
}

// Held-out split: the last ceil(f * n) scenes, leaving at least one for training.
std::size_t eval_count(std::size_t n, double fraction) {
    if (n < 2 || fraction <= 0.0) return 0;
    const auto e = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-12));
    return std::min(e, n - 1);
}

std::string iou_text(double v) { return std::isnan(v) ? "nan" : g17(v); }

// ---------------------------------------------------------------------------

int cmd_gen_data(const RunConfig& cfg, bool force, std::ostream& out) {
    const fs::path dir = cfg.text("out_dir");
    prepare_out_dir(dir, force);
    // Stale scenes from a larger earlier run would change the dataset.
    fs::remove_all(dir / "scenes");
    io::write_text(dir / "config.resolved", cfg.resolved());
    const auto sc = cfg.scene_config();
    const auto n = cfg.count("data.n_scenes");
    const double keep = cfg.number("data.keep_rate");
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = scene_seed(cfg.seed(), i);
        const auto scene = scene::generate_scene(sc, s);
        const auto sample = scene::sparsify_depth(scene::bake_ground_truth(scene), keep, splitmix(s));
        scene::write_scene_dir(dir / "scenes" / scene_name(i), scene, sample);
    }
    out << "wrote " << n << " scenes to " << (dir / "scenes").string() << "\n";
    return kExitOk;
}

// Keeps the header and rows up to `step` of an existing log.
std::string truncated_log(const fs::path& path, const std::string& header, std::size_t step) {
    std::string kept = header + "\n";
    std::ifstream in(path);
    if (!in) return kept;
    std::string line;
    std::getline(in, line);
    if (line != header) throw FormatError("'" + path.string() + "' does not start with '" + header + "'");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto s = std::stoull(line.substr(0, line.find(',')));
        if (s <= step) kept += line + "\n";
    }
    return kept;
}

int cmd_pretrain(const RunConfig& cfg, bool force, std::ostream& out) {
    const auto data = load_dataset(cfg);
    check_resolution(cfg, data.records.front());
    const fs::path dir = cfg.text("out_dir");
    const std::string resume = cfg.text("train.resume");
    prepare_out_dir(dir, force, !resume.empty());
    io::write_text(dir / "config.resolved", cfg.resolved());

    std::vector<scene::SceneSample> samples;
    for (const auto& r : data.records) samples.push_back(r.sample);
    pretrain::Pretrainer trainer(cfg.pretrain_config(), samples, data.bounds);
    if (!resume.empty()) {
        trainer.load(resume);
        if (trainer.current_step() > trainer.config().steps)
            throw ConfigError("checkpoint '" + resume + "' is past train.steps");
        out << "resumed at step " << trainer.current_step() << "\n";
    }

    const std::string header = "step,loss,lr";
    const fs::path log_path = dir / "loss.csv";
    const std::string prefix =
        resume.empty() ? header + "\n" : truncated_log(log_path, header, trainer.current_step());
    std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
    if (!log) throw FormatError("cannot write '" + log_path.string() + "'");
    log << prefix;

    const auto ckpt_every = cfg.count("train.checkpoint_every");
    const auto snap_every = cfg.count("train.snapshot_every");
    const auto total = trainer.config().steps;
    try {
        while (!trainer.done()) {
            const auto rec = trainer.step();
            log << rec.step << ',' << g17(rec.loss) << ',' << g17(rec.lr) << '\n';
            if (rec.step % 100 == 0 || rec.step == 1 || rec.step == total)
                out << "step " << rec.step << " loss " << fmt("%.6g", rec.loss) << " lr " << fmt("%.3g", rec.lr)
                    << "\n";
            if (ckpt_every && rec.step % ckpt_every == 0) {
                fs::create_directories(dir / "checkpoints");
                trainer.save(dir / "checkpoints" / step_name("step_", rec.step, ".sqsckpt"));
            }
            if (snap_every && rec.step % snap_every == 0) {
                trainer.model().forward(data.records.front().sample);
                write_views(trainer.model(), dir / "snapshots", step_name("step_", rec.step, "_"));
            }
        }
    } catch (const NumericError& e) {
        log.flush();
        io::write_text(dir / "diagnostics.txt", std::string(e.what()) + "\n");
        throw;
    }
    log.close();
    trainer.save(dir / "model.sqsckpt");
    out << "wrote " << (dir / "model.sqsckpt").string() << "\n";
    return kExitOk;
}

int cmd_render(const RunConfig& cfg, bool force, std::ostream& out) {
    const std::string ckpt = cfg.text("render.checkpoint");
    if (ckpt.empty()) throw ConfigError("render needs --checkpoint (render.checkpoint)");
    const std::string scene_key = cfg.text("render.scene");
    fs::path scene_dir = scene_key;
    if (scene_key.empty()) {
        const auto dirs = scene::list_scene_dirs(cfg.text("data.dir"));
        if (dirs.empty()) throw InvalidArgument("no scenes under '" + cfg.text("data.dir") + "'");
        scene_dir = dirs.front();
    }
    const auto rec = scene::read_scene_dir(scene_dir);
    check_resolution(cfg, rec);
    const fs::path dir = cfg.text("out_dir");
    prepare_out_dir(dir, force);
    io::write_text(dir / "config.resolved", cfg.resolved());

    const auto& cam = rec.sample.cameras.front();
    pretrain::PretrainModel model(cfg.pretrain_config(), rec.scene.bounds, rec.sample.views(), cam.width, cam.height,
                                  false);
    model.load_parameters(ad::load_checkpoint(ckpt));
    model.forward(rec.sample);
    write_views(model, dir, "pred_");
    for (std::size_t v = 0; v < rec.sample.views(); ++v) {
        render::write_ppm(dir / ("gt_view" + std::to_string(v) + ".ppm"), rec.sample.rgb[v]);
        render::write_pfm(dir / ("gt_view" + std::to_string(v) + ".pfm"), rec.sample.dense_depth[v]);
    }
    out << "rendered " << rec.sample.views() << " views of " << rec.id << " to " << dir.string() << "\n";
    return kExitOk;
}

struct VariantResult {
    std::string name;
    finetune::FinetuneRecord last;
    std::optional<finetune::IoU> eval;
};

VariantResult run_variant(const RunConfig& cfg, bool interaction, const ad::NamedArrays& ckpt, const Dataset& data,
                          std::size_t n_train, const fs::path& dir, std::ostream& out) {
    auto fc = cfg.finetune_config();
    fc.use_interaction = interaction;
    VariantResult res;
    res.name = interaction ? "interaction" : "baseline";
    const std::vector<scene::SceneRecord> pool(data.records.begin(), data.records.begin() + n_train);
    finetune::Finetuner tuner(fc, cfg.pretrain_config(), ckpt, pool, data.bounds);
    out << res.name << ": " << tuner.examples().size() << " training scenes\n";

    const std::string header = "step,loss,iou_occupied,miou";
    std::ostringstream log;
    log << header << '\n';
    while (!tuner.done()) {
        res.last = tuner.step();
        log << res.last.step << ',' << g17(res.last.loss) << ',' << g17(res.last.iou_occupied) << ','
            << g17(res.last.miou) << '\n';
        if (res.last.step % 50 == 0 || res.last.step == fc.steps)
            out << res.name << " step " << res.last.step << " loss " << fmt("%.6g", res.last.loss) << " iou_occ "
                << fmt("%.4f", res.last.iou_occupied) << "\n";
    }
    io::write_text(dir / ("finetune_" + res.name + ".csv"), log.str());
    ad::save_checkpoint(dir / ("task_" + res.name + ".sqsckpt"), tuner.task_parameters());
    if (n_train < data.records.size()) {
        const std::vector<scene::SceneRecord> held(data.records.begin() + n_train, data.records.end());
        res.eval = tuner.evaluate(held);
    }
    return res;
}

int cmd_finetune(const RunConfig& cfg, bool force, std::ostream& out) {
    const std::string pre = cfg.text("finetune.pretrained");
    if (pre.empty()) throw ConfigError("finetune needs --pretrained (finetune.pretrained)");
    const auto data = load_dataset(cfg);
    check_resolution(cfg, data.records.front());
    const auto ckpt = ad::load_checkpoint(pre);
    const fs::path dir = cfg.text("out_dir");
    prepare_out_dir(dir, force);
    io::write_text(dir / "config.resolved", cfg.resolved());

    const auto n = data.records.size();
    const auto n_train = n - eval_count(n, cfg.number("finetune.eval_fraction"));
    std::vector<bool> variants;
    if (cfg.flag("finetune.paired")) variants = {false, true};
    else variants = {cfg.flag("finetune.interaction")};

    std::ostringstream table;
    table << "variant,steps,final_loss,iou_occupied,miou,eval_iou_occupied,eval_miou\n";
    for (const bool v : variants) {
        const auto r = run_variant(cfg, v, ckpt, data, n_train, dir, out);
        table << r.name << ',' << r.last.step << ',' << g17(r.last.loss) << ',' << g17(r.last.iou_occupied) << ','
              << g17(r.last.miou) << ',' << (r.eval ? iou_text(r.eval->per_class.at(1)) : "nan") << ','
              << (r.eval ? iou_text(r.eval->mean) : "nan") << '\n';
    }
    io::write_text(dir / "ablation.csv", table.str());
    out << table.str();
    return kExitOk;
}

int cmd_eval(const RunConfig& cfg, bool force, std::ostream& out) {
    const auto data = load_dataset(cfg);
    const auto n = data.records.size();
    const auto n_eval = eval_count(n, cfg.number("finetune.eval_fraction"));
    // Without a held-out split every scene is scored.
    const std::vector<scene::SceneRecord> held(data.records.begin() + (n_eval ? n - n_eval : 0), data.records.end());
    const fs::path dir = cfg.text("out_dir");
    const auto grid = cfg.count("finetune.grid");

    finetune::IoU iou;
    if (cfg.flag("eval.perfect")) {
        prepare_out_dir(dir, force);
        std::vector<int> all;
        for (const auto& r : held) {
            const auto labels = finetune::occupancy_labels(r.scene, grid);
            all.insert(all.end(), labels.begin(), labels.end());
        }
        iou = finetune::evaluate_iou(all, all);
    } else {
        const std::string pre = cfg.text("finetune.pretrained");
        const std::string task = cfg.text("eval.task");
        if (pre.empty() || task.empty()) throw ConfigError("eval needs --pretrained and --task (or --perfect)");
        check_resolution(cfg, data.records.front());
        const auto ckpt = ad::load_checkpoint(pre);
        const auto task_params = ad::load_checkpoint(task);
        prepare_out_dir(dir, force);
        auto fc = cfg.finetune_config();
        fc.train_fraction = 1.0;
        finetune::Finetuner tuner(fc, cfg.pretrain_config(), ckpt, {held.front()}, data.bounds);
        tuner.load_task_parameters(task_params);
        iou = tuner.evaluate(held);
    }
    io::write_text(dir / "config.resolved", cfg.resolved());
    std::ostringstream csv;
    csv << "scenes,iou_empty,iou_occupied,miou\n"
        << held.size() << ',' << iou_text(iou.per_class.at(0)) << ',' << iou_text(iou.per_class.at(1)) << ','
        << iou_text(iou.mean) << '\n';
    io::write_text(dir / "eval.csv", csv.str());
    out << csv.str();
    return kExitOk;
}

int cmd_gradcheck(const RunConfig& cfg, bool force, std::ostream& out) {
    const fs::path dir = cfg.text("out_dir");
    prepare_out_dir(dir, force);
    io::write_text(dir / "config.resolved", cfg.resolved());
    const auto entries = run_gradcheck_suite(cfg.seed(), cfg.text("gradcheck.fault"));
    std::ostringstream csv;
    csv << "component,group,max_relative_error,checked,status\n";
    std::map<std::string, double> worst;
    bool ok = true;
    for (const auto& e : entries) {
        const bool pass = e.max_relative_error < kGradcheckTolerance;
        ok = ok && pass;
        worst[e.component] = std::max(worst[e.component], e.max_relative_error);
        csv << e.component << ',' << e.group << ',' << fmt("%.6e", e.max_relative_error) << ',' << e.checked << ','
            << (pass ? "pass" : "FAIL") << '\n';
    }
    io::write_text(dir / "gradcheck.csv", csv.str());
    out << csv.str();
    for (const auto& [component, err] : worst)
        out << component << " max relative error " << fmt("%.3e", err)
            << (err < kGradcheckTolerance ? " pass" : " FAIL") << "\n";
    out << (ok ? "gradcheck passed" : "gradcheck FAILED") << " (tolerance " << fmt("%g", kGradcheckTolerance)
        << ")\n";
    return ok ? kExitOk : kExitRuntime;
}

// ---------------------------------------------------------------------------

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::optional<std::string> out_dir;
    std::optional<std::int64_t> seed;
    int threads = 1;
    bool force = false;
    bool dry_run = false;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "JSON config document");
    sub->add_option("--set", c.sets, "override one key, key=value (repeatable)");
    sub->add_option("--out", c.out_dir, "output directory (out_dir)");
    sub->add_option("--seed", c.seed, "global seed (seed)");
    sub->add_option("--threads", c.threads, "worker cap")->check(CLI::PositiveNumber);
    sub->add_flag("--force", c.force, "write into a non-empty output directory");
    sub->add_flag("--dry-run", c.dry_run, "validate the configuration and exit");
}

// Flag values are pushed as key/value pairs after the file and --set.
using Overrides = std::vector<std::pair<std::string, std::function<std::optional<json>()>>>;

template <class T>
void add_key_option(CLI::App* sub, Overrides& ov, const std::string& flag, const std::string& key,
                    std::shared_ptr<std::optional<T>> slot, const std::string& doc) {
    sub->add_option(flag, *slot, doc + " (" + key + ")");
    ov.emplace_back(key, [slot]() -> std::optional<json> {
        if (*slot) return json(**slot);
        return std::nullopt;
    });
}

void add_key_flag(CLI::App* sub, Overrides& ov, const std::string& flag, const std::string& key, bool value,
                  const std::string& doc) {
    auto seen = std::make_shared<bool>(false);
    sub->add_flag(flag, *seen, doc + " (" + key + ")");
    ov.emplace_back(key, [seen, value]() -> std::optional<json> {
        if (*seen) return json(value);
        return std::nullopt;
    });
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Sparse query-based Gaussian splatting pre-training"};
    app.require_subcommand(1, 1);
    Common common;
    std::map<std::string, Overrides> overrides;

    auto str = [] { return std::make_shared<std::optional<std::string>>(); };
    auto num = [] { return std::make_shared<std::optional<double>>(); };
    auto cnt = [] { return std::make_shared<std::optional<std::int64_t>>(); };

    auto* gen = app.add_subcommand("gen-data", "generate and bake synthetic scenes");
    auto* pre = app.add_subcommand("pretrain", "pre-train encoder and query decoder");
    auto* ren = app.add_subcommand("render", "render a checkpoint next to ground truth");
    auto* fin = app.add_subcommand("finetune", "fine-tune an occupancy head on pre-trained queries");
    auto* evl = app.add_subcommand("eval", "occupancy IoU on the held-out scenes");
    auto* grc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    for (auto* s : {gen, pre, ren, fin, evl, grc}) add_common(s, common);

    for (auto* s : {pre, ren, fin, evl}) add_key_option(s, overrides[s->get_name()], "--data", "data.dir", str(), "dataset root");
    add_key_option(pre, overrides["pretrain"], "--resume", "train.resume", str(), "checkpoint to resume from");
    add_key_option(pre, overrides["pretrain"], "--steps", "train.steps", cnt(), "training steps");
    add_key_option(ren, overrides["render"], "--checkpoint", "render.checkpoint", str(), "pre-trained checkpoint");
    add_key_option(ren, overrides["render"], "--scene", "render.scene", str(), "scene directory");
    for (auto* s : {fin, evl}) {
        auto& ov = overrides[s->get_name()];
        add_key_option(s, ov, "--pretrained", "finetune.pretrained", str(), "pre-trained checkpoint");
        add_key_flag(s, ov, "--no-interaction", "finetune.interaction", false, "skip the query interaction");
        add_key_option(s, ov, "--k", "finetune.k", cnt(), "neighbours per task query");
        add_key_option(s, ov, "--alpha-thresh", "finetune.alpha_thresh", num(), "anchor opacity threshold");
        add_key_option(s, ov, "--grid", "finetune.grid", cnt(), "occupancy grid edge");
    }
    add_key_option(fin, overrides["finetune"], "--train-fraction", "finetune.train_fraction", num(),
                   "fraction of training scenes");
    add_key_option(fin, overrides["finetune"], "--steps", "finetune.steps", cnt(), "fine-tune steps");
    add_key_flag(fin, overrides["finetune"], "--paired", "finetune.paired", true, "run both variants");
    add_key_option(evl, overrides["eval"], "--task", "eval.task", str(), "task checkpoint");
    add_key_flag(evl, overrides["eval"], "--perfect", "eval.perfect", true, "score ground truth against itself");
    add_key_option(grc, overrides["gradcheck"], "--inject-fault", "gradcheck.fault", str(),
                   "negate the analytic gradient of a component");

    std::vector<std::string> argv_store{"sqs"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    for (const auto& a : argv_store) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    CLI::App* sub = app.get_subcommands().front();
    const std::string command = sub->get_name();
    try {
        RunConfig cfg;
        if (const char* env = std::getenv("SQS_SEED"); env && *env) {
            char* end = nullptr;
            const auto v = std::strtoll(env, &end, 10);
            if (*end != '\0' || v < 0) throw ConfigError("SQS_SEED must be a non-negative integer, got '" + std::string(env) + "'");
            cfg.set("seed", json(v));
        }
        if (!common.config.empty()) cfg.merge_file(common.config);
        for (const auto& s : common.sets) cfg.apply_assignment(s);
        if (common.out_dir) cfg.set("out_dir", *common.out_dir);
        if (common.seed) cfg.set("seed", *common.seed);
        for (const auto& [key, value] : overrides[command])
            if (auto v = value()) cfg.set(key, *v);
        cfg.validate();
        set_num_threads(common.threads);

        if (common.dry_run) {
            out << cfg.resolved() << "\n" << command << ": configuration valid\n";
            return kExitOk;
        }
        if (command == "gen-data") return cmd_gen_data(cfg, common.force, out);
        if (command == "pretrain") return cmd_pretrain(cfg, common.force, out);
        if (command == "render") return cmd_render(cfg, common.force, out);
        if (command == "finetune") return cmd_finetune(cfg, common.force, out);
        if (command == "eval") return cmd_eval(cfg, common.force, out);
        return cmd_gradcheck(cfg, common.force, out);
    } catch (const ConfigError& e) {
        err << "sqs " << command << ": config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const InvalidArgument& e) {
        err << "sqs " << command << ": " << e.what() << "\n";
        return kExitUsage;
    } catch (const FormatError& e) {
        err << "sqs " << command << ": " << e.what() << "\n";
        return kExitUsage;
    } catch (const ShapeError& e) {
        err << "sqs " << command << ": " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "sqs " << command << ": runtime failure: " << e.what() << "\n";
        return kExitRuntime;
    }
}

} // namespace sqs::cli
