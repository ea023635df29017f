// Acceptance suite: one pass/fail line per criterion.
//   sqs_acceptance [--only 1,3,7] [--work DIR] [--keep]
#include "sqs/cli/commands.hpp"
#include "sqs/cli/config.hpp"
#include "sqs/core/error.hpp"
#include "sqs/geometry/gaussian.hpp"
#include "sqs/io/binary.hpp"
#include "sqs/pretrain/pretrain.hpp"
#include "sqs/render/rasterizer.hpp"
#include "sqs/scene/scene.hpp"

#include <CLI11.hpp>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

using namespace sqs;
namespace fs = std::filesystem;
using geom::Mat3;
using geom::Mat4;
using geom::Vec2;
using geom::Vec3;
using geom::Vec4;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Vec4 random_quat(std::mt19937_64& rng) {
    std::normal_distribution<double> n;
    Vec4 q(n(rng), n(rng), n(rng), n(rng));
    return q / q.norm();
}

// Hamilton product, (w, x, y, z).
Vec4 quat_mul(const Vec4& a, const Vec4& b) {
    return {a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]};
}

double max_abs_diff(const ad::Array& a, const ad::Array& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

struct CliRun {
    int code;
    std::string out, err;
};

CliRun cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

void require_ok(const CliRun& r, const std::string& what) {
    if (r.code != 0) throw Error(what + " exited " + std::to_string(r.code) + ": " + r.err);
}

std::map<std::string, std::vector<char>> snapshot(const fs::path& dir) {
    std::map<std::string, std::vector<char>> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = io::read_file(e.path());
    return files;
}

// Header name -> column, rows as text cells.
struct Csv {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::size_t col(const std::string& name) const {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw FormatError("csv: no column " + name);
        return static_cast<std::size_t>(it - header.begin());
    }
};

Csv read_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    auto split = [](const std::string& line) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cells.push_back(c);
        return cells;
    };
    Csv csv;
    std::string line;
    std::getline(in, line);
    csv.header = split(line);
    while (std::getline(in, line))
        if (!line.empty()) csv.rows.push_back(split(line));
    return csv;
}

// 1. tiled renderer against the brute-force oracle.
Outcome oracle_equivalence() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(101);
    double rgb_err = 0.0, depth_err = 0.0;
    std::size_t max_gaussians = 0;
    for (int s = 0; s < 50; ++s) {
        scene::SceneConfig sc;
        sc.n_objects = std::uniform_int_distribution<int>(1, 5)(rng);
        sc.gaussians_per_object = std::uniform_int_distribution<int>(8, 500 / sc.n_objects)(rng);
        sc.n_views = 4;
        const auto scn = scene::generate_scene(sc, rng());
        max_gaussians = std::max(max_gaussians, scn.gaussians.size());
        for (const auto& cam : scn.cameras) {
            const auto a = render::render(scn.gaussians, cam);
            const auto b = render::render_reference(scn.gaussians, cam);
            rgb_err = std::max(rgb_err, max_abs_diff(a.rgb, b.rgb));
            depth_err = std::max(depth_err, max_abs_diff(a.depth, b.depth));
        }
    }
    const double t = seconds_since(t0);
    return {rgb_err < 1e-6 && depth_err < 1e-6 && t < 60.0 && max_gaussians <= 500,
            "50 scenes x 4 views, <=" + std::to_string(max_gaussians) + " Gaussians: rgb " + fmt("%.2e", rgb_err) +
                ", depth " + fmt("%.2e", depth_err) + ", " + fmt("%.1f", t) + " s"};
}

// 2. finite-difference suite through the CLI.
Outcome gradient_suite(const fs::path& work) {
    const auto r = cli({"gradcheck", "--out", (work / "gradcheck").string(), "--force"});
    const auto csv = read_csv(work / "gradcheck" / "gradcheck.csv");
    std::map<std::string, double> worst;
    for (const auto& row : csv.rows) {
        double& w = worst[row[csv.col("component")]];
        w = std::max(w, std::stod(row[csv.col("max_relative_error")]));
    }
    std::string d = "exit " + std::to_string(r.code);
    bool pass = r.code == 0;
    for (const char* c : {"renderer", "decoder", "interaction"}) {
        if (!worst.count(c)) pass = false;
        d += std::string(", ") + c + " " + fmt("%.2e", worst[c]);
        pass = pass && worst[c] < 1e-4;
    }
    return {pass, d + " (" + std::to_string(csv.rows.size()) + " groups)"};
}

// 3. sum of compositing weights equals alpha_acc; two-Gaussian hand case.
Outcome compositing_invariant() {
    scene::SceneConfig sc;
    const auto scn = scene::generate_scene(sc, 7);
    const render::RenderSettings settings;
    double worst = 0.0;
    for (const auto& cam : scn.cameras) {
        const auto out = render::render(scn.gaussians, cam, settings);
        std::vector<geom::ProjectedGaussian> proj(scn.gaussians.size());
        std::vector<char> vis(scn.gaussians.size(), 0);
        for (std::size_t i = 0; i < scn.gaussians.size(); ++i) {
            if (auto p = geom::project_gaussian(scn.gaussians[i], cam, settings.projection)) {
                proj[i] = *p;
                vis[i] = 1;
            }
        }
        const auto order = render::sort_by_distance(proj, vis);
        for (int y = 0; y < cam.height; ++y) {
            for (int x = 0; x < cam.width; ++x) {
                double t = 1.0, wsum = 0.0;
                for (const auto i : order) {
                    const double a = render::pixel_alpha(proj[i], Vec2(x, y), settings);
                    if (a <= 0.0) continue;
                    wsum += a * t;
                    t *= 1.0 - a;
                    if (t < settings.early_stop) break;
                }
                worst = std::max(worst, std::abs(wsum - out.alpha_acc[std::size_t(y) * cam.width + x]));
            }
        }
    }
    const std::vector<render::Contribution> two = {{0.5, Vec3(1, 0, 0), 2.0}, {1.0, Vec3(0, 1, 0), 4.0}};
    const auto c = render::alpha_composite(two);
    const bool hand = c.color == Vec3(0.5, 0.5, 0.0) && c.depth == 3.0 && c.alpha_acc == 1.0;
    return {worst <= 1e-12 && hand, "max |sum w - alpha_acc| " + fmt("%.2e", worst) + ", two-Gaussian case " +
                                        (hand ? "exact" : "mismatch")};
}

// 4. covariance eigenvalues are the squared scales.
Outcome eigen_invariant() {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-3.0, 1.0);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const Vec3 s(std::pow(10.0, u(rng)), std::pow(10.0, u(rng)), std::pow(10.0, u(rng)));
        const Mat3 cov = geom::covariance_from_scale_rotation(s, random_quat(rng));
        Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
        Vec3 want = s.cwiseProduct(s);
        std::sort(want.data(), want.data() + 3);
        worst = std::max(worst, (es.eigenvalues() - want).cwiseAbs().maxCoeff());
    }
    return {worst < 1e-10, "1000 pairs, max eigenvalue error " + fmt("%.2e", worst)};
}

// 5. moving scene and cameras together leaves every render unchanged.
Outcome rigid_invariance() {
    std::mt19937_64 rng(5);
    double worst = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        scene::SceneConfig sc;
        const auto scn = scene::generate_scene(sc, 50 + trial);
        const Vec4 q = random_quat(rng);
        const Mat3 r = geom::quaternion_to_rotation(q);
        std::uniform_real_distribution<double> u(-5.0, 5.0);
        const Vec3 t(u(rng), u(rng), u(rng));
        Mat4 m = Mat4::Identity();
        m.topLeftCorner<3, 3>() = r;
        m.topRightCorner<3, 1>() = t;
        auto moved = scn.gaussians;
        for (auto& g : moved) {
            g.mu = r * g.mu + t;
            g.quat = quat_mul(q, g.quat);
        }
        for (const auto& cam : scn.cameras) {
            auto cam2 = cam;
            cam2.extrinsics = m * cam.extrinsics;
            const auto a = render::render(scn.gaussians, cam);
            const auto b = render::render(moved, cam2);
            worst = std::max({worst, max_abs_diff(a.rgb, b.rgb), max_abs_diff(a.depth, b.depth),
                              max_abs_diff(a.alpha_acc, b.alpha_acc)});
        }
    }
    return {worst < 1e-9, "5 scenes x 4 views, max output change " + fmt("%.2e", worst)};
}

// 6. defaults carry the published constants.
Outcome default_constants() {
    cli::RunConfig cfg;
    const auto pc = cfg.pretrain_config();
    const double lr500 = pretrain::lr_schedule(500, pc.steps, pc.warmup_steps, pc.lr_peak);
    const double lr_end = pretrain::lr_schedule(pc.steps, pc.steps, pc.warmup_steps, pc.lr_peak);
    const bool pass = pc.loss.w_rgb == 1.0 && pc.loss.w_depth == 0.05 && lr500 == 2e-4 && std::abs(lr_end) <= 1e-12 &&
                      pc.weight_decay == 0.01 && pc.decoder.n_layers == 2;
    std::ostringstream d;
    d << "w_rgb " << pc.loss.w_rgb << ", w_depth " << pc.loss.w_depth << ", lr(500) " << lr500 << ", lr("
      << pc.steps << ") " << lr_end << ", weight decay " << pc.weight_decay << ", layers " << pc.decoder.n_layers;
    return {pass, d.str()};
}

// 7. default model overfits one scene.
Outcome overfit() {
    cli::RunConfig cfg;
    cfg.set("aug.hflip_prob", 0.0);
    const auto sc = cfg.scene_config();
    auto pc = cfg.pretrain_config();
    const auto scn = scene::generate_scene(sc, cfg.seed());
    const auto sample = scene::bake_ground_truth(scn);
    const auto t0 = std::chrono::steady_clock::now();
    pretrain::Pretrainer trainer(pc, {sample}, scn.bounds);
    double initial = 0.0;
    while (!trainer.done()) {
        const auto rec = trainer.step();
        if (rec.step == 1) initial = rec.loss;
    }
    const double final_loss = trainer.model().forward(sample);
    const double mae = trainer.model().depth_mae();
    const double t = seconds_since(t0);
    const double extent = scn.bounds.extent();
    return {final_loss <= 0.1 * initial && mae <= 0.02 * extent && t <= 600.0,
            std::to_string(pc.decoder.K) + " queries, " + std::to_string(pc.steps) + " steps: loss " +
                fmt("%.4g", initial) + " -> " + fmt("%.4g", final_loss) + " (" + fmt("%.1f%%", 100 * final_loss / initial) +
                "), depth MAE " + fmt("%.4f", mae) + " m (limit " + fmt("%.3f", 0.02 * extent) + "), " + fmt("%.0f", t) +
                " s"};
}

// Shared by 8 and 9: a seeded paired fine-tune from a short pre-training run.
struct PairedRun {
    fs::path data, pre, ft;
    std::vector<char> ckpt_before, ckpt_after;
};

// Pre-training and fine-tuning share the training scenes; the last scene is
// held out.
const std::vector<std::string> kPairedData = {"--seed", "8", "--set", "data.n_scenes=9", "--set",
                                              "finetune.eval_fraction=0.1"};
const std::vector<std::string> kPairedPretrain = {"--set", "train.steps=1500", "--set", "opt.warmup_steps=375",
                                                  "--set", "train.checkpoint_every=0", "--set",
                                                  "train.snapshot_every=0"};

PairedRun paired_run(const fs::path& work) {
    PairedRun p{work / "paired_data", work / "paired_pre", work / "paired_ft", {}, {}};
    auto with = [](std::vector<std::string> a, const std::vector<std::string>& b) {
        a.insert(a.end(), b.begin(), b.end());
        return a;
    };
    require_ok(cli(with({"gen-data", "--out", p.data.string(), "--force"}, kPairedData)), "gen-data");
    require_ok(cli(with(with({"pretrain", "--data", p.data.string(), "--out", p.pre.string(), "--force"}, kPairedData),
                        kPairedPretrain)),
               "pretrain");
    const auto ckpt = p.pre / "model.sqsckpt";
    p.ckpt_before = io::read_file(ckpt);
    require_ok(cli(with({"finetune", "--data", p.data.string(), "--pretrained", ckpt.string(), "--out", p.ft.string(),
                         "--paired", "--force"},
                        kPairedData)),
               "finetune");
    p.ckpt_after = io::read_file(ckpt);
    return p;
}

// 8. at step 500 the interaction variant matches or beats the baseline on
// loss and occupied IoU; held-out IoU is reported alongside.
Outcome interaction_ablation(const PairedRun& p) {
    const auto base = read_csv(p.ft / "finetune_baseline.csv");
    const auto inter = read_csv(p.ft / "finetune_interaction.csv");
    const auto table = read_csv(p.ft / "ablation.csv");
    if (base.rows.empty() || inter.rows.empty()) throw FormatError("empty fine-tune log");
    const auto& b = base.rows.back();
    const auto& i = inter.rows.back();
    if (b[base.col("step")] != i[inter.col("step")]) throw FormatError("fine-tune logs end at different steps");
    const double lb = std::stod(b[base.col("loss")]), li = std::stod(i[inter.col("loss")]);
    const double ib = std::stod(b[base.col("iou_occupied")]), ii = std::stod(i[inter.col("iou_occupied")]);
    std::map<std::string, double> held;
    for (const auto& row : table.rows) held[row[table.col("variant")]] = std::stod(row[table.col("eval_iou_occupied")]);
    return {li <= lb && ii >= ib,
            "step " + b[base.col("step")] + ": loss " + fmt("%.5f", li) + " vs baseline " + fmt("%.5f", lb) +
                ", occupied IoU " + fmt("%.4f", ii) + " vs " + fmt("%.4f", ib) + " (held-out " +
                fmt("%.4f", held.at("interaction")) + " vs " + fmt("%.4f", held.at("baseline")) + ")"};
}

// 9. fine-tuning leaves the pre-trained checkpoint untouched.
Outcome freeze_contract(const PairedRun& p) {
    const bool same = !p.ckpt_before.empty() && p.ckpt_before == p.ckpt_after;
    return {same, std::to_string(p.ckpt_before.size()) + " checkpoint bytes " + (same ? "identical" : "changed") +
                      " across both fine-tune variants"};
}

// 10. every command reproduces its outputs at different thread counts.
Outcome determinism(const fs::path& work) {
    const std::vector<std::string> small = {"--seed",       "10", "--set", "data.n_scenes=3", "--set",
                                            "data.n_views=2", "--set", "data.width=32", "--set", "data.height=32",
                                            "--set", "data.gaussians_per_object=24", "--set", "model.queries=32",
                                            "--set", "train.steps=12", "--set", "opt.warmup_steps=3", "--set",
                                            "train.checkpoint_every=6", "--set", "train.snapshot_every=6", "--set",
                                            "finetune.steps=12", "--set", "finetune.warmup_steps=3", "--set",
                                            "finetune.grid=8"};
    std::vector<std::string> report;
    bool pass = true;
    std::map<std::string, std::map<std::string, std::vector<char>>> first;
    std::map<std::string, std::string> first_stdout;
    for (const char* threads : {"1", "3", "1"}) {
        // Same paths every pass: config.resolved and stdout name them.
        const fs::path root = work / "det";
        fs::remove_all(root);
        auto run = [&](const std::string& name, std::vector<std::string> args) {
            const fs::path out = root / name;
            args.insert(args.end(), {"--out", out.string(), "--threads", threads, "--force"});
            args.insert(args.end(), small.begin(), small.end());
            const auto r = cli(args);
            require_ok(r, name);
            const auto files = snapshot(out);
            if (!first.count(name)) {
                first[name] = files;
                first_stdout[name] = r.out;
            } else if (files != first[name] || r.out != first_stdout[name]) {
                pass = false;
                report.push_back(name + " differs at --threads " + threads);
            }
        };
        const auto data = (root / "gen").string();
        const auto ckpt = (root / "pre" / "model.sqsckpt").string();
        run("gen", {"gen-data"});
        run("pre", {"pretrain", "--data", data});
        run("ren", {"render", "--data", data, "--checkpoint", ckpt});
        run("ft", {"finetune", "--data", data, "--pretrained", ckpt, "--paired"});
        run("ev", {"eval", "--data", data, "--pretrained", ckpt, "--task",
                   (root / "ft" / "task_interaction.sqsckpt").string()});
        run("gc", {"gradcheck"});
    }
    std::size_t files = 0;
    for (const auto& [_, f] : first) files += f.size();
    std::string d = "gen-data, pretrain, render, finetune, eval, gradcheck at --threads 1/3/1: " +
                    std::to_string(files) + " files per run";
    for (const auto& r : report) d += "; " + r;
    return {pass, d};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance suite"};
    std::string only;
    std::string work_arg;
    bool keep = false;
    app.add_option("--only", only, "comma-separated criteria to run");
    app.add_option("--work", work_arg, "scratch directory");
    app.add_flag("--keep", keep, "keep the scratch directory");
    CLI11_PARSE(app, argc, argv);

    std::set<int> selected;
    {
        std::stringstream ss(only);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) selected.insert(std::stoi(tok));
    }
    auto wanted = [&](int c) { return selected.empty() || selected.count(c); };

    const fs::path work =
        work_arg.empty() ? fs::temp_directory_path() / ("sqs_acceptance_" + std::to_string(::getpid())) : fs::path(work_arg);
    fs::create_directories(work);

    int failed = 0;
    auto report = [&](int id, const char* name, const std::function<Outcome()>& body) {
        if (!wanted(id)) return;
        Outcome o;
        try {
            o = body();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("criterion %2d %-28s %s  %s\n", id, name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
        std::fflush(stdout);
    };

    report(1, "oracle-equivalence", oracle_equivalence);
    report(2, "gradient-suite", [&] { return gradient_suite(work); });
    report(3, "compositing-invariant", compositing_invariant);
    report(4, "eigen-invariant", eigen_invariant);
    report(5, "rigid-invariance", rigid_invariance);
    report(6, "default-constants", default_constants);
    report(7, "single-scene-overfit", overfit);
    if (wanted(8) || wanted(9)) {
        PairedRun p;
        std::string error;
        try {
            p = paired_run(work);
        } catch (const std::exception& e) {
            error = e.what();
        }
        auto guarded = [&](auto f) {
            return [&, f] { return error.empty() ? f(p) : Outcome{false, "paired run failed: " + error}; };
        };
        report(8, "interaction-ablation", guarded(interaction_ablation));
        report(9, "freeze-contract", guarded(freeze_contract));
    }
    report(10, "determinism", [&] { return determinism(work); });

    if (!keep) fs::remove_all(work);
    std::printf("%s\n", failed ? "acceptance FAILED" : "acceptance passed");
    return failed ? 1 : 0;
}
