#include "sqs/cli/gradcheck_suite.hpp"

#include "sqs/autodiff/gradcheck.hpp"
#include "sqs/finetune/finetune.hpp"
#include "sqs/pretrain/pretrain.hpp"
#include "sqs/render/render_op.hpp"

namespace sqs::cli {

namespace {

using ad::Array;

Array uniform(ad::Shape shape, std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    Array a(std::move(shape));
    for (auto& v : a.values()) v = u(rng);
    return a;
}

void renderer(std::uint64_t seed, double sign, std::vector<GradcheckEntry>& out) {
    scene::SceneConfig sc;
    sc.n_objects = 2;
    sc.gaussians_per_object = 8;
    sc.n_views = 1;
    sc.width = 32;
    sc.height = 24;
    const auto s = scene::generate_scene(sc, seed);
    auto gs = s.gaussians;
    for (auto& g : gs) g.scale *= 3.0;
    const auto arrays = render::gaussians_to_arrays(gs);
    ad::Graph g;
    const char* names[] = {"mu", "quat", "scale", "opacity", "color"};
    render::GaussianNodes nodes;
    nodes.mu = g.input(names[0], arrays[0].shape(), true);
    nodes.quat = g.input(names[1], arrays[1].shape(), true);
    nodes.scale = g.input(names[2], arrays[2].shape(), true);
    nodes.opacity = g.input(names[3], arrays[3].shape(), true);
    nodes.color = g.input(names[4], arrays[4].shape(), true);
    const auto row = geom::camera_to_row(s.cameras[0]);
    auto img = render::add_render_node(g, nodes, g.constant(Array({geom::kCameraRowSize}, {row.begin(), row.end()})),
                                       sc.width, sc.height, render::RenderSettings::check_mode());
    std::mt19937_64 rng(seed + 1);
    const Array weights = uniform(g.shape(img), rng, -1.0, 1.0);
    std::map<std::string, Array> in;
    for (int i = 0; i < 5; ++i) in[names[i]] = arrays[static_cast<std::size_t>(i)];
    auto root = g.sum(g.multiply(img, g.constant(weights)));
    for (const char* name : names) {
        const auto r = ad::check_graph_gradient(g, root, name, in, Array::scalar(1.0), 1e-5, std::nullopt, sign);
        out.push_back({"renderer", name, r.max_relative_error, r.checked});
    }
}

void decoder(std::uint64_t seed, double sign, std::vector<GradcheckEntry>& out) {
    scene::SceneConfig sc;
    sc.n_views = 2;
    sc.width = 32;
    sc.height = 32;
    sc.gaussians_per_object = 40;
    const auto s = scene::generate_scene(sc, seed);
    const auto sample = scene::sparsify_depth(scene::bake_ground_truth(s), 0.5, seed);
    pretrain::PretrainConfig cfg;
    cfg.decoder.K = 24;
    cfg.seed = seed;
    cfg.render = render::RenderSettings::check_mode();
    pretrain::PretrainModel m(cfg, s.bounds, 2, sc.width, sc.height);
    auto& g = m.graph();
    const auto in = m.inputs(sample);
    for (const auto& name : g.parameter_names()) {
        const bool weight = name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0;
        const bool encoder = name.rfind("encoder.", 0) == 0;
        if (!(encoder || weight || name == "decoder.anchors" || name == "decoder.features")) continue;
        // Most gradients here are 1e-9..1e-6 against an O(0.1) loss. Take the
        // widest step at which some probes look smooth: wide steps keep
        // rounding out, the probe filter keeps relu and bilinear kinks out.
        double eps = 0.0;
        std::vector<std::size_t> idx;
        for (const double h : {1e-3, 1e-4, 1e-5, 1e-6}) {
            idx = ad::smooth_probe_indices(g, m.loss(), name, in, Array::scalar(1.0), h, 4, 48);
            eps = h;
            if (!idx.empty()) break;
        }
        const auto r = ad::check_graph_gradient(g, m.loss(), name, in, Array::scalar(1.0), eps, idx, sign);
        // A group without a usable probe counts as failed.
        out.push_back({"decoder", name, idx.empty() ? 1.0 : r.max_relative_error, r.checked});
    }
}

void interaction(std::uint64_t seed, double sign, std::vector<GradcheckEntry>& out) {
    const std::size_t m = 6, n = 9, d = 8, dp = 10, k = 3;
    ad::Graph g;
    auto f = g.input("task_features", {m, d}, true);
    auto anchors = g.input("anchors", {n, finetune::kAnchorCode}, true);
    auto feats = g.input("pretrained_features", {n, dp}, true);
    finetune::InteractionConfig cfg;
    cfg.k = k;
    cfg.pos_hidden = 8;
    cfg.anchor_hidden = 8;
    model::Rng rng(seed);
    auto x = finetune::local_query_interaction(g, f, g.input("pos", {m, 3}), anchors, feats, g.input("knn", {m, k}),
                                               g.input("gate", {}), cfg, "interaction", rng);
    auto logits = finetune::occupancy_head(g, g.layer_norm(x), 8, 2, "head", rng);
    auto loss = g.cross_entropy(logits, g.input("labels", {m}));
    std::mt19937_64 r(seed + 2);
    // The output projection starts at zero, which would zero every gradient
    // behind it; check at a generic point instead.
    g.mutable_parameter("interaction.out.w") = uniform({d, d}, r, -0.5, 0.5);
    std::map<std::string, Array> in = {{"task_features", uniform({m, d}, r, -1, 1)},
                                       {"anchors", uniform({n, finetune::kAnchorCode}, r, -1, 1)},
                                       {"pretrained_features", uniform({n, dp}, r, -1, 1)},
                                       {"pos", uniform({m, 3}, r, -1, 1)},
                                       {"gate", Array::scalar(1.0)}};
    Array anchor_pos({n, 3});
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t a = 0; a < 3; ++a) anchor_pos(j, a) = in["anchors"](j, a);
    const auto idx = finetune::knn_neighbors(in["pos"], anchor_pos, k);
    Array knn_in({m, k});
    for (std::size_t i = 0; i < idx.size(); ++i) knn_in[i] = static_cast<double>(idx[i]);
    in["knn"] = knn_in;
    Array labels({m});
    for (std::size_t i = 0; i < m; ++i) labels[i] = static_cast<double>(i % 2);
    in["labels"] = labels;
    std::vector<std::string> groups = g.parameter_names();
    groups.insert(groups.begin(), {"task_features", "anchors", "pretrained_features"});
    for (const auto& name : groups) {
        const auto res = ad::check_graph_gradient(g, loss, name, in, Array::scalar(1.0), 1e-6, std::nullopt, sign);
        out.push_back({"interaction", name, res.max_relative_error, res.checked});
    }
}

} // namespace

std::vector<GradcheckEntry> run_gradcheck_suite(std::uint64_t seed, const std::string& fault) {
    std::vector<GradcheckEntry> out;
    renderer(seed, fault == "renderer" ? -1.0 : 1.0, out);
    decoder(seed, fault == "decoder" ? -1.0 : 1.0, out);
    interaction(seed, fault == "interaction" ? -1.0 : 1.0, out);
    return out;
}

} // namespace sqs::cli
