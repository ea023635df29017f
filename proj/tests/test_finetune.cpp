#include "sqs/autodiff/gradcheck.hpp"
#include "sqs/core/error.hpp"
#include "sqs/finetune/finetune.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace sqs;
using namespace sqs::finetune;
using geom::Vec3;

namespace {

Array random_array(ad::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Array a(std::move(shape));
    for (auto& v : a.values()) v = u(rng);
    return a;
}

std::vector<geom::GaussianPrimitive> with_opacities(std::initializer_list<double> ops) {
    std::vector<geom::GaussianPrimitive> gs;
    double x = 0.0;
    for (double o : ops) {
        geom::GaussianPrimitive g;
        g.mu = Vec3(x, 0, 0);
        g.scale = Vec3::Constant(0.05);
        g.opacity = o;
        gs.push_back(g);
        x += 0.1;
    }
    return gs;
}

// Brute force: sort all anchors by (squared distance, index).
std::vector<std::int64_t> knn_oracle(const Array& t, const Array& a, std::size_t k) {
    std::vector<std::int64_t> out;
    for (std::size_t i = 0; i < t.dim(0); ++i) {
        std::vector<std::pair<double, std::size_t>> d;
        for (std::size_t j = 0; j < a.dim(0); ++j) {
            double s = 0;
            for (int c = 0; c < 3; ++c) s += (t(i, c) - a(j, c)) * (t(i, c) - a(j, c));
            d.emplace_back(s, j);
        }
        std::sort(d.begin(), d.end());
        for (std::size_t c = 0; c < k; ++c) out.push_back(static_cast<std::int64_t>(d[c < d.size() ? c : 0].second));
    }
    return out;
}

// Interaction block over graph inputs; parameters seeded identically for a
// given seed regardless of k.
struct Block {
    Graph g;
    NodeRef out;
    std::map<std::string, Array> in;

    Block(std::size_t k, const std::vector<std::int64_t>& knn, std::uint64_t seed = 1, double gate = 1.0) {
        const std::size_t m = 3, n = 5, d = 4, dp = 6;
        auto f = g.input("f", {m, d}, true);
        auto pos = g.input("pos", {m, 3});
        auto anchors = g.input("anchors", {n, kAnchorCode}, true);
        auto feats = g.input("feats", {n, dp}, true);
        auto idx = g.input("knn", {m, k});
        InteractionConfig cfg;
        cfg.k = k;
        cfg.pos_hidden = 5;
        cfg.anchor_hidden = 7;
        Rng rng(seed);
        out = local_query_interaction(g, f, pos, anchors, feats, idx, g.input("gate", {}), cfg, "inter", rng);
        // Away from the zero init, so the attention path reaches the output.
        g.mutable_parameter("inter.out.w") = random_array({d, d}, seed + 20);
        in["f"] = random_array({m, d}, 10);
        in["pos"] = random_array({m, 3}, 11);
        in["anchors"] = random_array({n, kAnchorCode}, 12);
        in["feats"] = random_array({n, dp}, 13);
        Array ki({m, k});
        for (std::size_t i = 0; i < ki.size(); ++i) ki[i] = static_cast<double>(knn[i]);
        in["knn"] = ki;
        in["gate"] = Array::scalar(gate);
    }
    Array run() {
        g.evaluate(in);
        return g.value(out);
    }
};

} // namespace

TEST(FilterByOpacity, Examples) {
    const auto gs = with_opacities({0.01, 0.5, 0.04, 0.9});
    const Array feats = random_array({4, 3}, 1);
    EXPECT_EQ(filter_by_opacity(gs, feats, scene::Bounds{}, 0.0).kept.size(), 4u);
    EXPECT_TRUE(filter_by_opacity(gs, feats, scene::Bounds{}, 1.0).empty());
    const auto f = filter_by_opacity(gs, feats, scene::Bounds{}, 0.05);
    EXPECT_EQ(f.kept, (std::vector<std::size_t>{1, 3}));
    EXPECT_EQ(f.features(1, 2), feats(3, 2));
    EXPECT_EQ(f.anchors.shape(), (ad::Shape{2, kAnchorCode}));
    EXPECT_EQ(f.anchors(1, 10), 0.9);
}

TEST(FilterByOpacity, MonotoneInThreshold) {
    std::vector<geom::GaussianPrimitive> gs;
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 200; ++i) {
        geom::GaussianPrimitive g;
        g.opacity = u(rng);
        gs.push_back(g);
    }
    const Array feats({200, 2});
    std::size_t prev = 201;
    for (double t = 0.0; t <= 1.0; t += 0.05) {
        const auto n = filter_by_opacity(gs, feats, scene::Bounds{}, t).kept.size();
        EXPECT_LE(n, prev);
        prev = n;
    }
}

TEST(Knn, Examples) {
    const Array task({2, 3}, {0, 0, 0, 5, 5, 5});
    EXPECT_EQ(knn_neighbors(task, Array({1, 3}, {1, 2, 3}), 4), (std::vector<std::int64_t>(8, 0)));
    const Array anchors({3, 3}, {0, 0, 3, 2, 0, 0, 0, 1, 0});
    EXPECT_EQ(knn_neighbors(Array({1, 3}), anchors, 2), (std::vector<std::int64_t>{2, 1}));
    // Two anchors short of k: the nearest fills.
    EXPECT_EQ(knn_neighbors(Array({1, 3}), Array({2, 3}, {0, 0, 2, 0, 0, 1}), 4),
              (std::vector<std::int64_t>{1, 0, 1, 1}));
    EXPECT_THROW(knn_neighbors(task, Array({0, 3}), 2), InvalidArgument);
}

TEST(Knn, TiesByAscendingIndex) {
    const Array anchors({4, 3}, {1, 0, 0, 0, 1, 0, -1, 0, 0, 0, 0, 1});
    EXPECT_EQ(knn_neighbors(Array({1, 3}), anchors, 3), (std::vector<std::int64_t>{0, 1, 2}));
}

TEST(Knn, MatchesBruteForce) {
    for (std::size_t n : {100u, 1000u}) {
        const Array anchors = random_array({n, 3}, n);
        const Array task = random_array({64, 3}, n + 1);
        EXPECT_EQ(knn_neighbors(task, anchors, 5), knn_oracle(task, anchors, 5));
    }
    // Lattice points make exact ties common.
    Array lattice({27, 3});
    for (int i = 0; i < 27; ++i) {
        lattice(i, 0) = i % 3;
        lattice(i, 1) = (i / 3) % 3;
        lattice(i, 2) = i / 9;
    }
    const Array task({2, 3}, {1, 1, 1, 0.5, 0.5, 0.5});
    EXPECT_EQ(knn_neighbors(task, lattice, 9), knn_oracle(task, lattice, 9));
}

TEST(Interaction, SingleNeighbourIgnoresAttentionLogits) {
    const std::vector<std::int64_t> knn = {1, 4, 2};
    Block a(1, knn), b(1, knn);
    b.g.mutable_parameter("inter.q.w").fill(0.0);
    b.g.mutable_parameter("inter.k.w").fill(0.0);
    const Array ra = a.run(), rb = b.run();
    for (std::size_t i = 0; i < ra.size(); ++i) EXPECT_NEAR(ra[i], rb[i], 1e-15);
}

TEST(Interaction, IdenticalKeysAverageNeighbours) {
    const std::vector<std::int64_t> four = {0, 1, 2, 3, 4, 0, 1, 2, 3, 3, 3, 0};
    Block a(4, four);
    a.g.mutable_parameter("inter.k.w").fill(0.0);
    const Array ra = a.run();
    // The output projection is affine, so the uniform average of neighbour
    // values maps to the average of single-neighbour outputs.
    std::vector<Array> singles;
    for (std::size_t c = 0; c < 4; ++c) {
        std::vector<std::int64_t> one = {four[c], four[4 + c], four[8 + c]};
        Block b(1, one);
        singles.push_back(b.run());
    }
    for (std::size_t i = 0; i < ra.size(); ++i) {
        double mean = 0.0;
        for (const auto& s : singles) mean += s[i] / 4.0;
        EXPECT_NEAR(ra[i], mean, 1e-12);
    }
}

TEST(Interaction, GateZeroIsIdentity) {
    Block a(2, {0, 1, 2, 3, 4, 0}, 1, 0.0);
    const Array r = a.run();
    EXPECT_TRUE(r.bit_equal(a.in["f"]));
}

TEST(Interaction, FreshBlockIsIdentity) {
    Graph g;
    auto f = g.input("f", {3, 4});
    InteractionConfig cfg;
    cfg.k = 2;
    Rng rng(1);
    auto out = local_query_interaction(g, f, g.input("pos", {3, 3}), g.input("anchors", {5, kAnchorCode}),
                                       g.input("feats", {5, 6}), g.input("knn", {3, 2}), g.input("gate", {}), cfg,
                                       "inter", rng);
    Array knn({3, 2}, {0, 1, 2, 3, 4, 0});
    const Array fv = random_array({3, 4}, 10);
    g.evaluate({{"f", fv}, {"pos", random_array({3, 3}, 11)}, {"anchors", random_array({5, kAnchorCode}, 12)},
                {"feats", random_array({5, 6}, 13)}, {"knn", knn}, {"gate", Array::scalar(1.0)}});
    EXPECT_TRUE(g.value(out).bit_equal(fv));
}

TEST(Interaction, NeighbourOrderDoesNotMatter) {
    Block a(3, {0, 1, 2, 4, 3, 2, 1, 0, 4});
    Block b(3, {2, 0, 1, 2, 4, 3, 4, 1, 0});
    const Array ra = a.run(), rb = b.run();
    for (std::size_t i = 0; i < ra.size(); ++i) EXPECT_NEAR(ra[i], rb[i], 1e-13);
}

TEST(Interaction, RejectsFeatureWidthMismatch) {
    // The adapter is sized for 6-wide pretrained features.
    Block a(2, {0, 1, 2, 3, 4, 0});
    a.in["feats"] = random_array({5, 7}, 3);
    EXPECT_THROW(a.run(), ShapeError);
    Block b(2, {0, 1, 2, 3, 4, 0});
    b.in["knn"] = Array({3, 3});
    EXPECT_THROW(b.run(), ShapeError);
}

TEST(Interaction, GradientThroughInteractionAndHead) {
    Block a(3, {0, 1, 2, 4, 3, 2, 1, 0, 4});
    Rng rng(5);
    auto logits = occupancy_head(a.g, a.g.layer_norm(a.out), 6, 2, "head", rng);
    auto loss = a.g.cross_entropy(logits, a.g.input("labels", {3}));
    a.in["labels"] = Array({3}, {1, 0, 1});
    // Anchor-side gradients are near 4e-7; eps 1e-5 keeps rounding below the tolerance.
    for (const auto& name : a.g.parameter_names()) {
        const auto r = ad::check_graph_gradient(a.g, loss, name, a.in, Array::scalar(1), 1e-5);
        EXPECT_LT(r.max_relative_error, 1e-4) << name << " analytic " << r.analytic << " numeric " << r.numeric;
    }
    for (const char* name : {"f", "anchors", "feats"}) {
        const auto r = ad::check_graph_gradient(a.g, loss, name, a.in, Array::scalar(1), 1e-6);
        EXPECT_LT(r.max_relative_error, 1e-4) << name;
    }
}

TEST(OccupancyHead, ZeroWeightsGiveUniformLogits) {
    Graph g;
    Rng rng(3);
    auto logits = occupancy_head(g, g.constant(random_array({7, 5}, 4)), 8, 2, "head", rng);
    g.mutable_parameter("head.fc1.w").fill(0.0);
    g.mutable_parameter("head.fc2.w").fill(0.0);
    g.evaluate();
    for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(g.value(logits)(i, 0), g.value(logits)(i, 1));
    Graph h;
    Rng rng2(3);
    auto l2 = occupancy_head(h, h.constant(random_array({7, 5}, 4)), 8, 2, "head", rng2);
    h.evaluate();
    Graph h2;
    Rng rng3(3);
    auto l3 = occupancy_head(h2, h2.constant(random_array({7, 5}, 4)), 8, 2, "head", rng3);
    h2.evaluate();
    EXPECT_TRUE(h.value(l2).bit_equal(h2.value(l3)));
}

TEST(EvaluateIou, Examples) {
    const std::vector<int> gt = {1, 1, 0, 0, 0};
    EXPECT_EQ(evaluate_iou(gt, gt).mean, 1.0);
    EXPECT_EQ(evaluate_iou({0, 0, 1, 1, 1}, gt).mean, 0.0);
    const auto r = evaluate_iou({1, 0, 1, 0, 0}, gt);
    EXPECT_DOUBLE_EQ(r.per_class[1], 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(r.per_class[0], 2.0 / 4.0);
    // Occupied absent from both: excluded from the mean.
    const auto empty = evaluate_iou({0, 0}, {0, 0});
    EXPECT_TRUE(std::isnan(empty.per_class[1]));
    EXPECT_EQ(empty.mean, 1.0);
    EXPECT_THROW(evaluate_iou({0}, {0, 1}), ShapeError);
}

TEST(OccupancyLabels, VoxelOfOpaqueMeans) {
    scene::Scene s;
    geom::GaussianPrimitive g;
    g.mu = Vec3(-0.9, -0.9, -0.9);
    g.opacity = 0.8;
    s.gaussians.push_back(g);
    g.mu = Vec3(0.9, 0.9, 0.9);
    g.opacity = 0.4;
    s.gaussians.push_back(g);
    const auto labels = occupancy_labels(s, 4);
    EXPECT_EQ(std::accumulate(labels.begin(), labels.end(), 0), 1);
    EXPECT_EQ(labels[0], 1);
    const Array c = grid_centres(s.bounds, 4);
    EXPECT_DOUBLE_EQ(c(0, 0), -0.75);
    EXPECT_DOUBLE_EQ(c(63, 2), 0.75);
}

TEST(TrainCount, CeilFraction) {
    EXPECT_EQ(train_count(10, 0.25), 3u);
    EXPECT_EQ(train_count(8, 0.25), 2u);
    EXPECT_EQ(train_count(3, 0.01), 1u);
    EXPECT_EQ(train_count(7, 1.0), 7u);
    EXPECT_THROW(train_count(5, 0.0), InvalidArgument);
}

class FinetunerTest : public ::testing::Test {
protected:
    void SetUp() override {
        scene::SceneConfig sc;
        sc.n_views = 2;
        sc.gaussians_per_object = 40;
        for (int i = 0; i < 2; ++i) {
            auto s = scene::generate_scene(sc, 100 + i);
            records.push_back({std::to_string(i), s, scene::sparsify_depth(scene::bake_ground_truth(s), 0.5, i)});
        }
        pre.decoder.K = 32;
        pre.steps = 4;
        pre.warmup_steps = 1;
        pre.lr_peak = 1e-3;
        pretrain::Pretrainer t(pre, {records[0].sample, records[1].sample}, sc.bounds);
        while (!t.done()) t.step();
        checkpoint = ad::encode_checkpoint(t.state());
        ft.grid = 8;
        ft.steps = 6;
        ft.warmup_steps = 1;
        ft.task_dim = 16;
        ft.head_hidden = 16;
        ft.interaction.pos_hidden = 16;
        ft.interaction.anchor_hidden = 16;
        ft.interaction.k = 4;
    }

    std::vector<scene::SceneRecord> records;
    pretrain::PretrainConfig pre;
    FinetuneConfig ft;
    std::vector<char> checkpoint;
};

TEST_F(FinetunerTest, FrozenModelAndCheckpointUnchanged) {
    const auto bytes_before = checkpoint;
    Finetuner f(ft, pre, ad::decode_checkpoint(checkpoint), records, records[0].scene.bounds);
    const auto frozen_before = ad::encode_checkpoint(f.frozen().parameters());
    const auto task_before = ad::encode_checkpoint(f.task_parameters());
    while (!f.done()) f.step();
    EXPECT_EQ(ad::encode_checkpoint(f.frozen().parameters()), frozen_before);
    EXPECT_EQ(checkpoint, bytes_before);
    EXPECT_NE(ad::encode_checkpoint(f.task_parameters()), task_before);
}

TEST_F(FinetunerTest, TaskEncoderStartsFromPretrainedWeights) {
    Finetuner f(ft, pre, ad::decode_checkpoint(checkpoint), records, records[0].scene.bounds);
    const auto ck = ad::decode_checkpoint(checkpoint);
    EXPECT_TRUE(f.task().graph().parameter_value("encoder.stem.w").bit_equal(ad::find_record(ck, "encoder.stem.w")));
}

TEST_F(FinetunerTest, ZeroLrKeepsLossConstant) {
    ft.lr_peak = 0.0;
    Finetuner f(ft, pre, ad::decode_checkpoint(checkpoint), {records[0]}, records[0].scene.bounds);
    const double first = f.step().loss;
    for (int i = 0; i < 3; ++i) EXPECT_EQ(f.step().loss, first);
}

TEST_F(FinetunerTest, DeterministicAndPairedInitialisation) {
    Finetuner a(ft, pre, ad::decode_checkpoint(checkpoint), records, records[0].scene.bounds);
    Finetuner b(ft, pre, ad::decode_checkpoint(checkpoint), records, records[0].scene.bounds);
    for (int i = 0; i < 3; ++i) EXPECT_EQ(a.step().loss, b.step().loss);
    auto plain = ft;
    plain.use_interaction = false;
    Finetuner c(plain, pre, ad::decode_checkpoint(checkpoint), records, records[0].scene.bounds);
    Finetuner d(ft, pre, ad::decode_checkpoint(checkpoint), records, records[0].scene.bounds);
    for (const auto& [name, value] : c.task_parameters())
        EXPECT_TRUE(value.bit_equal(d.task().graph().parameter_value(name))) << name;
}

TEST_F(FinetunerTest, TrainFractionAndMissingCheckpoint) {
    ft.train_fraction = 0.5;
    Finetuner f(ft, pre, ad::decode_checkpoint(checkpoint), records, records[0].scene.bounds);
    EXPECT_EQ(f.examples().size(), 1u);
    EXPECT_THROW(Finetuner(ft, pre, {}, records, records[0].scene.bounds), FormatError);
}

TEST_F(FinetunerTest, EmptyFilterDegradesToIdentity) {
    ft.interaction.alpha_thresh = 1.0;
    Finetuner f(ft, pre, ad::decode_checkpoint(checkpoint), {records[0]}, records[0].scene.bounds);
    EXPECT_FALSE(f.examples()[0].gate);
    EXPECT_EQ(f.examples()[0].kept, 0u);
    EXPECT_TRUE(std::isfinite(f.step().loss));
}
