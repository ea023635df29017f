#include "sqs/autodiff/gradcheck.hpp"
#include "sqs/core/error.hpp"
#include "sqs/model/decoder.hpp"
#include "sqs/render/render_op.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

using namespace sqs;
using namespace sqs::model;
using geom::Vec3;

namespace {

Array random_array(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Array a(std::move(shape));
    for (auto& v : a.values()) v = u(rng);
    return a;
}

Bounds unit_bounds() { return Bounds{}; }

scene::SceneConfig scene_config(int views) {
    scene::SceneConfig c;
    c.n_views = views;
    return c;
}

Array camera_rows(const std::vector<geom::Camera>& cams) {
    Array rows({cams.size(), geom::kCameraRowSize});
    for (std::size_t v = 0; v < cams.size(); ++v) {
        const auto r = geom::camera_to_row(cams[v]);
        std::copy(r.begin(), r.end(), rows.data() + v * geom::kCameraRowSize);
    }
    return rows;
}

// Pyramid whose level maps are graph inputs "map<l>" of width d.
FeaturePyramid input_pyramid(Graph& g, std::size_t views, int height, int width, std::size_t d, std::size_t levels = 4) {
    FeaturePyramid p;
    p.views = views;
    p.channels = d;
    for (std::size_t l = 0; l < levels; ++l) {
        const int s = kPyramidStrides[l];
        PyramidLevel lv{g.input("map" + std::to_string(l), {views, std::size_t(height / s), std::size_t(width / s), d}, true),
                        s, height / s, width / s};
        p.levels.push_back(lv);
    }
    return p;
}

std::map<std::string, Array> pyramid_inputs(const Graph& g, const FeaturePyramid& p, std::uint64_t seed) {
    std::map<std::string, Array> in;
    for (std::size_t l = 0; l < p.levels.size(); ++l) {
        in["map" + std::to_string(l)] = random_array(g.shape(p.levels[l].map), seed + l);
    }
    return in;
}

void zero_parameter(Graph& g, const std::string& name) { g.mutable_parameter(name).fill(0.0); }

void set_identity(Graph& g, const std::string& name) {
    Array& w = g.mutable_parameter(name);
    w.fill(0.0);
    for (std::size_t i = 0; i < std::min(w.dim(0), w.dim(1)); ++i) w(i, i) = 1.0;
}

} // namespace

TEST(InitQueries, FeaturesStandardNormal) {
    DecoderConfig cfg;
    const auto qs = init_queries(256, unit_bounds(), 1, cfg);
    ASSERT_EQ(qs.features.shape(), (Shape{256, cfg.feature_dim}));
    double mean = 0.0, sq = 0.0;
    for (double v : qs.features.values()) {
        mean += v;
        sq += v * v;
    }
    const double n = static_cast<double>(qs.features.size());
    EXPECT_NEAR(mean / n, 0.0, 0.02);
    EXPECT_NEAR(sq / n, 1.0, 0.03);
    // Anchors do not depend on the feature width.
    cfg.feature_dim = 32;
    EXPECT_TRUE(init_queries(256, unit_bounds(), 1, cfg).anchors.bit_equal(qs.anchors));
}

TEST(InitQueries, AnchorsDecodeToDefaults) {
    DecoderConfig cfg;
    const auto qs = init_queries(64, unit_bounds(), 1, cfg);
    Graph g;
    auto anchors = g.constant(qs.anchors);
    // Zero features leave only the head biases, which encode the defaults.
    const auto h = gaussian_head(g, anchors, g.constant(Array(qs.features.shape())), qs.bounds, cfg, "head",
                                 *std::make_unique<Rng>(0));
    g.evaluate();
    const auto gs = read_gaussians(g, h.gaussians);
    for (const auto& p : gs) {
        for (int c = 0; c < 3; ++c) EXPECT_NEAR(p.scale[c], 0.02 * 2.0, 1e-12);
        EXPECT_NEAR(p.opacity, 0.1, 1e-12);
        EXPECT_EQ(p.quat, geom::Vec4(1, 0, 0, 0));
    }
}

TEST(InitQueries, PositionsInsideBounds) {
    Bounds b;
    b.min = Vec3(-3, 0, 1);
    b.max = Vec3(5, 2, 1.5);
    const auto qs = init_queries(10000, b, 2);
    Graph g;
    auto mu = decode_positions(g, g.constant(qs.anchors), b);
    g.evaluate();
    const Array& m = g.value(mu);
    for (std::size_t k = 0; k < 10000; ++k) ASSERT_TRUE(b.contains(Vec3(m[k * 3], m[k * 3 + 1], m[k * 3 + 2])));
}

TEST(InitQueries, Deterministic) {
    EXPECT_TRUE(init_queries(100, unit_bounds(), 3).anchors.bit_equal(init_queries(100, unit_bounds(), 3).anchors));
    EXPECT_FALSE(init_queries(100, unit_bounds(), 3).anchors.bit_equal(init_queries(100, unit_bounds(), 4).anchors));
    EXPECT_THROW(init_queries(0, unit_bounds(), 3), InvalidArgument);
}

TEST(Voxelize, FloorBinning) {
    const Vec3 o(0, 0, 0);
    EXPECT_EQ(voxel_index(Vec3(0.1, 0.1, 0.1), o, 0.5), (std::array<std::int64_t, 3>{0, 0, 0}));
    EXPECT_EQ(voxel_index(Vec3(0.2, 0.2, 0.2), o, 0.5), (std::array<std::int64_t, 3>{0, 0, 0}));
    EXPECT_EQ(voxel_index(Vec3(-0.1, 0.5, 1.2), o, 0.5), (std::array<std::int64_t, 3>{-1, 1, 2}));
}

TEST(SparseConv, IdentityCentreKernelDoublesSingleQuery) {
    Graph g;
    auto mu = g.input("mu", {1, 3});
    auto f = g.input("f", {1, 4});
    Rng rng(1);
    auto out = sparse_conv_block(g, mu, f, unit_bounds(), 0.5, "sc", rng);
    Array& w = g.mutable_parameter("sc.w");
    w.fill(0.0);
    for (std::size_t i = 0; i < 4; ++i) w[(13 * 4 + i) * 4 + i] = 1.0;
    const Array feat = Array({1, 4}, {0.5, -1.5, 2.0, 0.25});
    g.evaluate({{"mu", Array({1, 3}, {0.1, 0.2, 0.3})}, {"f", feat}});
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(g.value(out)[c], 2.0 * feat[c]);
}

TEST(SparseConv, PoolsCoLocatedQueriesAndSeesNeighbours) {
    // Two queries share voxel (0,0,0); a third sits in (1,0,0). Kernel is
    // identity at offset dx = -1 only, so voxel (1,0,0) receives the mean of
    // voxel (0,0,0) and voxel (0,0,0) receives nothing.
    Graph g;
    auto mu = g.input("mu", {3, 3});
    auto f = g.input("f", {3, 2});
    auto op = std::make_shared<SparseConvOp>(Vec3::Zero(), 0.5);
    Array w({27, 2, 2});
    const std::size_t o = 1 * 9 + 1 * 3 + 0;
    w[(o * 2 + 0) * 2 + 0] = 1.0;
    w[(o * 2 + 1) * 2 + 1] = 1.0;
    auto out = g.custom(op, {mu, f, g.constant(w), g.constant(Array({2}))});
    g.evaluate({{"mu", Array({3, 3}, {0.1, 0.1, 0.1, 0.2, 0.3, 0.4, 0.7, 0.1, 0.1})},
                {"f", Array({3, 2}, {1.0, 2.0, 3.0, 6.0, 100.0, 100.0})}});
    const Array& r = g.value(out);
    EXPECT_EQ(r[0], 0.0);
    EXPECT_EQ(r[2], 0.0);
    EXPECT_EQ(r[4], 2.0);
    EXPECT_EQ(r[5], 4.0);
}

TEST(SparseConv, PermutationEquivariant) {
    const std::size_t k = 32, d = 8;
    Array mu = random_array({k, 3}, 5, 0.0, 1.5);
    Array f = random_array({k, d}, 6);
    const Array w = random_array({27, d, d}, 7), b = random_array({d}, 8);
    auto run = [&](const Array& m, const Array& feat) {
        Graph g;
        auto out = g.custom(std::make_shared<SparseConvOp>(Vec3::Zero(), 0.5),
                            {g.constant(m), g.constant(feat), g.constant(w), g.constant(b)});
        g.evaluate();
        return g.value(out);
    };
    const Array base = run(mu, f);
    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(9));
    Array pm({k, 3}), pf({k, d});
    for (std::size_t i = 0; i < k; ++i) {
        std::copy_n(mu.data() + perm[i] * 3, 3, pm.data() + i * 3);
        std::copy_n(f.data() + perm[i] * d, d, pf.data() + i * d);
    }
    const Array permuted = run(pm, pf);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(permuted[i * d + c], base[perm[i] * d + c], 1e-12);
}

TEST(SparseConv, Gradient) {
    Graph g;
    auto mu = g.input("mu", {24, 3});
    auto f = g.input("f", {24, 6}, true);
    Rng rng(10);
    auto out = sparse_conv_block(g, mu, f, unit_bounds(), 0.4, "sc", rng);
    auto root = g.sum(g.multiply(out, g.constant(random_array({24, 6}, 11))));
    const std::map<std::string, Array> in = {{"mu", random_array({24, 3}, 12, -0.6, 0.6)},
                                             {"f", random_array({24, 6}, 13)}};
    EXPECT_LT(ad::check_graph_gradient(g, root, "f", in, Array::scalar(1), 1e-6).max_relative_error, 1e-5);
    EXPECT_LT(ad::check_graph_gradient(g, root, "sc.w", in, Array::scalar(1), 1e-6,
                                       ad::probe_indices(27 * 36, 60))
                  .max_relative_error,
              1e-5);
    EXPECT_LT(ad::check_graph_gradient(g, root, "sc.b", in, Array::scalar(1), 1e-6).max_relative_error, 1e-5);
}

class DeformableAttention : public ::testing::Test {
protected:
    // Builds the block over an input pyramid with identity value/output
    // projections and zero offsets.
    void build(std::size_t views, std::size_t levels, std::size_t offsets, std::size_t k = 6) {
        cfg.n_offsets = offsets;
        cfg.n_heads = 2;
        cams = scene::ring_cameras(scene_config(static_cast<int>(views)));
        mu = g.input("mu", {k, 3});
        features = g.input("features", {k, 4});
        cameras = g.input("cameras", {views, geom::kCameraRowSize});
        pyramid = input_pyramid(g, views, 64, 64, 4, levels);
        Rng rng(20);
        out = deformable_attention_block(g, mu, features, pyramid, cameras, cfg, 0.1, "attn", rng);
        zero_parameter(g, "attn.offsets.w");
        zero_parameter(g, "attn.offsets.b");
        for (std::size_t l = 0; l < levels; ++l) {
            set_identity(g, "attn.value" + std::to_string(l + 1) + ".w");
            zero_parameter(g, "attn.value" + std::to_string(l + 1) + ".b");
        }
        set_identity(g, "attn.out.w");
        zero_parameter(g, "attn.out.b");
        inputs = pyramid_inputs(g, pyramid, 30);
        inputs["mu"] = random_array({k, 3}, 31, -0.5, 0.5);
        inputs["features"] = random_array({k, 4}, 32);
        inputs["cameras"] = camera_rows(cams);
    }

    // Mean over (view, level, offset) of bilinear samples at mu.
    std::vector<double> oracle_mean(std::size_t q) {
        std::vector<double> acc(4, 0.0);
        const Array& m = inputs["mu"];
        const Vec3 x(m[q * 3], m[q * 3 + 1], m[q * 3 + 2]);
        const std::size_t ns = cams.size() * pyramid.levels.size() * cfg.n_offsets;
        for (std::size_t v = 0; v < cams.size(); ++v) {
            const Vec3 t = cams[v].to_camera(x);
            if (t.z() <= 0.01) continue;
            const double px = cams[v].fx() * t.x() / t.z() + cams[v].cx();
            const double py = cams[v].fy() * t.y() / t.z() + cams[v].cy();
            for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
                const auto& lv = pyramid.levels[l];
                const Array& full = inputs["map" + std::to_string(l)];
                const std::size_t per = static_cast<std::size_t>(lv.height * lv.width) * 4;
                Array view({std::size_t(lv.height), std::size_t(lv.width), 4},
                           std::vector<double>(full.data() + v * per, full.data() + (v + 1) * per));
                const auto s = bilinear_sample(view, px, py, lv.stride);
                for (int c = 0; c < 4; ++c) acc[c] += cfg.n_offsets * s[c] / static_cast<double>(ns);
            }
        }
        return acc;
    }

    Graph g;
    DecoderConfig cfg;
    std::vector<geom::Camera> cams;
    NodeRef mu, features, cameras, out;
    FeaturePyramid pyramid;
    std::map<std::string, Array> inputs;
};

TEST_F(DeformableAttention, EqualLogitsGiveMeanOfSamples) {
    build(2, 4, 2);
    zero_parameter(g, "attn.logits.w");
    zero_parameter(g, "attn.logits.b");
    g.evaluate(inputs);
    const Array& r = g.value(out);
    for (std::size_t q = 0; q < 6; ++q) {
        const auto want = oracle_mean(q);
        for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(r[q * 4 + c] - inputs["features"][q * 4 + c], want[c], 1e-12);
    }
}

TEST_F(DeformableAttention, PointsBehindEveryCameraGiveProjectionOfZero) {
    build(1, 4, 4, 1);
    auto& b = g.mutable_parameter("attn.out.b");
    for (std::size_t c = 0; c < 4; ++c) b[c] = 0.1 * (c + 1);
    // Far behind the only camera.
    const Vec3 behind = cams[0].position() - 10.0 * (cams[0].extrinsics.block<3, 1>(0, 2));
    inputs["mu"] = Array({1, 3}, {behind.x(), behind.y(), behind.z()});
    g.evaluate(inputs);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(g.value(out)[c] - inputs["features"][c], 0.1 * (c + 1));
}

TEST_F(DeformableAttention, SingletonSoftmaxPassesSampleThrough) {
    build(1, 1, 1);
    g.evaluate(inputs);  // random logits; one sample per head gets weight 1
    const Array& r = g.value(out);
    for (std::size_t q = 0; q < 6; ++q) {
        const auto want = oracle_mean(q);
        for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(r[q * 4 + c] - inputs["features"][q * 4 + c], want[c], 1e-12);
    }
}

TEST(DeformableSample, Gradient) {
    Graph g;
    const auto cams = scene::ring_cameras(scene_config(2));
    auto mu = g.input("mu", {5, 3}, true);
    auto off = g.input("off", {5, 3, 3}, true);
    auto cameras = g.input("cameras", {2, geom::kCameraRowSize});
    const auto p = input_pyramid(g, 2, 64, 64, 4);
    std::vector<NodeRef> in = {mu, off, cameras};
    for (const auto& l : p.levels) in.push_back(l.map);
    auto s = g.custom(std::make_shared<DeformableSampleOp>(p.levels, 2), in);
    EXPECT_EQ(g.shape(s), (Shape{5, 2, 2 * 4 * 3, 2}));
    auto root = g.sum(g.multiply(s, g.constant(random_array(g.shape(s), 40))));
    auto inputs = pyramid_inputs(g, p, 41);
    inputs["mu"] = random_array({5, 3}, 42, -0.5, 0.5);
    inputs["off"] = random_array({5, 3, 3}, 43, -0.05, 0.05);
    inputs["cameras"] = camera_rows(cams);
    for (const char* name : {"mu", "off", "map0", "map3"}) {
        const auto r = ad::check_graph_gradient(g, root, name, inputs, Array::scalar(1), 1e-6);
        EXPECT_LT(r.max_relative_error, 1e-5) << name;
    }
}

TEST(GaussianHead, ActivationExamples) {
    Bounds b;
    b.min = Vec3(-10, -10, -10);
    b.max = Vec3(10, 10, 10);
    Array raw({3, kAnchorWidth});
    raw[kAnchorQuat] = 2.0;                    // (2,0,0,0)
    raw[kAnchorWidth + kAnchorQuat + 2] = 0.5;  // (0,0,0.5,0)
    // Row 2 keeps a zero quaternion.
    Graph g;
    Rng rng(0);
    const auto h = gaussian_head(g, g.constant(raw), g.constant(Array({3, 64})), b, DecoderConfig{}, "head", rng);
    g.evaluate();
    const auto gs = read_gaussians(g, h.gaussians);
    EXPECT_EQ(gs[0].mu, Vec3::Zero());
    EXPECT_EQ(gs[0].opacity, 0.5);
    EXPECT_EQ(gs[0].quat, geom::Vec4(1, 0, 0, 0));
    EXPECT_EQ(gs[1].quat, geom::Vec4(0, 0, 1, 0));
    EXPECT_EQ(gs[2].quat, geom::Vec4(1, 0, 0, 0));
    EXPECT_EQ(g.value(h.gaussians.quat).shape(), (Shape{3, 4}));
}

TEST(GaussianHead, ZeroQuaternionFallbackCounted) {
    Graph g;
    Rng rng(0);
    auto op = std::make_shared<QuaternionNormalizeOp>();
    gaussian_head(g, g.constant(Array({2, kAnchorWidth})), g.constant(Array({2, 8})), unit_bounds(), DecoderConfig{},
                  "head", rng, op);
    g.evaluate();
    EXPECT_EQ(op->fallbacks(), 2u);
}

TEST(GaussianHead, ArbitraryRawInputsGiveValidPrimitives) {
    Graph g;
    Rng rng(1);
    const Array raw = random_array({200, kAnchorWidth}, 50, -40, 40);
    const DecoderConfig cfg;
    const auto h = gaussian_head(g, g.constant(raw), g.constant(random_array({200, 64}, 51, -5, 5)), unit_bounds(), cfg,
                                 "head", rng);
    g.evaluate();
    for (const auto& p : read_gaussians(g, h.gaussians)) {
        EXPECT_TRUE(unit_bounds().contains(p.mu));
        EXPECT_GE(p.scale.minCoeff(), cfg.scale_min * 2.0);
        EXPECT_LE(p.scale.maxCoeff(), cfg.scale_max * 2.0);
        EXPECT_GE(p.opacity, 0.0);
        EXPECT_LE(p.opacity, 1.0);
        EXPECT_NEAR(p.quat.norm(), 1.0, 1e-12);
        EXPECT_TRUE((p.color.array() >= 0.0).all() && (p.color.array() <= 1.0).all());
    }
}

class DecoderStack : public ::testing::Test {
protected:
    void build(std::size_t layers, std::size_t k = 24) {
        cfg.n_layers = layers;
        cfg.K = k;
        cams = scene::ring_cameras(scene_config(2));
        cameras = g.input("cameras", {2, geom::kCameraRowSize});
        pyramid = input_pyramid(g, 2, 64, 64, 32);
        init = init_queries(k, unit_bounds(), 60, cfg);
        Rng rng(61);
        dec = build_decoder(g, pyramid, cameras, init, cfg, rng);
        inputs = pyramid_inputs(g, pyramid, 62);
        inputs["cameras"] = camera_rows(cams);
    }

    Graph g;
    DecoderConfig cfg;
    std::vector<geom::Camera> cams;
    NodeRef cameras;
    FeaturePyramid pyramid;
    GaussianQuerySet init;
    DecoderGraph dec;
    std::map<std::string, Array> inputs;
};

TEST_F(DecoderStack, ZeroLayersDecodeInitialAnchors) {
    build(0);
    g.evaluate(inputs);
    EXPECT_TRUE(g.value(dec.final_anchors()).bit_equal(init.anchors));
    Graph h;
    Rng rng(0);
    const auto ref = gaussian_head(h, h.constant(init.anchors), h.constant(init.features), init.bounds, cfg, "x", rng);
    h.evaluate();
    EXPECT_TRUE(g.value(dec.head.gaussians.mu).bit_equal(h.value(ref.gaussians.mu)));
    EXPECT_TRUE(g.value(dec.head.gaussians.scale).bit_equal(h.value(ref.gaussians.scale)));
}

TEST_F(DecoderStack, ZeroWeightsKeepPositionsAndReplaceOtherGroups) {
    build(2);
    for (const auto& name : g.parameter_names()) {
        if (name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0) zero_parameter(g, name);
    }
    g.evaluate(inputs);
    const Array& a = g.value(dec.final_anchors());
    const double raw_scale = logit((cfg.init_scale - cfg.scale_min) / (cfg.scale_max - cfg.scale_min));
    for (std::size_t k = 0; k < cfg.K; ++k) {
        for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(a(k, kAnchorPos + c), init.anchors(k, kAnchorPos + c));
        for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(a(k, kAnchorScale + c), raw_scale);
        EXPECT_EQ(a(k, kAnchorQuat), 1.0);
        EXPECT_EQ(a(k, kAnchorQuat + 1), 0.0);
        EXPECT_EQ(a(k, kAnchorOpacity), logit(cfg.init_opacity));
    }
}

TEST_F(DecoderStack, ZeroDeltaKeepsPositionsAcrossLayers) {
    build(2);
    for (const char* layer : {"decoder.layer1", "decoder.layer2"}) {
        zero_parameter(g, std::string(layer) + ".head.pos.fc2.w");
        zero_parameter(g, std::string(layer) + ".head.pos.fc2.b");
    }
    g.evaluate(inputs);
    for (std::size_t k = 0; k < cfg.K; ++k)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(g.value(dec.final_anchors())(k, c), init.anchors(k, c));
}

TEST_F(DecoderStack, ConstantOpacityHeadReplaces) {
    build(2);
    zero_parameter(g, "decoder.layer2.head.opacity.fc2.w");
    g.mutable_parameter("decoder.layer2.head.opacity.fc2.b")[0] = 1.3;
    g.evaluate(inputs);
    const double want = 1.0 / (1.0 + std::exp(-1.3));
    for (std::size_t k = 0; k < cfg.K; ++k) EXPECT_NEAR(g.value(dec.head.gaussians.opacity)[k], want, 1e-15);
}

TEST_F(DecoderStack, DeterministicAndFeaturesMove) {
    build(2);
    g.evaluate(inputs);
    const Array a = g.value(dec.final_features());
    const Array mu = g.value(dec.head.gaussians.mu);
    g.evaluate(inputs);
    EXPECT_TRUE(a.bit_equal(g.value(dec.final_features())));
    EXPECT_TRUE(mu.bit_equal(g.value(dec.head.gaussians.mu)));
    double norm = 0;
    for (double v : a.values()) norm += v * v;
    EXPECT_GT(norm, 0.0);
}

TEST_F(DecoderStack, MeanRenderedDepthGradientWrtAnchor) {
    build(2, 32);
    auto img = render::add_render_node(g, dec.head.gaussians, g.reshape(g.gather(cameras, {0}, {1}), {20}), 64, 64,
                                       render::RenderSettings::check_mode());
    auto depth = g.slice(img, 3, 4);
    auto root = g.mean(depth);
    std::vector<std::size_t> idx;
    for (std::size_t k = 0; k < 32; ++k) idx.push_back(k * kAnchorWidth + kAnchorPos);
    for (std::size_t k = 0; k < 32; k += 4)
        for (std::size_t c = 1; c < kAnchorWidth; ++c) idx.push_back(k * kAnchorWidth + c);
    const auto r = ad::check_graph_gradient(g, root, "decoder.anchors", inputs, Array::scalar(1), 1e-6, idx);
    EXPECT_LT(r.max_relative_error, 1e-4) << "worst " << r.worst_index << " " << r.analytic << " vs " << r.numeric;
    double total = 0.0;
    for (double v : g.parameter_gradient("decoder.anchors").values()) total += std::abs(v);
    EXPECT_GT(total, 0.0);
}

TEST_F(DecoderStack, GradientWrtPyramidAndLayerWeights) {
    build(2, 24);
    auto img = render::add_render_node(g, dec.head.gaussians, g.reshape(g.gather(cameras, {1}, {1}), {20}), 64, 64,
                                       render::RenderSettings::check_mode());
    auto root = g.mean(g.multiply(img, img));
    for (const char* name : {"map0", "map2", "decoder.layer1.cross_attn.offsets.w", "decoder.layer1.sparse_conv.w",
                             "decoder.layer2.ffn.fc1.w", "decoder.head.color.fc2.w", "decoder.features"}) {
        const std::size_t n = g.has_parameter(name) ? g.parameter_value(name).size() : inputs[name].size();
        // Gradients near 1e-8 need the wider step to clear rounding.
        const auto idx = ad::smooth_probe_indices(g, root, name, inputs, Array::scalar(1), 1e-4, 8, std::min<std::size_t>(n, 32));
        EXPECT_GE(idx.size(), 4u) << name;
        const auto r = ad::check_graph_gradient(g, root, name, inputs, Array::scalar(1), 1e-4, idx);
        EXPECT_LT(r.max_relative_error, 1e-4) << name << " worst " << r.worst_index;
    }
}
