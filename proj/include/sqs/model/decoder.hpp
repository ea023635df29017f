#pragma once

#include "sqs/model/encoder.hpp"
#include "sqs/render/render_op.hpp"
#include "sqs/scene/scene.hpp"

#include <array>
#include <atomic>
#include <cstdint>
#include <memory>

namespace sqs::model {

using scene::Bounds;

// Raw anchor layout: position 3, scale 3, quaternion 4, opacity 1.
inline constexpr std::size_t kAnchorPos = 0;
inline constexpr std::size_t kAnchorScale = 3;
inline constexpr std::size_t kAnchorQuat = 6;
inline constexpr std::size_t kAnchorOpacity = 10;
inline constexpr std::size_t kAnchorWidth = 11;

struct DecoderConfig {
    std::size_t n_layers = 2;
    std::size_t n_offsets = 4;
    std::size_t n_heads = 4;
    double voxel_size = 0.0;  // 0 selects bounds extent / 32
    std::size_t K = 512;
    std::size_t feature_dim = 64;
    std::size_t ffn_hidden = 128;
    std::size_t head_hidden = 64;
    double scale_min = 0.001;   // fraction of bounds extent
    double scale_max = 0.25;    // fraction of bounds extent
    double init_scale = 0.02;   // fraction of bounds extent
    double init_opacity = 0.1;

    double resolved_voxel_size(const Bounds& b) const { return voxel_size > 0.0 ? voxel_size : b.extent() / 32.0; }
    // Throws ConfigError naming the offending field.
    void validate() const;
};

struct GaussianQuerySet {
    Array anchors;   // [K, 11] raw
    Array features;  // [K, D]
    Bounds bounds;
};

double logit(double p);

GaussianQuerySet init_queries(std::size_t K, const Bounds& bounds, std::uint64_t seed, const DecoderConfig& config = {});

// Integer voxel coordinates floor((mu - origin) / voxel_size).
std::array<std::int64_t, 3> voxel_index(const geom::Vec3& mu, const geom::Vec3& origin, double voxel_size);

// Voxel pooling plus one 3x3x3 sparse convolution.
// Inputs: mu [K,3] (no gradient), features [K,D], weight [27,D,D], bias [D].
// Output [K,D]: the convolved voxel feature of each query's voxel. Kernel
// offset o = (dz+1)*9 + (dy+1)*3 + (dx+1).
class SparseConvOp final : public ad::CustomOp {
public:
    SparseConvOp(geom::Vec3 origin, double voxel_size);
    std::string name() const override { return "sparse_conv"; }
    Shape output_shape(std::span<const Shape> in) const override;
    void forward(std::span<const Array* const> in, Array& out) override;
    void backward(std::span<const Array* const> in, const Array& out, const Array& grad,
                  std::span<Array* const> grads) override;

private:
    geom::Vec3 origin_;
    double voxel_size_;
};

// Samples per-level value maps at projected 3D reference points.
// Inputs: mu [K,3], offsets [K,P,3], cameras [V,20], then one value map
// [V, h_l, w_l, D] per level. Output [K, H, S, D/H] with sample index
// s = (v*L + l)*P + p. Points at or in front of the near plane, or outside a
// map, sample zero.
class DeformableSampleOp final : public ad::CustomOp {
public:
    DeformableSampleOp(std::vector<PyramidLevel> levels, std::size_t n_heads, double near_plane = 0.01);
    std::string name() const override { return "deformable_sample"; }
    Shape output_shape(std::span<const Shape> in) const override;
    void forward(std::span<const Array* const> in, Array& out) override;
    void backward(std::span<const Array* const> in, const Array& out, const Array& grad,
                  std::span<Array* const> grads) override;

private:
    std::vector<PyramidLevel> levels_;
    std::size_t heads_;
    double near_;
};

// q / |q| per row of [K,4]; rows with |q| < 1e-8 become (1,0,0,0) and bump
// the fallback counter.
class QuaternionNormalizeOp final : public ad::CustomOp {
public:
    std::string name() const override { return "quat_normalize"; }
    Shape output_shape(std::span<const Shape> in) const override;
    void forward(std::span<const Array* const> in, Array& out) override;
    void backward(std::span<const Array* const> in, const Array& out, const Array& grad,
                  std::span<Array* const> grads) override;
    std::uint64_t fallbacks() const { return fallbacks_.load(); }

private:
    std::atomic<std::uint64_t> fallbacks_{0};
};

// mu = bounds.min + sigmoid(raw_pos) * bounds.size
NodeRef decode_positions(Graph& g, NodeRef anchors, const Bounds& bounds);

// features + sparse_conv(features); parameters under <name>.
NodeRef sparse_conv_block(Graph& g, NodeRef mu, NodeRef features, const Bounds& bounds, double voxel_size,
                          const std::string& name, Rng& rng);

// features + out_proj(attention over sampled values); parameters under <name>.
NodeRef deformable_attention_block(Graph& g, NodeRef mu, NodeRef features, const FeaturePyramid& pyramid,
                                   NodeRef cameras, const DecoderConfig& config, double voxel_size,
                                   const std::string& name, Rng& rng);

struct HeadOutput {
    render::GaussianNodes gaussians;
    NodeRef color_logits;
};

// Decodes raw anchors to renderable parameters; color comes from a 2-layer
// perceptron on the features. Parameters under <name>.
HeadOutput gaussian_head(Graph& g, NodeRef anchors, NodeRef features, const Bounds& bounds,
                         const DecoderConfig& config, const std::string& name, Rng& rng,
                         std::shared_ptr<QuaternionNormalizeOp> normalize = nullptr);

struct DecoderGraph {
    NodeRef initial_anchors;   // parameter decoder.anchors
    NodeRef initial_features;  // parameter decoder.features
    std::vector<NodeRef> anchors;   // per stage, [0] = initial
    std::vector<NodeRef> features;  // per stage, [0] = initial
    HeadOutput head;
    std::shared_ptr<QuaternionNormalizeOp> normalize;

    NodeRef final_anchors() const { return anchors.back(); }
    NodeRef final_features() const { return features.back(); }
};

// n_layers refine layers then the final Gaussian head. cameras is [V,20].
DecoderGraph build_decoder(Graph& g, const FeaturePyramid& pyramid, NodeRef cameras, const GaussianQuerySet& init,
                           const DecoderConfig& config, Rng& rng);

// Reads evaluated head outputs as primitives.
std::vector<geom::GaussianPrimitive> read_gaussians(const Graph& g, const render::GaussianNodes& nodes);

} // namespace sqs::model
