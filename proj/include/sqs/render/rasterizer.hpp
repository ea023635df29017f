#pragma once

#include "sqs/autodiff/array.hpp"
#include "sqs/geometry/gaussian.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace sqs::render {

using geom::Camera;
using geom::GaussianPrimitive;
using geom::ProjectedGaussian;

struct RenderSettings {
    int tile_size = 16;
    double alpha_clamp = 0.9999;
    double alpha_floor = 1.0 / 255.0;  // 0 disables the floor and tile culling
    double early_stop = 1e-4;          // 0 disables early termination
    geom::ProjectionSettings projection;

    // Thresholds off, as used by finite-difference checks.
    static RenderSettings check_mode();
};

// Output channels per pixel: r, g, b, depth, alpha_acc.
inline constexpr std::size_t kRenderChannels = 5;

struct RenderOutput {
    ad::Array rgb;        // [H, W, 3]
    ad::Array depth;      // [H, W]
    ad::Array alpha_acc;  // [H, W]

    // Interleaved [H, W, 5] view of the three buffers.
    ad::Array packed() const;
};

struct Contribution {
    double alpha = 0.0;
    geom::Vec3 color = geom::Vec3::Zero();
    double depth = 0.0;
};

struct Composite {
    geom::Vec3 color = geom::Vec3::Zero();
    double depth = 0.0;
    double alpha_acc = 0.0;
};

// alpha = opacity * exp(-0.5 d^T conic d), d = pixel - mean2d, clamped to
// settings.alpha_clamp; returns 0 when below settings.alpha_floor.
double pixel_alpha(const ProjectedGaussian& pg, const geom::Vec2& pixel, const RenderSettings& settings = {});

// Front-to-back compositing. Rejects input whose depths decrease.
Composite alpha_composite(std::span<const Contribution> contributions, const RenderSettings& settings = {});

// Gaussians binned into square tiles, each list in global front-to-back order
// (cam_distance ascending, index ascending on ties).
struct TileIndex {
    int tile_size = 16;
    int tiles_x = 0;
    int tiles_y = 0;
    std::vector<std::vector<std::uint32_t>> lists;  // Gaussian indices per tile, row-major tiles
};

struct RenderGradients {
    std::vector<geom::Vec3> d_mu;
    std::vector<geom::Vec4> d_quat;
    std::vector<geom::Vec3> d_scale;
    std::vector<double> d_opacity;
    std::vector<geom::Vec3> d_color;
};

// Tile-based differentiable rasterizer. forward() caches the per-pixel state
// that backward() consumes.
class Rasterizer {
public:
    explicit Rasterizer(RenderSettings settings = {}) : settings_(settings) {}

    RenderOutput forward(std::span<const GaussianPrimitive> gaussians, const Camera& camera);
    // grad is [H, W, 5] over (r, g, b, depth, alpha_acc).
    RenderGradients backward(const ad::Array& grad) const;
    RenderGradients backward(const ad::Array& grad_rgb, const ad::Array& grad_depth) const;

    const TileIndex& tiles() const { return tiles_; }
    const RenderSettings& settings() const { return settings_; }
    bool has_forward() const { return cached_; }

private:
    struct PixelState {
        double final_transmittance = 1.0;
        std::uint32_t end = 0;  // one past the last list entry composited
    };

    RenderSettings settings_;
    bool cached_ = false;
    std::vector<GaussianPrimitive> gaussians_;
    Camera camera_;
    std::vector<ProjectedGaussian> projected_;
    std::vector<char> visible_;
    TileIndex tiles_;
    std::vector<PixelState> pixels_;
};

RenderOutput render(std::span<const GaussianPrimitive> gaussians, const Camera& camera,
                    const RenderSettings& settings = {});

// Brute-force oracle: every pixel composites every visible Gaussian in global
// sorted order, without tiles, under the same per-Gaussian alpha rules.
RenderOutput render_reference(std::span<const GaussianPrimitive> gaussians, const Camera& camera,
                              const RenderSettings& settings = {});

RenderGradients render_backward(std::span<const GaussianPrimitive> gaussians, const Camera& camera,
                                const ad::Array& grad_rgb, const ad::Array& grad_depth,
                                const RenderSettings& settings = {});

// Global front-to-back order of the visible Gaussians.
std::vector<std::uint32_t> sort_by_distance(const std::vector<ProjectedGaussian>& projected,
                                            const std::vector<char>& visible);

} // namespace sqs::render
