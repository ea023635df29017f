#include "sqs/render/rasterizer.hpp"

#include "sqs/core/error.hpp"
#include "sqs/core/parallel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace sqs::render {

namespace {

using Channels = std::array<double, kRenderChannels>;

struct Footprint {
    int x0, x1, y0, y1;  // inclusive pixel bounds
};

// Pixel box outside of which the Gaussian's alpha stays below the floor.
bool footprint(const ProjectedGaussian& pg, const RenderSettings& s, int width, int height, Footprint& out) {
    if (s.alpha_floor <= 0.0) {
        out = {0, width - 1, 0, height - 1};
        return true;
    }
    if (pg.opacity < s.alpha_floor) return false;
    const double r2 = 2.0 * std::log(pg.opacity / s.alpha_floor);
    const double r = std::sqrt(std::max(r2, 0.0)) * (1.0 + 1e-9) + 1e-9;
    const double hw = r * std::sqrt(pg.cov2d(0, 0));
    const double hh = r * std::sqrt(pg.cov2d(1, 1));
    const double fx0 = std::ceil(pg.mean2d.x() - hw), fx1 = std::floor(pg.mean2d.x() + hw);
    const double fy0 = std::ceil(pg.mean2d.y() - hh), fy1 = std::floor(pg.mean2d.y() + hh);
    if (fx1 < 0.0 || fy1 < 0.0 || fx0 > width - 1 || fy0 > height - 1) return false;
    out.x0 = static_cast<int>(std::max(fx0, 0.0));
    out.x1 = static_cast<int>(std::min(fx1, static_cast<double>(width - 1)));
    out.y0 = static_cast<int>(std::max(fy0, 0.0));
    out.y1 = static_cast<int>(std::min(fy1, static_cast<double>(height - 1)));
    return out.x0 <= out.x1 && out.y0 <= out.y1;
}

// Raw alpha before clamping, with the Gaussian falloff factor.
struct AlphaTerms {
    double alpha = 0.0;  // after clamp; 0 when dropped
    double falloff = 0.0;
    bool clamped = false;
    double dx = 0.0, dy = 0.0;
};

struct Entry {
    std::uint32_t k = 0;
    double transmittance = 1.0;
    AlphaTerms terms;
};

AlphaTerms alpha_terms(const ProjectedGaussian& pg, double px, double py, const RenderSettings& s) {
    AlphaTerms t;
    t.dx = px - pg.mean2d.x();
    t.dy = py - pg.mean2d.y();
    const double power =
        -0.5 * (pg.conic(0, 0) * t.dx * t.dx + 2.0 * pg.conic(0, 1) * t.dx * t.dy + pg.conic(1, 1) * t.dy * t.dy);
    t.falloff = std::exp(power);
    double a = pg.opacity * t.falloff;
    if (a > s.alpha_clamp) {
        a = s.alpha_clamp;
        t.clamped = true;
    }
    if (a < s.alpha_floor || a <= 0.0) a = 0.0;
    t.alpha = a;
    return t;
}

void check_size(const Camera& camera) {
    if (camera.width <= 0 || camera.height <= 0) throw InvalidArgument("render image size must be positive");
}

RenderOutput blank(int width, int height) {
    const auto h = static_cast<std::size_t>(height), w = static_cast<std::size_t>(width);
    return RenderOutput{ad::Array({h, w, 3}), ad::Array({h, w}), ad::Array({h, w})};
}

void project_all(std::span<const GaussianPrimitive> gaussians, const Camera& camera, const RenderSettings& s,
                 std::vector<ProjectedGaussian>& projected, std::vector<char>& visible) {
    projected.assign(gaussians.size(), ProjectedGaussian{});
    visible.assign(gaussians.size(), 0);
    for (std::size_t i = 0; i < gaussians.size(); ++i) {
        auto p = geom::project_gaussian(gaussians[i], camera, s.projection);
        if (p) {
            projected[i] = *p;
            visible[i] = 1;
        }
    }
}

} // namespace

RenderSettings RenderSettings::check_mode() {
    RenderSettings s;
    s.alpha_floor = 0.0;
    s.early_stop = 0.0;
    return s;
}

ad::Array RenderOutput::packed() const {
    const std::size_t h = depth.dim(0), w = depth.dim(1);
    ad::Array out({h, w, kRenderChannels});
    for (std::size_t p = 0; p < h * w; ++p) {
        for (int c = 0; c < 3; ++c) out[p * kRenderChannels + c] = rgb[p * 3 + c];
        out[p * kRenderChannels + 3] = depth[p];
        out[p * kRenderChannels + 4] = alpha_acc[p];
    }
    return out;
}

double pixel_alpha(const ProjectedGaussian& pg, const geom::Vec2& pixel, const RenderSettings& settings) {
    return alpha_terms(pg, pixel.x(), pixel.y(), settings).alpha;
}

Composite alpha_composite(std::span<const Contribution> contributions, const RenderSettings& settings) {
    for (std::size_t i = 1; i < contributions.size(); ++i) {
        if (contributions[i].depth < contributions[i - 1].depth) {
            throw InvalidArgument("alpha_composite: contributions not sorted front-to-back at position " +
                                  std::to_string(i));
        }
    }
    Composite out;
    double transmittance = 1.0;
    for (const auto& c : contributions) {
        if (c.alpha <= 0.0) continue;
        const double w = c.alpha * transmittance;
        out.color += w * c.color;
        out.depth += w * c.depth;
        transmittance *= 1.0 - c.alpha;
        if (transmittance < settings.early_stop) break;
    }
    out.alpha_acc = 1.0 - transmittance;
    return out;
}

std::vector<std::uint32_t> sort_by_distance(const std::vector<ProjectedGaussian>& projected,
                                            const std::vector<char>& visible) {
    std::vector<std::uint32_t> order;
    for (std::uint32_t i = 0; i < projected.size(); ++i) {
        if (visible[i]) order.push_back(i);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (projected[a].cam_distance != projected[b].cam_distance) {
            return projected[a].cam_distance < projected[b].cam_distance;
        }
        return a < b;
    });
    return order;
}

RenderOutput Rasterizer::forward(std::span<const GaussianPrimitive> gaussians, const Camera& camera) {
    check_size(camera);
    if (settings_.tile_size <= 0) throw InvalidArgument("tile size must be positive");
    gaussians_.assign(gaussians.begin(), gaussians.end());
    camera_ = camera;
    project_all(gaussians, camera, settings_, projected_, visible_);
    const auto order = sort_by_distance(projected_, visible_);

    const int width = camera.width, height = camera.height, ts = settings_.tile_size;
    tiles_.tile_size = ts;
    tiles_.tiles_x = (width + ts - 1) / ts;
    tiles_.tiles_y = (height + ts - 1) / ts;
    tiles_.lists.assign(static_cast<std::size_t>(tiles_.tiles_x * tiles_.tiles_y), {});
    for (auto gi : order) {
        Footprint fp{};
        if (!footprint(projected_[gi], settings_, width, height, fp)) continue;
        for (int ty = fp.y0 / ts; ty <= fp.y1 / ts; ++ty) {
            for (int tx = fp.x0 / ts; tx <= fp.x1 / ts; ++tx) {
                tiles_.lists[static_cast<std::size_t>(ty * tiles_.tiles_x + tx)].push_back(gi);
            }
        }
    }

    RenderOutput out = blank(width, height);
    pixels_.assign(static_cast<std::size_t>(width * height), PixelState{});
    parallel_for(tiles_.lists.size(), [&](std::size_t tile) {
        const int tx = static_cast<int>(tile) % tiles_.tiles_x;
        const int ty = static_cast<int>(tile) / tiles_.tiles_x;
        const auto& list = tiles_.lists[tile];
        for (int py = ty * ts; py < std::min(height, (ty + 1) * ts); ++py) {
            for (int px = tx * ts; px < std::min(width, (tx + 1) * ts); ++px) {
                const auto pix = static_cast<std::size_t>(py * width + px);
                double t = 1.0;
                double r = 0.0, g = 0.0, b = 0.0, d = 0.0;
                std::uint32_t k = 0;
                for (; k < list.size(); ++k) {
                    const auto& pg = projected_[list[k]];
                    const auto at = alpha_terms(pg, px, py, settings_);
                    if (at.alpha <= 0.0) continue;
                    const double w = at.alpha * t;
                    r += w * pg.color.x();
                    g += w * pg.color.y();
                    b += w * pg.color.z();
                    d += w * pg.cam_distance;
                    t *= 1.0 - at.alpha;
                    if (t < settings_.early_stop) {
                        ++k;
                        break;
                    }
                }
                pixels_[pix] = PixelState{t, k};
                out.rgb[pix * 3 + 0] = r;
                out.rgb[pix * 3 + 1] = g;
                out.rgb[pix * 3 + 2] = b;
                out.depth[pix] = d;
                out.alpha_acc[pix] = 1.0 - t;
            }
        }
    });
    cached_ = true;
    return out;
}

RenderGradients Rasterizer::backward(const ad::Array& grad_rgb, const ad::Array& grad_depth) const {
    if (!cached_) throw InvalidArgument("render backward called without a cached forward pass");
    const auto h = static_cast<std::size_t>(camera_.height), w = static_cast<std::size_t>(camera_.width);
    if (grad_rgb.shape() != ad::Shape{h, w, 3} || grad_depth.shape() != ad::Shape{h, w}) {
        throw ShapeError("render backward: gradient shapes do not match the image");
    }
    ad::Array grad({h, w, kRenderChannels});
    for (std::size_t p = 0; p < h * w; ++p) {
        for (int c = 0; c < 3; ++c) grad[p * kRenderChannels + c] = grad_rgb[p * 3 + c];
        grad[p * kRenderChannels + 3] = grad_depth[p];
    }
    return backward(grad);
}

RenderGradients Rasterizer::backward(const ad::Array& grad) const {
    if (!cached_) throw InvalidArgument("render backward called without a cached forward pass");
    const int width = camera_.width, height = camera_.height, ts = tiles_.tile_size;
    if (grad.shape() != ad::Shape{static_cast<std::size_t>(height), static_cast<std::size_t>(width), kRenderChannels}) {
        throw ShapeError("render backward: gradient must be [H, W, 5]");
    }

    // Per list entry: d_mean(2), d_conic(3: 00, 01, 11), d_opacity, d_color(3), d_distance.
    constexpr std::size_t kAcc = 10;
    std::vector<std::vector<double>> local(tiles_.lists.size());
    parallel_for(tiles_.lists.size(), [&](std::size_t tile) {
        const auto& list = tiles_.lists[tile];
        auto& acc = local[tile];
        acc.assign(list.size() * kAcc, 0.0);
        std::vector<Entry> entries;
        const int tx = static_cast<int>(tile) % tiles_.tiles_x;
        const int ty = static_cast<int>(tile) / tiles_.tiles_x;
        for (int py = ty * ts; py < std::min(height, (ty + 1) * ts); ++py) {
            for (int px = tx * ts; px < std::min(width, (tx + 1) * ts); ++px) {
                const auto pix = static_cast<std::size_t>(py * width + px);
                const double* gp = grad.data() + pix * kRenderChannels;
                const PixelState& ps = pixels_[pix];
                // Forward replay gives the transmittance in front of each entry,
                // which stays exact when an entry is fully opaque.
                entries.clear();
                double t = 1.0;
                for (std::uint32_t k = 0; k < ps.end; ++k) {
                    const auto at = alpha_terms(projected_[list[k]], px, py, settings_);
                    if (at.alpha <= 0.0) continue;
                    entries.push_back({k, t, at});
                    t *= 1.0 - at.alpha;
                }
                // suffix[c] = sum over later entries j of value_j alpha_j prod_{k<m<j} (1 - alpha_m)
                Channels suffix{};
                for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
                    const std::uint32_t k = it->k;
                    const auto& at = it->terms;
                    const auto& pg = projected_[list[k]];
                    const double a = at.alpha;
                    t = it->transmittance;
                    const Channels value{pg.color.x(), pg.color.y(), pg.color.z(), pg.cam_distance, 1.0};
                    double d_alpha = 0.0;
                    for (std::size_t c = 0; c < kRenderChannels; ++c) {
                        d_alpha += gp[c] * t * (value[c] - suffix[c]);
                        suffix[c] = a * value[c] + (1.0 - a) * suffix[c];
                    }
                    const double wgt = a * t;
                    double* e = acc.data() + k * kAcc;
                    e[6] += gp[0] * wgt;
                    e[7] += gp[1] * wgt;
                    e[8] += gp[2] * wgt;
                    e[9] += gp[3] * wgt;
                    if (at.clamped) continue;
                    e[5] += d_alpha * at.falloff;
                    // alpha = o * exp(power); d alpha / d power = alpha
                    const double d_power = d_alpha * a;
                    const double cx = pg.conic(0, 0), cxy = pg.conic(0, 1), cy = pg.conic(1, 1);
                    // power = -0.5 (cx dx^2 + 2 cxy dx dy + cy dy^2), d = pixel - mean
                    e[0] += d_power * (cx * at.dx + cxy * at.dy);
                    e[1] += d_power * (cxy * at.dx + cy * at.dy);
                    e[2] += d_power * (-0.5 * at.dx * at.dx);
                    e[3] += d_power * (-0.5 * at.dx * at.dy);
                    e[4] += d_power * (-0.5 * at.dy * at.dy);
                }
            }
        }
    });

    const std::size_t n = gaussians_.size();
    std::vector<double> total(n * kAcc, 0.0);
    for (std::size_t tile = 0; tile < tiles_.lists.size(); ++tile) {
        const auto& list = tiles_.lists[tile];
        for (std::size_t k = 0; k < list.size(); ++k) {
            double* dst = total.data() + static_cast<std::size_t>(list[k]) * kAcc;
            const double* src = local[tile].data() + k * kAcc;
            for (std::size_t j = 0; j < kAcc; ++j) dst[j] += src[j];
        }
    }

    RenderGradients out;
    out.d_mu.assign(n, geom::Vec3::Zero());
    out.d_quat.assign(n, geom::Vec4::Zero());
    out.d_scale.assign(n, geom::Vec3::Zero());
    out.d_opacity.assign(n, 0.0);
    out.d_color.assign(n, geom::Vec3::Zero());
    parallel_for(n, [&](std::size_t i) {
        if (!visible_[i]) return;
        const double* e = total.data() + i * kAcc;
        const auto& pg = projected_[i];
        out.d_opacity[i] = e[5];
        out.d_color[i] = geom::Vec3(e[6], e[7], e[8]);
        geom::Mat2 d_conic;
        d_conic << e[2], e[3], e[3], e[4];
        const geom::Mat2 d_cov = -pg.conic * d_conic * pg.conic;
        const auto pgrad = geom::project_gaussian_backward(gaussians_[i], camera_, settings_.projection,
                                                           geom::Vec2(e[0], e[1]), d_cov, e[9]);
        out.d_mu[i] = pgrad.d_mu;
        out.d_quat[i] = pgrad.d_quat;
        out.d_scale[i] = pgrad.d_scale;
    });
    return out;
}

RenderOutput render(std::span<const GaussianPrimitive> gaussians, const Camera& camera,
                    const RenderSettings& settings) {
    Rasterizer r(settings);
    return r.forward(gaussians, camera);
}

RenderOutput render_reference(std::span<const GaussianPrimitive> gaussians, const Camera& camera,
                              const RenderSettings& settings) {
    check_size(camera);
    std::vector<ProjectedGaussian> projected;
    std::vector<char> visible;
    project_all(gaussians, camera, settings, projected, visible);
    const auto order = sort_by_distance(projected, visible);
    RenderOutput out = blank(camera.width, camera.height);
    std::vector<Contribution> contributions;
    for (int py = 0; py < camera.height; ++py) {
        for (int px = 0; px < camera.width; ++px) {
            contributions.clear();
            for (auto gi : order) {
                const auto& pg = projected[gi];
                contributions.push_back(
                    Contribution{pixel_alpha(pg, geom::Vec2(px, py), settings), pg.color, pg.cam_distance});
            }
            const Composite c = alpha_composite(contributions, settings);
            const auto pix = static_cast<std::size_t>(py * camera.width + px);
            for (int ch = 0; ch < 3; ++ch) out.rgb[pix * 3 + static_cast<std::size_t>(ch)] = c.color[ch];
            out.depth[pix] = c.depth;
            out.alpha_acc[pix] = c.alpha_acc;
        }
    }
    return out;
}

RenderGradients render_backward(std::span<const GaussianPrimitive> gaussians, const Camera& camera,
                                const ad::Array& grad_rgb, const ad::Array& grad_depth,
                                const RenderSettings& settings) {
    Rasterizer r(settings);
    r.forward(gaussians, camera);
    return r.backward(grad_rgb, grad_depth);
}

} // namespace sqs::render
