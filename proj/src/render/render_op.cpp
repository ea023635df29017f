#include "sqs/render/render_op.hpp"

#include "sqs/core/error.hpp"

namespace sqs::render {

RenderOp::RenderOp(int width, int height, RenderSettings settings)
    : width_(width), height_(height), rasterizer_(settings) {
    if (width <= 0 || height <= 0) throw InvalidArgument("render image size must be positive");
}

ad::Shape RenderOp::output_shape(std::span<const ad::Shape> in) const {
    if (in.size() != 6) throw ShapeError("render expects 6 inputs");
    const std::size_t k = in[0].empty() ? 0 : in[0][0];
    const std::size_t widths[5] = {3, 4, 3, 1, 3};
    for (std::size_t i = 0; i < 5; ++i) {
        if (in[i] != ad::Shape{k, widths[i]}) {
            throw ShapeError("render input " + std::to_string(i) + " must be [" + std::to_string(k) + "," +
                             std::to_string(widths[i]) + "], got " + ad::shape_string(in[i]));
        }
    }
    if (ad::shape_size(in[5]) != geom::kCameraRowSize) throw ShapeError("render camera input must hold 20 values");
    return {static_cast<std::size_t>(height_), static_cast<std::size_t>(width_), kRenderChannels};
}

void RenderOp::forward(std::span<const ad::Array* const> in, ad::Array& output) {
    const auto gaussians = gaussians_from_arrays(*in[0], *in[1], *in[2], *in[3], *in[4]);
    const auto camera = geom::camera_from_row(in[5]->data(), width_, height_);
    output = rasterizer_.forward(gaussians, camera).packed();
}

void RenderOp::backward(std::span<const ad::Array* const>, const ad::Array&, const ad::Array& grad_output,
                        std::span<ad::Array* const> grads) {
    const RenderGradients g = rasterizer_.backward(grad_output);
    for (std::size_t i = 0; i < g.d_mu.size(); ++i) {
        if (grads[0]) for (int c = 0; c < 3; ++c) (*grads[0])[i * 3 + c] += g.d_mu[i][c];
        if (grads[1]) for (int c = 0; c < 4; ++c) (*grads[1])[i * 4 + c] += g.d_quat[i][c];
        if (grads[2]) for (int c = 0; c < 3; ++c) (*grads[2])[i * 3 + c] += g.d_scale[i][c];
        if (grads[3]) (*grads[3])[i] += g.d_opacity[i];
        if (grads[4]) for (int c = 0; c < 3; ++c) (*grads[4])[i * 3 + c] += g.d_color[i][c];
    }
}

ad::NodeRef add_render_node(ad::Graph& graph, const GaussianNodes& g, ad::NodeRef camera, int width, int height,
                            const RenderSettings& settings) {
    return graph.custom(std::make_shared<RenderOp>(width, height, settings),
                        {g.mu, g.quat, g.scale, g.opacity, g.color, camera});
}

std::vector<ad::Array> gaussians_to_arrays(std::span<const GaussianPrimitive> gaussians) {
    const std::size_t k = gaussians.size();
    ad::Array mu({k, 3}), quat({k, 4}), scale({k, 3}), opacity({k, 1}), color({k, 3});
    for (std::size_t i = 0; i < k; ++i) {
        const auto& g = gaussians[i];
        for (int c = 0; c < 3; ++c) {
            mu[i * 3 + c] = g.mu[c];
            scale[i * 3 + c] = g.scale[c];
            color[i * 3 + c] = g.color[c];
        }
        for (int c = 0; c < 4; ++c) quat[i * 4 + c] = g.quat[c];
        opacity[i] = g.opacity;
    }
    return {mu, quat, scale, opacity, color};
}

std::vector<GaussianPrimitive> gaussians_from_arrays(const ad::Array& mu, const ad::Array& quat,
                                                     const ad::Array& scale, const ad::Array& opacity,
                                                     const ad::Array& color) {
    const std::size_t k = mu.dim(0);
    std::vector<GaussianPrimitive> out(k);
    for (std::size_t i = 0; i < k; ++i) {
        auto& g = out[i];
        g.mu = geom::Vec3(mu[i * 3], mu[i * 3 + 1], mu[i * 3 + 2]);
        g.quat = geom::Vec4(quat[i * 4], quat[i * 4 + 1], quat[i * 4 + 2], quat[i * 4 + 3]);
        g.scale = geom::Vec3(scale[i * 3], scale[i * 3 + 1], scale[i * 3 + 2]);
        g.opacity = opacity[i];
        g.color = geom::Vec3(color[i * 3], color[i * 3 + 1], color[i * 3 + 2]);
    }
    return out;
}

} // namespace sqs::render
