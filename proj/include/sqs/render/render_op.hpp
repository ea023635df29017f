#pragma once

#include "sqs/autodiff/graph.hpp"
#include "sqs/render/rasterizer.hpp"

namespace sqs::render {

// Graph node wrapping the rasterizer.
// Inputs: mu [K,3], quat [K,4], scale [K,3], opacity [K,1], color [K,3],
// camera [20] (see geom::camera_to_row). Output: [H, W, 5] holding
// r, g, b, depth, alpha_acc. The camera input receives no gradient.
class RenderOp final : public ad::CustomOp {
public:
    RenderOp(int width, int height, RenderSettings settings = {});

    std::string name() const override { return "render"; }
    ad::Shape output_shape(std::span<const ad::Shape> inputs) const override;
    void forward(std::span<const ad::Array* const> inputs, ad::Array& output) override;
    void backward(std::span<const ad::Array* const> inputs, const ad::Array& output, const ad::Array& grad_output,
                  std::span<ad::Array* const> grad_inputs) override;

    const Rasterizer& rasterizer() const { return rasterizer_; }

private:
    int width_;
    int height_;
    Rasterizer rasterizer_;
};

struct GaussianNodes {
    ad::NodeRef mu, quat, scale, opacity, color;
};

ad::NodeRef add_render_node(ad::Graph& graph, const GaussianNodes& gaussians, ad::NodeRef camera, int width,
                            int height, const RenderSettings& settings = {});

// Packs primitives into the five arrays RenderOp consumes.
std::vector<ad::Array> gaussians_to_arrays(std::span<const GaussianPrimitive> gaussians);
std::vector<GaussianPrimitive> gaussians_from_arrays(const ad::Array& mu, const ad::Array& quat,
                                                     const ad::Array& scale, const ad::Array& opacity,
                                                     const ad::Array& color);

} // namespace sqs::render
