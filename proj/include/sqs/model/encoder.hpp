#pragma once

#include "sqs/model/layers.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace sqs::model {

struct EncoderConfig {
    std::size_t stem_width = 16;
    std::array<std::size_t, 4> widths = {16, 32, 64, 128};
    std::size_t neck_width = 32;  // D_f
};

inline constexpr std::array<int, 4> kPyramidStrides = {4, 8, 16, 32};

struct PyramidLevel {
    NodeRef map;  // [V, h, w, D_f]
    int stride = 0;
    int height = 0;
    int width = 0;
};

struct FeaturePyramid {
    std::vector<PyramidLevel> levels;
    std::size_t views = 0;
    std::size_t channels = 0;
};

// Row indices for a 3x3, padding-1 convolution over [V*H*W, C] rows; -1 marks
// padding. Result is [V*Ho*Wo, 9] flattened, Ho = (H-1)/stride + 1.
std::vector<std::int64_t> conv3x3_indices(int views, int height, int width, int stride);

// x [V*H*W, Cin] -> [V*Ho*Wo, Cout]; parameters <name>.w [9*Cin, Cout], <name>.b.
NodeRef conv3x3(Graph& g, NodeRef x, int views, int height, int width, int stride, std::size_t out,
                const std::string& name, Rng& rng);

// Builds backbone and neck on images [V, H, W, 3]. H and W must be
// multiples of 32. Parameters live under the "encoder" scope.
FeaturePyramid encode(Graph& g, NodeRef images, const EncoderConfig& config, Rng& rng);

// Zero-padded bilinear interpolation in level coordinates. Taps outside
// [0,w) x [0,h) carry index -1; their weights stay defined so the sample is
// continuous, but they contribute nothing.
struct BilinearTaps {
    std::array<std::int64_t, 4> index{-1, -1, -1, -1};  // y * w + x
    std::array<double, 4> weight{};
    std::array<double, 4> d_du{};
    std::array<double, 4> d_dv{};
    bool any() const { return index[0] >= 0 || index[1] >= 0 || index[2] >= 0 || index[3] >= 0; }
};

BilinearTaps bilinear_taps(double u, double v, int height, int width);

// map [h, w, D]; pixel in image coordinates, sampled at pixel / stride.
std::vector<double> bilinear_sample(const Array& map, double px, double py, int stride);

} // namespace sqs::model
