#include "sqs/model/encoder.hpp"

#include "sqs/core/error.hpp"

#include <cmath>

namespace sqs::model {

std::vector<std::int64_t> conv3x3_indices(int views, int height, int width, int stride) {
    const int ho = (height - 1) / stride + 1;
    const int wo = (width - 1) / stride + 1;
    std::vector<std::int64_t> idx;
    idx.reserve(static_cast<std::size_t>(views) * ho * wo * 9);
    for (int v = 0; v < views; ++v) {
        for (int y = 0; y < ho; ++y) {
            for (int x = 0; x < wo; ++x) {
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int sy = y * stride + dy, sx = x * stride + dx;
                        if (sy < 0 || sy >= height || sx < 0 || sx >= width) idx.push_back(-1);
                        else idx.push_back((static_cast<std::int64_t>(v) * height + sy) * width + sx);
                    }
                }
            }
        }
    }
    return idx;
}

NodeRef conv3x3(Graph& g, NodeRef x, int views, int height, int width, int stride, std::size_t out,
                const std::string& name, Rng& rng) {
    const std::size_t in = g.shape(x).back();
    const std::size_t rows = static_cast<std::size_t>(views) * ((height - 1) / stride + 1) * ((width - 1) / stride + 1);
    auto cols = g.gather(x, conv3x3_indices(views, height, width, stride), {rows, 9});
    cols = g.reshape(cols, {rows, 9 * in});
    Array w = normal_init({9 * in, out}, 9 * in, rng, std::sqrt(2.0));
    // Nonzero bias: a constant (black) patch would otherwise reach the layer
    // norm with zero channel variance.
    const double bound = 1.0 / std::sqrt(static_cast<double>(9 * in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Array b({out});
    for (auto& v : b.values()) v = u(rng);
    return linear_with(g, cols, name, std::move(w), std::move(b));
}

namespace {

// Nearest-neighbour 2x upsampling of [V*h*w, C] rows to [V*2h*2w, C].
NodeRef upsample2(Graph& g, NodeRef x, int views, int h, int w) {
    std::vector<std::int64_t> idx;
    for (int v = 0; v < views; ++v)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx) idx.push_back((static_cast<std::int64_t>(v) * h + y / 2) * w + xx / 2);
    const std::size_t n = idx.size();
    return g.gather(x, std::move(idx), {n});
}

} // namespace

FeaturePyramid encode(Graph& g, NodeRef images, const EncoderConfig& config, Rng& rng) {
    const Shape& s = g.shape(images);
    if (s.size() != 4 || s[3] != 3) throw ShapeError("encode: images must be [V, H, W, 3], got " + ad::shape_string(s));
    const int views = static_cast<int>(s[0]), height = static_cast<int>(s[1]), width = static_cast<int>(s[2]);
    if (height % 32 != 0 || width % 32 != 0 || height == 0 || width == 0) {
        throw InvalidArgument("encode: image size " + std::to_string(width) + "x" + std::to_string(height) +
                              " is not a multiple of 32");
    }
    Graph::Scope scope(g, "encoder");
    auto block = [&](NodeRef x, int h, int w, std::size_t out, const std::string& name) {
        return g.relu(g.layer_norm(conv3x3(g, x, views, h, w, 2, out, name, rng)));
    };

    NodeRef x = g.reshape(images, {s[0] * s[1] * s[2], 3});
    int h = height / 2, w = width / 2;
    x = block(x, height, width, config.stem_width, "stem");
    std::array<NodeRef, 4> stage;
    std::array<int, 4> hs{}, ws{};
    for (int i = 0; i < 4; ++i) {
        x = block(x, h, w, config.widths[i], "stage" + std::to_string(i + 1));
        h /= 2;
        w /= 2;
        stage[i] = x;
        hs[i] = h;
        ws[i] = w;
    }

    const std::size_t d = config.neck_width;
    std::array<NodeRef, 4> merged;
    for (int i = 3; i >= 0; --i) {
        auto lateral = linear(g, stage[i], d, "lateral" + std::to_string(i + 1), rng);
        merged[i] = i == 3 ? lateral : g.add(lateral, upsample2(g, merged[i + 1], views, hs[i + 1], ws[i + 1]));
    }
    FeaturePyramid pyramid;
    pyramid.views = static_cast<std::size_t>(views);
    pyramid.channels = d;
    for (int i = 0; i < 4; ++i) {
        auto smooth = conv3x3(g, merged[i], views, hs[i], ws[i], 1, d, "smooth" + std::to_string(i + 1), rng);
        const Shape shape{static_cast<std::size_t>(views), static_cast<std::size_t>(hs[i]),
                          static_cast<std::size_t>(ws[i]), d};
        pyramid.levels.push_back({g.reshape(smooth, shape), kPyramidStrides[i], hs[i], ws[i]});
    }
    return pyramid;
}

BilinearTaps bilinear_taps(double u, double v, int height, int width) {
    BilinearTaps t;
    if (!(u > -1.0 && u < width && v > -1.0 && v < height)) return t;
    const double fx = std::floor(u), fy = std::floor(v);
    const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
    const double ax = u - fx, ay = v - fy;
    const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
    const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
    const double wx[4] = {1.0 - ax, ax, 1.0 - ax, ax};
    const double wy[4] = {1.0 - ay, 1.0 - ay, ay, ay};
    const double dwx[4] = {-1.0, 1.0, -1.0, 1.0};
    const double dwy[4] = {-1.0, -1.0, 1.0, 1.0};
    for (int k = 0; k < 4; ++k) {
        t.weight[k] = wx[k] * wy[k];
        t.d_du[k] = dwx[k] * wy[k];
        t.d_dv[k] = wx[k] * dwy[k];
        if (xs[k] >= 0 && xs[k] < width && ys[k] >= 0 && ys[k] < height) {
            t.index[k] = static_cast<std::int64_t>(ys[k]) * width + xs[k];
        }
    }
    return t;
}

std::vector<double> bilinear_sample(const Array& map, double px, double py, int stride) {
    if (map.rank() != 3) throw ShapeError("bilinear_sample: map must be [h, w, D]");
    if (stride < 1) throw InvalidArgument("bilinear_sample: stride must be positive");
    const int h = static_cast<int>(map.dim(0)), w = static_cast<int>(map.dim(1));
    const std::size_t d = map.dim(2);
    std::vector<double> out(d, 0.0);
    const auto taps = bilinear_taps(px / stride, py / stride, h, w);
    for (int k = 0; k < 4; ++k) {
        if (taps.index[k] < 0 || taps.weight[k] == 0.0) continue;
        const double* src = map.data() + static_cast<std::size_t>(taps.index[k]) * d;
        for (std::size_t c = 0; c < d; ++c) out[c] += taps.weight[k] * src[c];
    }
    return out;
}

} // namespace sqs::model
