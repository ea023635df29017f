#include "sqs/model/decoder.hpp"

#include "sqs/core/error.hpp"
#include "sqs/core/parallel.hpp"

#include <cmath>
#include <map>

namespace sqs::model {

namespace {

using Key = std::array<std::int64_t, 3>;

struct VoxelTable {
    std::vector<std::size_t> voxel_of;           // per query
    std::vector<std::vector<std::size_t>> members;  // per voxel, ascending query index
    std::vector<std::array<std::int64_t, 27>> neighbours;  // -1 when absent
};

VoxelTable build_table(const Array& mu, const geom::Vec3& origin, double voxel_size) {
    const std::size_t k = mu.dim(0);
    std::map<Key, std::vector<std::size_t>> bins;
    std::vector<Key> keys(k);
    for (std::size_t q = 0; q < k; ++q) {
        keys[q] = voxel_index(geom::Vec3(mu[q * 3], mu[q * 3 + 1], mu[q * 3 + 2]), origin, voxel_size);
        bins[keys[q]].push_back(q);
    }
    VoxelTable t;
    std::map<Key, std::size_t> id;
    for (auto& [key, list] : bins) {
        id[key] = t.members.size();
        t.members.push_back(std::move(list));
    }
    t.voxel_of.resize(k);
    for (std::size_t q = 0; q < k; ++q) t.voxel_of[q] = id[keys[q]];
    t.neighbours.resize(t.members.size());
    std::size_t v = 0;
    for (const auto& [key, index] : id) {
        (void)index;
        auto& nb = t.neighbours[v++];
        for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const auto it = id.find(Key{key[0] + dx, key[1] + dy, key[2] + dz});
                    nb[(dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)] =
                        it == id.end() ? -1 : static_cast<std::int64_t>(it->second);
                }
    }
    return t;
}

// Mean feature per voxel, summed in ascending query order.
std::vector<double> pool(const VoxelTable& t, const Array& f, std::size_t d) {
    std::vector<double> pooled(t.members.size() * d, 0.0);
    for (std::size_t v = 0; v < t.members.size(); ++v) {
        double* dst = pooled.data() + v * d;
        for (auto q : t.members[v])
            for (std::size_t c = 0; c < d; ++c) dst[c] += f[q * d + c];
        const double inv = 1.0 / static_cast<double>(t.members[v].size());
        for (std::size_t c = 0; c < d; ++c) dst[c] *= inv;
    }
    return pooled;
}

struct Projection {
    bool valid = false;
    double px = 0.0, py = 0.0;
    Eigen::Matrix<double, 2, 3> jacobian;  // d(px, py) / d(world point)
};

Projection project_point(const geom::Camera& cam, const geom::Vec3& x, double near_plane) {
    Projection p;
    const geom::Mat3 r = cam.world_to_camera_rotation();
    const geom::Vec3 t = r * (x - cam.position());
    if (t.z() <= near_plane) return p;
    p.valid = true;
    const double iz = 1.0 / t.z();
    p.px = cam.fx() * t.x() * iz + cam.cx();
    p.py = cam.fy() * t.y() * iz + cam.cy();
    Eigen::Matrix<double, 2, 3> j;
    j << cam.fx() * iz, 0.0, -cam.fx() * t.x() * iz * iz, 0.0, cam.fy() * iz, -cam.fy() * t.y() * iz * iz;
    p.jacobian = j * r;
    return p;
}

std::vector<geom::Camera> read_cameras(const Array& rows, int width, int height) {
    std::vector<geom::Camera> cams;
    for (std::size_t v = 0; v < rows.dim(0); ++v) {
        cams.push_back(geom::camera_from_row(rows.data() + v * geom::kCameraRowSize, width, height));
    }
    return cams;
}

} // namespace

void DecoderConfig::validate() const {
    auto positive = [](std::size_t v, const char* key) {
        if (v == 0) throw ConfigError(std::string("decoder.") + key + " must be positive");
    };
    positive(n_offsets, "n_offsets");
    positive(n_heads, "n_heads");
    positive(K, "K");
    positive(feature_dim, "feature_dim");
    positive(ffn_hidden, "ffn_hidden");
    positive(head_hidden, "head_hidden");
    if (feature_dim % n_heads != 0) throw ConfigError("decoder.feature_dim must be a multiple of decoder.n_heads");
    if (voxel_size < 0.0) throw ConfigError("decoder.voxel_size must be >= 0");
    if (!(scale_min > 0.0 && scale_min < init_scale && init_scale < scale_max)) {
        throw ConfigError("decoder scale range must satisfy 0 < scale_min < init_scale < scale_max");
    }
    if (!(init_opacity > 0.0 && init_opacity < 1.0)) throw ConfigError("decoder.init_opacity must be in (0, 1)");
}

double logit(double p) { return std::log(p / (1.0 - p)); }

GaussianQuerySet init_queries(std::size_t K, const Bounds& bounds, std::uint64_t seed, const DecoderConfig& config) {
    if (K < 1) throw InvalidArgument("init_queries: K must be >= 1");
    bounds.validate();
    config.validate();
    GaussianQuerySet qs;
    qs.bounds = bounds;
    qs.anchors = Array({K, kAnchorWidth});
    qs.features = Array({K, config.feature_dim});
    Rng rng(seed);
    // Open interval keeps the logit finite.
    std::uniform_real_distribution<double> u(1e-6, 1.0 - 1e-6);
    const double raw_scale = logit((config.init_scale - config.scale_min) / (config.scale_max - config.scale_min));
    const double raw_opacity = logit(config.init_opacity);
    for (std::size_t k = 0; k < K; ++k) {
        double* a = qs.anchors.data() + k * kAnchorWidth;
        for (int c = 0; c < 3; ++c) a[kAnchorPos + c] = logit(u(rng));
        for (int c = 0; c < 3; ++c) a[kAnchorScale + c] = raw_scale;
        a[kAnchorQuat] = 1.0;
        a[kAnchorOpacity] = raw_opacity;
    }
    // Separate stream so the anchors do not depend on the feature width.
    Rng frng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (auto& v : qs.features.values()) v = n01(frng);
    return qs;
}

std::array<std::int64_t, 3> voxel_index(const geom::Vec3& mu, const geom::Vec3& origin, double voxel_size) {
    if (!(voxel_size > 0.0)) throw InvalidArgument("voxel_size must be positive");
    std::array<std::int64_t, 3> k{};
    for (int a = 0; a < 3; ++a) k[a] = static_cast<std::int64_t>(std::floor((mu[a] - origin[a]) / voxel_size));
    return k;
}

// ---------------------------------------------------------------------------

SparseConvOp::SparseConvOp(geom::Vec3 origin, double voxel_size) : origin_(origin), voxel_size_(voxel_size) {
    if (!(voxel_size > 0.0)) throw InvalidArgument("sparse conv voxel_size must be positive");
}

Shape SparseConvOp::output_shape(std::span<const Shape> in) const {
    if (in.size() != 4) throw ShapeError("sparse_conv expects 4 inputs");
    if (in[0].size() != 2 || in[0][1] != 3) throw ShapeError("sparse_conv: mu must be [K,3]");
    if (in[1].size() != 2 || in[1][0] != in[0][0]) throw ShapeError("sparse_conv: features must be [K,D]");
    const std::size_t d = in[1][1];
    if (in[2] != Shape{27, d, d}) throw ShapeError("sparse_conv: weight must be [27,D,D]");
    if (in[3] != Shape{d}) throw ShapeError("sparse_conv: bias must be [D]");
    return in[1];
}

void SparseConvOp::forward(std::span<const Array* const> in, Array& out) {
    const Array &mu = *in[0], &f = *in[1], &w = *in[2], &b = *in[3];
    const std::size_t d = f.dim(1);
    const auto t = build_table(mu, origin_, voxel_size_);
    const auto pooled = pool(t, f, d);
    std::vector<double> conv(t.members.size() * d);
    parallel_for(t.members.size(), [&](std::size_t v) {
        double* dst = conv.data() + v * d;
        std::copy_n(b.data(), d, dst);
        for (int o = 0; o < 27; ++o) {
            const auto nb = t.neighbours[v][o];
            if (nb < 0) continue;
            const double* src = pooled.data() + static_cast<std::size_t>(nb) * d;
            const double* wo = w.data() + static_cast<std::size_t>(o) * d * d;
            for (std::size_t i = 0; i < d; ++i) {
                const double s = src[i];
                if (s == 0.0) continue;
                const double* row = wo + i * d;
                for (std::size_t c = 0; c < d; ++c) dst[c] += s * row[c];
            }
        }
    });
    out = Array(f.shape());
    for (std::size_t q = 0; q < mu.dim(0); ++q) {
        std::copy_n(conv.data() + t.voxel_of[q] * d, d, out.data() + q * d);
    }
}

void SparseConvOp::backward(std::span<const Array* const> in, const Array&, const Array& grad,
                            std::span<Array* const> grads) {
    const Array &mu = *in[0], &f = *in[1], &w = *in[2];
    const std::size_t d = f.dim(1);
    const auto t = build_table(mu, origin_, voxel_size_);
    const std::size_t nv = t.members.size();
    std::vector<double> d_conv(nv * d, 0.0);
    for (std::size_t v = 0; v < nv; ++v)
        for (auto q : t.members[v])
            for (std::size_t c = 0; c < d; ++c) d_conv[v * d + c] += grad[q * d + c];

    if (grads[3]) {
        for (std::size_t v = 0; v < nv; ++v)
            for (std::size_t c = 0; c < d; ++c) (*grads[3])[c] += d_conv[v * d + c];
    }
    if (grads[2]) {
        const auto pooled = pool(t, f, d);
        Array& gw = *grads[2];
        parallel_for(27, [&](std::size_t o) {
            double* wo = gw.data() + o * d * d;
            for (std::size_t v = 0; v < nv; ++v) {
                const auto nb = t.neighbours[v][o];
                if (nb < 0) continue;
                const double* src = pooled.data() + static_cast<std::size_t>(nb) * d;
                const double* g = d_conv.data() + v * d;
                for (std::size_t i = 0; i < d; ++i) {
                    const double s = src[i];
                    if (s == 0.0) continue;
                    for (std::size_t c = 0; c < d; ++c) wo[i * d + c] += s * g[c];
                }
            }
        });
    }
    if (grads[1]) {
        // Voxel u feeds voxel v through offset o exactly when v is u's
        // neighbour at the opposite offset 26 - o.
        std::vector<double> d_pooled(nv * d, 0.0);
        parallel_for(nv, [&](std::size_t u) {
            double* dst = d_pooled.data() + u * d;
            for (int o = 0; o < 27; ++o) {
                const auto v = t.neighbours[u][26 - o];
                if (v < 0) continue;
                const double* g = d_conv.data() + static_cast<std::size_t>(v) * d;
                const double* wo = w.data() + static_cast<std::size_t>(o) * d * d;
                for (std::size_t i = 0; i < d; ++i) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < d; ++c) s += wo[i * d + c] * g[c];
                    dst[i] += s;
                }
            }
        });
        Array& gf = *grads[1];
        for (std::size_t q = 0; q < mu.dim(0); ++q) {
            const std::size_t v = t.voxel_of[q];
            const double inv = 1.0 / static_cast<double>(t.members[v].size());
            for (std::size_t c = 0; c < d; ++c) gf[q * d + c] += d_pooled[v * d + c] * inv;
        }
    }
}

// ---------------------------------------------------------------------------

DeformableSampleOp::DeformableSampleOp(std::vector<PyramidLevel> levels, std::size_t n_heads, double near_plane)
    : levels_(std::move(levels)), heads_(n_heads), near_(near_plane) {
    if (levels_.empty()) throw InvalidArgument("deformable sampling needs at least one level");
    if (heads_ == 0) throw InvalidArgument("deformable sampling needs at least one head");
}

Shape DeformableSampleOp::output_shape(std::span<const Shape> in) const {
    const std::size_t nl = levels_.size();
    if (in.size() != 3 + nl) throw ShapeError("deformable_sample expects mu, offsets, cameras and one map per level");
    if (in[0].size() != 2 || in[0][1] != 3) throw ShapeError("deformable_sample: mu must be [K,3]");
    const std::size_t k = in[0][0];
    if (in[1].size() != 3 || in[1][0] != k || in[1][2] != 3) throw ShapeError("deformable_sample: offsets must be [K,P,3]");
    if (in[2].size() != 2 || in[2][1] != geom::kCameraRowSize) throw ShapeError("deformable_sample: cameras must be [V,20]");
    const std::size_t views = in[2][0];
    if (views == 0) throw InvalidArgument("deformable_sample: zero views");
    const std::size_t d = in[3].empty() ? 0 : in[3].back();
    for (std::size_t l = 0; l < nl; ++l) {
        const Shape want{views, static_cast<std::size_t>(levels_[l].height), static_cast<std::size_t>(levels_[l].width), d};
        if (in[3 + l] != want) {
            throw ShapeError("deformable_sample: level " + std::to_string(l) + " map must be " + ad::shape_string(want) +
                             ", got " + ad::shape_string(in[3 + l]));
        }
    }
    if (d % heads_ != 0) throw ShapeError("deformable_sample: width not divisible by head count");
    return {k, heads_, views * nl * in[1][1], d / heads_};
}

void DeformableSampleOp::forward(std::span<const Array* const> in, Array& out) {
    const Array &mu = *in[0], &off = *in[1];
    const std::size_t k = mu.dim(0), np = off.dim(1), views = in[2]->dim(0), nl = levels_.size();
    const std::size_t d = in[3]->dim(3), dh = d / heads_, ns = views * nl * np;
    const auto cams = read_cameras(*in[2], levels_[0].width * levels_[0].stride, levels_[0].height * levels_[0].stride);
    out = Array({k, heads_, ns, dh});
    parallel_for(k, [&](std::size_t q) {
        for (std::size_t p = 0; p < np; ++p) {
            const geom::Vec3 x(mu[q * 3] + off[(q * np + p) * 3], mu[q * 3 + 1] + off[(q * np + p) * 3 + 1],
                               mu[q * 3 + 2] + off[(q * np + p) * 3 + 2]);
            for (std::size_t v = 0; v < views; ++v) {
                const auto pr = project_point(cams[v], x, near_);
                if (!pr.valid) continue;
                for (std::size_t l = 0; l < nl; ++l) {
                    const auto& lv = levels_[l];
                    const auto taps = bilinear_taps(pr.px / lv.stride, pr.py / lv.stride, lv.height, lv.width);
                    if (!taps.any()) continue;
                    const std::size_t s = (v * nl + l) * np + p;
                    const double* map = in[3 + l]->data() + v * static_cast<std::size_t>(lv.height * lv.width) * d;
                    for (int t = 0; t < 4; ++t) {
                        if (taps.index[t] < 0 || taps.weight[t] == 0.0) continue;
                        const double wt = taps.weight[t];
                        const double* src = map + static_cast<std::size_t>(taps.index[t]) * d;
                        for (std::size_t h = 0; h < heads_; ++h) {
                            double* dst = out.data() + ((q * heads_ + h) * ns + s) * dh;
                            for (std::size_t c = 0; c < dh; ++c) dst[c] += wt * src[h * dh + c];
                        }
                    }
                }
            }
        }
    });
}

void DeformableSampleOp::backward(std::span<const Array* const> in, const Array&, const Array& grad,
                                  std::span<Array* const> grads) {
    const Array &mu = *in[0], &off = *in[1];
    const std::size_t k = mu.dim(0), np = off.dim(1), views = in[2]->dim(0), nl = levels_.size();
    const std::size_t d = in[3]->dim(3), dh = d / heads_, ns = views * nl * np;
    const auto cams = read_cameras(*in[2], levels_[0].width * levels_[0].stride, levels_[0].height * levels_[0].stride);
    auto point = [&](std::size_t q, std::size_t p) {
        return geom::Vec3(mu[q * 3] + off[(q * np + p) * 3], mu[q * 3 + 1] + off[(q * np + p) * 3 + 1],
                          mu[q * 3 + 2] + off[(q * np + p) * 3 + 2]);
    };

    bool any_map = false;
    for (std::size_t l = 0; l < nl; ++l) any_map = any_map || grads[3 + l] != nullptr;
    if (any_map) {
        // Views own disjoint rows of every map; queries are visited in order.
        parallel_for(views, [&](std::size_t v) {
            for (std::size_t q = 0; q < k; ++q) {
                for (std::size_t p = 0; p < np; ++p) {
                    const auto pr = project_point(cams[v], point(q, p), near_);
                    if (!pr.valid) continue;
                    for (std::size_t l = 0; l < nl; ++l) {
                        if (!grads[3 + l]) continue;
                        const auto& lv = levels_[l];
                        const auto taps = bilinear_taps(pr.px / lv.stride, pr.py / lv.stride, lv.height, lv.width);
                        const std::size_t s = (v * nl + l) * np + p;
                        double* map = grads[3 + l]->data() + v * static_cast<std::size_t>(lv.height * lv.width) * d;
                        for (int t = 0; t < 4; ++t) {
                            if (taps.index[t] < 0 || taps.weight[t] == 0.0) continue;
                            double* dst = map + static_cast<std::size_t>(taps.index[t]) * d;
                            for (std::size_t h = 0; h < heads_; ++h) {
                                const double* g = grad.data() + ((q * heads_ + h) * ns + s) * dh;
                                for (std::size_t c = 0; c < dh; ++c) dst[h * dh + c] += taps.weight[t] * g[c];
                            }
                        }
                    }
                }
            }
        });
    }
    if (grads[0] || grads[1]) {
        parallel_for(k, [&](std::size_t q) {
            for (std::size_t p = 0; p < np; ++p) {
                Eigen::RowVector3d d_x = Eigen::RowVector3d::Zero();
                for (std::size_t v = 0; v < views; ++v) {
                    const auto pr = project_point(cams[v], point(q, p), near_);
                    if (!pr.valid) continue;
                    double d_px = 0.0, d_py = 0.0;
                    for (std::size_t l = 0; l < nl; ++l) {
                        const auto& lv = levels_[l];
                        const auto taps = bilinear_taps(pr.px / lv.stride, pr.py / lv.stride, lv.height, lv.width);
                        if (!taps.any()) continue;
                        const std::size_t s = (v * nl + l) * np + p;
                        const double* map = in[3 + l]->data() + v * static_cast<std::size_t>(lv.height * lv.width) * d;
                        double du = 0.0, dv = 0.0;
                        for (int t = 0; t < 4; ++t) {
                            if (taps.index[t] < 0) continue;
                            const double* src = map + static_cast<std::size_t>(taps.index[t]) * d;
                            double gv = 0.0;
                            for (std::size_t h = 0; h < heads_; ++h) {
                                const double* g = grad.data() + ((q * heads_ + h) * ns + s) * dh;
                                for (std::size_t c = 0; c < dh; ++c) gv += g[c] * src[h * dh + c];
                            }
                            du += taps.d_du[t] * gv;
                            dv += taps.d_dv[t] * gv;
                        }
                        d_px += du / lv.stride;
                        d_py += dv / lv.stride;
                    }
                    d_x += d_px * pr.jacobian.row(0) + d_py * pr.jacobian.row(1);
                }
                for (int c = 0; c < 3; ++c) {
                    if (grads[0]) (*grads[0])[q * 3 + c] += d_x[c];
                    if (grads[1]) (*grads[1])[(q * np + p) * 3 + c] += d_x[c];
                }
            }
        });
    }
}

// ---------------------------------------------------------------------------

Shape QuaternionNormalizeOp::output_shape(std::span<const Shape> in) const {
    if (in.size() != 1 || in[0].size() != 2 || in[0][1] != 4) throw ShapeError("quat_normalize expects [K,4]");
    return in[0];
}

void QuaternionNormalizeOp::forward(std::span<const Array* const> in, Array& out) {
    const Array& q = *in[0];
    out = Array(q.shape());
    for (std::size_t i = 0; i < q.dim(0); ++i) {
        const double* src = q.data() + i * 4;
        double* dst = out.data() + i * 4;
        const double n = std::sqrt(src[0] * src[0] + src[1] * src[1] + src[2] * src[2] + src[3] * src[3]);
        if (n < 1e-8) {
            dst[0] = 1.0;
            ++fallbacks_;
            continue;
        }
        for (int c = 0; c < 4; ++c) dst[c] = src[c] / n;
    }
}

void QuaternionNormalizeOp::backward(std::span<const Array* const> in, const Array& out, const Array& grad,
                                     std::span<Array* const> grads) {
    if (!grads[0]) return;
    const Array& q = *in[0];
    for (std::size_t i = 0; i < q.dim(0); ++i) {
        const double* src = q.data() + i * 4;
        const double n = std::sqrt(src[0] * src[0] + src[1] * src[1] + src[2] * src[2] + src[3] * src[3]);
        if (n < 1e-8) continue;
        const double* u = out.data() + i * 4;
        const double* g = grad.data() + i * 4;
        const double dot = u[0] * g[0] + u[1] * g[1] + u[2] * g[2] + u[3] * g[3];
        for (int c = 0; c < 4; ++c) (*grads[0])[i * 4 + c] += (g[c] - u[c] * dot) / n;
    }
}

// ---------------------------------------------------------------------------

NodeRef decode_positions(Graph& g, NodeRef anchors, const Bounds& bounds) {
    const geom::Vec3 size = bounds.size();
    auto raw = g.slice(anchors, kAnchorPos, kAnchorPos + 3);
    return g.add(g.multiply(g.sigmoid(raw), g.constant(Array::vector({size.x(), size.y(), size.z()}))),
                 g.constant(Array::vector({bounds.min.x(), bounds.min.y(), bounds.min.z()})));
}

NodeRef sparse_conv_block(Graph& g, NodeRef mu, NodeRef features, const Bounds& bounds, double voxel_size,
                          const std::string& name, Rng& rng) {
    const std::size_t d = g.shape(features).back();
    Graph::Scope scope(g, name);
    auto w = g.parameter("w", normal_init({27, d, d}, 27 * d, rng));
    auto b = g.parameter("b", Array({d}));
    auto conv = g.custom(std::make_shared<SparseConvOp>(bounds.min, voxel_size), {mu, features, w, b});
    return g.add(features, conv);
}

NodeRef deformable_attention_block(Graph& g, NodeRef mu, NodeRef features, const FeaturePyramid& pyramid,
                                   NodeRef cameras, const DecoderConfig& config, double voxel_size,
                                   const std::string& name, Rng& rng) {
    const std::size_t k = g.shape(features)[0], d = g.shape(features)[1];
    const std::size_t np = config.n_offsets, nh = config.n_heads;
    const std::size_t ns = pyramid.views * pyramid.levels.size() * np;
    Graph::Scope scope(g, name);
    auto x = g.layer_norm(features);

    // Offset biases start on a tetrahedron at half a voxel.
    static const double kDirs[4][3] = {{1, 1, 1}, {-1, -1, 1}, {-1, 1, -1}, {1, -1, -1}};
    Array bias({3 * np});
    for (std::size_t p = 0; p < np; ++p) {
        const double r = 0.5 / (1.0 + static_cast<double>(p / 4));
        for (int c = 0; c < 3; ++c) bias[p * 3 + c] = std::atanh(r * kDirs[p % 4][c] / std::sqrt(3.0));
    }
    auto raw = linear_with(g, x, "offsets", normal_init({d, 3 * np}, d, rng, 0.1), std::move(bias));
    auto offsets = g.reshape(g.scale(tanh(g, raw), voxel_size), {k, np, 3});

    std::vector<NodeRef> inputs = {mu, offsets, cameras};
    for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
        inputs.push_back(linear(g, pyramid.levels[l].map, d, "value" + std::to_string(l + 1), rng));
    }
    auto sampled = g.custom(std::make_shared<DeformableSampleOp>(pyramid.levels, nh), inputs);

    auto logits = linear(g, x, nh * ns, "logits", rng, 0.1);
    auto weights = g.softmax(g.reshape(logits, {k, nh, 1, ns}));
    auto attended = g.reshape(g.matmul(weights, sampled), {k, d});
    return g.add(features, linear(g, attended, d, "out", rng));
}

HeadOutput gaussian_head(Graph& g, NodeRef anchors, NodeRef features, const Bounds& bounds,
                         const DecoderConfig& config, const std::string& name, Rng& rng,
                         std::shared_ptr<QuaternionNormalizeOp> normalize) {
    if (!normalize) normalize = std::make_shared<QuaternionNormalizeOp>();
    Graph::Scope scope(g, name);
    const double e = bounds.extent();
    HeadOutput h;
    h.gaussians.mu = decode_positions(g, anchors, bounds);
    h.gaussians.scale =
        g.add(g.scale(g.sigmoid(g.slice(anchors, kAnchorScale, kAnchorScale + 3)), (config.scale_max - config.scale_min) * e),
              g.constant(Array::scalar(config.scale_min * e)));
    h.gaussians.quat = g.custom(normalize, {g.slice(anchors, kAnchorQuat, kAnchorQuat + 4)});
    h.gaussians.opacity = g.sigmoid(g.slice(anchors, kAnchorOpacity, kAnchorOpacity + 1));
    h.color_logits = mlp2(g, g.layer_norm(features), config.head_hidden, 3, "color", rng, 0.1);
    h.gaussians.color = g.sigmoid(h.color_logits);
    return h;
}

namespace {

// Two-layer perceptron whose last layer starts near `bias`.
NodeRef head_mlp(Graph& g, NodeRef x, std::size_t hidden, const std::string& name, Rng& rng, double gain,
                 Array bias) {
    Graph::Scope scope(g, name);
    auto h = g.relu(linear(g, x, hidden, "fc1", rng, std::sqrt(2.0)));
    const std::size_t out = bias.size();
    return linear_with(g, h, "fc2", normal_init({hidden, out}, hidden, rng, gain), std::move(bias));
}

} // namespace

DecoderGraph build_decoder(Graph& g, const FeaturePyramid& pyramid, NodeRef cameras, const GaussianQuerySet& init,
                           const DecoderConfig& config, Rng& rng) {
    config.validate();
    const std::size_t k = init.anchors.dim(0);
    if (init.anchors.shape() != Shape{k, kAnchorWidth} || init.features.shape() != Shape{k, config.feature_dim}) {
        throw ShapeError("decoder init: anchors must be [K,11] and features [K,D]");
    }
    const Bounds& bounds = init.bounds;
    const double vs = config.resolved_voxel_size(bounds);
    const double raw_scale = logit((config.init_scale - config.scale_min) / (config.scale_max - config.scale_min));

    DecoderGraph out;
    out.normalize = std::make_shared<QuaternionNormalizeOp>();
    Graph::Scope scope(g, "decoder");
    out.initial_anchors = g.parameter("anchors", init.anchors);
    out.initial_features = g.parameter("features", init.features);
    out.anchors.push_back(out.initial_anchors);
    out.features.push_back(out.initial_features);

    for (std::size_t layer = 0; layer < config.n_layers; ++layer) {
        Graph::Scope ls(g, "layer" + std::to_string(layer + 1));
        NodeRef anchors = out.anchors.back();
        NodeRef f = out.features.back();
        auto mu = decode_positions(g, anchors, bounds);
        f = sparse_conv_block(g, mu, f, bounds, vs, "sparse_conv", rng);
        f = deformable_attention_block(g, mu, f, pyramid, cameras, config, vs, "cross_attn", rng);
        {
            Graph::Scope fs(g, "ffn");
            auto h = g.relu(linear(g, g.layer_norm(f), config.ffn_hidden, "fc1", rng, std::sqrt(2.0)));
            f = g.add(f, linear(g, h, config.feature_dim, "fc2", rng, 0.1));
        }
        Graph::Scope hs(g, "head");
        auto x = g.layer_norm(f);
        auto d_pos = head_mlp(g, x, config.head_hidden, "pos", rng, 0.01, Array({3}));
        auto scale = head_mlp(g, x, config.head_hidden, "scale", rng, 0.01, Array({3}, raw_scale));
        auto quat = head_mlp(g, x, config.head_hidden, "quat", rng, 0.01, Array::vector({1, 0, 0, 0}));
        auto opacity = head_mlp(g, x, config.head_hidden, "opacity", rng, 0.01, Array({1}, logit(config.init_opacity)));
        auto pos = g.add(g.slice(anchors, kAnchorPos, kAnchorPos + 3), d_pos);
        out.anchors.push_back(g.concat({pos, scale, quat, opacity}));
        out.features.push_back(f);
    }
    out.head = gaussian_head(g, out.anchors.back(), out.features.back(), bounds, config, "head", rng, out.normalize);
    return out;
}

std::vector<geom::GaussianPrimitive> read_gaussians(const Graph& g, const render::GaussianNodes& n) {
    return render::gaussians_from_arrays(g.value(n.mu), g.value(n.quat), g.value(n.scale), g.value(n.opacity),
                                         g.value(n.color));
}

} // namespace sqs::model
