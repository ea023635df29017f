#include "sqs/scene/scene.hpp"

#include "sqs/core/error.hpp"
#include "sqs/io/binary.hpp"
#include "sqs/render/image_io.hpp"
#include "sqs/render/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace sqs::scene {

namespace {

constexpr char kSceneMagic[7] = {'S', 'Q', 'S', 'S', 'C', 'N', '1'};
constexpr std::uint8_t kSceneVersion = 1;

geom::Vec4 random_unit_quat(std::mt19937_64& rng) {
    std::normal_distribution<double> n;
    geom::Vec4 q;
    do {
        q = geom::Vec4(n(rng), n(rng), n(rng), n(rng));
    } while (q.norm() < 1e-6);
    return q.normalized();
}

Vec3 random_on_sphere(std::mt19937_64& rng) {
    std::normal_distribution<double> n;
    Vec3 v;
    do {
        v = Vec3(n(rng), n(rng), n(rng));
    } while (v.norm() < 1e-9);
    return v.normalized();
}

// Uniform point on the surface of an axis-aligned box with half sizes h.
Vec3 random_on_box(std::mt19937_64& rng, const Vec3& h) {
    std::uniform_real_distribution<double> u(-1.0, 1.0), pick(0.0, 1.0);
    const double areas[3] = {h.y() * h.z(), h.x() * h.z(), h.x() * h.y()};
    const double total = areas[0] + areas[1] + areas[2];
    double r = pick(rng) * total;
    int axis = 0;
    while (axis < 2 && r >= areas[axis]) r -= areas[axis++];
    Vec3 p(u(rng) * h.x(), u(rng) * h.y(), u(rng) * h.z());
    p[axis] = (pick(rng) < 0.5 ? -1.0 : 1.0) * h[axis];
    return p;
}

void put_vec(io::ByteWriter& w, const double* v, int n) {
    for (int i = 0; i < n; ++i) w.put<double>(v[i]);
}

} // namespace

bool Bounds::contains(const Vec3& p) const {
    return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
}

void Bounds::validate() const {
    if (!min.allFinite() || !max.allFinite() || !((max - min).array() > 0.0).all()) {
        throw InvalidArgument("scene bounds must have positive volume");
    }
}

std::vector<Camera> ring_cameras(const SceneConfig& config) {
    if (config.n_views < 1) throw InvalidArgument("n_views must be >= 1");
    if (config.width < 1 || config.height < 1) throw InvalidArgument("image size must be positive");
    const Vec3 c = config.bounds.center();
    const double extent = config.bounds.extent();
    const double f = 0.5 * config.width / std::tan(0.5 * config.fov_degrees * M_PI / 180.0);
    std::vector<Camera> cams;
    for (int k = 0; k < config.n_views; ++k) {
        const double a = 2.0 * M_PI * k / config.n_views;
        const Vec3 eye = c + Vec3(config.ring_radius * extent * std::cos(a), config.ring_radius * extent * std::sin(a),
                                  config.ring_height * extent);
        cams.push_back(Camera::pinhole(f, f, 0.5 * (config.width - 1), 0.5 * (config.height - 1),
                                       geom::look_at(eye, c, Vec3(0, 0, 1)), config.width, config.height));
    }
    return cams;
}

Scene generate_scene(const SceneConfig& config, std::uint64_t seed) {
    config.bounds.validate();
    if (config.n_objects < 1) throw InvalidArgument("n_objects must be >= 1");
    if (config.gaussians_per_object < 1) throw InvalidArgument("gaussians_per_object must be >= 1");

    Scene scene;
    scene.bounds = config.bounds;
    scene.seed = seed;
    scene.cameras = ring_cameras(config);

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const Vec3 size = config.bounds.size();
    const double min_edge = size.minCoeff();
    for (int o = 0; o < config.n_objects; ++o) {
        const bool sphere = unit(rng) < 0.5;
        const double radius = (0.12 + 0.1 * unit(rng)) * min_edge;
        const Vec3 half = sphere ? Vec3::Constant(radius)
                                 : Vec3(radius * (0.5 + 0.5 * unit(rng)), radius * (0.5 + 0.5 * unit(rng)),
                                        radius * (0.5 + 0.5 * unit(rng)));
        Vec3 centre;
        for (int a = 0; a < 3; ++a) {
            centre[a] = config.bounds.min[a] + half[a] + unit(rng) * (size[a] - 2.0 * half[a]);
        }
        const Vec3 color(unit(rng), unit(rng), unit(rng));
        const double area = sphere ? 4.0 * M_PI * radius * radius
                                   : 8.0 * (half.x() * half.y() + half.y() * half.z() + half.x() * half.z());
        const double spacing = std::sqrt(area / config.gaussians_per_object);
        for (int i = 0; i < config.gaussians_per_object; ++i) {
            GaussianPrimitive g;
            g.mu = centre + (sphere ? Vec3(radius * random_on_sphere(rng)) : random_on_box(rng, half));
            g.mu = g.mu.cwiseMax(config.bounds.min).cwiseMin(config.bounds.max);
            g.quat = random_unit_quat(rng);
            g.scale = Vec3(spacing * (0.35 + 0.25 * unit(rng)), spacing * (0.35 + 0.25 * unit(rng)),
                           spacing * (0.35 + 0.25 * unit(rng)));
            g.opacity = 0.6 + 0.4 * unit(rng);
            g.color = color;
            scene.gaussians.push_back(g);
        }
    }
    return scene;
}

SceneSample bake_ground_truth(const Scene& scene) {
    SceneSample s;
    s.cameras = scene.cameras;
    const std::size_t n = scene.cameras.size();
    s.rgb.resize(n);
    s.dense_depth.resize(n);
    s.valid_mask.resize(n);
    for (std::size_t v = 0; v < n; ++v) {
        const auto out = render::render_reference(scene.gaussians, scene.cameras[v]);
        s.rgb[v] = out.rgb;
        s.dense_depth[v] = out.depth;
        ad::Array mask(out.alpha_acc.shape());
        for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = out.alpha_acc[i] > 0.5 ? 1.0 : 0.0;
        s.valid_mask[v] = std::move(mask);
    }
    return s;
}

SceneSample sparsify_depth(const SceneSample& sample, double keep_rate, std::uint64_t seed) {
    if (!(keep_rate > 0.0 && keep_rate <= 1.0)) throw InvalidArgument("keep_rate must be in (0, 1]");
    SceneSample out = sample;
    if (keep_rate == 1.0) return out;
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution keep(keep_rate);
    for (auto& mask : out.valid_mask) {
        for (auto& m : mask.values()) {
            if (m != 0.0 && !keep(rng)) m = 0.0;
        }
    }
    return out;
}

std::vector<char> encode_scene(const Scene& scene) {
    io::ByteWriter w;
    w.put_bytes(kSceneMagic, sizeof(kSceneMagic));
    w.put<std::uint8_t>(kSceneVersion);
    w.put<std::uint64_t>(scene.seed);
    put_vec(w, scene.bounds.min.data(), 3);
    put_vec(w, scene.bounds.max.data(), 3);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(scene.gaussians.size()));
    for (const auto& g : scene.gaussians) {
        put_vec(w, g.mu.data(), 3);
        put_vec(w, g.quat.data(), 4);
        put_vec(w, g.scale.data(), 3);
        w.put<double>(g.opacity);
        put_vec(w, g.color.data(), 3);
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(scene.cameras.size()));
    for (const auto& c : scene.cameras) {
        w.put<std::int32_t>(c.width);
        w.put<std::int32_t>(c.height);
        const auto row = geom::camera_to_row(c);
        put_vec(w, row.data(), static_cast<int>(row.size()));
    }
    return w.bytes();
}

Scene decode_scene(const std::vector<char>& bytes) {
    io::ByteReader r(bytes);
    if (r.get_string(sizeof(kSceneMagic), "magic") != std::string(kSceneMagic, sizeof(kSceneMagic))) {
        throw FormatError("not a scene file: bad magic at byte 0");
    }
    const auto version = r.get<std::uint8_t>("version");
    if (version != kSceneVersion) {
        throw FormatError("unsupported scene version " + std::to_string(version) + " at byte 7");
    }
    Scene s;
    s.seed = r.get<std::uint64_t>("seed");
    for (int a = 0; a < 3; ++a) s.bounds.min[a] = r.get<double>("bounds.min");
    for (int a = 0; a < 3; ++a) s.bounds.max[a] = r.get<double>("bounds.max");
    const auto n = r.get<std::uint32_t>("gaussian count");
    s.gaussians.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::string what = "gaussian " + std::to_string(i);
        auto& g = s.gaussians[i];
        for (int a = 0; a < 3; ++a) g.mu[a] = r.get<double>(what + " mu");
        for (int a = 0; a < 4; ++a) g.quat[a] = r.get<double>(what + " quat");
        for (int a = 0; a < 3; ++a) g.scale[a] = r.get<double>(what + " scale");
        g.opacity = r.get<double>(what + " opacity");
        for (int a = 0; a < 3; ++a) g.color[a] = r.get<double>(what + " color");
    }
    const auto nc = r.get<std::uint32_t>("camera count");
    for (std::uint32_t i = 0; i < nc; ++i) {
        const std::string what = "camera " + std::to_string(i);
        const int width = r.get<std::int32_t>(what + " width");
        const int height = r.get<std::int32_t>(what + " height");
        std::array<double, geom::kCameraRowSize> row;
        for (auto& v : row) v = r.get<double>(what + " parameters");
        s.cameras.push_back(geom::camera_from_row(row.data(), width, height));
    }
    if (!r.at_end()) throw FormatError("trailing bytes after scene at byte " + std::to_string(r.position()));
    return s;
}

void save_scene(const std::filesystem::path& path, const Scene& scene) { io::write_file(path, encode_scene(scene)); }

Scene load_scene(const std::filesystem::path& path) { return decode_scene(io::read_file(path)); }

std::vector<char> encode_mask(const ad::Array& mask) {
    if (mask.rank() != 2) throw ShapeError("mask must be [H, W]");
    io::ByteWriter w;
    w.put<std::uint32_t>(static_cast<std::uint32_t>(mask.dim(1)));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(mask.dim(0)));
    for (double m : mask.values()) w.put<std::uint8_t>(m != 0.0 ? 1 : 0);
    return w.bytes();
}

ad::Array decode_mask(const std::vector<char>& bytes) {
    io::ByteReader r(bytes);
    const auto w = r.get<std::uint32_t>("mask width");
    const auto h = r.get<std::uint32_t>("mask height");
    ad::Array mask({h, w});
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const auto b = r.get<std::uint8_t>("mask pixel " + std::to_string(i));
        if (b > 1) throw FormatError("mask byte must be 0 or 1 at byte " + std::to_string(r.position() - 1));
        mask[i] = b;
    }
    if (!r.at_end()) throw FormatError("trailing bytes after mask");
    return mask;
}

void write_scene_dir(const std::filesystem::path& dir, const Scene& scene, const SceneSample& sample) {
    save_scene(dir / "scene.bin", scene);
    for (std::size_t k = 0; k < sample.views(); ++k) {
        const std::string i = std::to_string(k);
        render::write_ppm(dir / ("view" + i + ".ppm"), sample.rgb[k]);
        render::write_pfm(dir / ("view" + i + ".pfm"), sample.dense_depth[k]);
        io::write_file(dir / ("mask" + i + ".bin"), encode_mask(sample.valid_mask[k]));
    }
}

SceneRecord read_scene_dir(const std::filesystem::path& dir) {
    SceneRecord rec;
    rec.id = dir.filename().string();
    rec.scene = load_scene(dir / "scene.bin");
    auto& s = rec.sample;
    s.cameras = rec.scene.cameras;
    for (std::size_t k = 0; k < s.cameras.size(); ++k) {
        const std::string i = std::to_string(k);
        s.rgb.push_back(render::read_ppm(dir / ("view" + i + ".ppm")));
        s.dense_depth.push_back(render::read_pfm(dir / ("view" + i + ".pfm")));
        s.valid_mask.push_back(decode_mask(io::read_file(dir / ("mask" + i + ".bin"))));
        const auto& cam = s.cameras[k];
        const ad::Shape hw{static_cast<std::size_t>(cam.height), static_cast<std::size_t>(cam.width)};
        if (s.dense_depth[k].shape() != hw || s.valid_mask[k].shape() != hw || s.rgb[k].dim(0) != hw[0] ||
            s.rgb[k].dim(1) != hw[1]) {
            throw FormatError("view " + i + " of " + dir.string() + " does not match its camera size");
        }
    }
    return rec;
}

std::vector<std::filesystem::path> list_scene_dirs(const std::filesystem::path& dataset) {
    const auto root = dataset / "scenes";
    if (!std::filesystem::is_directory(root)) throw InvalidArgument("no scenes directory under " + dataset.string());
    std::vector<std::filesystem::path> dirs;
    for (const auto& e : std::filesystem::directory_iterator(root)) {
        if (e.is_directory()) dirs.push_back(e.path());
    }
    std::sort(dirs.begin(), dirs.end());
    return dirs;
}

} // namespace sqs::scene
