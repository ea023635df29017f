#pragma once

#include "sqs/autodiff/array.hpp"
#include "sqs/geometry/gaussian.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace sqs::scene {

using geom::Camera;
using geom::GaussianPrimitive;
using geom::Vec3;

struct Bounds {
    Vec3 min = Vec3(-1.0, -1.0, -1.0);
    Vec3 max = Vec3(1.0, 1.0, 1.0);

    Vec3 size() const { return max - min; }
    Vec3 center() const { return 0.5 * (min + max); }
    // Longest edge; the length unit for scale ranges and voxel sizes.
    double extent() const { return size().maxCoeff(); }
    bool contains(const Vec3& p) const;
    // Throws InvalidArgument for an empty or inverted box.
    void validate() const;
};

struct SceneConfig {
    int n_objects = 3;
    Bounds bounds;
    int n_views = 4;
    int width = 64;
    int height = 64;
    int gaussians_per_object = 96;
    double ring_radius = 1.6;    // multiples of bounds extent, from the centre
    double ring_height = 0.45;   // multiples of bounds extent, above the centre
    double fov_degrees = 55.0;   // horizontal
};

struct Scene {
    std::vector<GaussianPrimitive> gaussians;
    std::vector<Camera> cameras;
    Bounds bounds;
    std::uint64_t seed = 0;
};

// Per-view supervision. valid_mask holds 0/1.
struct SceneSample {
    std::vector<ad::Array> rgb;         // [H, W, 3]
    std::vector<ad::Array> dense_depth; // [H, W]
    std::vector<ad::Array> valid_mask;  // [H, W]
    std::vector<Camera> cameras;

    std::size_t views() const { return cameras.size(); }
};

// Ring cameras looking at the bounds centre, view k at angle 2 pi k / n.
std::vector<Camera> ring_cameras(const SceneConfig& config);

// Objects are Gaussian clouds on sphere or box surfaces, deterministic in seed.
Scene generate_scene(const SceneConfig& config, std::uint64_t seed);

// Dense targets from the reference renderer; valid_mask = alpha_acc > 0.5.
SceneSample bake_ground_truth(const Scene& scene);

// Keeps each valid pixel independently with probability keep_rate.
SceneSample sparsify_depth(const SceneSample& sample, double keep_rate, std::uint64_t seed);

std::vector<char> encode_scene(const Scene& scene);
Scene decode_scene(const std::vector<char>& bytes);
void save_scene(const std::filesystem::path& path, const Scene& scene);
Scene load_scene(const std::filesystem::path& path);

// Mask file: u32 width, u32 height, then width*height bytes (0 or 1), rows top to bottom.
std::vector<char> encode_mask(const ad::Array& mask);
ad::Array decode_mask(const std::vector<char>& bytes);

// scenes/<id>/{scene.bin, view<k>.ppm, view<k>.pfm, mask<k>.bin}
void write_scene_dir(const std::filesystem::path& dir, const Scene& scene, const SceneSample& sample);

struct SceneRecord {
    std::string id;
    Scene scene;
    SceneSample sample;
};

SceneRecord read_scene_dir(const std::filesystem::path& dir);
// Sorted scene directories under <dataset>/scenes.
std::vector<std::filesystem::path> list_scene_dirs(const std::filesystem::path& dataset);

} // namespace sqs::scene
