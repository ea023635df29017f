#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <optional>

namespace sqs::geom {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;  // quaternion (w, x, y, z)
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

struct GaussianPrimitive {
    Vec3 mu = Vec3::Zero();
    Vec4 quat = Vec4(1.0, 0.0, 0.0, 0.0);
    Vec3 scale = Vec3::Ones();
    double opacity = 1.0;
    Vec3 color = Vec3::Zero();
};

// Pinhole camera. extrinsics maps camera coordinates to world coordinates
// (x right, y down, z forward in the camera frame). The rotation block is
// orthonormal; its determinant is +1 except for mirrored cameras produced by
// horizontal-flip augmentation, which carry -1.
struct Camera {
    Mat3 intrinsics = Mat3::Identity();
    Mat4 extrinsics = Mat4::Identity();
    int width = 0;
    int height = 0;

    static Camera pinhole(double fx, double fy, double cx, double cy, const Mat4& camera_to_world, int width,
                          int height);

    double fx() const { return intrinsics(0, 0); }
    double fy() const { return intrinsics(1, 1); }
    double cx() const { return intrinsics(0, 2); }
    double cy() const { return intrinsics(1, 2); }
    Mat3 world_to_camera_rotation() const { return extrinsics.topLeftCorner<3, 3>().transpose(); }
    Vec3 position() const { return extrinsics.topRightCorner<3, 1>(); }
    Vec3 to_camera(const Vec3& world) const { return world_to_camera_rotation() * (world - position()); }
    bool mirrored() const { return extrinsics.topLeftCorner<3, 3>().determinant() < 0.0; }

    // Throws InvalidArgument when intrinsics or the rigid block are invalid.
    void validate() const;
};

// Flat camera encoding used as graph input: fx, fy, cx, cy, then the 4x4
// camera-to-world matrix row-major.
inline constexpr std::size_t kCameraRowSize = 20;
std::array<double, kCameraRowSize> camera_to_row(const Camera& cam);
Camera camera_from_row(const double* row, int width, int height);

// Camera looking from `eye` towards `target` with world `up` hint.
Mat4 look_at(const Vec3& eye, const Vec3& target, const Vec3& up);

struct ProjectionSettings {
    double cov_regularization = 0.3;  // px^2 added to the 2D covariance diagonal
    double near_plane = 0.01;         // metres, camera-frame z
};

struct ProjectedGaussian {
    Vec2 mean2d = Vec2::Zero();
    Mat2 cov2d = Mat2::Identity();
    Mat2 conic = Mat2::Identity();  // inverse of cov2d
    double cam_distance = 0.0;      // Euclidean distance to the camera centre
    double opacity = 0.0;
    Vec3 color = Vec3::Zero();
    Vec3 cam_point = Vec3::Zero();  // camera-frame mean
};

// Normalizes q first. Throws InvalidArgument when |q| < 1e-8.
Mat3 quaternion_to_rotation(const Vec4& quat);

// R S S^T R^T. Throws InvalidArgument on non-positive scale.
Mat3 covariance_from_scale_rotation(const Vec3& scale, const Vec4& quat);

// 2x3 affine perspective Jacobian at camera-frame point t.
Eigen::Matrix<double, 2, 3> projection_jacobian(const Vec3& t, double fx, double fy);

// Empty when the camera-frame depth is at or in front of the near plane.
std::optional<ProjectedGaussian> project_gaussian(const GaussianPrimitive& g, const Camera& cam,
                                                  const ProjectionSettings& settings = {});

struct ProjectionGradient {
    Vec3 d_mu = Vec3::Zero();
    Vec4 d_quat = Vec4::Zero();
    Vec3 d_scale = Vec3::Zero();
};

// Pulls gradients of (mean2d, cov2d, cam_distance) back to (mu, quat, scale).
// d_cov2d uses the symmetric convention dL = sum_ij G_ij dcov_ij with G = G^T.
ProjectionGradient project_gaussian_backward(const GaussianPrimitive& g, const Camera& cam,
                                             const ProjectionSettings& settings, const Vec2& d_mean2d,
                                             const Mat2& d_cov2d, double d_distance);

} // namespace sqs::geom
