#include "sqs/geometry/gaussian.hpp"

#include "sqs/core/error.hpp"

#include <cmath>
#include <string>

namespace sqs::geom {

Camera Camera::pinhole(double fx, double fy, double cx, double cy, const Mat4& camera_to_world, int width,
                       int height) {
    Camera c;
    c.intrinsics << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    c.extrinsics = camera_to_world;
    c.width = width;
    c.height = height;
    c.validate();
    return c;
}

void Camera::validate() const {
    if (!(fx() > 0.0) || !(fy() > 0.0)) throw InvalidArgument("camera focal lengths must be positive");
    if (width <= 0 || height <= 0) throw InvalidArgument("camera image size must be positive");
    const Mat3 r = extrinsics.topLeftCorner<3, 3>();
    if (!((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() <= 1e-9)) {
        throw InvalidArgument("camera rotation block is not orthonormal");
    }
    if (std::abs(std::abs(r.determinant()) - 1.0) > 1e-9) {
        throw InvalidArgument("camera rotation determinant is not +-1");
    }
    const Eigen::RowVector4d last = extrinsics.row(3);
    if ((last - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-12) {
        throw InvalidArgument("camera extrinsics last row must be (0,0,0,1)");
    }
}

std::array<double, kCameraRowSize> camera_to_row(const Camera& cam) {
    std::array<double, kCameraRowSize> row{};
    row[0] = cam.fx();
    row[1] = cam.fy();
    row[2] = cam.cx();
    row[3] = cam.cy();
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) row[static_cast<std::size_t>(4 + r * 4 + c)] = cam.extrinsics(r, c);
    }
    return row;
}

Camera camera_from_row(const double* row, int width, int height) {
    Mat4 t;
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) t(r, c) = row[4 + r * 4 + c];
    }
    return Camera::pinhole(row[0], row[1], row[2], row[3], t, width, height);
}

Mat4 look_at(const Vec3& eye, const Vec3& target, const Vec3& up) {
    const Vec3 forward = (target - eye).normalized();
    Vec3 right = forward.cross(up);
    if (right.norm() < 1e-12) throw InvalidArgument("look_at: up vector parallel to viewing direction");
    right.normalize();
    const Vec3 down = forward.cross(right);
    Mat4 t = Mat4::Identity();
    t.block<3, 1>(0, 0) = right;
    t.block<3, 1>(0, 1) = down;
    t.block<3, 1>(0, 2) = forward;
    t.block<3, 1>(0, 3) = eye;
    return t;
}

Mat3 quaternion_to_rotation(const Vec4& quat) {
    const double n = quat.norm();
    if (!(n >= 1e-8)) throw InvalidArgument("quaternion norm below 1e-8");
    const Vec4 q = quat / n;
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),  //
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),  //
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

Mat3 covariance_from_scale_rotation(const Vec3& scale, const Vec4& quat) {
    if (!(scale.minCoeff() > 0.0)) throw InvalidArgument("Gaussian scale must be positive");
    const Mat3 m = quaternion_to_rotation(quat) * scale.asDiagonal();
    return m * m.transpose();
}

Eigen::Matrix<double, 2, 3> projection_jacobian(const Vec3& t, double fx, double fy) {
    const double iz = 1.0 / t.z();
    Eigen::Matrix<double, 2, 3> j;
    j << fx * iz, 0.0, -fx * t.x() * iz * iz,  //
        0.0, fy * iz, -fy * t.y() * iz * iz;
    return j;
}

std::optional<ProjectedGaussian> project_gaussian(const GaussianPrimitive& g, const Camera& cam,
                                                  const ProjectionSettings& settings) {
    const Vec3 t = cam.to_camera(g.mu);
    if (t.z() <= settings.near_plane) return std::nullopt;
    ProjectedGaussian p;
    p.cam_point = t;
    p.mean2d = Vec2(cam.fx() * t.x() / t.z() + cam.cx(), cam.fy() * t.y() / t.z() + cam.cy());
    const Eigen::Matrix<double, 2, 3> a = projection_jacobian(t, cam.fx(), cam.fy()) * cam.world_to_camera_rotation();
    const Mat3 sigma = covariance_from_scale_rotation(g.scale, g.quat);
    Mat2 cov = a * sigma * a.transpose();
    cov(0, 1) = cov(1, 0) = 0.5 * (cov(0, 1) + cov(1, 0));
    cov(0, 0) += settings.cov_regularization;
    cov(1, 1) += settings.cov_regularization;
    p.cov2d = cov;
    const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
    p.conic << cov(1, 1) / det, -cov(0, 1) / det, -cov(1, 0) / det, cov(0, 0) / det;
    p.cam_distance = t.norm();
    p.opacity = g.opacity;
    p.color = g.color;
    return p;
}

ProjectionGradient project_gaussian_backward(const GaussianPrimitive& g, const Camera& cam,
                                             const ProjectionSettings& settings, const Vec2& d_mean2d,
                                             const Mat2& d_cov2d, double d_distance) {
    ProjectionGradient out;
    const Vec3 t = cam.to_camera(g.mu);
    if (t.z() <= settings.near_plane) return out;
    const Mat3 rwc = cam.world_to_camera_rotation();
    const double fx = cam.fx(), fy = cam.fy();
    const double iz = 1.0 / t.z();
    const Eigen::Matrix<double, 2, 3> j = projection_jacobian(t, fx, fy);
    const Eigen::Matrix<double, 2, 3> a = j * rwc;

    const double qn = g.quat.norm();
    const Vec4 q = g.quat / qn;
    const Mat3 r = quaternion_to_rotation(g.quat);
    const Mat3 m = r * g.scale.asDiagonal();
    const Mat3 sigma = m * m.transpose();

    const Mat2 gs = 0.5 * (d_cov2d + d_cov2d.transpose());

    // cov = A Sigma A^T
    const Mat3 d_sigma = a.transpose() * gs * a;
    const Eigen::Matrix<double, 2, 3> d_a = 2.0 * gs * a * sigma;
    const Eigen::Matrix<double, 2, 3> d_j = d_a * rwc.transpose();

    // mean2d and J as functions of t.
    Vec3 d_t = j.transpose() * d_mean2d;
    d_t.x() += d_j(0, 2) * (-fx * iz * iz);
    d_t.y() += d_j(1, 2) * (-fy * iz * iz);
    d_t.z() += d_j(0, 0) * (-fx * iz * iz) + d_j(0, 2) * (2.0 * fx * t.x() * iz * iz * iz) +
               d_j(1, 1) * (-fy * iz * iz) + d_j(1, 2) * (2.0 * fy * t.y() * iz * iz * iz);
    d_t += t / t.norm() * d_distance;
    out.d_mu = rwc.transpose() * d_t;

    // Sigma = M M^T, M = R diag(s)
    const Mat3 d_m = 2.0 * d_sigma * m;
    const Mat3 rt_dm = r.transpose() * d_m;
    out.d_scale = rt_dm.diagonal();
    const Mat3 d_r = d_m * g.scale.asDiagonal();

    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 dw, dx, dy, dz;
    dw << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
    dx << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
    dy << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
    dz << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
    const Vec4 d_qhat(d_r.cwiseProduct(dw).sum(), d_r.cwiseProduct(dx).sum(), d_r.cwiseProduct(dy).sum(),
                      d_r.cwiseProduct(dz).sum());
    out.d_quat = (d_qhat - q * q.dot(d_qhat)) / qn;
    return out;
}

} // namespace sqs::geom
