#pragma once

// Shared geometric value types: pixel/normalized points, intrinsics, poses,
// homographies, and the axis-angle rotation map.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "gridrect/error.hpp"

namespace gridrect {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct PixelPoint {
  double x{0.0};
  double y{0.0};

  friend bool operator==(const PixelPoint&, const PixelPoint&) = default;
};

struct NormalizedPoint {
  double xh{0.0};
  double yh{0.0};

  friend bool operator==(const NormalizedPoint&, const NormalizedPoint&) = default;
};

inline bool is_finite(const PixelPoint& p) noexcept { return std::isfinite(p.x) && std::isfinite(p.y); }

/// Detected button centers plus the image extent they were detected in.
/// Points may fall outside [0,w)x[0,h).
struct DetectionSet {
  std::vector<PixelPoint> points;
  double width{0.0};
  double height{0.0};

  [[nodiscard]] std::size_t size() const noexcept { return points.size(); }
};

inline void validate(const DetectionSet& X) {
  if (!(X.width > 0.0) || !(X.height > 0.0)) {
    throw Error(ErrorKind::InvalidInput, "image width and height must be positive");
  }
  for (std::size_t n = 0; n < X.points.size(); ++n) {
    if (!is_finite(X.points[n])) {
      throw Error(ErrorKind::InvalidInput, "detection " + std::to_string(n) + " is not finite", n);
    }
  }
}

/// Pinhole intrinsics without skew or lens distortion.
struct Intrinsics {
  double fx{320.0};
  double fy{320.0};
  double cx{320.0};
  double cy{240.0};

  [[nodiscard]] Mat3 matrix() const {
    Mat3 K;
    K << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return K;
  }
  [[nodiscard]] Mat3 inverse() const {
    Mat3 Ki;
    Ki << 1.0 / fx, 0.0, -cx / fx, 0.0, 1.0 / fy, -cy / fy, 0.0, 0.0, 1.0;
    return Ki;
  }

  friend bool operator==(const Intrinsics&, const Intrinsics&) = default;
};

inline void validate(const Intrinsics& K) {
  if (!(K.fx > 0.0) || !(K.fy > 0.0) || !std::isfinite(K.fx) || !std::isfinite(K.fy) || !std::isfinite(K.cx) ||
      !std::isfinite(K.cy)) {
    throw Error(ErrorKind::InvalidInput, "intrinsics require finite fx > 0, fy > 0");
  }
}

inline NormalizedPoint normalize(const PixelPoint& p, const Intrinsics& K) noexcept {
  return {(p.x - K.cx) / K.fx, (p.y - K.cy) / K.fy};
}

inline PixelPoint denormalize(const NormalizedPoint& p, const Intrinsics& K) noexcept {
  return {p.xh * K.fx + K.cx, p.yh * K.fy + K.cy};
}

inline std::vector<NormalizedPoint> normalize_points(std::span<const PixelPoint> points, const Intrinsics& K) {
  validate(K);
  std::vector<NormalizedPoint> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(normalize(p, K));
  return out;
}

inline std::vector<PixelPoint> denormalize_points(std::span<const NormalizedPoint> points, const Intrinsics& K) {
  std::vector<PixelPoint> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(denormalize(p, K));
  return out;
}

inline Mat3 skew(const Vec3& v) {
  Mat3 S;
  S << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return S;
}

/// Below this angle the rotation and its Jacobian use their Taylor forms.
inline constexpr double kSmallAngle = 1e-8;

/// Rodrigues map from an axis-angle vector to a rotation matrix.
inline Mat3 rotation_matrix(const Vec3& theta) {
  const double angle = theta.norm();
  const Mat3 W = skew(theta);
  if (angle < kSmallAngle) {
    return Mat3::Identity() + W + 0.5 * W * W;
  }
  const double a = std::sin(angle) / angle;
  const double b = (1.0 - std::cos(angle)) / (angle * angle);
  return Mat3::Identity() + a * W + b * W * W;
}

/// Left Jacobian of SO(3): rotation_matrix(theta + d) ~= exp(J_l(theta) d) * rotation_matrix(theta).
inline Mat3 so3_left_jacobian(const Vec3& theta) {
  const double angle = theta.norm();
  const Mat3 W = skew(theta);
  if (angle < kSmallAngle) {
    return Mat3::Identity() + 0.5 * W + (1.0 / 6.0) * W * W;
  }
  const double a2 = angle * angle;
  const double b = (1.0 - std::cos(angle)) / a2;
  const double c = (angle - std::sin(angle)) / (a2 * angle);
  return Mat3::Identity() + b * W + c * W * W;
}

/// Axis-angle vector of a rotation matrix, with angle in [0, pi].
inline Vec3 rotation_log(const Mat3& R) {
  const Eigen::AngleAxisd aa(R);
  return aa.angle() * aa.axis();
}

/// Returns the equivalent rotation vector with norm <= pi.
inline Vec3 wrap_rotation(const Vec3& theta) {
  const double angle = theta.norm();
  if (angle <= std::numbers::pi) return theta;
  const double wrapped = std::remainder(angle, 2.0 * std::numbers::pi);
  return theta * (wrapped / angle);
}

/// Angle in radians of the relative rotation Ra^T Rb.
inline double rotation_angle_between(const Mat3& Ra, const Mat3& Rb) {
  const double c = std::clamp(((Ra.transpose() * Rb).trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

/// Rigid motion xi = (theta, t) acting on points lifted to the normalized plane.
struct Pose {
  Vec3 theta{Vec3::Zero()};
  Vec3 t{Vec3::Zero()};

  [[nodiscard]] Mat3 rotation() const { return rotation_matrix(theta); }
  [[nodiscard]] Eigen::Matrix<double, 6, 1> vector() const {
    Eigen::Matrix<double, 6, 1> v;
    v << theta, t;
    return v;
  }
  static Pose from_vector(const Eigen::Matrix<double, 6, 1>& v) { return {v.head<3>(), v.tail<3>()}; }
};

/// 3x3 projective map, scale-fixed to unit Frobenius norm with H(2,2) >= 0.
class Homography {
 public:
  Homography() : H_(Mat3::Identity() / std::sqrt(3.0)) {}

  static Homography from_matrix(const Mat3& M) {
    const double norm = M.norm();
    if (!std::isfinite(norm) || norm == 0.0) {
      throw Error(ErrorKind::SingularMap, "homography matrix is zero or not finite");
    }
    Mat3 H = M / norm;
    double sign = 1.0;
    if (H(2, 2) < 0.0) {
      sign = -1.0;
    } else if (H(2, 2) == 0.0) {
      for (int i = 0; i < 9; ++i) {
        const double v = H.data()[i];
        if (v != 0.0) {
          sign = v > 0.0 ? 1.0 : -1.0;
          break;
        }
      }
    }
    H *= sign;
    if (std::abs(H.determinant()) <= 1e-12) {
      throw Error(ErrorKind::SingularMap, "homography is singular after scale fixing");
    }
    Homography out;
    out.H_ = H;
    return out;
  }

  static Homography identity() { return {}; }

  [[nodiscard]] const Mat3& matrix() const noexcept { return H_; }
  [[nodiscard]] Homography inverse() const { return from_matrix(H_.inverse()); }
  /// (*this) applied after `first`.
  [[nodiscard]] Homography compose(const Homography& first) const { return from_matrix(H_ * first.H_); }

  /// Row-major entries.
  [[nodiscard]] std::array<double, 9> entries() const {
    std::array<double, 9> e{};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) e[static_cast<std::size_t>(3 * r + c)] = H_(r, c);
    return e;
  }

 private:
  Mat3 H_;
};

}  // namespace gridrect
