#pragma once

// Rigid-motion estimation on the normalized image plane. Reference grid
// centers are lifted to depth 1, moved by (R(theta), t) and projected; the
// residual against each detected center is minimized by Levenberg-Marquardt.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gridrect/core.hpp"
#include "gridrect/error.hpp"
#include "gridrect/grid_fit.hpp"

namespace gridrect {

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

inline constexpr double kDefaultZMin = 1e-6;

struct Correspondence {
  NormalizedPoint detected;
  NormalizedPoint reference;
  std::size_t detection_index{0};
  int component{0};
  /// Residual weight; each residual block is scaled by sqrt(weight).
  double weight{1.0};
};

using Correspondences = std::vector<Correspondence>;

struct PoseOptions {
  double z_min{kDefaultZMin};
  double initial_lambda{1e-3};
  int max_iter{100};
  double cost_tol{1e-10};
  double step_tol{1e-10};
};

struct PoseSolution {
  Pose pose;
  /// 0.5 * sum of squared residual norms.
  double final_cost{0.0};
  double initial_cost{0.0};
  int iterations{0};
  bool converged{false};
  /// Cost after each accepted step, starting with the initial cost.
  std::vector<double> cost_history;
};

/// Pose used where no other guess is available: no rotation, t = (0, 0, 1e-3).
inline Pose default_initial_pose() { return {Vec3::Zero(), Vec3(0.0, 0.0, 1e-3)}; }

/// The (-1, -1, -1, 0.1, 0.1, 0.1) starting point of the reference protocol.
inline Pose protocol_initial_pose() { return {Vec3(-1.0, -1.0, -1.0), Vec3(0.1, 0.1, 0.1)}; }

/// Hard arg-max matching of detections to grid centers. Detections whose
/// maximum posterior is the outlier column are dropped. With `weighted`, each
/// pair keeps its posterior as residual weight.
inline Correspondences build_correspondences(const Responsibilities& gamma, const DetectionSet& X,
                                             std::span<const PixelPoint> centers, const Intrinsics& K,
                                             bool weighted = false) {
  validate(K);
  if (gamma.points() != static_cast<Eigen::Index>(X.size())) {
    throw Error(ErrorKind::InvalidInput, "responsibilities and detections disagree in N");
  }
  if (gamma.grid_components() != static_cast<Eigen::Index>(centers.size())) {
    throw Error(ErrorKind::InvalidInput, "responsibilities and grid centers disagree in K");
  }
  Correspondences corr;
  for (std::size_t n = 0; n < X.size(); ++n) {
    const auto k = gamma.argmax(static_cast<Eigen::Index>(n));
    if (k == gamma.outlier_column()) continue;
    corr.push_back({normalize(X.points[n], K), normalize(centers[static_cast<std::size_t>(k)], K), n,
                    static_cast<int>(k), weighted ? gamma(static_cast<Eigen::Index>(n), k) : 1.0});
  }
  if (corr.size() < 4) {
    throw Error(ErrorKind::TooFewInliers, "only " + std::to_string(corr.size()) + " inlier correspondences");
  }
  return corr;
}

namespace detail {

/// Camera-frame point R * (xh, yh, 1) + t.
inline Vec3 transform_lifted(const Mat3& R, const Vec3& t, const NormalizedPoint& p) {
  return R * Vec3(p.xh, p.yh, 1.0) + t;
}

/// Index of the first pair whose transformed depth is <= z_min.
inline std::optional<std::size_t> cheirality_failure(const Pose& xi, const Correspondences& corr, double z_min) {
  const Mat3 R = xi.rotation();
  for (std::size_t n = 0; n < corr.size(); ++n) {
    const double z = transform_lifted(R, xi.t, corr[n].reference).z();
    if (!(z > z_min)) return n;
  }
  return std::nullopt;
}

inline void require_cheirality(const Pose& xi, const Correspondences& corr, double z_min) {
  if (const auto bad = cheirality_failure(xi, corr, z_min)) {
    throw Error(ErrorKind::CheiralityViolation,
                "reference point " + std::to_string(*bad) + " maps to depth <= z_min", *bad);
  }
}

}  // namespace detail

/// Stacked residuals e_n = detected_n - proj(R * lift(reference_n) + t), each
/// block scaled by sqrt(weight).
inline Eigen::VectorXd residuals(const Pose& xi, const Correspondences& corr, double z_min = kDefaultZMin) {
  detail::require_cheirality(xi, corr, z_min);
  const Mat3 R = xi.rotation();
  Eigen::VectorXd r(2 * static_cast<Eigen::Index>(corr.size()));
  for (std::size_t n = 0; n < corr.size(); ++n) {
    const Vec3 P = detail::transform_lifted(R, xi.t, corr[n].reference);
    const double s = std::sqrt(corr[n].weight);
    const auto row = 2 * static_cast<Eigen::Index>(n);
    r(row) = s * (corr[n].detected.xh - P.x() / P.z());
    r(row + 1) = s * (corr[n].detected.yh - P.y() / P.z());
  }
  return r;
}

/// d(residual)/d(theta, t) in global axis-angle coordinates.
///
/// The per-pair block is first formed for a left perturbation of the camera-
/// frame point, P -> P + phi x P + rho, with x = X/z, y = Y/z:
///   [ x*y      -(1+x^2)   y   -1/z    0    x/z ]
///   [ 1+y^2    -x*y      -x    0    -1/z   y/z ]
/// and then mapped to (dtheta, dt) via phi = J_l(theta) dtheta and
/// rho = dt + [t]x phi.
inline Eigen::MatrixXd jacobian(const Pose& xi, const Correspondences& corr, double z_min = kDefaultZMin) {
  detail::require_cheirality(xi, corr, z_min);
  const Mat3 R = xi.rotation();
  const Mat3 Jl = so3_left_jacobian(xi.theta);
  const Mat3 tx = skew(xi.t);
  Eigen::MatrixXd J(2 * static_cast<Eigen::Index>(corr.size()), 6);
  for (std::size_t n = 0; n < corr.size(); ++n) {
    const Vec3 P = detail::transform_lifted(R, xi.t, corr[n].reference);
    const double z = P.z();
    const double x = P.x() / z;
    const double y = P.y() / z;
    Eigen::Matrix<double, 2, 3> rot_local;
    rot_local << x * y, -(1.0 + x * x), y, 1.0 + y * y, -x * y, -x;
    Eigen::Matrix<double, 2, 3> trans_local;
    trans_local << -1.0 / z, 0.0, x / z, 0.0, -1.0 / z, y / z;
    const double s = std::sqrt(corr[n].weight);
    const auto row = 2 * static_cast<Eigen::Index>(n);
    J.block<2, 3>(row, 0) = s * (rot_local + trans_local * tx) * Jl;
    J.block<2, 3>(row, 3) = s * trans_local;
  }
  return J;
}

inline double pose_cost(const Pose& xi, const Correspondences& corr, double z_min = kDefaultZMin) {
  return 0.5 * residuals(xi, corr, z_min).squaredNorm();
}

/// Levenberg-Marquardt on 0.5 * sum |e_n|^2 with damping (J^T J + lambda I).
inline PoseSolution estimate_pose(const Correspondences& corr, const Pose& xi0, const PoseOptions& opts = {}) {
  if (corr.size() < 4) {
    throw Error(ErrorKind::TooFewInliers, "pose estimation needs at least 4 correspondences");
  }
  PoseSolution sol;
  sol.pose = {wrap_rotation(xi0.theta), xi0.t};
  Eigen::VectorXd r = residuals(sol.pose, corr, opts.z_min);
  double cost = 0.5 * r.squaredNorm();
  sol.initial_cost = cost;
  sol.cost_history.push_back(cost);

  double lambda = opts.initial_lambda;
  constexpr double kMaxLambda = 1e16;
  for (int it = 0; it < opts.max_iter; ++it) {
    sol.iterations = it + 1;
    const Eigen::MatrixXd J = jacobian(sol.pose, corr, opts.z_min);
    const Mat6 A = J.transpose() * J;
    const Vec6 g = J.transpose() * r;
    bool accepted = false;
    double step_norm = 0.0;
    while (lambda <= kMaxLambda) {
      const Vec6 delta = (A + lambda * Mat6::Identity()).ldlt().solve(-g);
      step_norm = delta.norm();
      Pose trial = Pose::from_vector(sol.pose.vector() + delta);
      trial.theta = wrap_rotation(trial.theta);
      if (delta.allFinite() && !detail::cheirality_failure(trial, corr, opts.z_min)) {
        Eigen::VectorXd r_trial = residuals(trial, corr, opts.z_min);
        const double trial_cost = 0.5 * r_trial.squaredNorm();
        if (trial_cost < cost) {
          const double decrease = cost - trial_cost;
          sol.pose = trial;
          r = std::move(r_trial);
          cost = trial_cost;
          sol.cost_history.push_back(cost);
          lambda = std::max(lambda / 10.0, 1e-12);
          accepted = true;
          if (decrease < opts.cost_tol * (cost + decrease) || step_norm < opts.step_tol) sol.converged = true;
          break;
        }
      }
      if (step_norm < opts.step_tol) break;
      lambda *= 10.0;
    }
    if (!accepted) {
      // No damped step lowers the cost: a local minimum to working precision.
      sol.converged = true;
      break;
    }
    if (sol.converged) break;
  }
  sol.final_cost = cost;
  return sol;
}

}  // namespace gridrect
