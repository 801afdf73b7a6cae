#pragma once

// Pose -> rectifying homography, point/image warping, the residual metric, and
// the alternating grid-fit / pose / rectify pipeline.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gridrect/core.hpp"
#include "gridrect/error.hpp"
#include "gridrect/grid_fit.hpp"
#include "gridrect/parallel.hpp"
#include "gridrect/pose.hpp"

namespace gridrect {

/// Row-major 8-bit image with 1 or 3 interleaved channels.
struct ImageBuffer {
  int width{0};
  int height{0};
  int channels{1};
  std::vector<std::uint8_t> data;

  ImageBuffer() = default;
  ImageBuffer(int w, int h, int c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  [[nodiscard]] std::size_t offset(int x, int y, int c = 0) const noexcept {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  [[nodiscard]] std::uint8_t at(int x, int y, int c = 0) const { return data[offset(x, y, c)]; }
  std::uint8_t& at(int x, int y, int c = 0) { return data[offset(x, y, c)]; }

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;
};

inline void validate(const ImageBuffer& img) {
  if (img.width <= 0 || img.height <= 0 || (img.channels != 1 && img.channels != 3) ||
      img.data.size() != static_cast<std::size_t>(img.width) * img.height * img.channels) {
    throw Error(ErrorKind::InvalidInput, "image buffer has inconsistent dimensions");
  }
}

/// Rectifying homography (distorted pixels -> rectified pixels) for a pose.
/// Reference points live on the z = 1 plane, so the forward normalized map is
/// [r1 r2 (r3 + t)] and the pixel map is K * that * K^-1; the result is its
/// inverse.
inline Homography homography_from_pose(const Pose& xi, const Intrinsics& K) {
  validate(K);
  const Mat3 R = xi.rotation();
  Mat3 Hn;
  Hn.col(0) = R.col(0);
  Hn.col(1) = R.col(1);
  Hn.col(2) = R.col(2) + xi.t;
  const Homography forward = Homography::from_matrix(K.matrix() * Hn * K.inverse());
  return forward.inverse();
}

/// Recovers the pose whose plane-induced map best matches a rectifying
/// homography: the inverse of homography_from_pose up to projection of the
/// first two columns onto a rotation.
inline Pose pose_from_homography(const Homography& H, const Intrinsics& K) {
  validate(K);
  Mat3 Fn = K.inverse() * H.inverse().matrix() * K.matrix();
  const double scale = 0.5 * (Fn.col(0).norm() + Fn.col(1).norm());
  if (!(scale > 0.0)) throw Error(ErrorKind::SingularMap, "homography has degenerate first columns");
  Fn /= scale;
  if (Fn(2, 2) < 0.0) Fn = -Fn;
  Mat3 M;
  M.col(0) = Fn.col(0);
  M.col(1) = Fn.col(1);
  M.col(2) = Fn.col(0).cross(Fn.col(1));
  const Eigen::JacobiSVD<Mat3> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 R = svd.matrixU() * svd.matrixV().transpose();
  if (R.determinant() < 0.0) {
    Mat3 D = Mat3::Identity();
    D(2, 2) = -1.0;
    R = svd.matrixU() * D * svd.matrixV().transpose();
  }
  return {rotation_log(R), Vec3(Fn.col(2) - R.col(2))};
}

inline std::vector<PixelPoint> warp_points(const Homography& H, std::span<const PixelPoint> points) {
  const Mat3& M = H.matrix();
  std::vector<PixelPoint> out;
  out.reserve(points.size());
  for (std::size_t n = 0; n < points.size(); ++n) {
    const Vec3 p = M * Vec3(points[n].x, points[n].y, 1.0);
    if (!(std::abs(p.z()) > 1e-12)) {
      throw Error(ErrorKind::PointAtInfinity, "point " + std::to_string(n) + " maps to the line at infinity", n);
    }
    out.push_back({p.x() / p.z(), p.y() / p.z()});
  }
  return out;
}

namespace detail {

inline double snap_to_integer(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

}  // namespace detail

/// Inverse-mapping warp: output pixel (x, y) samples the source at
/// H^-1 (x, y, 1) with bilinear interpolation; samples outside the source are 0.
/// Pixel centers sit at integer coordinates.
inline ImageBuffer warp_image(const ImageBuffer& img, const Homography& H, int out_w, int out_h) {
  validate(img);
  if (out_w <= 0 || out_h <= 0) throw Error(ErrorKind::InvalidInput, "output canvas must be non-empty");
  const Mat3 Hinv = H.inverse().matrix();
  ImageBuffer out(out_w, out_h, img.channels, 0);
  const double max_x = img.width - 1;
  const double max_y = img.height - 1;
  parallel_for(static_cast<std::size_t>(out_h), [&](std::size_t row) {
    const int y = static_cast<int>(row);
    for (int x = 0; x < out_w; ++x) {
      const Vec3 s = Hinv * Vec3(x, y, 1.0);
      if (!(std::abs(s.z()) > 1e-12)) continue;
      const double sx = detail::snap_to_integer(s.x() / s.z());
      const double sy = detail::snap_to_integer(s.y() / s.z());
      if (!(sx >= 0.0 && sx <= max_x && sy >= 0.0 && sy <= max_y)) continue;
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const int x1 = std::min(x0 + 1, img.width - 1);
      const int y1 = std::min(y0 + 1, img.height - 1);
      const double fx = sx - x0;
      const double fy = sy - y0;
      for (int c = 0; c < img.channels; ++c) {
        const double top = (1.0 - fx) * img.at(x0, y0, c) + fx * img.at(x1, y0, c);
        const double bottom = (1.0 - fx) * img.at(x0, y1, c) + fx * img.at(x1, y1, c);
        const double v = (1.0 - fy) * top + fy * bottom;
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  });
  return out;
}

/// Canvas that contains the warped source rectangle: returns the homography
/// shifted so the quad's top-left lands at (0, 0) and the canvas size, capped
/// at `max_scale` times the source size per axis.
struct Canvas {
  Homography homography;
  int width{0};
  int height{0};
};

inline Canvas fit_canvas(const Homography& H, int src_w, int src_h, double max_scale = 4.0) {
  const std::vector<PixelPoint> corners{{0.0, 0.0},
                                        {static_cast<double>(src_w - 1), 0.0},
                                        {0.0, static_cast<double>(src_h - 1)},
                                        {static_cast<double>(src_w - 1), static_cast<double>(src_h - 1)}};
  const auto warped = warp_points(H, corners);
  double min_x = warped[0].x, max_x = warped[0].x, min_y = warped[0].y, max_y = warped[0].y;
  for (const auto& p : warped) {
    min_x = std::min(min_x, p.x);
    max_x = std::max(max_x, p.x);
    min_y = std::min(min_y, p.y);
    max_y = std::max(max_y, p.y);
  }
  const int w = static_cast<int>(std::clamp(std::ceil(max_x - min_x) + 1.0, 1.0, max_scale * src_w));
  const int h = static_cast<int>(std::clamp(std::ceil(max_y - min_y) + 1.0, 1.0, max_scale * src_h));
  Mat3 shift = Mat3::Identity();
  shift(0, 2) = -std::floor(min_x);
  shift(1, 2) = -std::floor(min_y);
  return {Homography::from_matrix(shift * H.matrix()), w, h};
}

/// Mean squared residual norm per correspondence, times 1000.
inline double residual_metric(double final_cost, std::size_t n_pairs) {
  if (n_pairs < 1) throw Error(ErrorKind::InvalidInput, "metric needs at least one correspondence");
  return 1000.0 * (2.0 * final_cost / static_cast<double>(n_pairs));
}

/// Candidate camera rotations tried before the first grid fit. Each candidate
/// is the roll about the optical axis, optionally followed by a tilt of the
/// given magnitude about one of `tilt_directions` evenly spaced in-plane axes.
struct ViewHypotheses {
  std::vector<double> roll_deg{-8.0, 0.0, 8.0};
  std::vector<double> tilt_deg{15.0, 30.0};
  int tilt_directions{8};
};

inline std::vector<Vec3> hypothesis_rotations(const ViewHypotheses& hyp) {
  if (hyp.tilt_directions < 0) throw Error(ErrorKind::InvalidInput, "tilt_directions must be non-negative");
  constexpr double kDeg = std::numbers::pi / 180.0;
  std::vector<Vec3> out;
  const std::vector<double> rolls = hyp.roll_deg.empty() ? std::vector<double>{0.0} : hyp.roll_deg;
  for (const double roll : rolls) {
    const Mat3 Rz = rotation_matrix(Vec3(0.0, 0.0, roll * kDeg));
    out.push_back(rotation_log(Rz));
    for (const double tilt : hyp.tilt_deg) {
      for (int a = 0; a < hyp.tilt_directions; ++a) {
        const double phi = 2.0 * std::numbers::pi * a / hyp.tilt_directions;
        const Vec3 axis(std::cos(phi), std::sin(phi), 0.0);
        out.push_back(rotation_log(rotation_matrix(tilt * kDeg * axis) * Rz));
      }
    }
  }
  return out;
}

struct ViewSearchResult {
  /// Pre-rectification applied before the grid fit.
  Homography homography;
  FitResult fit;
  /// NLL of the original detections: warped NLL minus the log Jacobian.
  double score{0.0};
};

/// Warps the detections by each hypothesised camera rotation, fits the grid
/// and keeps the hypothesis whose fit explains the original detections best.
inline ViewSearchResult search_initial_view(const DetectionSet& X, const Intrinsics& K, const GridSpec& spec,
                                            const MixtureConfig& mix, const ViewHypotheses& hyp, int starts,
                                            double spacing, double variance, const FitOptions& options = {}) {
  const auto rotations = hypothesis_rotations(hyp);
  std::vector<std::optional<ViewSearchResult>> found(rotations.size());
  parallel_for(rotations.size(), [&](std::size_t h) {
    const Homography H = homography_from_pose({rotations[h], Vec3::Zero()}, K);
    const Mat3& M = H.matrix();
    const double log_det = std::log(std::abs(M.determinant()));
    double log_jacobian = 0.0;
    for (const auto& x : X.points) {
      const double w = (M * Vec3(x.x, x.y, 1.0)).z();
      log_jacobian += log_det - 3.0 * std::log(std::abs(w));
    }
    try {
      const DetectionSet warped{warp_points(H, X.points), X.width, X.height};
      FitResult fit = fit_grid_multistart(warped, spec, mix, starts, spacing, variance, options);
      const double score = fit.nll_history.back() - log_jacobian;
      found[h] = ViewSearchResult{H, std::move(fit), score};
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegenerateFit && e.kind() != ErrorKind::ArithmeticError &&
          e.kind() != ErrorKind::PointAtInfinity) {
        throw;
      }
    }
  });
  std::optional<ViewSearchResult> best;
  for (auto& f : found) {
    if (f && (!best || f->score < best->score)) best = std::move(f);
  }
  if (!best) throw Error(ErrorKind::DegenerateFit, "grid fit degenerated under every view hypothesis");
  return *std::move(best);
}

/// Levenberg-Marquardt over the pose and the row spacing dy with the
/// assignments in `corr` held fixed. Origin and column spacing stay put: a
/// common scale or shift of the plane is absorbed by the pose, so dy/dx is the
/// only grid quantity the pose cannot mimic. `corr` references are rebuilt
/// from `params` on every step.
struct JointSolution {
  PoseSolution pose;
  GridParams params;
  Correspondences correspondences;
};

inline JointSolution refine_pose_and_row_spacing(Correspondences corr, const GridSpec& spec, GridParams params,
                                                 const Intrinsics& K, const Pose& xi0, const PoseOptions& opts = {}) {
  if (corr.size() < 4) throw Error(ErrorKind::TooFewInliers, "joint refinement needs at least 4 correspondences");
  using Vec7 = Eigen::Matrix<double, 7, 1>;
  using Mat7 = Eigen::Matrix<double, 7, 7>;
  auto rebuild = [&](Correspondences& c, double dy) {
    for (auto& pair : c) {
      pair.reference.yh = (params.oy + dy * spec.row_of(pair.component) - K.cy) / K.fy;
    }
  };
  auto jacobian7 = [&](const Pose& xi, const Correspondences& c) {
    Eigen::MatrixXd J(2 * static_cast<Eigen::Index>(c.size()), 7);
    J.leftCols<6>() = jacobian(xi, c, opts.z_min);
    const Mat3 R = xi.rotation();
    for (std::size_t n = 0; n < c.size(); ++n) {
      const Vec3 P = R * Vec3(c[n].reference.xh, c[n].reference.yh, 1.0) + xi.t;
      const double z = P.z();
      Eigen::Matrix<double, 2, 3> trans_local;
      trans_local << -1.0 / z, 0.0, P.x() / (z * z), 0.0, -1.0 / z, P.y() / (z * z);
      const double s = std::sqrt(c[n].weight) * spec.row_of(c[n].component) / K.fy;
      J.block<2, 1>(2 * static_cast<Eigen::Index>(n), 6) = s * trans_local * R.col(1);
    }
    return J;
  };

  rebuild(corr, params.dy);
  JointSolution out;
  PoseSolution& sol = out.pose;
  sol.pose = {wrap_rotation(xi0.theta), xi0.t};
  Eigen::VectorXd r = residuals(sol.pose, corr, opts.z_min);
  double cost = 0.5 * r.squaredNorm();
  sol.initial_cost = cost;
  sol.cost_history.push_back(cost);
  double lambda = opts.initial_lambda;
  constexpr double kMaxLambda = 1e16;
  for (int it = 0; it < opts.max_iter; ++it) {
    sol.iterations = it + 1;
    const Eigen::MatrixXd J = jacobian7(sol.pose, corr);
    const Mat7 A = J.transpose() * J;
    const Vec7 g = J.transpose() * r;
    bool accepted = false;
    double step_norm = 0.0;
    while (lambda <= kMaxLambda) {
      const Vec7 delta = (A + lambda * Mat7::Identity()).ldlt().solve(-g);
      step_norm = delta.norm();
      Pose trial = Pose::from_vector(sol.pose.vector() + delta.head<6>());
      trial.theta = wrap_rotation(trial.theta);
      const double trial_dy = params.dy + delta(6);
      Correspondences trial_corr = corr;
      rebuild(trial_corr, trial_dy);
      if (delta.allFinite() && trial_dy > 0.0 && !detail::cheirality_failure(trial, trial_corr, opts.z_min)) {
        Eigen::VectorXd r_trial = residuals(trial, trial_corr, opts.z_min);
        const double trial_cost = 0.5 * r_trial.squaredNorm();
        if (trial_cost < cost) {
          const double decrease = cost - trial_cost;
          sol.pose = trial;
          params.dy = trial_dy;
          corr = std::move(trial_corr);
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
      sol.converged = true;
      break;
    }
    if (sol.converged) break;
  }
  sol.final_cost = cost;
  out.params = params;
  out.correspondences = std::move(corr);
  return out;
}

struct RectifyOptions {
  /// Grid dimensions; selected by BIC over the ranges below when empty.
  std::optional<GridSpec> spec;
  IntRange row_range{2, 8};
  IntRange col_range{2, 6};
  double alpha{0.8};
  FitOptions fit{};
  /// Origin hypotheses tried per view hypothesis in the first-round grid fit.
  int fit_starts{4};
  ViewHypotheses views{};
  double init_spacing{100.0};
  double init_variance{640.0};
  PoseOptions pose{};
  Pose xi0{default_initial_pose()};
  bool weighted{false};
  int max_rounds{3};
  double min_relative_improvement{0.01};
  double min_absolute_improvement{1e-12};
  /// Refine the row spacing jointly with the final pose.
  bool refine_row_spacing{true};
};

struct RectifyResult {
  /// Distorted pixels -> rectified pixels, composed over all rounds.
  Homography homography;
  /// Pose relating the final grid to the original detections.
  PoseSolution pose;
  /// Grid fitted to the fully corrected detections.
  FitResult grid;
  GridSpec spec;
  /// Corrected inlier detections, in detection order.
  std::vector<PixelPoint> corrected_points;
  /// Per detection: assigned grid component, or -1 for outliers.
  std::vector<int> assignments;
  double metric{0.0};
  int rounds{0};
  std::vector<double> round_metrics;
  std::size_t pairs{0};
};

inline RectifyResult rectify_pipeline(const DetectionSet& X, const Intrinsics& K, const RectifyOptions& opts = {}) {
  validate(X);
  validate(K);
  if (X.size() < 4) throw Error(ErrorKind::InvalidInput, "at least 4 points required");
  if (opts.max_rounds < 1) throw Error(ErrorKind::InvalidInput, "max_rounds must be >= 1");
  const MixtureConfig mix = MixtureConfig::for_image(X, opts.alpha);

  RectifyResult result;
  result.spec = opts.spec ? *opts.spec : select_grid_dims(X, mix, opts.row_range, opts.col_range, opts.fit_starts, opts.fit);

  Homography total = Homography::identity();
  GridParams grid_state;
  for (int round = 1; round <= opts.max_rounds; ++round) {
    try {
      FitResult fit;
      if (round == 1) {
        ViewSearchResult view = search_initial_view(X, K, result.spec, mix, opts.views, opts.fit_starts,
                                                    opts.init_spacing, opts.init_variance, opts.fit);
        total = view.homography;
        fit = std::move(view.fit);
      }
      const DetectionSet current{warp_points(total, X.points), X.width, X.height};
      if (round > 1) fit = fit_grid(current, result.spec, mix, grid_state, opts.fit);
      grid_state = fit.params;
      const auto centers = grid_centers(fit.params, result.spec);
      const auto corr = build_correspondences(fit.gamma, current, centers, K, opts.weighted);
      const PoseSolution sol = estimate_pose(corr, opts.xi0, opts.pose);
      total = homography_from_pose(sol.pose, K).compose(total);
      result.round_metrics.push_back(residual_metric(sol.final_cost, corr.size()));
      result.rounds = round;
    } catch (const Error& e) {
      throw e.with_context("round " + std::to_string(round));
    }
    if (round >= 2) {
      const double prev = result.round_metrics[result.round_metrics.size() - 2];
      const double now = result.round_metrics.back();
      if (!(prev - now > std::max(opts.min_relative_improvement * prev, opts.min_absolute_improvement))) break;
    }
  }

  try {
    result.grid = fit_grid({warp_points(total, X.points), X.width, X.height}, result.spec, mix, grid_state, opts.fit);
    const auto centers = grid_centers(result.grid.params, result.spec);
    auto corr = build_correspondences(result.grid.gamma, X, centers, K, opts.weighted);
    Pose start = pose_from_homography(total, K);
    if (detail::cheirality_failure(start, corr, opts.pose.z_min)) start = opts.xi0;
    if (opts.refine_row_spacing) {
      JointSolution joint = refine_pose_and_row_spacing(corr, result.spec, result.grid.params, K, start, opts.pose);
      result.pose = std::move(joint.pose);
      result.grid.params = joint.params;
      corr = std::move(joint.correspondences);
    } else {
      result.pose = estimate_pose(corr, start, opts.pose);
    }
    result.homography = homography_from_pose(result.pose.pose, K);
    const std::vector<PixelPoint> corrected = warp_points(result.homography, X.points);
    result.pairs = corr.size();
    result.metric = residual_metric(result.pose.final_cost, corr.size());
    result.assignments.assign(X.size(), -1);
    for (const auto& c : corr) {
      result.assignments[c.detection_index] = c.component;
      result.corrected_points.push_back(corrected[c.detection_index]);
    }
  } catch (const Error& e) {
    throw e.with_context("final refit");
  }
  return result;
}

}  // namespace gridrect
