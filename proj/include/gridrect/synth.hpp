#pragma once

// Synthetic elevator-panel scenes with known ground truth.
//
// Randomness comes from std::mt19937_64, whose output sequence is fixed by the
// C++ standard. Uniform doubles take the top 53 bits of each draw; normal
// variates use the Box-Muller transform (one variate per pair of uniforms).
// Distribution objects from <random> are not used because their algorithms are
// implementation-defined.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gridrect/core.hpp"
#include "gridrect/error.hpp"
#include "gridrect/grid_fit.hpp"
#include "gridrect/rectify.hpp"

namespace gridrect {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t bits() { return engine_(); }
  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer on [lo, hi].
  int uniform_int(int lo, int hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo + 1);
    return lo + static_cast<int>(engine_() % span);
  }
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 engine_;
};

struct SynthScene {
  GridSpec spec{5, 3};
  /// Fronto-parallel grid in pixels.
  GridParams true_params{220.0, 40.0, 100.0, 100.0, 1.0, 1.0};
  Pose true_pose{};
  Intrinsics intrinsics{};
  double width{640.0};
  double height{480.0};
  double noise_sigma{0.0};
  int outlier_count{0};
  int dropout_count{0};
  std::uint64_t seed{0};
};

inline constexpr int kOutlierLabel = -1;

struct SynthInstance {
  DetectionSet detections;
  SynthScene truth;
  /// Grid component per detection, or kOutlierLabel.
  std::vector<int> labels;
  /// Detections before noise was added (outliers are repeated as-is).
  std::vector<PixelPoint> clean_points;
  std::optional<ImageBuffer> image;
  int group{0};
  int index{0};
};

/// Image of a fronto-parallel pixel location under the pose, or nullopt when
/// it falls at or behind the camera.
inline std::optional<PixelPoint> project_through_pose(const PixelPoint& fronto, const Pose& pose,
                                                      const Intrinsics& K) {
  const NormalizedPoint u = normalize(fronto, K);
  const Vec3 P = pose.rotation() * Vec3(u.xh, u.yh, 1.0) + pose.t;
  if (!(P.z() > 1e-9)) return std::nullopt;
  return denormalize({P.x() / P.z(), P.y() / P.z()}, K);
}

inline SynthInstance generate(const SynthScene& scene) {
  validate(scene.spec);
  validate(scene.intrinsics);
  if (!(scene.width > 0.0) || !(scene.height > 0.0)) throw Error(ErrorKind::InvalidInput, "image size must be positive");
  if (!(scene.noise_sigma >= 0.0) || scene.outlier_count < 0 || scene.dropout_count < 0) {
    throw Error(ErrorKind::InvalidInput, "noise, outlier and dropout settings must be non-negative");
  }
  const int K = scene.spec.components();
  if (K - scene.dropout_count < 4) throw Error(ErrorKind::InvalidInput, "fewer than 4 true detections would remain");

  const auto centers = grid_centers(scene.true_params, scene.spec);
  std::vector<PixelPoint> projected;
  projected.reserve(centers.size());
  for (std::size_t k = 0; k < centers.size(); ++k) {
    const auto p = project_through_pose(centers[k], scene.true_pose, scene.intrinsics);
    const bool inside = p && p->x >= -0.5 * scene.width && p->x <= 1.5 * scene.width &&
                        p->y >= -0.5 * scene.height && p->y <= 1.5 * scene.height;
    if (!inside) throw Error(ErrorKind::InvisibleGrid, "grid center " + std::to_string(k) + " is not visible", k);
    projected.push_back(*p);
  }

  Rng rng(scene.seed);
  std::vector<int> keep(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) keep[static_cast<std::size_t>(k)] = k;
  for (int d = 0; d < scene.dropout_count; ++d) {
    const int pick = rng.uniform_int(0, static_cast<int>(keep.size()) - 1);
    keep.erase(keep.begin() + pick);
  }

  SynthInstance inst;
  inst.truth = scene;
  inst.detections.width = scene.width;
  inst.detections.height = scene.height;
  for (const int k : keep) {
    const PixelPoint clean = projected[static_cast<std::size_t>(k)];
    const double nx = scene.noise_sigma * rng.normal();
    const double ny = scene.noise_sigma * rng.normal();
    inst.detections.points.push_back({clean.x + nx, clean.y + ny});
    inst.clean_points.push_back(clean);
    inst.labels.push_back(k);
  }
  for (int o = 0; o < scene.outlier_count; ++o) {
    const PixelPoint p{rng.uniform(0.0, scene.width), rng.uniform(0.0, scene.height)};
    inst.detections.points.push_back(p);
    inst.clean_points.push_back(p);
    inst.labels.push_back(kOutlierLabel);
  }
  for (std::size_t i = inst.labels.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
    std::swap(inst.detections.points[i - 1], inst.detections.points[j]);
    std::swap(inst.clean_points[i - 1], inst.clean_points[j]);
    std::swap(inst.labels[i - 1], inst.labels[j]);
  }
  return inst;
}

struct RenderStyle {
  double radius{8.0};
  std::uint8_t background{40};
  std::uint8_t foreground{230};
  /// Sub-samples per pixel axis used for anti-aliased disc edges.
  int supersample{4};
};

/// Filled anti-aliased discs at every detection on a flat background.
inline ImageBuffer render(const SynthInstance& inst, const RenderStyle& style = {}) {
  const int w = static_cast<int>(std::lround(inst.detections.width));
  const int h = static_cast<int>(std::lround(inst.detections.height));
  ImageBuffer img(w, h, 1, style.background);
  std::vector<double> coverage(static_cast<std::size_t>(w) * h, 0.0);
  const int ss = std::max(1, style.supersample);
  const double r2 = style.radius * style.radius;
  for (const auto& p : inst.detections.points) {
    const int x_lo = std::max(0, static_cast<int>(std::floor(p.x - style.radius - 1.0)));
    const int x_hi = std::min(w - 1, static_cast<int>(std::ceil(p.x + style.radius + 1.0)));
    const int y_lo = std::max(0, static_cast<int>(std::floor(p.y - style.radius - 1.0)));
    const int y_hi = std::min(h - 1, static_cast<int>(std::ceil(p.y + style.radius + 1.0)));
    for (int y = y_lo; y <= y_hi; ++y) {
      for (int x = x_lo; x <= x_hi; ++x) {
        int hits = 0;
        for (int sy = 0; sy < ss; ++sy) {
          for (int sx = 0; sx < ss; ++sx) {
            const double dx = x - 0.5 + (sx + 0.5) / ss - p.x;
            const double dy = y - 0.5 + (sy + 0.5) / ss - p.y;
            if (dx * dx + dy * dy <= r2) ++hits;
          }
        }
        auto& c = coverage[static_cast<std::size_t>(y) * w + x];
        c = std::min(1.0, c + static_cast<double>(hits) / (ss * ss));
      }
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double c = coverage[static_cast<std::size_t>(y) * w + x];
      const double v = style.background + c * (style.foreground - style.background);
      img.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  return img;
}

/// Centroids of bright blobs: 8-connected components of pixels above
/// `threshold` (first channel), each weighted by its excess over
/// `background`. Blobs with fewer than `min_pixels` pixels are ignored.
/// Output is ordered by each blob's first pixel in raster order.
inline std::vector<PixelPoint> extract_blobs(const ImageBuffer& img, std::uint8_t threshold, std::uint8_t background,
                                             int min_pixels = 4) {
  validate(img);
  const int w = img.width;
  const int h = img.height;
  std::vector<int> label(static_cast<std::size_t>(w) * h, -1);
  std::vector<PixelPoint> out;
  std::vector<std::pair<int, int>> stack;
  int next = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (img.at(x, y) <= threshold || label[static_cast<std::size_t>(y) * w + x] >= 0) continue;
      std::vector<std::pair<int, int>> members;
      int count = 0;
      stack.assign(1, {x, y});
      label[static_cast<std::size_t>(y) * w + x] = next;
      while (!stack.empty()) {
        const auto [cx, cy] = stack.back();
        stack.pop_back();
        members.emplace_back(cx, cy);
        ++count;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = cx + dx;
            const int ny = cy + dy;
            if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
            const std::size_t idx = static_cast<std::size_t>(ny) * w + nx;
            if (label[idx] != -1 || img.at(nx, ny) <= background) continue;
            label[idx] = next;
            if (img.at(nx, ny) > threshold) {
              stack.emplace_back(nx, ny);
            } else {
              // Anti-aliased rim: below threshold but still partially covered.
              members.emplace_back(nx, ny);
            }
          }
        }
      }
      double sw = 0.0, sx = 0.0, sy = 0.0;
      for (const auto& [mx, my] : members) {
        const double wgt = static_cast<double>(img.at(mx, my)) - background;
        sw += wgt;
        sx += wgt * mx;
        sy += wgt * my;
      }
      if (count >= min_pixels && sw > 0.0) out.push_back({sx / sw, sy / sw});
      ++next;
    }
  }
  return out;
}

struct PoseRanges {
  double max_tilt_deg{35.0};
  double max_roll_deg{10.0};
  double depth_min{0.8};
  double depth_max{1.5};
  /// Lateral offset of the panel center, as a fraction of depth.
  double max_offset{0.1};
};

struct BenchmarkConfig {
  double noise_sigma{1.0};
  double outlier_fraction{0.1};
  int dropout_count{0};
  /// Range of the fronto-parallel button spacing (pixels), per axis.
  double spacing_min{70.0};
  double spacing_max{95.0};
  double width{640.0};
  double height{480.0};
  Intrinsics intrinsics{};
};

/// Draws a pose that tilts the panel about a random in-plane axis, rolls it
/// about the optical axis and places its center at the drawn depth.
inline Pose draw_pose(Rng& rng, const PoseRanges& ranges, const GridParams& params, const GridSpec& spec,
                      const Intrinsics& K) {
  constexpr double kDeg = std::numbers::pi / 180.0;
  const double tilt = rng.uniform(0.0, ranges.max_tilt_deg) * kDeg;
  const double axis_angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double roll = rng.uniform(-ranges.max_roll_deg, ranges.max_roll_deg) * kDeg;
  const double depth = rng.uniform(ranges.depth_min, ranges.depth_max);
  const double off_x = rng.uniform(-ranges.max_offset, ranges.max_offset) * depth;
  const double off_y = rng.uniform(-ranges.max_offset, ranges.max_offset) * depth;
  const Mat3 R = rotation_matrix(tilt * Vec3(std::cos(axis_angle), std::sin(axis_angle), 0.0)) *
                 rotation_matrix(Vec3(0.0, 0.0, roll));
  const PixelPoint center{params.ox + 0.5 * params.dx * (spec.cols - 1), params.oy + 0.5 * params.dy * (spec.rows - 1)};
  const NormalizedPoint c = normalize(center, K);
  return {rotation_log(R), Vec3(off_x, off_y, depth) - R * Vec3(c.xh, c.yh, 1.0)};
}

/// n_groups panel geometries with per_group viewpoints each. Geometry is shared
/// within a group; each instance draws its own pose, noise and outliers.
inline std::vector<SynthInstance> make_benchmark(int n_groups, int per_group, const PoseRanges& ranges,
                                                 std::uint64_t seed, const BenchmarkConfig& config = {}) {
  if (n_groups < 0 || per_group < 0) throw Error(ErrorKind::InvalidInput, "group counts must be non-negative");
  if (!(ranges.depth_min > 0.0) || ranges.depth_max < ranges.depth_min || ranges.max_tilt_deg < 0.0 ||
      ranges.max_tilt_deg >= 90.0 || ranges.max_roll_deg < 0.0) {
    throw Error(ErrorKind::InvalidInput, "pose ranges are invalid");
  }
  Rng master(seed);
  std::vector<SynthInstance> out;
  for (int g = 0; g < n_groups; ++g) {
    SynthScene base;
    base.spec = {master.uniform_int(4, 6), master.uniform_int(3, 4)};
    const double dx = master.uniform(config.spacing_min, config.spacing_max);
    const double dy = master.uniform(config.spacing_min, config.spacing_max);
    const auto& K = config.intrinsics;
    base.true_params = {K.cx - 0.5 * dx * (base.spec.cols - 1), K.cy - 0.5 * dy * (base.spec.rows - 1), dx, dy, 1.0,
                        1.0};
    base.intrinsics = K;
    base.width = config.width;
    base.height = config.height;
    base.noise_sigma = config.noise_sigma;
    base.outlier_count = static_cast<int>(std::lround(config.outlier_fraction * base.spec.components()));
    base.dropout_count = config.dropout_count;
    for (int i = 0; i < per_group; ++i) {
      SynthScene scene = base;
      scene.seed = master.bits();
      std::optional<SynthInstance> inst;
      for (int attempt = 0; attempt < 100 && !inst; ++attempt) {
        scene.true_pose = draw_pose(master, ranges, base.true_params, base.spec, K);
        try {
          inst = generate(scene);
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::InvisibleGrid) throw;
        }
      }
      if (!inst) throw Error(ErrorKind::InvisibleGrid, "could not draw a visible pose");
      inst->group = g;
      inst->index = i;
      out.push_back(*std::move(inst));
    }
  }
  return out;
}

/// Scale-and-shift gauge between two point sets on the normalized plane:
/// target ~= scale * source + shift.
struct Gauge {
  double scale{1.0};
  Vec2 shift{Vec2::Zero()};
};

inline Gauge fit_gauge(std::span<const NormalizedPoint> source, std::span<const NormalizedPoint> target) {
  if (source.size() != target.size() || source.size() < 2) {
    throw Error(ErrorKind::InvalidInput, "gauge fit needs at least two matched points");
  }
  Vec2 ms = Vec2::Zero(), mt = Vec2::Zero();
  for (std::size_t n = 0; n < source.size(); ++n) {
    ms += Vec2(source[n].xh, source[n].yh);
    mt += Vec2(target[n].xh, target[n].yh);
  }
  ms /= static_cast<double>(source.size());
  mt /= static_cast<double>(source.size());
  double num = 0.0, den = 0.0;
  for (std::size_t n = 0; n < source.size(); ++n) {
    const Vec2 a = Vec2(source[n].xh, source[n].yh) - ms;
    const Vec2 b = Vec2(target[n].xh, target[n].yh) - mt;
    num += a.dot(b);
    den += a.squaredNorm();
  }
  if (!(den > 0.0)) throw Error(ErrorKind::InvalidInput, "gauge fit source points coincide");
  const double scale = num / den;
  return {scale, mt - scale * ms};
}

/// Pipeline output compared against scene truth.
///
/// A plane seen through a pose is only determined up to the scale and
/// in-plane offset of its reference grid: (grid, pose) and
/// (scale * grid + shift, adjusted pose) produce identical images. The
/// comparison therefore fits that gauge between the estimated and true grid
/// centers first and expresses the true translation relative to the estimated
/// grid before measuring errors.
struct TruthComparison {
  double rot_err_deg{0.0};
  /// |t_est - t_true'| / |t_true'| with t_true' the gauge-adjusted truth.
  double trans_err{0.0};
  Gauge gauge;
  /// Per labeled inlier kept by the pipeline: distance (px) between its
  /// corrected position and where the true rectifying map sends the same
  /// (noisy) detection, in the truth frame.
  std::vector<double> rectified_err_px;
};

inline TruthComparison compare_to_truth(const SynthInstance& inst, const RectifyResult& result) {
  const auto& K = inst.truth.intrinsics;
  const auto est_centers = grid_centers(result.grid.params, result.spec);
  const auto true_centers = grid_centers(inst.truth.true_params, inst.truth.spec);
  std::vector<NormalizedPoint> est, tru;
  std::vector<std::size_t> matched;
  for (std::size_t n = 0; n < inst.labels.size(); ++n) {
    const int label = inst.labels[n];
    const int assigned = result.assignments[n];
    if (label == kOutlierLabel || assigned < 0) continue;
    est.push_back(normalize(est_centers[static_cast<std::size_t>(assigned)], K));
    tru.push_back(normalize(true_centers[static_cast<std::size_t>(label)], K));
    matched.push_back(n);
  }
  TruthComparison cmp;
  cmp.gauge = fit_gauge(est, tru);
  const Mat3 R0 = inst.truth.true_pose.rotation();
  const Vec3 t_eq = (R0 * Vec3(cmp.gauge.shift.x(), cmp.gauge.shift.y(), 1.0 - cmp.gauge.scale) +
                     inst.truth.true_pose.t) / cmp.gauge.scale;
  cmp.rot_err_deg = rotation_angle_between(result.pose.pose.rotation(), R0) * 180.0 / std::numbers::pi;
  cmp.trans_err = (result.pose.pose.t - t_eq).norm() / t_eq.norm();

  const auto corrected = warp_points(result.homography, inst.detections.points);
  const auto reference = warp_points(homography_from_pose(inst.truth.true_pose, K), inst.detections.points);
  for (const std::size_t n : matched) {
    const NormalizedPoint c = normalize(corrected[n], K);
    const NormalizedPoint truth = normalize(reference[n], K);
    const double ex = (cmp.gauge.scale * c.xh + cmp.gauge.shift.x() - truth.xh) * K.fx;
    const double ey = (cmp.gauge.scale * c.yh + cmp.gauge.shift.y() - truth.yh) * K.fy;
    cmp.rectified_err_px.push_back(std::hypot(ex, ey));
  }
  return cmp;
}

}  // namespace gridrect
