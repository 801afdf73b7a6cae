#pragma once

// Grid-structured Gaussian mixture with a uniform outlier component, fitted to
// detected button centers by expectation-maximization.
//
// Component k sits at u_k = (o_x + dx*i_k, o_y + dy*j_k) and all components
// share the diagonal covariance diag(var_x, var_y). Priors are alpha/K for the
// grid components and (1 - alpha) for the outlier density 1/C.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gridrect/core.hpp"
#include "gridrect/error.hpp"
#include "gridrect/parallel.hpp"

namespace gridrect {

/// Lower bound on the per-axis variance, px^2.
inline constexpr double kSigmaFloor = 1e-6;

/// rows x cols lattice. Component k = j*cols + i, with i the column (x) and j
/// the row (y) index.
struct GridSpec {
  int rows{1};
  int cols{1};

  [[nodiscard]] int components() const noexcept { return rows * cols; }
  [[nodiscard]] int col_of(int k) const noexcept { return k % cols; }
  [[nodiscard]] int row_of(int k) const noexcept { return k / cols; }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

inline void validate(const GridSpec& spec) {
  if (spec.rows < 1 || spec.cols < 1) {
    throw Error(ErrorKind::InvalidInput, "grid needs at least one row and one column");
  }
}

struct GridParams {
  double ox{0.0};
  double oy{0.0};
  double dx{100.0};
  double dy{100.0};
  double var_x{640.0};
  double var_y{640.0};

  friend bool operator==(const GridParams&, const GridParams&) = default;
};

inline void validate(const GridParams& p) {
  const bool finite = std::isfinite(p.ox) && std::isfinite(p.oy) && std::isfinite(p.dx) && std::isfinite(p.dy) &&
                      std::isfinite(p.var_x) && std::isfinite(p.var_y);
  if (!finite || !(p.dx > 0.0) || !(p.dy > 0.0) || !(p.var_x >= kSigmaFloor) || !(p.var_y >= kSigmaFloor)) {
    throw Error(ErrorKind::InvalidInput, "grid parameters need finite values, positive spacing and variance >= floor");
  }
}

struct MixtureConfig {
  double alpha{0.8};
  double uniform_c{640.0 * 480.0};

  /// Outlier normalizer C = w * h.
  static MixtureConfig for_image(const DetectionSet& X, double alpha = 0.8) { return {alpha, X.width * X.height}; }
};

inline void validate(const MixtureConfig& mix) {
  if (!(mix.alpha >= 0.0 && mix.alpha <= 1.0)) throw Error(ErrorKind::InvalidInput, "alpha must lie in [0, 1]");
  if (!(mix.uniform_c > 0.0) || !std::isfinite(mix.uniform_c)) {
    throw Error(ErrorKind::InvalidInput, "uniform normalizer C must be positive");
  }
}

/// Posterior table gamma(n, k), N x (K+1). The last column is the outlier.
struct Responsibilities {
  Eigen::MatrixXd table;

  [[nodiscard]] Eigen::Index points() const noexcept { return table.rows(); }
  [[nodiscard]] Eigen::Index grid_components() const noexcept { return table.cols() - 1; }
  [[nodiscard]] Eigen::Index outlier_column() const noexcept { return table.cols() - 1; }
  [[nodiscard]] double operator()(Eigen::Index n, Eigen::Index k) const { return table(n, k); }

  /// Column of the largest posterior for detection n; ties go to the lower index.
  [[nodiscard]] Eigen::Index argmax(Eigen::Index n) const {
    Eigen::Index best = 0;
    table.row(n).maxCoeff(&best);
    return best;
  }
};

/// How the variance update is normalized. kInlierMass is the exact maximizer of
/// the expected log likelihood; kPointCount divides by N instead.
enum class SigmaNormalization { kInlierMass, kPointCount };

struct FitOptions {
  double tol{1e-8};
  int max_iter{200};
  SigmaNormalization sigma_norm{SigmaNormalization::kInlierMass};
};

struct FitResult {
  GridParams params;
  Responsibilities gamma;
  /// NLL of the initial parameters followed by the NLL after every EM iteration.
  std::vector<double> nll_history;
  int iterations{0};
  bool converged{false};
};

inline std::vector<PixelPoint> grid_centers(const GridParams& params, const GridSpec& spec) {
  validate(spec);
  std::vector<PixelPoint> centers;
  centers.reserve(static_cast<std::size_t>(spec.components()));
  for (int k = 0; k < spec.components(); ++k) {
    centers.push_back({params.ox + params.dx * spec.col_of(k), params.oy + params.dy * spec.row_of(k)});
  }
  return centers;
}

namespace detail {

inline double log_sum_exp(const double* terms, std::size_t count) {
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < count; ++i) peak = std::max(peak, terms[i]);
  if (!std::isfinite(peak)) return peak;
  double sum = 0.0;
  for (std::size_t i = 0; i < count; ++i) sum += std::exp(terms[i] - peak);
  return peak + std::log(sum);
}

/// Joint log terms ln(pi'_k p(x_n | z_k)) for k = 0..K; the last entry is the
/// outlier term (-inf when alpha = 1).
inline void joint_log_terms(const PixelPoint& x, const GridParams& p, const GridSpec& spec, const MixtureConfig& mix,
                            std::vector<double>& out) {
  const int K = spec.components();
  out.assign(static_cast<std::size_t>(K) + 1, -std::numeric_limits<double>::infinity());
  if (mix.alpha > 0.0) {
    const double log_norm =
        std::log(mix.alpha / K) - std::log(2.0 * std::numbers::pi) - 0.5 * std::log(p.var_x * p.var_y);
    for (int k = 0; k < K; ++k) {
      const double ex = x.x - (p.ox + p.dx * spec.col_of(k));
      const double ey = x.y - (p.oy + p.dy * spec.row_of(k));
      out[static_cast<std::size_t>(k)] = log_norm - 0.5 * (ex * ex / p.var_x + ey * ey / p.var_y);
    }
  }
  if (mix.alpha < 1.0) out[static_cast<std::size_t>(K)] = std::log((1.0 - mix.alpha) / mix.uniform_c);
}

}  // namespace detail

/// Negative log likelihood of the detections under the mixture, in nats.
inline double nll(const DetectionSet& X, const GridParams& params, const GridSpec& spec, const MixtureConfig& mix) {
  validate(spec);
  validate(mix);
  if (X.points.empty()) throw Error(ErrorKind::InvalidInput, "nll needs at least one detection");
  std::vector<double> terms;
  double total = 0.0;
  for (const auto& x : X.points) {
    detail::joint_log_terms(x, params, spec, mix, terms);
    const double lse = detail::log_sum_exp(terms.data(), terms.size());
    if (!std::isfinite(lse)) throw Error(ErrorKind::ArithmeticError, "per-point likelihood underflowed to zero");
    total -= lse;
  }
  return total;
}

inline Responsibilities e_step(const DetectionSet& X, const GridParams& params, const GridSpec& spec,
                               const MixtureConfig& mix) {
  validate(spec);
  validate(mix);
  const int K = spec.components();
  Responsibilities gamma{Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(X.size()), K + 1)};
  std::vector<double> terms;
  for (std::size_t n = 0; n < X.size(); ++n) {
    detail::joint_log_terms(X.points[n], params, spec, mix, terms);
    const double lse = detail::log_sum_exp(terms.data(), terms.size());
    if (!std::isfinite(lse)) throw Error(ErrorKind::ArithmeticError, "posterior undefined: likelihood underflow", n);
    for (int k = 0; k <= K; ++k) {
      gamma.table(static_cast<Eigen::Index>(n), k) = std::exp(terms[static_cast<std::size_t>(k)] - lse);
    }
  }
  return gamma;
}

namespace detail {

struct AxisFit {
  double origin;
  double spacing;
};

/// Weighted least squares for one axis: minimizes sum w (v - o - d*idx)^2.
/// Keeps `prev_spacing` when the index spread is degenerate.
inline AxisFit solve_axis(double s0, double s1, double s2, double sv, double svi, double prev_spacing) {
  const double det = s0 * s2 - s1 * s1;
  if (det > 1e-12 * s0 * s2 && s2 > 0.0) {
    const double spacing = (s0 * svi - s1 * sv) / det;
    const double origin = (s2 * sv - s1 * svi) / det;
    if (std::isfinite(spacing) && std::isfinite(origin)) return {origin, spacing};
  }
  return {(sv - prev_spacing * s1) / s0, prev_spacing};
}

/// Re-indexes an axis with negative spacing from the far end. The set of
/// centers, and therefore the likelihood, is unchanged.
inline GridParams mirror_negative_spacing(GridParams p, const GridSpec& spec) {
  if (p.dx < 0.0) {
    p.ox += p.dx * (spec.cols - 1);
    p.dx = -p.dx;
  }
  if (p.dy < 0.0) {
    p.oy += p.dy * (spec.rows - 1);
    p.dy = -p.dy;
  }
  if (!(p.dx > 0.0) || !(p.dy > 0.0)) throw Error(ErrorKind::DegenerateFit, "grid spacing collapsed to zero");
  return p;
}

}  // namespace detail

/// Closed-form maximization of the expected log likelihood given posteriors.
inline GridParams m_step(const DetectionSet& X, const Responsibilities& gamma, const GridSpec& spec,
                         const GridParams& prev, SigmaNormalization sigma_norm = SigmaNormalization::kInlierMass) {
  validate(spec);
  const int K = spec.components();
  if (gamma.points() != static_cast<Eigen::Index>(X.size()) || gamma.grid_components() != K) {
    throw Error(ErrorKind::InvalidInput, "responsibility table does not match detections and grid");
  }
  // Per-axis sufficient statistics: mass, sum w*i, sum w*i^2, sum w*v, sum w*i*v.
  double s0 = 0.0, s1x = 0.0, s2x = 0.0, sx = 0.0, sxi = 0.0;
  double s1y = 0.0, s2y = 0.0, sy = 0.0, syj = 0.0;
  for (std::size_t n = 0; n < X.size(); ++n) {
    const auto& x = X.points[n];
    for (int k = 0; k < K; ++k) {
      const double w = gamma.table(static_cast<Eigen::Index>(n), k);
      if (w == 0.0) continue;
      const double i = spec.col_of(k);
      const double j = spec.row_of(k);
      s0 += w;
      s1x += w * i;
      s2x += w * i * i;
      sx += w * x.x;
      sxi += w * i * x.x;
      s1y += w * j;
      s2y += w * j * j;
      sy += w * x.y;
      syj += w * j * x.y;
    }
  }
  if (!(s0 > 1e-9)) throw Error(ErrorKind::DegenerateFit, "no inlier mass: every detection was judged an outlier");

  const auto ax = detail::solve_axis(s0, s1x, s2x, sx, sxi, prev.dx);
  const auto ay = detail::solve_axis(s0, s1y, s2y, sy, syj, prev.dy);

  double rx = 0.0, ry = 0.0;
  for (std::size_t n = 0; n < X.size(); ++n) {
    const auto& x = X.points[n];
    for (int k = 0; k < K; ++k) {
      const double w = gamma.table(static_cast<Eigen::Index>(n), k);
      if (w == 0.0) continue;
      const double ex = x.x - (ax.origin + ax.spacing * spec.col_of(k));
      const double ey = x.y - (ay.origin + ay.spacing * spec.row_of(k));
      rx += w * ex * ex;
      ry += w * ey * ey;
    }
  }
  const double denom = sigma_norm == SigmaNormalization::kInlierMass ? s0 : static_cast<double>(X.size());
  GridParams next;
  next.ox = ax.origin;
  next.oy = ay.origin;
  next.dx = ax.spacing;
  next.dy = ay.spacing;
  next.var_x = std::max(rx / denom, kSigmaFloor);
  next.var_y = std::max(ry / denom, kSigmaFloor);
  return next;
}

/// Initialization used when none is supplied: origin at the top-left-most
/// detection (smallest x + y, ties by smaller y), spacing (100, 100) px,
/// variance (640, 640) px^2.
inline GridParams top_left_init(const DetectionSet& X, double spacing = 100.0, double variance = 640.0) {
  if (X.points.empty()) throw Error(ErrorKind::InvalidInput, "no detections to initialize from");
  const auto it = std::min_element(X.points.begin(), X.points.end(), [](const PixelPoint& a, const PixelPoint& b) {
    const double sa = a.x + a.y;
    const double sb = b.x + b.y;
    return sa < sb || (sa == sb && a.y < b.y);
  });
  return {it->x, it->y, spacing, spacing, variance, variance};
}

inline FitResult fit_grid(const DetectionSet& X, const GridSpec& spec, const MixtureConfig& mix,
                          const GridParams& init, const FitOptions& options = {}) {
  validate(X);
  validate(spec);
  validate(mix);
  validate(init);
  if (X.size() < 4) throw Error(ErrorKind::InvalidInput, "at least 4 points required");
  if (options.max_iter < 1) throw Error(ErrorKind::InvalidInput, "max_iter must be >= 1");

  FitResult result;
  result.params = init;
  double current = nll(X, init, spec, mix);
  result.nll_history.push_back(current);
  for (int it = 0; it < options.max_iter; ++it) {
    const Responsibilities gamma = e_step(X, result.params, spec, mix);
    result.params = detail::mirror_negative_spacing(m_step(X, gamma, spec, result.params, options.sigma_norm), spec);
    const double next = nll(X, result.params, spec, mix);
    result.nll_history.push_back(next);
    result.iterations = it + 1;
    const double change = std::abs(current - next);
    current = next;
    if (change < options.tol) {
      result.converged = true;
      break;
    }
  }
  result.gamma = e_step(X, result.params, spec, mix);
  return result;
}

/// Several EM starts; returns the lowest-NLL fit. The first start is
/// top_left_init; the others anchor the origin at the next detections in
/// top-left order, which recovers fits whose top-left detection is an outlier.
inline FitResult fit_grid_multistart(const DetectionSet& X, const GridSpec& spec, const MixtureConfig& mix,
                                     int starts = 4, double spacing = 100.0, double variance = 640.0,
                                     const FitOptions& options = {}) {
  validate(X);
  if (X.size() < 4) throw Error(ErrorKind::InvalidInput, "at least 4 points required");
  std::vector<std::size_t> order(X.size());
  for (std::size_t n = 0; n < order.size(); ++n) order[n] = n;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& pa = X.points[a];
    const auto& pb = X.points[b];
    const double sa = pa.x + pa.y;
    const double sb = pb.x + pb.y;
    return sa < sb || (sa == sb && pa.y < pb.y);
  });
  std::optional<FitResult> best;
  std::optional<Error> last_error;
  const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(std::max(starts, 1)), X.size());
  for (std::size_t s = 0; s < count; ++s) {
    const auto& anchor = X.points[order[s]];
    const GridParams init{anchor.x, anchor.y, spacing, spacing, variance, variance};
    try {
      FitResult fit = fit_grid(X, spec, mix, init, options);
      if (!best || fit.nll_history.back() < best->nll_history.back()) best = std::move(fit);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegenerateFit && e.kind() != ErrorKind::ArithmeticError) throw;
      last_error = e;
    }
  }
  if (!best) throw *last_error;
  return *std::move(best);
}

struct IntRange {
  int lo{2};
  int hi{8};
};

/// BIC = 2*NLL + 6*ln N over the candidate grids; ties go to smaller K, then
/// fewer rows.
inline GridSpec select_grid_dims(const DetectionSet& X, const MixtureConfig& mix, IntRange row_range,
                                 IntRange col_range, int starts = 1, const FitOptions& options = {}) {
  validate(X);
  if (row_range.lo < 1 || col_range.lo < 1 || row_range.hi < row_range.lo || col_range.hi < col_range.lo) {
    throw Error(ErrorKind::InvalidInput, "row and column ranges must be non-empty and positive");
  }
  std::vector<GridSpec> candidates;
  for (int r = row_range.lo; r <= row_range.hi; ++r) {
    for (int c = col_range.lo; c <= col_range.hi; ++c) {
      if (static_cast<std::size_t>(r * c) > 4 * X.size()) {
        throw Error(ErrorKind::InvalidInput, "candidate grid has more than 4N components");
      }
      candidates.push_back({r, c});
    }
  }
  std::vector<double> score(candidates.size(), std::numeric_limits<double>::infinity());
  const double penalty = 6.0 * std::log(static_cast<double>(X.size()));
  parallel_for(candidates.size(), [&](std::size_t idx) {
    try {
      const FitResult fit = fit_grid_multistart(X, candidates[idx], mix, starts, 100.0, 640.0, options);
      score[idx] = 2.0 * fit.nll_history.back() + penalty;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegenerateFit && e.kind() != ErrorKind::ArithmeticError) throw;
    }
  });
  std::optional<std::size_t> best;
  for (std::size_t idx = 0; idx < candidates.size(); ++idx) {
    if (!std::isfinite(score[idx])) continue;
    if (!best) {
      best = idx;
      continue;
    }
    const auto& a = candidates[idx];
    const auto& b = candidates[*best];
    const double tie = 1e-9 * std::max(1.0, std::abs(score[*best]));
    if (score[idx] < score[*best] - tie) {
      best = idx;
    } else if (std::abs(score[idx] - score[*best]) <= tie &&
               std::make_pair(a.components(), a.rows) < std::make_pair(b.components(), b.rows)) {
      best = idx;
    }
  }
  if (!best) throw Error(ErrorKind::NoViableSpec, "every candidate grid degenerated");
  return candidates[*best];
}

}  // namespace gridrect
