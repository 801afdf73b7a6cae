#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "gridrect/grid_fit.hpp"
#include "gridrect/synth.hpp"
#include "oracles.hpp"

using namespace gridrect;

namespace {

SynthInstance fronto_panel(std::uint64_t seed, double noise, int outliers, GridSpec spec = {5, 3}) {
  SynthScene scene;
  scene.spec = spec;
  scene.noise_sigma = noise;
  scene.outlier_count = outliers;
  scene.seed = seed;
  return generate(scene);
}

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  return v[static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size()))) - 1];
}

Responsibilities hard_gamma(const std::vector<int>& labels, int K) {
  Responsibilities g{Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(labels.size()), K + 1)};
  for (std::size_t n = 0; n < labels.size(); ++n) g.table(static_cast<Eigen::Index>(n), labels[n] < 0 ? K : labels[n]) = 1;
  return g;
}

}  // namespace

TEST(GridCenters, TwoByTwo) {
  const auto c = grid_centers({0, 0, 100, 100, 1, 1}, {2, 2});
  const std::vector<PixelPoint> expected{{0, 0}, {100, 0}, {0, 100}, {100, 100}};
  EXPECT_EQ(c, expected);
}

TEST(GridCenters, FiveByThreeLastCenter) {
  const auto c = grid_centers({50, 80, 100, 100, 1, 1}, {5, 3});
  ASSERT_EQ(c.size(), 15u);
  EXPECT_EQ(c.back(), (PixelPoint{250, 480}));
}

TEST(GridCenters, SingleCellIsOrigin) {
  const auto c = grid_centers({12.5, -3, 7, 9, 1, 1}, {1, 1});
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0], (PixelPoint{12.5, -3}));
}

TEST(Nll, PeakOfUnitGaussian) {
  const DetectionSet X{{{5, 7}}, 640, 480};
  EXPECT_NEAR(nll(X, {5, 7, 10, 10, 1, 1}, {1, 1}, {1.0, 640 * 480}), std::log(2 * std::numbers::pi), 1e-14);
}

TEST(Nll, PureUniformComponent) {
  const DetectionSet X{{{5, 7}}, 640, 480};
  EXPECT_NEAR(nll(X, {0, 0, 10, 10, 1, 1}, {2, 2}, {0.0, 307200}), std::log(307200.0), 1e-12);
}

TEST(Nll, MatchesLongDoubleOracle) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    DetectionSet X{{}, 640, 480};
    for (int n = 0; n < 20; ++n) X.points.push_back({640 * u(rng), 480 * u(rng)});
    const GridParams p{100 + 50 * u(rng), 50 + 50 * u(rng), 60 + 60 * u(rng), 60 + 60 * u(rng), 20 + 600 * u(rng),
                       20 + 600 * u(rng)};
    const MixtureConfig mix{0.2 + 0.8 * u(rng), 640 * 480};
    const double got = nll(X, p, {4, 3}, mix);
    const long double want = oracle::nll(X, p, {4, 3}, mix);
    EXPECT_LT(std::abs(got - want) / std::abs(want), 1e-10);
  }
}

TEST(Nll, FarPointStaysFiniteInLogDomain) {
  const DetectionSet X{{{1e6, 1e6}}, 640, 480};
  EXPECT_TRUE(std::isfinite(nll(X, {0, 0, 10, 10, 1e-6, 1e-6}, {1, 1}, {1.0, 307200})));
}

TEST(Nll, ZeroLikelihoodWithoutOutlierMassIsArithmeticError) {
  const DetectionSet X{{{1e200, 1e200}}, 640, 480};
  try {
    nll(X, {0, 0, 10, 10, 1e-6, 1e-6}, {1, 1}, {1.0, 307200});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ArithmeticError);
  }
}

TEST(EStep, SingleComponentNoOutlierMass) {
  const DetectionSet X{{{5, 7}}, 640, 480};
  const auto g = e_step(X, {5, 7, 10, 10, 1, 1}, {1, 1}, {1.0, 307200});
  EXPECT_DOUBLE_EQ(g(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(g(0, 1), 0.0);
}

TEST(EStep, EquidistantPointSplitsEvenly) {
  const DetectionSet X{{{50, 0}}, 640, 480};
  const auto g = e_step(X, {0, 0, 100, 100, 25, 25}, {1, 2}, {0.8, 307200});
  EXPECT_NEAR(g(0, 0), g(0, 1), 1e-15);
  EXPECT_NEAR(g.table.row(0).sum(), 1.0, 1e-12);
}

TEST(EStep, FarPointGoesToOutlierColumn) {
  const DetectionSet X{{{0, 50 * 3}}, 640, 480};
  const auto g = e_step(X, {0, 0, 1000, 1000, 9, 9}, {1, 1}, {0.8, 307200});
  EXPECT_GT(g(0, 1), 0.999);
}

TEST(EStep, RowsAreDistributions) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    DetectionSet X{{}, 640, 480};
    for (int n = 0; n < 30; ++n) X.points.push_back({700 * u(rng) - 30, 500 * u(rng) - 10});
    const GridParams p{100 * u(rng), 100 * u(rng), 50 + 80 * u(rng), 50 + 80 * u(rng), 1e-3 + 300 * u(rng),
                       1e-3 + 300 * u(rng)};
    const auto g = e_step(X, p, {5, 4}, {0.8, 307200});
    EXPECT_GE(g.table.minCoeff(), 0.0);
    EXPECT_LE(g.table.maxCoeff(), 1.0);
    for (Eigen::Index n = 0; n < g.points(); ++n) EXPECT_NEAR(g.table.row(n).sum(), 1.0, 1e-10);
  }
}

TEST(MStep, RecoversNoiselessGridExactly) {
  const GridSpec spec{3, 3};
  const GridParams truth{10, 20, 50, 60, 1, 1};
  DetectionSet X{grid_centers(truth, spec), 640, 480};
  std::vector<int> labels(9);
  for (int k = 0; k < 9; ++k) labels[static_cast<std::size_t>(k)] = k;
  const auto p = m_step(X, hard_gamma(labels, 9), spec, {0, 0, 100, 100, 640, 640});
  EXPECT_NEAR(p.ox, 10, 1e-12);
  EXPECT_NEAR(p.oy, 20, 1e-12);
  EXPECT_NEAR(p.dx, 50, 1e-12);
  EXPECT_NEAR(p.dy, 60, 1e-12);
  EXPECT_EQ(p.var_x, kSigmaFloor);
  EXPECT_EQ(p.var_y, kSigmaFloor);
}

TEST(MStep, NoisyGridWithinOnePixel) {
  const GridSpec spec{3, 3};
  const GridParams truth{10, 20, 50, 60, 1, 1};
  const auto centers = grid_centers(truth, spec);
  std::vector<double> err;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    DetectionSet X{{}, 640, 480};
    std::vector<int> labels;
    for (int n = 0; n < 200; ++n) {
      const int k = n % 9;
      X.points.push_back({centers[static_cast<std::size_t>(k)].x + 2 * rng.normal(),
                          centers[static_cast<std::size_t>(k)].y + 2 * rng.normal()});
      labels.push_back(k);
    }
    const auto p = m_step(X, hard_gamma(labels, 9), spec, {0, 0, 100, 100, 640, 640});
    for (double e : {p.ox - 10, p.oy - 20, p.dx - 50, p.dy - 60}) err.push_back(std::abs(e));
  }
  EXPECT_LT(percentile(err, 0.95), 1.0);
}

TEST(MStep, MatchesBruteForceMaximizerOfQ) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0, 1);
  const GridSpec spec{3, 3};
  for (int trial = 0; trial < 20; ++trial) {
    const GridParams truth{100 + 100 * u(rng), 80 + 80 * u(rng), 60 + 40 * u(rng), 60 + 40 * u(rng), 16, 16};
    const auto centers = grid_centers(truth, spec);
    DetectionSet X{{}, 640, 480};
    for (int n = 0; n < 10; ++n) {
      const auto& c = centers[static_cast<std::size_t>((n * 4) % 9)];
      X.points.push_back({c.x + 8 * (u(rng) - 0.5), c.y + 8 * (u(rng) - 0.5)});
    }
    const auto gamma = e_step(X, truth, spec, {0.8, 307200});
    const auto p = m_step(X, gamma, spec, truth);
    const auto fx = oracle::axis_objective(X, gamma.table, spec, false, p.var_x);
    const auto fy = oracle::axis_objective(X, gamma.table, spec, true, p.var_y);
    const auto bx = oracle::maximize_axis(fx, -2000, 2000, -1000, 1000);
    const auto by = oracle::maximize_axis(fy, -2000, 2000, -1000, 1000);
    EXPECT_NEAR(p.ox, static_cast<double>(bx[0]), 1e-6);
    EXPECT_NEAR(p.dx, static_cast<double>(bx[1]), 1e-6);
    EXPECT_NEAR(p.oy, static_cast<double>(by[0]), 1e-6);
    EXPECT_NEAR(p.dy, static_cast<double>(by[1]), 1e-6);
  }
}

TEST(MStep, StationaryPointOfQ) {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(0, 1);
  const GridSpec spec{4, 3};
  for (int trial = 0; trial < 100; ++trial) {
    DetectionSet X{{}, 640, 480};
    for (int n = 0; n < 25; ++n) X.points.push_back({100 + 300 * u(rng), 50 + 400 * u(rng)});
    const GridParams p0{100, 50, 100, 100, 400 * u(rng) + 10, 400 * u(rng) + 10};
    const auto gamma = e_step(X, p0, spec, {0.8, 307200});
    const auto p = m_step(X, gamma, spec, p0);
    GridParams at = p;
    at.var_x = p0.var_x;
    at.var_y = p0.var_y;
    EXPECT_LT(oracle::q_gradient(X, gamma.table, spec, at).norm(), 1e-6);
  }
}

TEST(MStep, SingleColumnKeepsPreviousSpacing) {
  const GridSpec spec{3, 1};
  DetectionSet X{{{10, 0}, {11, 100}, {9, 200}}, 640, 480};
  const auto p = m_step(X, hard_gamma({0, 1, 2}, 3), spec, {0, 0, 77, 50, 10, 10});
  EXPECT_EQ(p.dx, 77);
  EXPECT_NEAR(p.ox, 10, 1e-12);
  EXPECT_NEAR(p.dy, 100, 1e-12);
}

TEST(MStep, AllOutliersIsDegenerate) {
  DetectionSet X{{{10, 0}, {11, 100}}, 640, 480};
  try {
    m_step(X, hard_gamma({-1, -1}, 4), {2, 2}, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateFit);
  }
}

TEST(FitGrid, TopLeftInitializationOnFiveByThreePanel) {
  const auto inst = fronto_panel(21, 1.0, 0);
  const auto& X = inst.detections;
  const auto fit = fit_grid(X, {5, 3}, MixtureConfig::for_image(X), top_left_init(X));
  EXPECT_TRUE(fit.converged);
  const auto got = grid_centers(fit.params, {5, 3});
  const auto want = grid_centers(inst.truth.true_params, {5, 3});
  for (std::size_t k = 0; k < want.size(); ++k) {
    EXPECT_LT(std::hypot(got[k].x - want[k].x, got[k].y - want[k].y), 3.0);
  }
}

TEST(FitGrid, FixedPointConvergesImmediately) {
  const GridParams truth{220, 40, 100, 100, 1, 1};
  const DetectionSet X{grid_centers(truth, {5, 3}), 640, 480};
  const auto fit = fit_grid(X, {5, 3}, MixtureConfig::for_image(X), truth);
  EXPECT_TRUE(fit.converged);
  EXPECT_LE(fit.iterations, 2);
  for (std::size_t i = 1; i < fit.nll_history.size(); ++i) {
    EXPECT_LE(fit.nll_history[i], fit.nll_history[i - 1] + 1e-9);
  }
}

TEST(FitGrid, OutliersDoNotMoveTheGrid) {
  std::vector<double> err;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto inst = fronto_panel(1000 + seed, 1.0, 3);
    const auto& X = inst.detections;
    const auto fit = fit_grid_multistart(X, {5, 3}, MixtureConfig::for_image(X));
    const auto got = grid_centers(fit.params, {5, 3});
    const auto want = grid_centers(inst.truth.true_params, {5, 3});
    for (std::size_t k = 0; k < want.size(); ++k) err.push_back(std::hypot(got[k].x - want[k].x, got[k].y - want[k].y));
  }
  EXPECT_LT(percentile(err, 0.95), 2.0);
}

TEST(FitGrid, NllNeverIncreases) {
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> u(0, 1);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto inst = fronto_panel(seed, 3.0, static_cast<int>(seed % 5));
    const auto& X = inst.detections;
    GridParams init = top_left_init(X, 60 + 80 * u(rng), 50 + 900 * u(rng));
    const auto fit = fit_grid(X, {5, 3}, MixtureConfig::for_image(X), init);
    for (std::size_t i = 1; i < fit.nll_history.size(); ++i) {
      EXPECT_LE(fit.nll_history[i], fit.nll_history[i - 1] + 1e-9);
    }
  }
}

TEST(FitGrid, TranslationEquivariant) {
  const auto inst = fronto_panel(5, 1.5, 2);
  const auto& X = inst.detections;
  const auto mix = MixtureConfig::for_image(X);
  const GridParams init = top_left_init(X);
  const auto a = fit_grid(X, {5, 3}, mix, init);
  DetectionSet Y = X;
  for (auto& p : Y.points) p = {p.x + 37.25, p.y - 12.5};
  GridParams init2 = init;
  init2.ox += 37.25;
  init2.oy -= 12.5;
  const auto b = fit_grid(Y, {5, 3}, mix, init2);
  EXPECT_NEAR(b.params.ox, a.params.ox + 37.25, 1e-6);
  EXPECT_NEAR(b.params.oy, a.params.oy - 12.5, 1e-6);
  EXPECT_NEAR(b.params.dx, a.params.dx, 1e-6);
  EXPECT_NEAR(b.params.dy, a.params.dy, 1e-6);
  EXPECT_NEAR(b.params.var_x, a.params.var_x, 1e-6);
  EXPECT_NEAR(b.params.var_y, a.params.var_y, 1e-6);
}

TEST(FitGrid, ExactGridRecoveredToMachinePrecisionWithoutOutlierMass) {
  const GridParams truth{133.25, 71.5, 87.75, 92.125, 1, 1};
  const DetectionSet X{grid_centers(truth, {4, 3}), 640, 480};
  for (double var : {4.0, 100.0, 640.0}) {
    GridParams init{truth.ox + 6, truth.oy - 5, 95, 85, var, var};
    const auto fit = fit_grid(X, {4, 3}, {1.0, 640 * 480}, init);
    EXPECT_NEAR(fit.params.ox, truth.ox, 1e-9);
    EXPECT_NEAR(fit.params.oy, truth.oy, 1e-9);
    EXPECT_NEAR(fit.params.dx, truth.dx, 1e-9);
    EXPECT_NEAR(fit.params.dy, truth.dy, 1e-9);
  }
}

TEST(FitGrid, RejectsTooFewPoints) {
  const DetectionSet X{{{1, 1}, {2, 2}, {3, 3}}, 640, 480};
  try {
    fit_grid(X, {2, 2}, MixtureConfig::for_image(X), top_left_init(X));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidInput);
    EXPECT_NE(std::string(e.what()).find("at least 4 points required"), std::string::npos);
  }
}

TEST(SelectGridDims, CleanFiveByThree) {
  const auto inst = fronto_panel(31, 0.5, 0);
  const auto& X = inst.detections;
  EXPECT_EQ(select_grid_dims(X, MixtureConfig::for_image(X), {2, 8}, {2, 6}), (GridSpec{5, 3}));
}

TEST(SelectGridDims, PerfectSquarePrefersSmallestGrid) {
  const DetectionSet X{{{100, 100}, {200, 100}, {100, 200}, {200, 200}}, 640, 480};
  EXPECT_EQ(select_grid_dims(X, MixtureConfig::for_image(X), {2, 3}, {2, 3}), (GridSpec{2, 2}));
}

TEST(SelectGridDims, RobustToFifteenPercentOutliers) {
  int hits = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto inst = fronto_panel(500 + seed, 1.0, 2);
    const auto& X = inst.detections;
    hits += select_grid_dims(X, MixtureConfig::for_image(X), {2, 8}, {2, 6}, 4) == GridSpec{5, 3};
  }
  EXPECT_GE(hits, 90);
}

TEST(SelectGridDims, RejectsOversizedCandidates) {
  const DetectionSet X{{{100, 100}, {200, 100}, {100, 200}, {200, 200}}, 640, 480};
  EXPECT_THROW(select_grid_dims(X, MixtureConfig::for_image(X), {2, 8}, {2, 6}), Error);
}

TEST(MStep, ReversedAssignmentsGiveNegativeSpacing) {
  const GridSpec spec{1, 3};
  DetectionSet X{{{300, 50}, {200, 50}, {100, 50}}, 640, 480};
  const auto p = m_step(X, hard_gamma({0, 1, 2}, 3), spec, {100, 50, 100, 100, 10, 10});
  EXPECT_NEAR(p.dx, -100, 1e-12);
  EXPECT_NEAR(p.ox, 300, 1e-12);
}

TEST(FitGrid, MirrorsNegativeSpacingWithoutChangingCenters) {
  const GridParams p{300, 50, -100, 80, 4, 4};
  const auto q = detail::mirror_negative_spacing(p, {2, 3});
  EXPECT_EQ(q.dx, 100);
  EXPECT_EQ(q.ox, 100);
  EXPECT_EQ(q.dy, 80);
  std::vector<double> xs, ys;
  for (int i = 0; i < 3; ++i) xs.push_back(p.ox + p.dx * i);
  for (const auto& c : grid_centers(q, {2, 3})) ys.push_back(c.x);
  std::sort(xs.begin(), xs.end());
  std::sort(ys.begin(), ys.end());
  ys.erase(std::unique(ys.begin(), ys.end()), ys.end());
  EXPECT_EQ(xs, ys);
  EXPECT_THROW(detail::mirror_negative_spacing({0, 0, 0, 1, 1, 1}, {2, 2}), Error);
}
