#include <gtest/gtest.h>

#include <filesystem>

#include "gridrect/io.hpp"
#include "gridrect/png_io.hpp"

using namespace gridrect;
using io::Json;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::ArithmeticError;
}

Json detection_json() {
  return Json::parse(R"({"width": 640, "height": 480, "image": "a.png",
                         "points": [{"x": 1.5, "y": 2}, {"x": 3, "y": 4}]})");
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("gridrect_io_test_" + name);
}

}  // namespace

TEST(DetectionFile, ParsesValidFile) {
  const auto f = io::parse_detection_file(detection_json());
  ASSERT_TRUE(f.image.has_value());
  EXPECT_EQ(*f.image, "a.png");
  EXPECT_EQ(f.detections.width, 640);
  ASSERT_EQ(f.detections.size(), 2u);
  EXPECT_EQ(f.detections.points[0].x, 1.5);
  EXPECT_EQ(f.detections.points[1].y, 4);
}

TEST(DetectionFile, RejectsUnknownField) {
  auto j = detection_json();
  j["extra"] = 1;
  EXPECT_EQ(kind_of([&] { io::parse_detection_file(j); }), ErrorKind::InvalidInput);
  j = detection_json();
  j["points"][0]["z"] = 0;
  EXPECT_EQ(kind_of([&] { io::parse_detection_file(j); }), ErrorKind::InvalidInput);
}

TEST(DetectionFile, RejectsMissingField) {
  auto j = detection_json();
  j.erase("height");
  EXPECT_EQ(kind_of([&] { io::parse_detection_file(j); }), ErrorKind::InvalidInput);
}

TEST(DetectionFile, RejectsWrongTypes) {
  auto j = detection_json();
  j["width"] = "640";
  EXPECT_EQ(kind_of([&] { io::parse_detection_file(j); }), ErrorKind::InvalidInput);
  j = detection_json();
  j["points"][0]["x"] = nullptr;
  EXPECT_EQ(kind_of([&] { io::parse_detection_file(j); }), ErrorKind::InvalidInput);
  j = detection_json();
  j["width"] = 640.5;
  EXPECT_EQ(kind_of([&] { io::parse_detection_file(j); }), ErrorKind::InvalidInput);
}

TEST(DetectionFile, RejectsNonPositiveSize) {
  auto j = detection_json();
  j["width"] = 0;
  EXPECT_EQ(kind_of([&] { io::parse_detection_file(j); }), ErrorKind::InvalidInput);
}

TEST(DetectionFile, RoundTrip) {
  const auto f = io::parse_detection_file(detection_json());
  const auto g = io::parse_detection_file(Json::parse(io::dump(io::to_json(f))));
  EXPECT_EQ(g.image, f.image);
  EXPECT_EQ(g.detections.points, f.detections.points);
}

TEST(DetectionFile, MissingFileIsInvalidInput) {
  EXPECT_EQ(kind_of([] { io::read_detection_file("/nonexistent/detections.json"); }), ErrorKind::InvalidInput);
}

TEST(Report, RoundTripsExactly) {
  SynthScene scene;
  scene.noise_sigma = 0.7;
  scene.seed = 12;
  scene.true_pose = {Vec3(0.1, -0.2, 0.05), Vec3(0.01, 0.02, 0.1)};
  const auto inst = generate(scene);
  RectifyOptions opts;
  opts.spec = scene.spec;
  const auto report = io::make_rectify_report(rectify_pipeline(inst.detections, scene.intrinsics, opts));
  const auto back = io::parse_report(Json::parse(io::dump(io::to_json(report))));
  EXPECT_EQ(back.grid.params, report.grid.params);
  EXPECT_EQ(back.grid.spec, report.grid.spec);
  ASSERT_TRUE(back.pose && back.homography && back.metric && back.rounds);
  EXPECT_EQ(back.pose->pose.theta, report.pose->pose.theta);
  EXPECT_EQ(back.pose->pose.t, report.pose->pose.t);
  EXPECT_EQ(back.pose->final_cost, report.pose->final_cost);
  EXPECT_EQ(*back.homography, *report.homography);
  EXPECT_EQ(*back.metric, *report.metric);
  EXPECT_EQ(back.assignments, report.assignments);
  EXPECT_EQ(back.nll_history, report.nll_history);
}

TEST(Report, FitReportMarksOutliers) {
  DetectionSet X{grid_centers({100, 100, 50, 50, 1, 1}, {2, 2}), 640, 480};
  X.points.push_back({600, 400});
  const auto fit = fit_grid(X, {2, 2}, MixtureConfig::for_image(X, 0.8), {100, 100, 50, 50, 4, 4});
  const auto r = io::make_fit_report(fit, {2, 2});
  EXPECT_EQ(r.assignments, (std::vector<int>{0, 1, 2, 3, -1}));
  EXPECT_FALSE(r.pose.has_value());
  EXPECT_FALSE(io::to_json(r).contains("metric"));
}

TEST(Truth, RoundTrip) {
  const auto bench = make_benchmark(1, 1, {}, 3);
  const auto& inst = bench.front();
  const auto back = io::parse_truth(Json::parse(io::dump(io::truth_json(inst))), inst.detections);
  EXPECT_EQ(back.group, inst.group);
  EXPECT_EQ(back.index, inst.index);
  EXPECT_EQ(back.labels, inst.labels);
  EXPECT_EQ(back.truth.seed, inst.truth.seed);
  EXPECT_EQ(back.truth.spec, inst.truth.spec);
  EXPECT_EQ(back.truth.true_params, inst.truth.true_params);
  EXPECT_EQ(back.truth.true_pose.theta, inst.truth.true_pose.theta);
  EXPECT_EQ(back.truth.true_pose.t, inst.truth.true_pose.t);
}

TEST(Png, GrayAndRgbRoundTrip) {
  for (int channels : {1, 3}) {
    ImageBuffer img(17, 9, channels);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<std::uint8_t>(i * 37 % 256);
    const auto path = temp_path("rt" + std::to_string(channels) + ".png");
    io::write_png(path, img);
    EXPECT_EQ(io::read_png(path), img);
    std::filesystem::remove(path);
  }
}

TEST(Png, RejectsNonPng) {
  const auto path = temp_path("not.png");
  io::write_text_file(path, "hello");
  EXPECT_EQ(kind_of([&] { io::read_png(path); }), ErrorKind::InvalidInput);
  std::filesystem::remove(path);
}
