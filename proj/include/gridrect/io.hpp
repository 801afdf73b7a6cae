#pragma once

// JSON documents exchanged by the command-line tool: detection files, fit and
// rectification reports, and the ground-truth sidecars written next to
// synthetic instances. Readers are strict: unknown fields, missing fields and
// wrongly typed values are rejected with ErrorKind::InvalidInput.

#include <json.hpp>

#include <array>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gridrect/core.hpp"
#include "gridrect/error.hpp"
#include "gridrect/grid_fit.hpp"
#include "gridrect/rectify.hpp"
#include "gridrect/synth.hpp"

namespace gridrect::io {

using Json = nlohmann::json;

namespace detail {

inline Error bad(std::string_view where, std::string_view what) {
  return Error(ErrorKind::InvalidInput, std::string(where) + ": " + std::string(what));
}

inline void require_object(const Json& j, std::string_view where, std::initializer_list<std::string_view> required,
                           std::initializer_list<std::string_view> optional = {}) {
  if (!j.is_object()) throw bad(where, "expected an object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const auto k : required) known = known || key == k;
    for (const auto k : optional) known = known || key == k;
    if (!known) throw bad(where, "unknown field \"" + key + "\"");
  }
  for (const auto k : required) {
    if (!j.contains(std::string(k))) throw bad(where, "missing field \"" + std::string(k) + "\"");
  }
}

inline double number(const Json& j, std::string_view key, std::string_view where) {
  const Json& v = j.at(std::string(key));
  if (!v.is_number()) throw bad(where, "field \"" + std::string(key) + "\" must be a number");
  return v.get<double>();
}

inline long long integer(const Json& j, std::string_view key, std::string_view where) {
  const Json& v = j.at(std::string(key));
  if (!v.is_number_integer()) throw bad(where, "field \"" + std::string(key) + "\" must be an integer");
  return v.get<long long>();
}

inline bool boolean(const Json& j, std::string_view key, std::string_view where) {
  const Json& v = j.at(std::string(key));
  if (!v.is_boolean()) throw bad(where, "field \"" + std::string(key) + "\" must be a boolean");
  return v.get<bool>();
}

inline std::vector<double> numbers(const Json& j, std::string_view key, std::string_view where,
                                   std::optional<std::size_t> size = std::nullopt) {
  const Json& v = j.at(std::string(key));
  if (!v.is_array()) throw bad(where, "field \"" + std::string(key) + "\" must be an array");
  if (size && v.size() != *size) {
    throw bad(where, "field \"" + std::string(key) + "\" must have " + std::to_string(*size) + " entries");
  }
  std::vector<double> out;
  for (const auto& e : v) {
    if (!e.is_number()) throw bad(where, "field \"" + std::string(key) + "\" must hold numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

inline Vec3 vec3(const Json& j, std::string_view key, std::string_view where) {
  const auto v = numbers(j, key, where, 3);
  return {v[0], v[1], v[2]};
}

inline Json vec3_json(const Vec3& v) { return Json::array({v.x(), v.y(), v.z()}); }

}  // namespace detail

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::InvalidInput, "cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::InvalidInput, path.string() + ": malformed JSON: " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::InvalidInput, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::InvalidInput, "write failed for " + path.string());
}

/// Pretty-printed with a trailing newline. Doubles use the shortest text that
/// parses back to the same value.
inline std::string dump(const Json& j) { return j.dump(2) + "\n"; }

// Detection files ------------------------------------------------------------

struct DetectionFile {
  std::optional<std::string> image;
  DetectionSet detections;
};

inline DetectionFile parse_detection_file(const Json& j) {
  constexpr std::string_view where = "detection file";
  detail::require_object(j, where, {"width", "height", "points"}, {"image"});
  DetectionFile file;
  if (j.contains("image")) {
    if (!j["image"].is_string()) throw detail::bad(where, "field \"image\" must be a string");
    file.image = j["image"].get<std::string>();
  }
  const long long w = detail::integer(j, "width", where);
  const long long h = detail::integer(j, "height", where);
  if (w <= 0 || h <= 0) throw detail::bad(where, "width and height must be positive");
  file.detections.width = static_cast<double>(w);
  file.detections.height = static_cast<double>(h);
  if (!j["points"].is_array()) throw detail::bad(where, "field \"points\" must be an array");
  for (const auto& p : j["points"]) {
    detail::require_object(p, "point", {"x", "y"});
    file.detections.points.push_back({detail::number(p, "x", "point"), detail::number(p, "y", "point")});
  }
  validate(file.detections);
  return file;
}

inline DetectionFile read_detection_file(const std::filesystem::path& path) {
  try {
    return parse_detection_file(read_json_file(path));
  } catch (const Error& e) {
    throw e.with_context(path.string());
  }
}

inline Json points_json(std::span<const PixelPoint> points) {
  Json arr = Json::array();
  for (const auto& p : points) arr.push_back({{"x", p.x}, {"y", p.y}});
  return arr;
}

inline Json to_json(const DetectionFile& file) {
  Json j;
  if (file.image) j["image"] = *file.image;
  j["width"] = static_cast<long long>(file.detections.width);
  j["height"] = static_cast<long long>(file.detections.height);
  j["points"] = points_json(file.detections.points);
  return j;
}

// Reports --------------------------------------------------------------------

struct GridReport {
  GridSpec spec;
  GridParams params;
  bool converged{false};
  int iterations{0};
};

struct PoseReport {
  Pose pose;
  double initial_cost{0.0};
  double final_cost{0.0};
  int iterations{0};
  bool converged{false};
};

/// `fit` fills grid, assignments and nll_history; `rectify` fills every field.
struct Report {
  GridReport grid;
  std::optional<PoseReport> pose;
  std::optional<std::array<double, 9>> homography;
  std::optional<double> metric;
  std::vector<int> assignments;
  std::vector<double> nll_history;
  std::optional<int> rounds;
};

inline Json to_json(const Report& r) {
  Json grid = {{"rows", r.grid.spec.rows},
               {"cols", r.grid.spec.cols},
               {"ox", r.grid.params.ox},
               {"oy", r.grid.params.oy},
               {"dx", r.grid.params.dx},
               {"dy", r.grid.params.dy},
               {"var_x", r.grid.params.var_x},
               {"var_y", r.grid.params.var_y},
               {"converged", r.grid.converged},
               {"iterations", r.grid.iterations},
               {"centers", points_json(grid_centers(r.grid.params, r.grid.spec))}};
  Json j;
  j["grid"] = std::move(grid);
  if (r.pose) {
    j["pose"] = {{"theta", detail::vec3_json(r.pose->pose.theta)},
                 {"t", detail::vec3_json(r.pose->pose.t)},
                 {"initial_cost", r.pose->initial_cost},
                 {"final_cost", r.pose->final_cost},
                 {"iterations", r.pose->iterations},
                 {"converged", r.pose->converged}};
  }
  if (r.homography) j["homography"] = *r.homography;
  if (r.metric) j["metric"] = *r.metric;
  j["assignments"] = r.assignments;
  j["nll_history"] = r.nll_history;
  if (r.rounds) j["rounds"] = *r.rounds;
  return j;
}

inline Report parse_report(const Json& j) {
  constexpr std::string_view where = "report";
  detail::require_object(j, where, {"grid", "assignments", "nll_history"}, {"pose", "homography", "metric", "rounds"});
  Report r;
  const Json& g = j["grid"];
  detail::require_object(g, "report grid",
                         {"rows", "cols", "ox", "oy", "dx", "dy", "var_x", "var_y", "converged", "iterations", "centers"});
  r.grid.spec = {static_cast<int>(detail::integer(g, "rows", "report grid")),
                 static_cast<int>(detail::integer(g, "cols", "report grid"))};
  r.grid.params.ox = detail::number(g, "ox", "report grid");
  r.grid.params.oy = detail::number(g, "oy", "report grid");
  r.grid.params.dx = detail::number(g, "dx", "report grid");
  r.grid.params.dy = detail::number(g, "dy", "report grid");
  r.grid.params.var_x = detail::number(g, "var_x", "report grid");
  r.grid.params.var_y = detail::number(g, "var_y", "report grid");
  r.grid.converged = detail::boolean(g, "converged", "report grid");
  r.grid.iterations = static_cast<int>(detail::integer(g, "iterations", "report grid"));
  if (j.contains("pose")) {
    const Json& p = j["pose"];
    detail::require_object(p, "report pose", {"theta", "t", "initial_cost", "final_cost", "iterations", "converged"});
    PoseReport pr;
    pr.pose = {detail::vec3(p, "theta", "report pose"), detail::vec3(p, "t", "report pose")};
    pr.initial_cost = detail::number(p, "initial_cost", "report pose");
    pr.final_cost = detail::number(p, "final_cost", "report pose");
    pr.iterations = static_cast<int>(detail::integer(p, "iterations", "report pose"));
    pr.converged = detail::boolean(p, "converged", "report pose");
    r.pose = pr;
  }
  if (j.contains("homography")) {
    const auto h = detail::numbers(j, "homography", where, 9);
    std::array<double, 9> a{};
    std::copy(h.begin(), h.end(), a.begin());
    r.homography = a;
  }
  if (j.contains("metric")) r.metric = detail::number(j, "metric", where);
  if (j.contains("rounds")) r.rounds = static_cast<int>(detail::integer(j, "rounds", where));
  if (!j["assignments"].is_array()) throw detail::bad(where, "field \"assignments\" must be an array");
  for (const auto& a : j["assignments"]) {
    if (!a.is_number_integer()) throw detail::bad(where, "assignments must be integers");
    r.assignments.push_back(a.get<int>());
  }
  r.nll_history = detail::numbers(j, "nll_history", where);
  return r;
}

/// Grid report with hard assignments (-1 for the outlier column).
inline Report make_fit_report(const FitResult& fit, const GridSpec& spec) {
  Report r;
  r.grid = {spec, fit.params, fit.converged, fit.iterations};
  for (Eigen::Index n = 0; n < fit.gamma.points(); ++n) {
    const auto k = fit.gamma.argmax(n);
    r.assignments.push_back(k == fit.gamma.outlier_column() ? -1 : static_cast<int>(k));
  }
  r.nll_history = fit.nll_history;
  return r;
}

inline Report make_rectify_report(const RectifyResult& res) {
  Report r;
  r.grid = {res.spec, res.grid.params, res.grid.converged, res.grid.iterations};
  r.pose = PoseReport{res.pose.pose, res.pose.initial_cost, res.pose.final_cost, res.pose.iterations,
                      res.pose.converged};
  r.homography = res.homography.entries();
  r.metric = res.metric;
  r.assignments = res.assignments;
  r.nll_history = res.grid.nll_history;
  r.rounds = res.rounds;
  return r;
}

// Truth sidecars -------------------------------------------------------------

inline Json truth_json(const SynthInstance& inst) {
  const auto& s = inst.truth;
  return {{"group", inst.group},
          {"instance", inst.index},
          {"seed", s.seed},
          {"rows", s.spec.rows},
          {"cols", s.spec.cols},
          {"true_params",
           {{"ox", s.true_params.ox},
            {"oy", s.true_params.oy},
            {"dx", s.true_params.dx},
            {"dy", s.true_params.dy},
            {"var_x", s.true_params.var_x},
            {"var_y", s.true_params.var_y}}},
          {"true_pose", {{"theta", detail::vec3_json(s.true_pose.theta)}, {"t", detail::vec3_json(s.true_pose.t)}}},
          {"intrinsics", {{"fx", s.intrinsics.fx}, {"fy", s.intrinsics.fy}, {"cx", s.intrinsics.cx}, {"cy", s.intrinsics.cy}}},
          {"noise_sigma", s.noise_sigma},
          {"outlier_count", s.outlier_count},
          {"dropout_count", s.dropout_count},
          {"labels", inst.labels}};
}

/// Rebuilds an instance from its detection file and truth sidecar. Clean
/// points and the rendered image are not stored and stay empty.
inline SynthInstance parse_truth(const Json& j, const DetectionSet& detections) {
  constexpr std::string_view where = "truth file";
  detail::require_object(j, where,
                         {"group", "instance", "seed", "rows", "cols", "true_params", "true_pose", "intrinsics",
                          "noise_sigma", "outlier_count", "dropout_count", "labels"});
  SynthInstance inst;
  inst.detections = detections;
  inst.group = static_cast<int>(detail::integer(j, "group", where));
  inst.index = static_cast<int>(detail::integer(j, "instance", where));
  auto& s = inst.truth;
  if (!j["seed"].is_number_unsigned()) throw detail::bad(where, "field \"seed\" must be an unsigned integer");
  s.seed = j["seed"].get<std::uint64_t>();
  s.spec = {static_cast<int>(detail::integer(j, "rows", where)), static_cast<int>(detail::integer(j, "cols", where))};
  validate(s.spec);
  const Json& p = j["true_params"];
  detail::require_object(p, "true_params", {"ox", "oy", "dx", "dy", "var_x", "var_y"});
  s.true_params = {detail::number(p, "ox", where), detail::number(p, "oy", where), detail::number(p, "dx", where),
                   detail::number(p, "dy", where), detail::number(p, "var_x", where), detail::number(p, "var_y", where)};
  const Json& q = j["true_pose"];
  detail::require_object(q, "true_pose", {"theta", "t"});
  s.true_pose = {detail::vec3(q, "theta", where), detail::vec3(q, "t", where)};
  const Json& k = j["intrinsics"];
  detail::require_object(k, "intrinsics", {"fx", "fy", "cx", "cy"});
  s.intrinsics = {detail::number(k, "fx", where), detail::number(k, "fy", where), detail::number(k, "cx", where),
                  detail::number(k, "cy", where)};
  validate(s.intrinsics);
  s.width = detections.width;
  s.height = detections.height;
  s.noise_sigma = detail::number(j, "noise_sigma", where);
  s.outlier_count = static_cast<int>(detail::integer(j, "outlier_count", where));
  s.dropout_count = static_cast<int>(detail::integer(j, "dropout_count", where));
  if (!j["labels"].is_array()) throw detail::bad(where, "field \"labels\" must be an array");
  for (const auto& l : j["labels"]) {
    if (!l.is_number_integer()) throw detail::bad(where, "labels must be integers");
    const int label = l.get<int>();
    if (label != kOutlierLabel && (label < 0 || label >= s.spec.components())) {
      throw detail::bad(where, "label out of range");
    }
    inst.labels.push_back(label);
  }
  if (inst.labels.size() != detections.size()) throw detail::bad(where, "label count differs from detection count");
  return inst;
}

}  // namespace gridrect::io
