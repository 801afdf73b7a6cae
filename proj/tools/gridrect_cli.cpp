// gridrect: grid fitting, rectification, synthetic benchmarks and evaluation.
//
// Exit codes: 0 success, 1 invalid input or I/O failure, 2 numeric failure
// (degenerate fit, too few inliers), 3 geometric failure (cheirality,
// singular map, point at infinity).

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gridrect/grid_fit.hpp"
#include "gridrect/io.hpp"
#include "gridrect/parallel.hpp"
#include "gridrect/png_io.hpp"
#include "gridrect/pose.hpp"
#include "gridrect/rectify.hpp"
#include "gridrect/synth.hpp"

namespace fs = std::filesystem;
using namespace gridrect;

namespace {

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return 1;
    case ErrorKind::ArithmeticError:
    case ErrorKind::DegenerateFit:
    case ErrorKind::NoViableSpec:
    case ErrorKind::TooFewInliers: return 2;
    case ErrorKind::CheiralityViolation:
    case ErrorKind::SingularMap:
    case ErrorKind::PointAtInfinity:
    case ErrorKind::InvisibleGrid: return 3;
  }
  return 2;
}

std::vector<double> parse_list(const std::string& text, std::size_t count, const std::string& flag) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(ErrorKind::InvalidInput, flag + " expects " + std::to_string(count) + " comma-separated numbers");
    }
  }
  if (out.size() != count) {
    throw Error(ErrorKind::InvalidInput, flag + " expects " + std::to_string(count) + " comma-separated numbers");
  }
  return out;
}

Intrinsics parse_intrinsics(const std::string& text) {
  const auto v = parse_list(text, 4, "--intrinsics");
  Intrinsics K{v[0], v[1], v[2], v[3]};
  validate(K);
  return K;
}

void emit(const std::string& text, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    io::write_text_file(path, text);
  }
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string instance_stem(int group, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "g%02d_i%02d", group, index);
  return buf;
}

struct GridFlags {
  std::optional<int> rows;
  std::optional<int> cols;
  bool auto_dims{false};
  int rows_lo{2}, rows_hi{8}, cols_lo{2}, cols_hi{6};
  double alpha{0.8};
  FitOptions fit{};
  bool sigma_per_point{false};

  void add(CLI::App* app) {
    app->add_option("--rows", rows, "Grid rows")->check(CLI::PositiveNumber);
    app->add_option("--cols", cols, "Grid columns")->check(CLI::PositiveNumber);
    app->add_flag("--auto-dims", auto_dims, "Select rows and columns by BIC (default when --rows/--cols are absent)");
    app->add_option("--min-rows", rows_lo, "Smallest row count tried by --auto-dims");
    app->add_option("--max-rows", rows_hi, "Largest row count tried by --auto-dims");
    app->add_option("--min-cols", cols_lo, "Smallest column count tried by --auto-dims");
    app->add_option("--max-cols", cols_hi, "Largest column count tried by --auto-dims");
    app->add_option("--alpha", alpha, "Inlier mass of the mixture");
    app->add_option("--tol", fit.tol, "EM stopping tolerance on |dNLL| (nats)");
    app->add_option("--max-iter", fit.max_iter, "EM iteration cap");
    app->add_flag("--sigma-per-point", sigma_per_point, "Normalize the variance update by the point count");
  }

  /// Explicit spec, or nullopt when dimensions are to be selected.
  std::optional<GridSpec> spec() const {
    if (rows.has_value() != cols.has_value()) throw Error(ErrorKind::InvalidInput, "--rows and --cols go together");
    if (rows && auto_dims) throw Error(ErrorKind::InvalidInput, "--auto-dims conflicts with --rows/--cols");
    if (rows) return GridSpec{*rows, *cols};
    return std::nullopt;
  }

  FitOptions fit_options() const {
    FitOptions o = fit;
    if (sigma_per_point) o.sigma_norm = SigmaNormalization::kPointCount;
    if (!(o.tol > 0.0) || o.max_iter < 1) throw Error(ErrorKind::InvalidInput, "--tol must be > 0 and --max-iter >= 1");
    return o;
  }
};

// fit -------------------------------------------------------------------------

struct FitArgs {
  std::string detections;
  GridFlags grid;
  std::string init_origin;
  std::string init_spacing{"100,100"};
  std::string init_variance{"640,640"};
  int starts{1};
  std::string out;
};

int cmd_fit(const FitArgs& a) {
  if (a.starts < 1) throw Error(ErrorKind::InvalidInput, "--starts must be >= 1");
  const io::DetectionFile file = io::read_detection_file(a.detections);
  const DetectionSet& X = file.detections;
  if (X.size() < 4) throw Error(ErrorKind::InvalidInput, "at least 4 points required");
  const MixtureConfig mix = MixtureConfig::for_image(X, a.grid.alpha);
  validate(mix);
  const FitOptions options = a.grid.fit_options();
  const auto spacing = parse_list(a.init_spacing, 2, "--init-spacing");
  const auto variance = parse_list(a.init_variance, 2, "--init-variance");
  const GridSpec spec = a.grid.spec().value_or(GridSpec{});
  const GridSpec chosen =
      a.grid.spec() ? spec
                    : select_grid_dims(X, mix, {a.grid.rows_lo, a.grid.rows_hi}, {a.grid.cols_lo, a.grid.cols_hi},
                                       a.starts, options);
  FitResult fit;
  if (!a.init_origin.empty() || a.starts == 1) {
    GridParams init = top_left_init(X, spacing[0], variance[0]);
    init.dy = spacing[1];
    init.var_y = variance[1];
    if (!a.init_origin.empty()) {
      const auto o = parse_list(a.init_origin, 2, "--init-origin");
      init.ox = o[0];
      init.oy = o[1];
    }
    validate(init);
    fit = fit_grid(X, chosen, mix, init, options);
  } else {
    if (spacing[0] != spacing[1] || variance[0] != variance[1]) {
      throw Error(ErrorKind::InvalidInput, "--starts > 1 needs equal x/y spacing and variance");
    }
    fit = fit_grid_multistart(X, chosen, mix, a.starts, spacing[0], variance[0], options);
  }
  emit(io::dump(io::to_json(io::make_fit_report(fit, chosen))), a.out);
  return 0;
}

// rectify ---------------------------------------------------------------------

struct RectifyArgs {
  std::string detections;
  GridFlags grid;
  std::string intrinsics{"320,320,320,240"};
  std::string image;
  int rounds{3};
  int starts{4};
  bool protocol_init{false};
  bool weighted{false};
  bool fit_canvas{false};
  std::string out_report;
  std::string out_image;
};

int cmd_rectify(const RectifyArgs& a) {
  const io::DetectionFile file = io::read_detection_file(a.detections);
  const Intrinsics K = parse_intrinsics(a.intrinsics);
  if (a.rounds < 1) throw Error(ErrorKind::InvalidInput, "--rounds must be >= 1");
  if (a.starts < 1) throw Error(ErrorKind::InvalidInput, "--starts must be >= 1");
  if (file.detections.size() < 4) throw Error(ErrorKind::InvalidInput, "at least 4 points required");

  std::optional<fs::path> image_path;
  if (!a.image.empty()) {
    image_path = a.image;
  } else if (file.image) {
    image_path = fs::path(a.detections).parent_path() / *file.image;
  }
  if (!a.out_image.empty() && !image_path) {
    throw Error(ErrorKind::InvalidInput, "--out-image needs --image or an \"image\" field in the detection file");
  }
  std::optional<ImageBuffer> img;
  if (image_path && !a.out_image.empty()) img = io::read_png(*image_path);

  RectifyOptions opts;
  opts.spec = a.grid.spec();
  opts.row_range = {a.grid.rows_lo, a.grid.rows_hi};
  opts.col_range = {a.grid.cols_lo, a.grid.cols_hi};
  opts.alpha = a.grid.alpha;
  opts.fit = a.grid.fit_options();
  opts.fit_starts = a.starts;
  opts.max_rounds = a.rounds;
  opts.weighted = a.weighted;
  if (a.protocol_init) opts.xi0 = protocol_initial_pose();
  const RectifyResult res = rectify_pipeline(file.detections, K, opts);
  emit(io::dump(io::to_json(io::make_rectify_report(res))), a.out_report);

  if (img) {
    ImageBuffer out;
    if (a.fit_canvas) {
      const Canvas canvas = fit_canvas(res.homography, img->width, img->height);
      out = warp_image(*img, canvas.homography, canvas.width, canvas.height);
    } else {
      out = warp_image(*img, res.homography, img->width, img->height);
    }
    io::write_png(a.out_image, out);
  }
  return 0;
}

// synth -----------------------------------------------------------------------

struct SynthArgs {
  int groups{5};
  int per_group{5};
  std::uint64_t seed{7};
  std::string out_dir;
  bool render{false};
  double noise{1.0};
  double outlier_fraction{0.1};
  int dropout{0};
  double max_tilt{35.0};
  double max_roll{10.0};
};

int cmd_synth(const SynthArgs& a) {
  if (a.groups < 0 || a.per_group < 0) throw Error(ErrorKind::InvalidInput, "--groups and --per-group must be >= 0");
  PoseRanges ranges;
  ranges.max_tilt_deg = a.max_tilt;
  ranges.max_roll_deg = a.max_roll;
  BenchmarkConfig config;
  config.noise_sigma = a.noise;
  config.outlier_fraction = a.outlier_fraction;
  config.dropout_count = a.dropout;
  if (!(a.outlier_fraction >= 0.0)) throw Error(ErrorKind::InvalidInput, "--outlier-fraction must be >= 0");
  const auto bench = make_benchmark(a.groups, a.per_group, ranges, a.seed, config);

  std::error_code ec;
  fs::create_directories(a.out_dir, ec);
  if (ec || !fs::is_directory(a.out_dir)) throw Error(ErrorKind::InvalidInput, "cannot create " + a.out_dir);
  const fs::path dir(a.out_dir);
  parallel_for(bench.size(), [&](std::size_t i) {
    const SynthInstance& inst = bench[i];
    const std::string stem = instance_stem(inst.group, inst.index);
    io::DetectionFile file{std::nullopt, inst.detections};
    if (a.render) {
      file.image = stem + ".png";
      io::write_png(dir / (stem + ".png"), render(inst));
    }
    io::write_text_file(dir / (stem + ".json"), io::dump(io::to_json(file)));
    io::write_text_file(dir / (stem + ".truth.json"), io::dump(io::truth_json(inst)));
  });
  return 0;
}

// eval ------------------------------------------------------------------------

struct EvalArgs {
  std::string bench_dir;
  std::string out;
  int rounds{3};
  int starts{4};
  bool protocol_init{false};
};

struct EvalRow {
  int group{0};
  int instance{0};
  double metric{0.0};
  double rot_err_deg{0.0};
  double trans_err{0.0};
  int rounds{0};
};

int cmd_eval(const EvalArgs& a) {
  if (!fs::is_directory(a.bench_dir)) throw Error(ErrorKind::InvalidInput, a.bench_dir + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(a.bench_dir)) {
    const std::string name = entry.path().filename().string();
    const bool is_truth = name.size() > 11 && name.ends_with(".truth.json");
    if (entry.is_regular_file() && name.ends_with(".json") && !is_truth) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<SynthInstance> instances;
  for (const auto& path : files) {
    fs::path truth = path;
    truth.replace_extension(".truth.json");
    if (!fs::exists(truth)) throw Error(ErrorKind::InvalidInput, "missing truth sidecar " + truth.string());
    const io::DetectionFile file = io::read_detection_file(path);
    try {
      instances.push_back(io::parse_truth(io::read_json_file(truth), file.detections));
    } catch (const Error& e) {
      throw e.with_context(truth.string());
    }
  }

  std::vector<EvalRow> rows(instances.size());
  parallel_for(instances.size(), [&](std::size_t i) {
    const SynthInstance& inst = instances[i];
    RectifyOptions opts;
    opts.spec = inst.truth.spec;
    opts.max_rounds = a.rounds;
    opts.fit_starts = a.starts;
    if (a.protocol_init) opts.xi0 = protocol_initial_pose();
    const RectifyResult res = rectify_pipeline(inst.detections, inst.truth.intrinsics, opts);
    const TruthComparison cmp = compare_to_truth(inst, res);
    rows[i] = {inst.group, inst.index, res.metric, cmp.rot_err_deg, cmp.trans_err, res.rounds};
  });
  std::sort(rows.begin(), rows.end(),
            [](const EvalRow& l, const EvalRow& r) { return std::tie(l.group, l.instance) < std::tie(r.group, r.instance); });

  std::string csv = "group,instance,metric_x1000,rot_err_deg,trans_err,rounds\r\n";
  std::map<int, std::vector<const EvalRow*>> by_group;
  for (const auto& r : rows) {
    csv += std::to_string(r.group) + "," + std::to_string(r.instance) + "," + format_double(r.metric) + "," +
           format_double(r.rot_err_deg) + "," + format_double(r.trans_err) + "," + std::to_string(r.rounds) + "\r\n";
    by_group[r.group].push_back(&r);
  }
  for (const auto& [group, members] : by_group) {
    double m = 0.0, rot = 0.0, tr = 0.0, rounds = 0.0;
    for (const EvalRow* r : members) {
      m += r->metric;
      rot += r->rot_err_deg;
      tr += r->trans_err;
      rounds += r->rounds;
    }
    const double n = static_cast<double>(members.size());
    csv += std::to_string(group) + ",mean," + format_double(m / n) + "," + format_double(rot / n) + "," +
           format_double(tr / n) + "," + format_double(rounds / n) + "\r\n";
  }
  emit(csv, a.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grid fitting and perspective rectification of button panels"};
  app.require_subcommand(1);

  FitArgs fit;
  CLI::App* fit_cmd = app.add_subcommand("fit", "Fit the grid mixture to a detection file");
  fit_cmd->add_option("detections", fit.detections, "Detection JSON")->required();
  fit.grid.add(fit_cmd);
  fit_cmd->add_option("--init-origin", fit.init_origin, "Initial origin x,y (default: top-left detection)");
  fit_cmd->add_option("--init-spacing", fit.init_spacing, "Initial spacing dx,dy");
  fit_cmd->add_option("--init-variance", fit.init_variance, "Initial variances var_x,var_y");
  fit_cmd->add_option("--starts", fit.starts, "Origin hypotheses (detections in top-left order)");
  fit_cmd->add_option("--out", fit.out, "Report path (default: stdout)");

  RectifyArgs rect;
  CLI::App* rect_cmd = app.add_subcommand("rectify", "Estimate the pose and rectifying homography");
  rect_cmd->add_option("detections", rect.detections, "Detection JSON")->required();
  rect.grid.add(rect_cmd);
  rect_cmd->add_option("--intrinsics", rect.intrinsics, "fx,fy,cx,cy");
  rect_cmd->add_option("--image", rect.image, "Source PNG (default: the detection file's image field)");
  rect_cmd->add_option("--rounds", rect.rounds, "Maximum grid-fit/pose rounds");
  rect_cmd->add_option("--starts", rect.starts, "Origin hypotheses per view hypothesis in round 1");
  rect_cmd->add_flag("--protocol-init", rect.protocol_init, "Start pose estimation at (-1,-1,-1, 0.1,0.1,0.1)");
  rect_cmd->add_flag("--weighted", rect.weighted, "Weight residuals by their responsibilities");
  rect_cmd->add_flag("--fit-canvas", rect.fit_canvas, "Size the output image to the warped source");
  rect_cmd->add_option("--out-report", rect.out_report, "Report path (default: stdout)");
  rect_cmd->add_option("--out-image", rect.out_image, "Rectified PNG path");

  SynthArgs synth;
  CLI::App* synth_cmd = app.add_subcommand("synth", "Write a synthetic benchmark");
  synth_cmd->add_option("--groups", synth.groups, "Panel geometries");
  synth_cmd->add_option("--per-group", synth.per_group, "Viewpoints per geometry");
  synth_cmd->add_option("--seed", synth.seed, "Generator seed");
  synth_cmd->add_option("--out-dir", synth.out_dir, "Output directory")->required();
  synth_cmd->add_flag("--render", synth.render, "Also write rendered PNGs");
  synth_cmd->add_option("--noise", synth.noise, "Detection noise sigma (pixels)");
  synth_cmd->add_option("--outlier-fraction", synth.outlier_fraction, "Injected outliers per grid cell");
  synth_cmd->add_option("--dropout", synth.dropout, "Deleted true detections per instance");
  synth_cmd->add_option("--max-tilt", synth.max_tilt, "Largest tilt (degrees)");
  synth_cmd->add_option("--max-roll", synth.max_roll, "Largest roll (degrees)");

  EvalArgs eval;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Rectify a synthetic benchmark and score it against truth");
  eval_cmd->add_option("--bench-dir", eval.bench_dir, "Directory written by synth")->required();
  eval_cmd->add_option("--out", eval.out, "CSV path (default: stdout)");
  eval_cmd->add_option("--rounds", eval.rounds, "Maximum grid-fit/pose rounds");
  eval_cmd->add_option("--starts", eval.starts, "Origin hypotheses per view hypothesis in round 1");
  eval_cmd->add_flag("--protocol-init", eval.protocol_init, "Start pose estimation at (-1,-1,-1, 0.1,0.1,0.1)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*fit_cmd) return cmd_fit(fit);
    if (*rect_cmd) return cmd_rectify(rect);
    if (*synth_cmd) return cmd_synth(synth);
    if (*eval_cmd) return cmd_eval(eval);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
