// gsocc: scene generation, fitting, evaluation, rendering, querying and
// ablation sweeps from the command line.
//
// Exit codes: 0 success, 1 domain or I/O error, 2 usage error.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "gsocc/g2o.hpp"
#include "gsocc/io.hpp"
#include "gsocc/openvocab.hpp"
#include "gsocc/parallel.hpp"
#include "gsocc/png_writer.hpp"
#include "gsocc/scenes.hpp"
#include "gsocc/splat.hpp"
#include "gsocc/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gsocc;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void print_config(const std::string& command, const json& cfg) {
  std::cerr << "gsocc " << command << " " << cfg.dump() << "\n";
}

// Options shared by fit and ablate.
struct FitFlags {
  std::string mode = "poisson";
  std::string schedule = "exp";
  double tmin = 1e-3;
  double tmax = 1.0;
  double tau_test = std::numeric_limits<double>::quiet_NaN();
  int iters = 500;
  int n_gaussians = 64;
  std::uint64_t seed = 0;
  double step_size = 1.0;
  double w_focal = 1.0, w_lovasz = 1.0, w_scal = 1.0, w_feat = 1.0, w_depth = 1.0;
  double gamma = 2.0, alpha_b = 0.25, huber_delta = 1.0;
  double intensity = 1.0;
  double threshold = kDefaultOccupancyThreshold;
  bool freeze_opacity = false;
  bool quiet = false;

  void add_to(CLI::App* app, bool with_schedule) {
    if (with_schedule) {
      app->add_option("--mode", mode, "Aggregation: gf2|bernoulli|poisson")
          ->check(CLI::IsMember({"gf2", "bernoulli", "poisson"}));
      app->add_option("--schedule", schedule, "Temperature schedule: exp|linear|const")
          ->check(CLI::IsMember({"exp", "linear", "const"}));
      app->add_option("--tmin", tmin, "Final temperature T_min");
      app->add_option("--tmax", tmax, "Initial temperature T_max (the constant value for const)");
      app->add_option("--tau", tau_test, "Evaluation temperature (default T_min)");
      app->add_option("--freeze-opacity", freeze_opacity, "Do not update opacity logits");
    }
    app->add_option("--iters", iters, "Optimization steps")->check(CLI::PositiveNumber);
    app->add_option("--n-gaussians", n_gaussians, "Number of Gaussians")->check(CLI::PositiveNumber);
    app->add_option("--seed", seed, "Initialization seed");
    app->add_option("--step-size", step_size, "Multiplier on every learning rate")->check(CLI::PositiveNumber);
    app->add_option("--w-focal", w_focal);
    app->add_option("--w-lovasz", w_lovasz);
    app->add_option("--w-scal", w_scal);
    app->add_option("--w-feat", w_feat);
    app->add_option("--w-depth", w_depth);
    app->add_option("--gamma", gamma, "Focal exponent");
    app->add_option("--alpha-b", alpha_b, "Focal class balance");
    app->add_option("--huber-delta", huber_delta, "Huber transition in metres");
    app->add_option("--intensity", intensity, "Poisson intensity multiplier");
    app->add_option("--threshold", threshold, "Occupancy threshold");
    app->add_flag("--quiet", quiet, "Suppress progress output");
  }

  FitConfig config() const {
    FitConfig c;
    c.num_gaussians = n_gaussians;
    c.iterations = iters;
    c.step_size = step_size;
    c.weights = {w_focal, w_lovasz, w_scal, w_feat, w_depth};
    c.focal = {gamma, alpha_b};
    c.huber_delta = huber_delta;
    c.mode = parse_aggregation_mode(mode);
    c.schedule.t_min = tmin;
    c.schedule.t_max = tmax;
    c.schedule.mode = parse_schedule_mode(schedule);
    if (!std::isnan(tau_test)) c.schedule.tau_test = tau_test;
    c.seed = seed;
    c.freeze_opacity = freeze_opacity;
    c.voxelize.intensity_scale = intensity;
    c.threshold = threshold;
    return c;
  }

  json to_json() const {
    return {{"mode", mode},
            {"schedule", schedule},
            {"tmin", tmin},
            {"tmax", tmax},
            {"tau", std::isnan(tau_test) ? json(nullptr) : json(tau_test)},
            {"iters", iters},
            {"n_gaussians", n_gaussians},
            {"seed", seed},
            {"step_size", step_size},
            {"weights", {w_focal, w_lovasz, w_scal, w_feat, w_depth}},
            {"gamma", gamma},
            {"alpha_b", alpha_b},
            {"huber_delta", huber_delta},
            {"intensity", intensity},
            {"threshold", threshold},
            {"freeze_opacity", freeze_opacity}};
  }
};

json metrics_json(const Metrics& m, const EmbeddingTable& table) {
  json per = json::object();
  for (std::size_t k = 0; k < m.per_class.size(); ++k) {
    const std::string name = k < table.names.size() ? table.names[k] : std::to_string(k);
    per[name] = m.per_class[k] ? json(*m.per_class[k]) : json(nullptr);
  }
  return {{"iou", m.iou}, {"miou", m.miou}, {"per_class", per}};
}

std::function<void(const IterationRecord&)> progress_printer(int iters, bool quiet) {
  if (quiet) return {};
  return [iters](const IterationRecord& r) {
    if (r.iteration % 50 == 0 || r.iteration == iters - 1) {
      std::cerr << "iter " << r.iteration << " tau " << r.tau << " loss " << r.total << " iou " << r.iou << "\n";
    }
  };
}

std::vector<std::uint8_t> to_gray(const Eigen::ArrayXd& v, double lo, double hi) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(v.size()));
  const double span = hi > lo ? hi - lo : 1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double t = std::isfinite(v[i]) ? std::clamp((v[i] - lo) / span, 0.0, 1.0) : 0.0;
    out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(255.0 * t));
  }
  return out;
}

// A grid spec comes from a scene directory, a grid JSON, or a scene spec JSON.
GridSpec load_grid_spec(const fs::path& path) {
  if (fs::is_directory(path)) return io::load_scene(path).occupancy.spec;
  const json j = io::read_json(path);
  if (j.contains("grid")) return quantize_to_file_precision(io::grid_spec_from_json(j.at("grid")));
  return io::grid_spec_from_json(j);
}

int cmd_gen(const std::string& preset_name, const std::string& spec_file, std::optional<std::uint64_t> seed,
            const fs::path& out) {
  if (preset_name.empty() == spec_file.empty()) throw UsageError("gen needs exactly one of --preset or --spec");
  SceneSpec spec;
  if (!preset_name.empty()) {
    try {
      spec = preset(preset_name);
    } catch (const LookupError& e) {
      throw UsageError(e.what());
    }
  } else {
    spec = io::load_scene_spec(spec_file);
  }
  if (seed) spec.seed = *seed;
  print_config("gen", {{"preset", preset_name}, {"spec", spec_file}, {"seed", spec.seed}, {"out", out.string()}});
  const SceneBundle bundle = gen_scene(spec);
  io::save_scene(out, bundle, &spec);
  std::cerr << "wrote " << out.string() << " (" << bundle.occupied_count() << " occupied voxels, "
            << bundle.cameras.size() << " views)\n";
  return 0;
}

int cmd_fit(const fs::path& scene_dir, const FitFlags& flags, const fs::path& out) {
  json cfg = flags.to_json();
  cfg["scene"] = scene_dir.string();
  cfg["out"] = out.string();
  cfg["threads"] = num_threads();
  print_config("fit", cfg);
  const SceneBundle scene = io::load_scene(scene_dir);
  FitConfig config = flags.config();
  config.progress = progress_printer(config.iterations, flags.quiet);
  const FitReport report = fit(scene, config);

  fs::create_directories(out);
  io::write_text(out / "report.csv", report_csv(report.records));
  io::save_gaussians(out / "gaussians.lgoc", report.gaussians);
  json summary = {{"config", flags.to_json()},
                  {"tau_test", report.final_eval.tau},
                  {"final", metrics_json(report.final_eval.metrics, scene.table)},
                  {"iterations", report.records.size()}};
  io::write_text(out / "summary.json", summary.dump(2) + "\n");
  std::cerr << "final iou " << report.final_eval.metrics.iou << " miou " << report.final_eval.metrics.miou << "\n";
  return 0;
}

int cmd_eval(const fs::path& gaussians_file, const fs::path& scene_dir, double tau, double threshold,
             const std::string& mode, double intensity) {
  print_config("eval", {{"gaussians", gaussians_file.string()},
                        {"scene", scene_dir.string()},
                        {"tau", tau},
                        {"threshold", threshold},
                        {"mode", mode},
                        {"intensity", intensity}});
  const auto gs = io::load_gaussians(gaussians_file);
  const SceneBundle scene = io::load_scene(scene_dir);
  VoxelizeOptions opts;
  opts.intensity_scale = intensity;
  const Evaluation ev = evaluate(gs, scene, parse_aggregation_mode(mode), tau, threshold, opts);
  json out = metrics_json(ev.metrics, scene.table);
  out["tau"] = ev.tau;
  out["gaussians"] = gs.size();
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_render(const fs::path& gaussians_file, const fs::path& camera_file, double tau, const fs::path& out) {
  print_config("render", {{"gaussians", gaussians_file.string()},
                          {"camera", camera_file.string()},
                          {"tau", tau},
                          {"out", out.string()}});
  const auto gs = io::load_gaussians(gaussians_file);
  const Camera cam = io::load_camera(camera_file);
  const FeatureImage img = render_features(gs, cam, Temperature(tau));
  fs::create_directories(out);
  io::save_feature_image(out / "render.fimg", img);
  io::write_png(out / "alpha.png", img.width, img.height, 1, to_gray(img.alpha, 0.0, 1.0));
  const double dmax = img.depth.size() ? img.depth.maxCoeff() : 1.0;
  io::write_png(out / "depth.png", img.width, img.height, 1, to_gray(img.depth, 0.0, dmax));
  if (img.d >= 1) {
    // First three embedding channels mapped from [-1, 1] to RGB.
    std::vector<std::uint8_t> rgb(img.pixel_count() * 3, 0);
    for (std::size_t p = 0; p < img.pixel_count(); ++p) {
      for (int c = 0; c < std::min(img.d, 3); ++c) {
        const double v = std::clamp(0.5 * (img.feature(static_cast<Eigen::Index>(p), c) + 1.0), 0.0, 1.0);
        rgb[p * 3 + c] = static_cast<std::uint8_t>(std::lround(255.0 * v));
      }
    }
    io::write_png(out / "feature.png", img.width, img.height, 3, rgb);
  }
  return 0;
}

int cmd_query(const fs::path& gaussians_file, const fs::path& grid_source, const fs::path& table_file,
              const std::string& name, double tau, const fs::path& out) {
  print_config("query", {{"gaussians", gaussians_file.string()},
                         {"scene", grid_source.string()},
                         {"table", table_file.string()},
                         {"name", name},
                         {"tau", tau},
                         {"out", out.string()}});
  const auto gs = io::load_gaussians(gaussians_file);
  const GridSpec spec = load_grid_spec(grid_source);
  const EmbeddingTable table = io::load_table(table_file);
  const Eigen::VectorXd prompt = table.vectors.row(static_cast<Eigen::Index>(table.index_of(name))).transpose();

  OccupancyGrid scores = OccupancyGrid::zeros(spec);
  scores.values.setConstant(-std::numeric_limits<double>::infinity());
  if (!gs.empty()) {
    if (common_dim(gs) != table.dim()) throw ShapeMismatch("Gaussian and table embedding dimensions differ");
    scores = query_scores(voxel_embeddings(gs, spec, Temperature(tau)), prompt);
  }

  fs::create_directories(out);
  io::GridFile f;
  f.spec = spec;
  f.tag = io::PayloadTag::F32Scalars;
  f.f32.assign(scores.values.data(), scores.values.data() + scores.values.size());
  io::save_grid(out / "scores.voxg", f);

  // Top-down view: maximum score over z for every (x, y) column.
  const int X = spec.dims[0], Y = spec.dims[1], Z = spec.dims[2];
  Eigen::ArrayXd top = Eigen::ArrayXd::Constant(static_cast<Eigen::Index>(X) * Y,
                                                -std::numeric_limits<double>::infinity());
  for (int x = 0; x < X; ++x)
    for (int y = 0; y < Y; ++y)
      for (int z = 0; z < Z; ++z) {
        auto& t = top[static_cast<Eigen::Index>(y) * X + x];
        t = std::max(t, scores.values[static_cast<Eigen::Index>(spec.index(x, y, z))]);
      }
  io::write_png(out / "heatmap.png", X, Y, 3, io::heatmap_rgb(top, 0.0, 1.0));

  double best = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < scores.values.size(); ++i) best = std::max(best, scores.values[i]);
  std::size_t at_best = 0;
  if (std::isfinite(best)) at_best = static_cast<std::size_t>((scores.values == best).count());
  std::cout << json({{"name", name},
                     {"max_score", std::isfinite(best) ? json(best) : json(nullptr)},
                     {"max_voxels", at_best},
                     {"scored_voxels", static_cast<std::size_t>(scores.values.isFinite().count())}})
                   .dump(2)
            << "\n";
  return 0;
}

int cmd_ablate(const fs::path& scene_dir, const fs::path& matrix_file, const FitFlags& base, const fs::path& out) {
  const json m = io::read_json(matrix_file);
  const auto list = [&](const char* key) {
    std::vector<std::string> v;
    if (m.contains(key)) {
      for (const auto& e : m.at(key)) v.push_back(e.get<std::string>());
    }
    return v;
  };
  const std::vector<std::string> modes = list("modes");
  std::vector<std::string> schedules = list("schedules");
  if (modes.empty()) throw UsageError("ablation matrix must list at least one mode");
  if (schedules.empty()) {
    if (m.contains("schedules")) throw UsageError("ablation matrix lists no schedules");
    schedules.push_back(base.schedule);
  }
  FitFlags flags = base;
  flags.tmin = m.value("tmin", flags.tmin);
  flags.tmax = m.value("tmax", flags.tmax);
  flags.iters = m.value("iters", flags.iters);
  flags.n_gaussians = m.value("n_gaussians", flags.n_gaussians);
  flags.seed = m.value("seed", flags.seed);
  json cfg = flags.to_json();
  cfg["modes"] = modes;
  cfg["schedules"] = schedules;
  cfg["scene"] = scene_dir.string();
  cfg["out"] = out.string();
  print_config("ablate", cfg);
  const SceneBundle scene = io::load_scene(scene_dir);

  std::ostringstream csv;
  csv.precision(17);
  csv << "mode,schedule,t_min,t_max,tau_test,iterations,n_gaussians,seed,freeze_opacity,iou,miou\n";
  for (const auto& mode : modes) {
    for (const auto& sched : schedules) {
      FitFlags f = flags;
      f.mode = mode;
      f.schedule = sched;
      f.freeze_opacity = parse_aggregation_mode(mode) == AggregationMode::GF2;
      // Constant rows hold the final temperature throughout.
      if (parse_schedule_mode(sched) == ScheduleMode::Constant) f.tmax = f.tmin;
      FitConfig c = f.config();
      c.progress = progress_printer(c.iterations, f.quiet);
      std::cerr << "ablate: mode " << mode << " schedule " << sched << "\n";
      const FitReport r = fit(scene, c);
      csv << mode << ',' << sched << ',' << c.schedule.t_min << ',' << c.schedule.t_max << ','
          << c.schedule.test_tau() << ',' << c.iterations << ',' << c.num_gaussians << ',' << c.seed << ','
          << (c.freeze_opacity ? 1 : 0) << ',' << r.final_eval.metrics.iou << ',' << r.final_eval.metrics.miou
          << '\n';
    }
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  io::write_text(out, csv.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Language-embedded Gaussian occupancy toolkit"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: GSOCC_THREADS or hardware count)")
      ->check(CLI::NonNegativeNumber);

  auto* gen = app.add_subcommand("gen", "Generate a synthetic scene bundle");
  std::string preset_name, spec_file;
  std::optional<std::uint64_t> gen_seed;
  fs::path gen_out;
  gen->add_option("--preset", preset_name, "Preset name (box, three, room)");
  gen->add_option("--spec", spec_file, "Scene spec JSON")->check(CLI::ExistingFile);
  gen->add_option("--seed", gen_seed, "Override the spec seed");
  gen->add_option("--out", gen_out, "Output directory")->required();

  auto* fitc = app.add_subcommand("fit", "Fit Gaussians to a scene");
  fs::path fit_scene, fit_out;
  FitFlags fit_flags;
  fitc->add_option("--scene", fit_scene, "Scene directory")->required()->check(CLI::ExistingDirectory);
  fitc->add_option("--out", fit_out, "Output directory")->required();
  fit_flags.add_to(fitc, true);

  auto* evalc = app.add_subcommand("eval", "Evaluate a Gaussian file against a scene");
  fs::path eval_g, eval_scene;
  double eval_tau = 1e-3, eval_threshold = kDefaultOccupancyThreshold, eval_intensity = 1.0;
  std::string eval_mode = "poisson";
  evalc->add_option("--gaussians", eval_g)->required()->check(CLI::ExistingFile);
  evalc->add_option("--scene", eval_scene)->required()->check(CLI::ExistingDirectory);
  evalc->add_option("--tau", eval_tau, "Evaluation temperature");
  evalc->add_option("--threshold", eval_threshold);
  evalc->add_option("--mode", eval_mode)->check(CLI::IsMember({"gf2", "bernoulli", "poisson"}));
  evalc->add_option("--intensity", eval_intensity, "Poisson intensity multiplier");

  auto* renderc = app.add_subcommand("render", "Render feature, alpha and depth images");
  fs::path render_g, render_cam, render_out;
  double render_tau = 1e-3;
  renderc->add_option("--gaussians", render_g)->required()->check(CLI::ExistingFile);
  renderc->add_option("--camera", render_cam)->required()->check(CLI::ExistingFile);
  renderc->add_option("--tau", render_tau);
  renderc->add_option("--out", render_out)->required();

  auto* queryc = app.add_subcommand("query", "Score voxels against a named category");
  fs::path query_g, query_scene, query_table, query_out;
  std::string query_name;
  double query_tau = 1e-3;
  queryc->add_option("--gaussians", query_g)->required()->check(CLI::ExistingFile);
  queryc->add_option("--scene", query_scene, "Scene directory or grid spec JSON")->required()->check(CLI::ExistingPath);
  queryc->add_option("--table", query_table)->required()->check(CLI::ExistingFile);
  queryc->add_option("--name", query_name)->required();
  queryc->add_option("--tau", query_tau);
  queryc->add_option("--out", query_out)->required();

  auto* ablatec = app.add_subcommand("ablate", "Run a mode x schedule sweep");
  fs::path ablate_scene, ablate_matrix, ablate_out;
  FitFlags ablate_flags;
  ablatec->add_option("--scene", ablate_scene)->required()->check(CLI::ExistingDirectory);
  ablatec->add_option("--matrix", ablate_matrix, "Matrix JSON {modes, schedules, ...}")
      ->required()
      ->check(CLI::ExistingFile);
  ablatec->add_option("--out", ablate_out, "Output CSV")->required();
  ablate_flags.add_to(ablatec, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (threads > 0) set_num_threads(threads);
    if (*gen) return cmd_gen(preset_name, spec_file, gen_seed, gen_out);
    if (*fitc) return cmd_fit(fit_scene, fit_flags, fit_out);
    if (*evalc) return cmd_eval(eval_g, eval_scene, eval_tau, eval_threshold, eval_mode, eval_intensity);
    if (*renderc) return cmd_render(render_g, render_cam, render_tau, render_out);
    if (*queryc) return cmd_query(query_g, query_scene, query_table, query_name, query_tau, query_out);
    if (*ablatec) return cmd_ablate(ablate_scene, ablate_matrix, ablate_flags, ablate_out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
