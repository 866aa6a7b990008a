#include "gsocc/trainer.hpp"

#include <cmath>
#include <iostream>
#include <random>
#include <sstream>

namespace gsocc {

std::string to_string(ScheduleMode mode) {
  switch (mode) {
    case ScheduleMode::Exponential: return "exp";
    case ScheduleMode::Linear: return "linear";
    case ScheduleMode::Constant: return "const";
  }
  return "?";
}

ScheduleMode parse_schedule_mode(const std::string& name) {
  if (name == "exp" || name == "exponential") return ScheduleMode::Exponential;
  if (name == "linear") return ScheduleMode::Linear;
  if (name == "const" || name == "constant") return ScheduleMode::Constant;
  throw InvalidParameter("unknown schedule '" + name + "' (expected exp|linear|const)");
}

void TemperatureSchedule::validate() const {
  if (!(std::isfinite(t_min) && t_min > 0.0) || !(std::isfinite(t_max) && t_max > 0.0)) {
    throw InvalidParameter("temperatures must be finite and positive");
  }
  if (t_min > t_max) throw InvalidParameter("t_min must not exceed t_max");
  if (tau_test && !(std::isfinite(*tau_test) && *tau_test > 0.0)) {
    throw InvalidParameter("tau_test must be finite and positive");
  }
}

double temperature_at(double r, const TemperatureSchedule& s) {
  s.validate();
  if (!(r >= 0.0 && r <= 1.0)) {
    const double c = std::isnan(r) ? 0.0 : std::clamp(r, 0.0, 1.0);
    std::cerr << "warning: training progress " << r << " clamped to " << c << "\n";
    r = c;
  }
  switch (s.mode) {
    case ScheduleMode::Exponential:
      if (r == 0.0) return s.t_max;
      if (r == 1.0) return s.t_min;
      return std::max(s.t_min, s.t_max * std::pow(s.t_min / s.t_max, r));
    case ScheduleMode::Linear:
      return r == 1.0 ? s.t_min : s.t_max + r * (s.t_min - s.t_max);
    case ScheduleMode::Constant:
      return s.t_max;
  }
  return s.t_max;
}

void FitConfig::validate() const {
  if (num_gaussians < 1) throw InvalidParameter("num_gaussians must be at least 1");
  if (iterations < 1) throw InvalidParameter("iterations must be at least 1");
  if (!(std::isfinite(step_size) && step_size > 0.0)) throw InvalidParameter("step_size must be positive");
  for (double v : {lr.mean, lr.rotation, lr.log_scale, lr.opacity, lr.embedding}) {
    if (!(std::isfinite(v) && v >= 0.0)) throw InvalidParameter("learning rates must be finite and non-negative");
  }
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) || !(adam.eps > 0.0)) {
    throw InvalidParameter("invalid Adam parameters");
  }
  if (!(huber_delta > 0.0)) throw InvalidParameter("huber_delta must be positive");
  weights.validate();
  schedule.validate();
}

std::vector<Gaussian> init_gaussians(const SceneBundle& target, int n, int embedding_dim, std::uint64_t seed) {
  if (n < 1) throw InvalidParameter("init_gaussians: n must be at least 1");
  if (embedding_dim < 1) throw InvalidParameter("init_gaussians: embedding_dim must be at least 1");
  const GridSpec& spec = target.occupancy.spec;
  std::vector<std::size_t> occupied;
  for (Eigen::Index i = 0; i < target.occupancy.values.size(); ++i) {
    if (target.occupancy.values[i] > 0.5) occupied.push_back(static_cast<std::size_t>(i));
  }
  if (occupied.empty()) throw InvalidParameter("init_gaussians: target has no occupied voxel");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, occupied.size() - 1);
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Gaussian> out(static_cast<std::size_t>(n));
  for (auto& g : out) {
    const Eigen::Vector3d c = spec.center(occupied[pick(rng)]);
    for (int a = 0; a < 3; ++a) g.mean[a] = c[a] + spec.voxel_size * jitter(rng);
    g.rotation = Eigen::Quaterniond::Identity();
    g.log_scale = Eigen::Vector3d::Constant(std::log(spec.voxel_size));
    g.opacity_logit = 0.0;
    g.embedding.resize(embedding_dim);
    do {
      for (int k = 0; k < embedding_dim; ++k) g.embedding[k] = normal(rng);
    } while (g.embedding.norm() < 1e-12);
    g.embedding.normalize();
  }
  return out;
}

namespace {

double occupancy_iou(const Eigen::ArrayXd& pred, const Eigen::ArrayXd& target, double threshold) {
  std::size_t inter = 0, uni = 0;
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= threshold, t = target[i] > 0.5;
    inter += p && t;
    uni += p || t;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

Eigen::VectorXd learning_rate_vector(const FitConfig& c, std::size_t n, int d) {
  const int stride = kGeometryParams + d;
  Eigen::VectorXd lr(static_cast<Eigen::Index>(n) * stride);
  for (std::size_t i = 0; i < n; ++i) {
    auto s = lr.segment(static_cast<Eigen::Index>(i) * stride, stride);
    s.segment<3>(0).setConstant(c.lr.mean);
    s.segment<4>(3).setConstant(c.lr.rotation);
    s.segment<3>(7).setConstant(c.lr.log_scale);
    s[10] = c.freeze_opacity ? 0.0 : c.lr.opacity;
    s.tail(d).setConstant(c.lr.embedding);
  }
  return lr * c.step_size;
}

}  // namespace

FitReport fit(const SceneBundle& scene, const FitConfig& config) {
  config.validate();
  scene.validate();
  std::vector<std::size_t> views = config.views;
  if (views.empty()) {
    for (std::size_t v = 0; v < scene.cameras.size(); ++v) views.push_back(v);
  }
  if (views.empty()) throw InvalidParameter("fit: scene has no camera views");
  for (std::size_t v : views) {
    if (v >= scene.cameras.size()) throw InvalidParameter("fit: view index out of range");
  }

  const GridSpec& spec = scene.occupancy.spec;
  const BinaryTarget target = scene.target();
  const int d = scene.table.dim();
  std::vector<Gaussian> gs = init_gaussians(scene, config.num_gaussians, d, config.seed);
  const std::size_t n = gs.size();

  const Eigen::VectorXd lr = learning_rate_vector(config, n, d);
  Eigen::VectorXd m = Eigen::VectorXd::Zero(lr.size()), v2 = Eigen::VectorXd::Zero(lr.size());
  double b1t = 1.0, b2t = 1.0;
  const double inv_views = 1.0 / static_cast<double>(views.size());

  FitReport report;
  report.records.reserve(static_cast<std::size_t>(config.iterations));
  for (int it = 0; it < config.iterations; ++it) {
    const double r = config.iterations == 1 ? 0.0 : static_cast<double>(it) / (config.iterations - 1);
    const double tau_value = temperature_at(r, config.schedule);
    const Temperature tau(tau_value);

    const OccupancyGrid occ = voxelize(gs, spec, config.mode, tau, config.voxelize);
    LossParts parts;
    parts.focal = focal_loss(occ.values, target, config.focal);
    parts.lovasz = lovasz_loss(occ.values, target);
    parts.scal = scal_loss(occ.values, target);
    for (std::size_t v : views) {
      const Camera& cam = scene.cameras[v];
      const FeatureImage& teacher = scene.teachers[v];
      const FeatureImage img = render_features(gs, cam, tau, config.render);
      const Eigen::ArrayXd mask = ((teacher.alpha > 0.5) && (img.alpha > 0.5)).cast<double>();
      FeatureLossValue fl = cosine_feature_loss(img.feature, teacher.feature, mask);
      LossValue dl = huber_depth_loss(img.depth, teacher.depth, mask, config.huber_delta);
      parts.feat += inv_views * fl.value;
      parts.feat_grads.push_back(inv_views * fl.grad);
      parts.depth += inv_views * dl.value;
      parts.depth_grads.push_back(inv_views * dl.grad);
    }
    const TotalLoss total = total_loss(parts, config.weights);

    IterationRecord rec;
    rec.iteration = it;
    rec.r = r;
    rec.tau = tau_value;
    rec.focal = parts.focal.value;
    rec.lovasz = parts.lovasz.value;
    rec.scal = parts.scal.value;
    rec.feat = parts.feat;
    rec.depth = parts.depth;
    rec.total = total.value;
    rec.iou = occupancy_iou(occ.values, target, config.threshold);
    for (const auto& g : gs) rec.mean_opacity += tempered_opacity(g.opacity_logit, tau) / static_cast<double>(n);
    if (!std::isfinite(total.value)) {
      throw DivergenceError("loss became non-finite at iteration " + std::to_string(it) +
                            " (tau=" + std::to_string(tau_value) + ")");
    }

    GradList grads = g2o_backward(gs, spec, config.mode, tau, total.occupancy_grad, config.voxelize);
    for (std::size_t k = 0; k < views.size(); ++k) {
      const Camera& cam = scene.cameras[views[k]];
      RenderUpstream up = RenderUpstream::zeros(cam.width, cam.height, d);
      up.feature = total.feature_grads[k];
      up.depth = total.depth_grads[k];
      const GradList rg = render_backward(gs, cam, tau, up, config.render);
      for (std::size_t i = 0; i < n; ++i) grads[i] += rg[i];
    }

    Eigen::VectorXd g = pack_gradients<double>(grads);
    if (config.freeze_opacity) {
      for (std::size_t i = 0; i < n; ++i) g[static_cast<Eigen::Index>(i) * (kGeometryParams + d) + 10] = 0.0;
    }
    if (!g.allFinite()) {
      throw DivergenceError("gradient became non-finite at iteration " + std::to_string(it));
    }
    const double gn = g.norm();
    if (config.adam.clip_norm > 0.0 && gn > config.adam.clip_norm) g *= config.adam.clip_norm / gn;

    const auto& a = config.adam;
    b1t *= a.beta1;
    b2t *= a.beta2;
    m = a.beta1 * m + (1.0 - a.beta1) * g;
    v2 = a.beta2 * v2 + (1.0 - a.beta2) * g.cwiseAbs2();
    const Eigen::VectorXd mhat = m / (1.0 - b1t);
    const Eigen::VectorXd vhat = v2 / (1.0 - b2t);
    Eigen::VectorXd params = pack_parameters<double>(gs);
    params.array() -= lr.array() * mhat.array() / (vhat.array().sqrt() + a.eps);
    unpack_parameters<double>(params, gs);
    for (auto& gg : gs) gg.sanitize();

    report.records.push_back(rec);
    if (config.progress) config.progress(rec);
  }

  report.final_eval = evaluate(gs, scene, config.mode, config.schedule.test_tau(), config.threshold, config.voxelize);
  report.gaussians = std::move(gs);
  return report;
}

std::vector<Gaussian> gaussians_from_ground_truth(const SceneBundle& scene) {
  const GridSpec& spec = scene.semantics.spec;
  std::vector<Gaussian> out;
  for (std::size_t c = 0; c < scene.semantics.labels.size(); ++c) {
    const std::uint16_t label = scene.semantics.labels[c];
    if (label == kEmptyLabel) continue;
    if (label >= scene.table.size()) throw InvalidParameter("ground-truth label outside the embedding table");
    Gaussian g;
    g.mean = spec.center(c);
    g.rotation = Eigen::Quaterniond::Identity();
    g.log_scale = Eigen::Vector3d::Constant(std::log(0.3 * spec.voxel_size));
    g.opacity_logit = 5.0;
    g.embedding = scene.table.vectors.row(label).transpose();
    out.push_back(std::move(g));
  }
  return out;
}

Evaluation evaluate(std::span<const Gaussian> gaussians, const SceneBundle& scene, AggregationMode mode, double tau,
                    double threshold, const VoxelizeOptions& opts) {
  const GridSpec& spec = scene.occupancy.spec;
  const Temperature t(tau);
  Evaluation ev;
  ev.tau = t.value();
  ev.occupancy = voxelize(gaussians, spec, mode, t, opts);
  if (gaussians.empty()) {
    ev.labels = SemanticGrid::empty(spec);
  } else {
    if (common_dim(gaussians) != scene.table.dim()) {
      throw ShapeMismatch("Gaussian embedding dimension " + std::to_string(common_dim(gaussians)) +
                          " does not match the scene table dimension " + std::to_string(scene.table.dim()));
    }
    const VoxelEmbeddings emb = voxel_embeddings(gaussians, spec, t, opts.kernel);
    ev.labels = assign_labels(emb, ev.occupancy, scene.table, threshold);
  }
  ev.metrics = compute_metrics(ev.labels, ev.occupancy, scene.semantics, scene.table.size(), threshold);
  return ev;
}

std::string report_csv(const std::vector<IterationRecord>& records) {
  std::ostringstream os;
  os.precision(17);
  os << "iteration,r,tau,focal,lovasz,scal,feat,depth,total,iou,mean_opacity\n";
  for (const auto& r : records) {
    os << r.iteration << ',' << r.r << ',' << r.tau << ',' << r.focal << ',' << r.lovasz << ',' << r.scal << ','
       << r.feat << ',' << r.depth << ',' << r.total << ',' << r.iou << ',' << r.mean_opacity << '\n';
  }
  return os.str();
}

}  // namespace gsocc
