#include "gsocc/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <Eigen/QR>

#include "gsocc/parallel.hpp"

namespace gsocc {

bool Primitive::contains(const Eigen::Vector3d& x) const {
  const Eigen::Vector3d local = rotation.normalized().toRotationMatrix().transpose() * (x - center);
  switch (kind) {
    case Kind::Box:
      return (local.array().abs() <= 0.5 * size.array()).all();
    case Kind::Sphere:
      return local.norm() <= size.x();
    case Kind::Plane:
      return std::abs(local.z()) <= 0.5 * size.z();
  }
  return false;
}

Eigen::AlignedBox3d Primitive::bounds() const {
  Eigen::AlignedBox3d box(center, center);
  if (kind == Kind::Sphere) {
    box.extend(center + Eigen::Vector3d::Constant(size.x()));
    box.extend(center - Eigen::Vector3d::Constant(size.x()));
  } else if (kind == Kind::Box) {
    const Eigen::Matrix3d R = rotation.normalized().toRotationMatrix();
    for (int sx : {-1, 1})
      for (int sy : {-1, 1})
        for (int sz : {-1, 1}) box.extend(center + R * (0.5 * size.cwiseProduct(Eigen::Vector3d(sx, sy, sz))));
  }
  return box;
}

std::string to_string(Primitive::Kind kind) {
  switch (kind) {
    case Primitive::Kind::Box:
      return "box";
    case Primitive::Kind::Sphere:
      return "sphere";
    case Primitive::Kind::Plane:
      return "plane";
  }
  return "?";
}

Primitive::Kind parse_primitive_kind(const std::string& name) {
  if (name == "box") return Primitive::Kind::Box;
  if (name == "sphere") return Primitive::Kind::Sphere;
  if (name == "plane") return Primitive::Kind::Plane;
  throw InvalidParameter("unknown primitive kind '" + name + "' (expected box|sphere|plane)");
}

void SceneSpec::validate() const {
  grid.validate();
  if (embedding_dim < 2) throw InvalidParameter("embedding dimension must be >= 2");
  const Eigen::AlignedBox3d extent(grid.origin, grid.origin + grid.extent());
  for (const auto& p : primitives) {
    if (p.category.empty()) throw InvalidParameter("primitive has an empty category name");
    const auto b = p.bounds();
    const double tol = 1e-9;
    if ((b.min().array() < extent.min().array() - tol).any() || (b.max().array() > extent.max().array() + tol).any()) {
      throw InvalidParameter("primitive '" + p.category + "' does not fit inside the grid extent");
    }
  }
  if (categories().size() > static_cast<std::size_t>(embedding_dim)) {
    throw InvalidParameter("scene has " + std::to_string(categories().size()) +
                           " categories, more than the embedding dimension " + std::to_string(embedding_dim));
  }
  if (cameras.count < 0 || cameras.width < 1 || cameras.height < 1) throw InvalidParameter("invalid camera rig");
}

std::vector<std::string> SceneSpec::categories() const {
  std::vector<std::string> names;
  for (const auto& p : primitives) {
    if (std::find(names.begin(), names.end(), p.category) == names.end()) names.push_back(p.category);
  }
  return names;
}

void SceneBundle::validate() const {
  const GridSpec& spec = occupancy.spec;
  if (!(semantics.spec == spec)) throw InvalidParameter("scene grids do not share one spec");
  if (static_cast<std::size_t>(occupancy.values.size()) != spec.cell_count() ||
      semantics.labels.size() != spec.cell_count()) {
    throw InvalidParameter("scene grid payload length does not match its spec");
  }
  for (auto l : semantics.labels) {
    if (l != kEmptyLabel && l >= table.size()) throw InvalidParameter("semantic label references a missing category");
  }
  if (cameras.size() != teachers.size()) throw InvalidParameter("every camera needs one teacher image");
  for (std::size_t i = 0; i < cameras.size(); ++i) {
    if (teachers[i].width != cameras[i].width || teachers[i].height != cameras[i].height) {
      throw InvalidParameter("teacher image " + std::to_string(i) + " does not match its camera resolution");
    }
    if (teachers[i].d != table.dim()) throw InvalidParameter("teacher image dimension does not match the table");
  }
}

std::size_t SceneBundle::occupied_count() const {
  return static_cast<std::size_t>((occupancy.values > 0.5).count());
}

GridSpec quantize_to_file_precision(const GridSpec& spec) {
  GridSpec q = spec;
  q.voxel_size = round_to_float(spec.voxel_size);
  for (int a = 0; a < 3; ++a) q.origin[a] = round_to_float(spec.origin[a]);
  return q;
}

std::vector<Camera> ring_cameras(const GridSpec& grid, const CameraRig& rig) {
  const Eigen::Vector3d center = grid.origin + 0.5 * grid.extent();
  double radius = rig.radius;
  if (!(radius > 0.0)) {
    const double bound = 0.5 * grid.extent().norm();
    radius = 1.05 * bound / std::sin(0.5 * rig.fov_deg * M_PI / 180.0);
  }
  const double phi = rig.elevation_deg * M_PI / 180.0;
  std::vector<Camera> cams;
  for (int i = 0; i < rig.count; ++i) {
    const double theta = 2.0 * M_PI * i / rig.count;
    const Eigen::Vector3d eye =
        center + radius * Eigen::Vector3d(std::cos(theta) * std::cos(phi), std::sin(theta) * std::cos(phi), std::sin(phi));
    cams.push_back(Camera::look_at(eye, center, Eigen::Vector3d::UnitZ(), rig.fov_deg, rig.width, rig.height));
  }
  return cams;
}

std::optional<RayHit> raycast_first_occupied(const SemanticGrid& grid, const Eigen::Vector3d& origin,
                                             const Eigen::Vector3d& dir) {
  const GridSpec& spec = grid.spec;
  const Eigen::Vector3d lo = spec.origin, hi = spec.origin + spec.extent();
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (dir[a] == 0.0) {
      if (origin[a] < lo[a] || origin[a] > hi[a]) return std::nullopt;
      continue;
    }
    double ta = (lo[a] - origin[a]) / dir[a];
    double tb = (hi[a] - origin[a]) / dir[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 > t1) return std::nullopt;

  const Eigen::Vector3d entry = origin + t0 * dir;
  std::array<int, 3> idx, step;
  Eigen::Vector3d t_max, t_delta;
  for (int a = 0; a < 3; ++a) {
    const double rel = (entry[a] - spec.origin[a]) / spec.voxel_size;
    idx[a] = std::clamp(static_cast<int>(std::floor(rel)), 0, spec.dims[a] - 1);
    if (dir[a] > 0.0) {
      step[a] = 1;
      t_max[a] = (spec.origin[a] + (idx[a] + 1) * spec.voxel_size - origin[a]) / dir[a];
      t_delta[a] = spec.voxel_size / dir[a];
    } else if (dir[a] < 0.0) {
      step[a] = -1;
      t_max[a] = (spec.origin[a] + idx[a] * spec.voxel_size - origin[a]) / dir[a];
      t_delta[a] = -spec.voxel_size / dir[a];
    } else {
      step[a] = 0;
      t_max[a] = std::numeric_limits<double>::infinity();
      t_delta[a] = std::numeric_limits<double>::infinity();
    }
  }
  double t_enter = t0;
  while (true) {
    const std::size_t v = spec.index(idx[0], idx[1], idx[2]);
    if (grid.labels[v] != kEmptyLabel) return RayHit{v, t_enter};
    int axis = 0;
    if (t_max[1] < t_max[axis]) axis = 1;
    if (t_max[2] < t_max[axis]) axis = 2;
    if (t_max[axis] > t1) return std::nullopt;
    t_enter = t_max[axis];
    idx[axis] += step[axis];
    if (idx[axis] < 0 || idx[axis] >= spec.dims[axis]) return std::nullopt;
    t_max[axis] += t_delta[axis];
  }
}

FeatureImage paint_teacher(const SemanticGrid& semantics, const EmbeddingTable& table, const Camera& cam) {
  FeatureImage img = FeatureImage::zeros(cam.width, cam.height, table.dim());
  const Eigen::Vector3d eye = cam.center();
  const Eigen::Matrix3d R = cam.rotation();
  const Eigen::Vector3d t = cam.translation();
  parallel_for(cam.pixel_count(), [&](int, std::size_t begin, std::size_t end) {
    for (std::size_t pix = begin; pix < end; ++pix) {
      const double u = static_cast<double>(pix % cam.width) + 0.5;
      const double v = static_cast<double>(pix / cam.width) + 0.5;
      const auto hit = raycast_first_occupied(semantics, eye, cam.ray_direction(u, v));
      if (!hit) continue;
      const auto P = static_cast<Eigen::Index>(pix);
      img.feature.row(P) = table.vectors.row(semantics.labels[hit->voxel]);
      img.alpha[P] = 1.0;
      const double depth = (R * semantics.spec.center(hit->voxel) + t).z();
      img.depth[P] = round_to_float(depth);
    }
  });
  return img;
}

namespace {

RowMatrixXd random_orthonormal_rows(int count, int d, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd A(d, d);
  for (int j = 0; j < d; ++j)
    for (int i = 0; i < d; ++i) A(i, j) = normal(rng);
  const Eigen::MatrixXd Q = Eigen::HouseholderQR<Eigen::MatrixXd>(A).householderQ();
  RowMatrixXd rows = Q.leftCols(count).transpose();
  // File precision; rows stay unit norm to ~1e-7.
  return rows.unaryExpr([](double v) { return round_to_float(v); });
}

}  // namespace

SceneBundle gen_scene(const SceneSpec& input) {
  input.validate();
  SceneSpec spec = input;
  spec.grid = quantize_to_file_precision(input.grid);
  std::mt19937_64 rng(spec.seed);

  SceneBundle b;
  const auto names = spec.categories();
  b.table.names = names;
  b.table.vectors = random_orthonormal_rows(static_cast<int>(names.size()), spec.embedding_dim, rng);

  b.semantics = SemanticGrid::empty(spec.grid);
  b.occupancy = OccupancyGrid::zeros(spec.grid);
  for (std::size_t c = 0; c < spec.grid.cell_count(); ++c) {
    const Eigen::Vector3d x = spec.grid.center(c);
    // Later primitives overwrite earlier ones.
    for (const auto& p : spec.primitives) {
      if (p.contains(x)) {
        const auto label = std::find(names.begin(), names.end(), p.category) - names.begin();
        b.semantics.labels[c] = static_cast<std::uint16_t>(label);
      }
    }
    if (b.semantics.labels[c] != kEmptyLabel) b.occupancy.values[static_cast<Eigen::Index>(c)] = 1.0;
  }

  b.cameras = ring_cameras(spec.grid, spec.cameras);
  for (const auto& cam : b.cameras) b.teachers.push_back(paint_teacher(b.semantics, b.table, cam));
  return b;
}

std::vector<std::string> preset_names() { return {"box", "three", "room"}; }

SceneSpec preset(const std::string& name) {
  SceneSpec s;
  s.seed = 7;
  if (name == "box") {
    s.grid.dims = {8, 8, 8};
    s.grid.voxel_size = 0.25;
    s.grid.origin = Eigen::Vector3d(-1.0, -1.0, -1.0);
    s.primitives.push_back({Primitive::Kind::Box, Eigen::Vector3d::Zero(), Eigen::Quaterniond::Identity(),
                            Eigen::Vector3d::Ones(), "box"});
    s.cameras = {5, 3.0, 30.0, 50.0, 48, 48};
    s.embedding_dim = 8;
    return s;
  }
  if (name == "three") {
    s.grid.dims = {10, 10, 8};
    s.grid.voxel_size = 0.25;
    s.grid.origin = Eigen::Vector3d(-1.25, -1.25, -1.0);
    s.primitives.push_back({Primitive::Kind::Plane, Eigen::Vector3d(0.0, 0.0, -0.875), Eigen::Quaterniond::Identity(),
                            Eigen::Vector3d(0.0, 0.0, 0.25), "floor"});
    s.primitives.push_back({Primitive::Kind::Box, Eigen::Vector3d(-0.5, -0.375, -0.25),
                            Eigen::Quaterniond::Identity(), Eigen::Vector3d(0.75, 0.75, 1.0), "cabinet"});
    s.primitives.push_back({Primitive::Kind::Sphere, Eigen::Vector3d(0.5, 0.5, -0.25), Eigen::Quaterniond::Identity(),
                            Eigen::Vector3d(0.45, 0.0, 0.0), "ball"});
    s.cameras = {5, 3.5, 35.0, 55.0, 48, 48};
    s.embedding_dim = 8;
    return s;
  }
  if (name == "room") {
    // 60 x 60 x 36 voxels of 0.08 m: a 4.8 x 4.8 x 2.88 m volume.
    s.grid.dims = {60, 60, 36};
    s.grid.voxel_size = 0.08;
    s.grid.origin = Eigen::Vector3d(-2.4, -2.4, 0.0);
    const auto id = Eigen::Quaterniond::Identity();
    s.primitives.push_back({Primitive::Kind::Plane, Eigen::Vector3d(0, 0, 0.08), id, Eigen::Vector3d(0, 0, 0.16), "floor"});
    s.primitives.push_back({Primitive::Kind::Box, Eigen::Vector3d(0, 2.28, 1.44), id, Eigen::Vector3d(4.8, 0.24, 2.88), "wall"});
    s.primitives.push_back({Primitive::Kind::Box, Eigen::Vector3d(-1.2, 0.8, 0.3), id, Eigen::Vector3d(1.6, 2.0, 0.44), "bed"});
    s.primitives.push_back({Primitive::Kind::Box, Eigen::Vector3d(1.0, -0.6, 0.4), id, Eigen::Vector3d(1.2, 0.8, 0.64), "table"});
    s.primitives.push_back({Primitive::Kind::Sphere, Eigen::Vector3d(1.0, -0.6, 0.96), id, Eigen::Vector3d(0.2, 0, 0), "objects"});
    s.primitives.push_back({Primitive::Kind::Box, Eigen::Vector3d(1.1, 0.9, 0.45), id, Eigen::Vector3d(0.5, 0.5, 0.9), "chair"});
    s.cameras = {5, 0.0, 30.0, 60.0, 96, 96};
    s.embedding_dim = 16;
    return s;
  }
  throw LookupError("unknown scene preset '" + name + "'");
}

}  // namespace gsocc
