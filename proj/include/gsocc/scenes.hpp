#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "gsocc/g2o.hpp"
#include "gsocc/losses.hpp"
#include "gsocc/openvocab.hpp"
#include "gsocc/splat.hpp"

namespace gsocc {

struct Primitive {
  enum class Kind { Box, Sphere, Plane };

  Kind kind = Kind::Box;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  // Box: full edge lengths. Sphere: size.x() is the radius. Plane: an
  // unbounded slab normal to the local z axis with thickness size.z().
  Eigen::Vector3d size = Eigen::Vector3d::Ones();
  std::string category;

  bool contains(const Eigen::Vector3d& x) const;
  // Axis-aligned bounds; planes report only their center.
  Eigen::AlignedBox3d bounds() const;
};

std::string to_string(Primitive::Kind kind);
Primitive::Kind parse_primitive_kind(const std::string& name);

/// Cameras on a ring around the grid center, looking at it with +z up.
struct CameraRig {
  int count = 5;
  double radius = 0.0;  // 0 picks a distance that frames the whole grid
  double elevation_deg = 30.0;
  double fov_deg = 60.0;
  int width = 48;
  int height = 48;
};

struct SceneSpec {
  GridSpec grid;
  std::vector<Primitive> primitives;
  CameraRig cameras;
  int embedding_dim = 8;
  std::uint64_t seed = 0;

  void validate() const;
  // Category names in order of first appearance.
  std::vector<std::string> categories() const;
};

/// Ground truth for one scene. Teacher images carry the painted category
/// embedding, a validity mask in `alpha` and the hit depth in `depth`.
struct SceneBundle {
  OccupancyGrid occupancy;
  SemanticGrid semantics;
  EmbeddingTable table;
  std::vector<Camera> cameras;
  std::vector<FeatureImage> teachers;

  void validate() const;
  BinaryTarget target() const { return occupancy.values; }
  std::size_t occupied_count() const;
};

SceneBundle gen_scene(const SceneSpec& spec);

std::vector<std::string> preset_names();
SceneSpec preset(const std::string& name);

/// Rounds grid geometry to what the binary grid format stores.
GridSpec quantize_to_file_precision(const GridSpec& spec);

std::vector<Camera> ring_cameras(const GridSpec& grid, const CameraRig& rig);

struct RayHit {
  std::size_t voxel;
  double t;  // ray parameter where the voxel is entered
};

/// First non-EMPTY voxel along origin + t * dir (t >= 0), by 3D-DDA traversal.
std::optional<RayHit> raycast_first_occupied(const SemanticGrid& grid, const Eigen::Vector3d& origin,
                                             const Eigen::Vector3d& dir);

/// Paints one teacher view by ray casting every pixel center.
FeatureImage paint_teacher(const SemanticGrid& semantics, const EmbeddingTable& table, const Camera& cam);

}  // namespace gsocc
