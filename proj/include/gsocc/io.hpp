#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "gsocc/core.hpp"
#include "gsocc/g2o.hpp"
#include "gsocc/openvocab.hpp"
#include "gsocc/scenes.hpp"
#include "gsocc/splat.hpp"

// On-disk formats. All binary payloads are little-endian.
//
//   Gaussians  "LGOC" u32 version=1, u64 count, u32 d, then per record
//              f32 x (3 + 4 + 3 + 1 + d): mean, rotation (w x y z), log_scale,
//              opacity_logit, embedding.
//   Grid       "VOXG" u32 version=1, u32 x 3 dims, f32 voxel_size,
//              f32 x 3 origin, u8 payload tag, payload in index order.
//   Table      "EMBT" u32 version=1, u32 d, u32 count, then per entry
//              u16 name length, UTF-8 name, f32 x d.
//   Image      "FIMG" u32 version=1, u32 width, u32 height, u32 d, then
//              f32 feature (pixels x d), f32 alpha, f32 depth.
//
// Cameras, scene specs and the scene manifest are JSON documents.
namespace gsocc::io {

inline constexpr std::uint32_t kFormatVersion = 1;

enum class PayloadTag : std::uint8_t { U8Binary = 0, U16Labels = 1, F32Scalars = 2 };

void save_gaussians(const std::filesystem::path& path, std::span<const Gaussian> gaussians);
std::vector<Gaussian> load_gaussians(const std::filesystem::path& path);

struct GridFile {
  GridSpec spec;
  PayloadTag tag = PayloadTag::F32Scalars;
  std::vector<std::uint8_t> u8;
  std::vector<std::uint16_t> u16;
  std::vector<float> f32;
};

void save_grid(const std::filesystem::path& path, const GridFile& grid);
GridFile load_grid(const std::filesystem::path& path);

// Binary (values >= 0.5) or float payload.
void save_occupancy(const std::filesystem::path& path, const OccupancyGrid& grid, PayloadTag tag);
OccupancyGrid load_occupancy(const std::filesystem::path& path);
void save_semantics(const std::filesystem::path& path, const SemanticGrid& grid);
SemanticGrid load_semantics(const std::filesystem::path& path);

void save_table(const std::filesystem::path& path, const EmbeddingTable& table);
EmbeddingTable load_table(const std::filesystem::path& path);

void save_feature_image(const std::filesystem::path& path, const FeatureImage& image);
FeatureImage load_feature_image(const std::filesystem::path& path);

nlohmann::json camera_to_json(const Camera& cam);
Camera camera_from_json(const nlohmann::json& j);
void save_camera(const std::filesystem::path& path, const Camera& cam);
Camera load_camera(const std::filesystem::path& path);

nlohmann::json grid_spec_to_json(const GridSpec& spec);
GridSpec grid_spec_from_json(const nlohmann::json& j);
nlohmann::json scene_spec_to_json(const SceneSpec& spec);
SceneSpec scene_spec_from_json(const nlohmann::json& j);
SceneSpec load_scene_spec(const std::filesystem::path& path);

/// Writes manifest.json plus every referenced binary file into `dir`.
void save_scene(const std::filesystem::path& dir, const SceneBundle& bundle, const SceneSpec* spec = nullptr);
SceneBundle load_scene(const std::filesystem::path& dir);

nlohmann::json read_json(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace gsocc::io
