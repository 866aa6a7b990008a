#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gsocc/g2o.hpp"
#include "gsocc/splat.hpp"

namespace gsocc {

inline constexpr std::uint16_t kEmptyLabel = 0xFFFF;

/// Named category prompts; rows of `vectors` are unit-norm.
struct EmbeddingTable {
  std::vector<std::string> names;
  RowMatrixXd vectors;

  std::size_t size() const { return names.size(); }
  int dim() const { return static_cast<int>(vectors.cols()); }
  std::size_t index_of(const std::string& name) const;
  void validate() const;
};

struct SemanticGrid {
  GridSpec spec;
  std::vector<std::uint16_t> labels;

  static SemanticGrid empty(const GridSpec& spec) { return {spec, std::vector<std::uint16_t>(spec.cell_count(), kEmptyLabel)}; }
};

struct VoxelEmbeddings {
  GridSpec spec;
  RowMatrixXd embedding;  // cells x d
  Eigen::ArrayXd weight;  // mean measure z at each voxel center
};

enum class EmbeddingAggregation {
  IntensityWeighted,  // sum_i h_i f_i / sum_i h_i
  NearestGaussian,    // f of the Gaussian with the largest h_i
};

VoxelEmbeddings voxel_embeddings(std::span<const Gaussian> gaussians, const GridSpec& spec, Temperature tau,
                                 KernelOptions kernel = {},
                                 EmbeddingAggregation rule = EmbeddingAggregation::IntensityWeighted);

/// Cosine similarity per voxel; voxels without any contribution score -inf.
OccupancyGrid query_scores(const VoxelEmbeddings& embeddings, const Eigen::VectorXd& prompt);

/// Voxels with occupancy >= threshold take the best-matching category (ties to
/// the lowest index); the rest are EMPTY.
SemanticGrid assign_labels(const VoxelEmbeddings& embeddings, const OccupancyGrid& occupancy,
                           const EmbeddingTable& table, double threshold = kDefaultOccupancyThreshold);

struct Metrics {
  double iou = 0.0;
  std::vector<std::optional<double>> per_class;  // nullopt when absent from both pred and gt
  double miou = 0.0;
};

/// Occupancy IoU on binarized pred_occ against gt != EMPTY, per-class IoU on
/// labels and their unweighted mean. An optional mask restricts evaluation.
Metrics compute_metrics(const SemanticGrid& pred, const OccupancyGrid& pred_occ, const SemanticGrid& gt,
                        std::size_t num_classes, double threshold = kDefaultOccupancyThreshold,
                        const std::vector<std::uint8_t>* mask = nullptr);

/// 1 for voxels whose center projects inside the image in front of the camera.
std::vector<std::uint8_t> frustum_mask(const GridSpec& spec, const Camera& cam, double near_plane = 0.01);

}  // namespace gsocc
