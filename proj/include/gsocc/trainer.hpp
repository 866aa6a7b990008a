#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gsocc/core.hpp"
#include "gsocc/g2o.hpp"
#include "gsocc/losses.hpp"
#include "gsocc/openvocab.hpp"
#include "gsocc/scenes.hpp"
#include "gsocc/splat.hpp"

namespace gsocc {

enum class ScheduleMode { Exponential, Linear, Constant };

std::string to_string(ScheduleMode mode);
// Accepts exp|exponential, linear, const|constant.
ScheduleMode parse_schedule_mode(const std::string& name);

struct TemperatureSchedule {
  double t_min = 1e-3;
  double t_max = 1.0;
  ScheduleMode mode = ScheduleMode::Exponential;
  // Temperature used for final evaluation; t_min when unset.
  std::optional<double> tau_test;

  double test_tau() const { return tau_test.value_or(t_min); }
  void validate() const;
};

// Constant mode holds t_max. Progress outside [0, 1] is clamped with a
// warning on stderr.
double temperature_at(double r, const TemperatureSchedule& s);

struct LearningRates {
  double mean = 1e-2;
  double rotation = 1e-2;
  double log_scale = 1e-2;
  double opacity = 5e-2;
  double embedding = 1e-2;
};

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient norm; <= 0 disables clipping
};

struct IterationRecord {
  int iteration = 0;
  double r = 0.0;
  double tau = 0.0;
  double focal = 0.0, lovasz = 0.0, scal = 0.0, feat = 0.0, depth = 0.0;
  double total = 0.0;
  double iou = 0.0;           // occupancy IoU at the current temperature
  double mean_opacity = 0.0;  // mean tempered opacity
};

struct FitConfig {
  int num_gaussians = 64;
  int iterations = 500;
  // Multiplies every per-group learning rate.
  double step_size = 1.0;
  LearningRates lr;
  AdamParams adam;
  LossWeights weights;
  FocalParams focal;
  double huber_delta = 1.0;
  AggregationMode mode = AggregationMode::Poisson;
  TemperatureSchedule schedule;
  std::uint64_t seed = 0;
  // Indices into the bundle's cameras; empty means every view.
  std::vector<std::size_t> views;
  bool freeze_opacity = false;
  VoxelizeOptions voxelize;
  RenderOptions render;
  double threshold = kDefaultOccupancyThreshold;
  // Called after every iteration.
  std::function<void(const IterationRecord&)> progress;

  void validate() const;
};

struct Evaluation {
  double tau = 0.0;
  OccupancyGrid occupancy;
  SemanticGrid labels;
  Metrics metrics;
};

struct FitReport {
  std::vector<IterationRecord> records;
  std::vector<Gaussian> gaussians;
  Evaluation final_eval;
};

std::vector<Gaussian> init_gaussians(const SceneBundle& target, int n, int embedding_dim, std::uint64_t seed);

FitReport fit(const SceneBundle& scene, const FitConfig& config);

/// One small, nearly opaque Gaussian per occupied voxel carrying its
/// category embedding.
std::vector<Gaussian> gaussians_from_ground_truth(const SceneBundle& scene);

Evaluation evaluate(std::span<const Gaussian> gaussians, const SceneBundle& scene, AggregationMode mode, double tau,
                    double threshold = kDefaultOccupancyThreshold, const VoxelizeOptions& opts = {});

// Column order: iteration,r,tau,focal,lovasz,scal,feat,depth,total,iou,mean_opacity
std::string report_csv(const std::vector<IterationRecord>& records);

}  // namespace gsocc
