#include "gsocc/openvocab.hpp"

#include <cmath>
#include <limits>
#include <set>

#include "gsocc/parallel.hpp"

namespace gsocc {

std::size_t EmbeddingTable::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return i;
  }
  throw LookupError("unknown category '" + name + "'");
}

void EmbeddingTable::validate() const {
  if (static_cast<Eigen::Index>(names.size()) != vectors.rows()) {
    throw InvalidParameter("embedding table has " + std::to_string(names.size()) + " names but " +
                           std::to_string(vectors.rows()) + " vectors");
  }
  std::set<std::string> seen;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (!seen.insert(names[i]).second) throw InvalidParameter("duplicate category name '" + names[i] + "'");
    const double n = vectors.row(static_cast<Eigen::Index>(i)).norm();
    if (std::abs(n - 1.0) > 1e-6) throw InvalidParameter("embedding for '" + names[i] + "' is not unit norm");
  }
}

VoxelEmbeddings voxel_embeddings(std::span<const Gaussian> gaussians, const GridSpec& spec, Temperature tau,
                                 KernelOptions kernel, EmbeddingAggregation rule) {
  spec.validate();
  const int d = common_dim(gaussians);
  VoxelEmbeddings out;
  out.spec = spec;
  out.embedding = RowMatrixXd::Zero(static_cast<Eigen::Index>(spec.cell_count()), d);
  out.weight = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(spec.cell_count()));
  if (gaussians.empty()) return out;

  std::vector<GaussianFrame<double>> frames;
  std::vector<double> opacity;
  for (const auto& g : gaussians) {
    frames.push_back(make_frame(g));
    opacity.push_back(tempered_opacity(g.opacity_logit, tau));
  }
  const auto inc = build_incidence(frames, spec, kernel.truncation);
  parallel_for(spec.cell_count(), [&](int, std::size_t begin, std::size_t end) {
    for (std::size_t c = begin; c < end; ++c) {
      const Eigen::Vector3d x = spec.center(c);
      auto row = out.embedding.row(static_cast<Eigen::Index>(c));
      double z = 0.0, best = -1.0;
      std::int64_t best_i = -1;
      for (std::uint32_t i : inc.at(c)) {
        const double h = opacity[i] * eval_kernel(frames[i], x, kernel);
        z += h;
        if (rule == EmbeddingAggregation::IntensityWeighted) {
          row += h * gaussians[i].embedding.transpose();
        } else if (h > best) {
          best = h;
          best_i = i;
        }
      }
      out.weight[static_cast<Eigen::Index>(c)] = z;
      if (rule == EmbeddingAggregation::IntensityWeighted) {
        row /= std::max(z, 1e-8);
      } else if (best_i >= 0 && best > 0.0) {
        row = gaussians[static_cast<std::size_t>(best_i)].embedding.transpose();
      }
    }
  });
  return out;
}

OccupancyGrid query_scores(const VoxelEmbeddings& embeddings, const Eigen::VectorXd& prompt) {
  if (prompt.size() != embeddings.embedding.cols()) {
    throw ShapeMismatch("query prompt has dimension " + std::to_string(prompt.size()) + ", embeddings have " +
                        std::to_string(embeddings.embedding.cols()));
  }
  const double pn = prompt.norm();
  if (!(pn > 0.0)) throw InvalidParameter("query prompt must be nonzero");
  OccupancyGrid out = OccupancyGrid::zeros(embeddings.spec);
  for (Eigen::Index c = 0; c < out.values.size(); ++c) {
    const auto e = embeddings.embedding.row(c);
    const double en = e.norm();
    if (!(embeddings.weight[c] > 0.0) || !(en > 0.0)) {
      out.values[c] = -std::numeric_limits<double>::infinity();
      continue;
    }
    out.values[c] = std::clamp(e.dot(prompt) / (en * pn), -1.0, 1.0);
  }
  return out;
}

SemanticGrid assign_labels(const VoxelEmbeddings& embeddings, const OccupancyGrid& occupancy,
                           const EmbeddingTable& table, double threshold) {
  if (table.size() == 0) throw InvalidParameter("assign_labels: embedding table is empty");
  if (!(embeddings.spec == occupancy.spec)) throw ShapeMismatch("assign_labels: grid specs differ");
  if (table.dim() != embeddings.embedding.cols()) {
    throw ShapeMismatch("assign_labels: table dimension " + std::to_string(table.dim()) +
                        " does not match embedding dimension " + std::to_string(embeddings.embedding.cols()));
  }
  SemanticGrid out = SemanticGrid::empty(embeddings.spec);
  Eigen::VectorXd table_norms = table.vectors.rowwise().norm();
  for (Eigen::Index c = 0; c < occupancy.values.size(); ++c) {
    if (!(occupancy.values[c] >= threshold)) continue;
    const auto e = embeddings.embedding.row(c);
    const double en = std::max(e.norm(), 1e-12);
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < table.size(); ++k) {
      const auto K = static_cast<Eigen::Index>(k);
      const double score = e.dot(table.vectors.row(K)) / (en * std::max(table_norms[K], 1e-12));
      if (score > best_score) {
        best_score = score;
        best = k;
      }
    }
    out.labels[static_cast<std::size_t>(c)] = static_cast<std::uint16_t>(best);
  }
  return out;
}

Metrics compute_metrics(const SemanticGrid& pred, const OccupancyGrid& pred_occ, const SemanticGrid& gt,
                        std::size_t num_classes, double threshold, const std::vector<std::uint8_t>* mask) {
  if (!(pred.spec == gt.spec) || !(pred_occ.spec == gt.spec)) throw ShapeMismatch("compute_metrics: grid specs differ");
  const std::size_t n = gt.spec.cell_count();
  if (pred.labels.size() != n || gt.labels.size() != n || static_cast<std::size_t>(pred_occ.values.size()) != n) {
    throw ShapeMismatch("compute_metrics: payload length does not match grid");
  }
  if (mask && mask->size() != n) throw ShapeMismatch("compute_metrics: mask length does not match grid");

  std::size_t tp = 0, fp = 0, fn = 0;
  std::vector<std::size_t> ctp(num_classes, 0), cfp(num_classes, 0), cfn(num_classes, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (mask && !(*mask)[i]) continue;
    const bool p_occ = pred_occ.values[static_cast<Eigen::Index>(i)] >= threshold;
    const bool g_occ = gt.labels[i] != kEmptyLabel;
    tp += p_occ && g_occ;
    fp += p_occ && !g_occ;
    fn += !p_occ && g_occ;
    const std::uint16_t pl = pred.labels[i], gl = gt.labels[i];
    if (pl == gl) {
      if (gl != kEmptyLabel && gl < num_classes) ++ctp[gl];
      continue;
    }
    if (pl != kEmptyLabel && pl < num_classes) ++cfp[pl];
    if (gl != kEmptyLabel && gl < num_classes) ++cfn[gl];
  }
  Metrics m;
  const std::size_t uni = tp + fp + fn;
  m.iou = uni == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(uni);
  m.per_class.resize(num_classes);
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    const std::size_t u = ctp[k] + cfp[k] + cfn[k];
    if (u == 0) continue;
    m.per_class[k] = static_cast<double>(ctp[k]) / static_cast<double>(u);
    sum += *m.per_class[k];
    ++counted;
  }
  m.miou = counted == 0 ? 1.0 : sum / static_cast<double>(counted);
  return m;
}

std::vector<std::uint8_t> frustum_mask(const GridSpec& spec, const Camera& cam, double near_plane) {
  cam.validate();
  std::vector<std::uint8_t> mask(spec.cell_count(), 0);
  const Eigen::Matrix3d R = cam.rotation();
  const Eigen::Vector3d t = cam.translation();
  for (std::size_t c = 0; c < mask.size(); ++c) {
    const Eigen::Vector3d p = R * spec.center(c) + t;
    if (p.z() <= near_plane) continue;
    const double u = cam.fx * p.x() / p.z() + cam.cx;
    const double v = cam.fy * p.y() / p.z() + cam.cy;
    mask[c] = u >= 0.0 && u < cam.width && v >= 0.0 && v < cam.height;
  }
  return mask;
}

}  // namespace gsocc
