#include "gsocc/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace gsocc {
namespace {

constexpr double kGuard = 1e-12;
constexpr double kNormEps = 1e-8;

void check_same(Eigen::Index a, Eigen::Index b, const char* what) {
  if (a != b) {
    throw ShapeMismatch(std::string(what) + ": size mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
  }
}

}  // namespace

LossValue focal_loss(const Eigen::ArrayXd& pred, const BinaryTarget& target, FocalParams params) {
  check_same(pred.size(), target.size(), "focal_loss");
  LossValue out;
  out.grad = Eigen::ArrayXd::Zero(pred.size());
  const Eigen::Index n = pred.size();
  if (n == 0) return out;
  const double g = params.gamma;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double raw = pred[i];
    const double p = std::clamp(raw, kProbEps, 1.0 - kProbEps);
    const bool pos = target[i] > 0.5;
    const double pt = pos ? p : 1.0 - p;
    const double one_m = 1.0 - pt;
    const double mod = std::pow(one_m, g);
    out.value += -params.alpha_balance * mod * std::log(pt);
    if (raw >= kProbEps && raw <= 1.0 - kProbEps) {
      const double dmod = g == 0.0 ? 0.0 : -g * std::pow(one_m, g - 1.0);
      const double dL_dpt = -params.alpha_balance * (dmod * std::log(pt) + mod / pt);
      out.grad[i] = (pos ? 1.0 : -1.0) * dL_dpt;
    }
  }
  out.value /= static_cast<double>(n);
  out.grad /= static_cast<double>(n);
  return out;
}

LossValue lovasz_loss(const Eigen::ArrayXd& pred, const BinaryTarget& target) {
  check_same(pred.size(), target.size(), "lovasz_loss");
  const Eigen::Index n = pred.size();
  LossValue out;
  out.grad = Eigen::ArrayXd::Zero(n);
  double gts = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) gts += target[i] > 0.5 ? 1.0 : 0.0;
  if (gts == 0.0) return out;

  Eigen::ArrayXd errors(n);
  for (Eigen::Index i = 0; i < n; ++i) errors[i] = target[i] > 0.5 ? 1.0 - pred[i] : pred[i];
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return errors[a] > errors[b]; });

  // Discrete gradient of the Jaccard loss along the sorted order.
  double cum_fg = 0.0, cum_bg = 0.0, prev_jaccard = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index i = order[static_cast<std::size_t>(k)];
    const bool fg = target[i] > 0.5;
    (fg ? cum_fg : cum_bg) += 1.0;
    const double jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
    const double weight = jaccard - prev_jaccard;
    prev_jaccard = jaccard;
    out.value += errors[i] * weight;
    out.grad[i] = (fg ? -1.0 : 1.0) * weight;
  }
  return out;
}

LossValue scal_loss(const Eigen::ArrayXd& pred, const BinaryTarget& target) {
  check_same(pred.size(), target.size(), "scal_loss");
  const Eigen::ArrayXd y = (target > 0.5).cast<double>();
  const double n_fg = y.sum();
  const double n_bg = static_cast<double>(y.size()) - n_fg;
  if (n_fg == 0.0 || n_bg == 0.0) {
    throw DegenerateTarget("scal_loss needs at least one foreground and one background voxel");
  }
  const double sum_p = pred.sum();
  const double tp = (pred * y).sum();
  const double tn = ((1.0 - pred) * (1.0 - y)).sum();

  const double sp = std::max(sum_p, kGuard);
  const double precision = tp / sp;
  const double recall = tp / n_fg;
  const double specificity = tn / n_bg;
  const double lp = std::max(precision, kGuard), lr = std::max(recall, kGuard), ls = std::max(specificity, kGuard);

  LossValue out;
  out.value = -(std::log(lp) + std::log(lr) + std::log(ls)) / 3.0;
  out.grad = Eigen::ArrayXd::Zero(pred.size());
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    const double dP = precision > kGuard && sum_p > kGuard ? (y[i] * sum_p - tp) / (sum_p * sum_p) : 0.0;
    const double dR = recall > kGuard ? y[i] / n_fg : 0.0;
    const double dS = specificity > kGuard ? -(1.0 - y[i]) / n_bg : 0.0;
    out.grad[i] = -(dP / lp + dR / lr + dS / ls) / 3.0;
  }
  return out;
}

LossValue huber_depth_loss(const Eigen::ArrayXd& pred_depth, const Eigen::ArrayXd& target_depth,
                           const Eigen::ArrayXd& valid_mask, double delta) {
  check_same(pred_depth.size(), target_depth.size(), "huber_depth_loss");
  check_same(pred_depth.size(), valid_mask.size(), "huber_depth_loss");
  if (!(delta > 0.0)) throw InvalidParameter("huber delta must be > 0");
  LossValue out;
  out.grad = Eigen::ArrayXd::Zero(pred_depth.size());
  double count = 0.0;
  for (Eigen::Index i = 0; i < pred_depth.size(); ++i) {
    if (valid_mask[i] <= 0.5) continue;
    count += 1.0;
    const double r = pred_depth[i] - target_depth[i];
    if (std::abs(r) <= delta) {
      out.value += 0.5 * r * r;
      out.grad[i] = r;
    } else {
      out.value += delta * (std::abs(r) - 0.5 * delta);
      out.grad[i] = r > 0.0 ? delta : -delta;
    }
  }
  if (count == 0.0) return out;
  out.value /= count;
  out.grad /= count;
  return out;
}

FeatureLossValue cosine_feature_loss(const RowMatrixXd& rendered, const RowMatrixXd& teacher,
                                     const Eigen::ArrayXd& valid_mask) {
  if (rendered.rows() != teacher.rows() || rendered.cols() != teacher.cols()) {
    throw ShapeMismatch("cosine_feature_loss: rendered is " + std::to_string(rendered.rows()) + "x" +
                        std::to_string(rendered.cols()) + ", teacher is " + std::to_string(teacher.rows()) + "x" +
                        std::to_string(teacher.cols()));
  }
  check_same(rendered.rows(), valid_mask.size(), "cosine_feature_loss mask");
  FeatureLossValue out;
  out.grad = RowMatrixXd::Zero(rendered.rows(), rendered.cols());
  double count = 0.0;
  for (Eigen::Index i = 0; i < rendered.rows(); ++i) {
    if (valid_mask[i] <= 0.5) continue;
    count += 1.0;
    const auto a = rendered.row(i);
    const auto b = teacher.row(i);
    const double na = a.norm(), nb = b.norm();
    const double ma = std::max(na, kNormEps), mb = std::max(nb, kNormEps);
    const double cosine = a.dot(b) / (ma * mb);
    out.value += 1.0 - cosine;
    Eigen::RowVectorXd g = -b / (ma * mb);
    if (na > kNormEps) g += cosine * a / (na * na);
    out.grad.row(i) = g;
  }
  if (count == 0.0) return out;
  out.value /= count;
  out.grad /= count;
  return out;
}

void LossWeights::validate() const {
  for (double w : {focal, lovasz, scal, feat, depth}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidParameter("loss weights must be finite and >= 0");
  }
}

TotalLoss total_loss(const LossParts& parts, const LossWeights& weights) {
  weights.validate();
  TotalLoss out;
  out.value = weights.focal * parts.focal.value + weights.lovasz * parts.lovasz.value +
              weights.scal * parts.scal.value + weights.feat * parts.feat + weights.depth * parts.depth;
  Eigen::Index n = 0;
  for (const auto* p : {&parts.focal, &parts.lovasz, &parts.scal}) n = std::max(n, p->grad.size());
  out.occupancy_grad = Eigen::ArrayXd::Zero(n);
  auto add = [&](const LossValue& part, double w) {
    if (part.grad.size() == 0 || w == 0.0) return;
    check_same(part.grad.size(), n, "total_loss");
    out.occupancy_grad += w * part.grad;
  };
  add(parts.focal, weights.focal);
  add(parts.lovasz, weights.lovasz);
  add(parts.scal, weights.scal);
  for (const auto& g : parts.feat_grads) out.feature_grads.push_back(weights.feat * g);
  for (const auto& g : parts.depth_grads) out.depth_grads.push_back(weights.depth * g);
  return out;
}

}  // namespace gsocc
