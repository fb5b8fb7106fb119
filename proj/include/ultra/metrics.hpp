#pragma once

// IoU, Initial Token IoU and unsupervised segmentation scores.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "ultra/error.hpp"
#include "ultra/grid.hpp"
#include "ultra/relevance.hpp"
#include "ultra/segmentation.hpp"
#include "ultra/trace.hpp"

namespace ultra {

/// Neumaier-compensated sum; keeps reductions stable under reordering.
inline double compensated_sum(std::span<const double> values) {
  double sum = 0.0, carry = 0.0;
  for (double v : values) {
    const double t = sum + v;
    carry += std::abs(sum) >= std::abs(v) ? (sum - t) + v : (v - t) + sum;
    sum = t;
  }
  return sum + carry;
}

inline double compensated_mean(std::span<const double> values) {
  return values.empty() ? 0.0 : compensated_sum(values) / static_cast<double>(values.size());
}

// ---------------------------------------------------------------------------
// IoU

/// IoU over the pixels where `valid` is set (all pixels when `valid` is
/// empty). An empty union counts as perfect agreement.
inline double iou(const Grid<std::uint8_t>& pred, const Grid<std::uint8_t>& gt,
                  std::span<const std::uint8_t> valid = {}) {
  if (!pred.same_shape(gt)) fail(ErrorKind::shape_mismatch, "IoU masks differ in shape");
  if (!valid.empty() && valid.size() != pred.size())
    fail(ErrorKind::shape_mismatch, "validity mask differs in shape");
  std::uint64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!valid.empty() && !valid[i]) continue;
    const bool p = pred.values()[i] != 0, g = gt.values()[i] != 0;
    inter += p && g;
    uni += p || g;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double iou(const BinaryMask& pred, const BinaryMask& gt) {
  return iou(pred.values, gt.values);
}

// ---------------------------------------------------------------------------
// Token classes and ITIoU

/// Pixel rows/cols covered by patch (r, c) of a grid laid over the image.
struct PatchBounds {
  std::size_t y0, y1, x0, x1;
};

inline PatchBounds patch_bounds(std::size_t r, std::size_t c, std::size_t grid_h,
                                std::size_t grid_w, std::size_t image_h, std::size_t image_w) {
  return {r * image_h / grid_h, (r + 1) * image_h / grid_h, c * image_w / grid_w,
          (c + 1) * image_w / grid_w};
}

/// Majority ground-truth class under each token's patch (ties to the smaller
/// id); tokens covering only ignore pixels get the ignore label.
inline std::vector<std::uint16_t> token_classes(const LabelRaster& gt, std::size_t grid_h,
                                                std::size_t grid_w) {
  if (grid_h == 0 || grid_w == 0 || gt.height() < grid_h || gt.width() < grid_w)
    fail(ErrorKind::shape_mismatch, "ground truth smaller than token grid");
  std::vector<std::uint16_t> out(grid_h * grid_w, gt.ignore_value);
  for (std::size_t r = 0; r < grid_h; ++r)
    for (std::size_t c = 0; c < grid_w; ++c) {
      const auto b = patch_bounds(r, c, grid_h, grid_w, gt.height(), gt.width());
      std::map<std::uint16_t, std::size_t> votes;
      for (std::size_t y = b.y0; y < b.y1; ++y)
        for (std::size_t x = b.x0; x < b.x1; ++x)
          if (const auto v = gt.values(y, x); v != gt.ignore_value) ++votes[v];
      std::size_t best = 0;
      for (const auto& [label, count] : votes)
        if (count > best) {
          best = count;
          out[r * grid_w + c] = label;
        }
    }
  return out;
}

/// ITIoU from one binary mask per token (row-major grid order). Ignore
/// pixels are excluded from every IoU.
inline double itiou_from_masks(std::span<const BinaryMask> masks, const LabelRaster& gt,
                               std::size_t grid_h, std::size_t grid_w) {
  if (masks.size() != grid_h * grid_w)
    fail(ErrorKind::shape_mismatch, "need one mask per grid token");
  const auto classes = token_classes(gt, grid_h, grid_w);

  std::vector<std::uint8_t> valid(gt.values.size());
  std::uint16_t max_class = 0;
  bool any = false;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    const auto v = gt.values.values()[i];
    valid[i] = v != gt.ignore_value;
    if (valid[i]) {
      any = true;
      max_class = std::max(max_class, v);
    }
  }
  if (!any) fail(ErrorKind::metric_failure, "no non-ignore ground truth");

  std::vector<double> class_means;
  for (std::size_t cls = 0; cls <= max_class; ++cls) {
    Grid<std::uint8_t> region(gt.height(), gt.width());
    for (std::size_t i = 0; i < region.size(); ++i)
      region.values()[i] = gt.values.values()[i] == cls;
    std::vector<double> ious;
    for (std::size_t j = 0; j < masks.size(); ++j) {
      if (classes[j] != cls) continue;
      if (!masks[j].values.same_shape(region))
        fail(ErrorKind::shape_mismatch, "mask and ground truth differ in shape");
      ious.push_back(iou(masks[j].values, region, valid));
    }
    if (!ious.empty()) class_means.push_back(compensated_mean(ious));
  }
  return compensated_mean(class_means);
}

inline double itiou(const Trace& trace, const LabelRaster& gt, std::uint64_t layer,
                    double tau = kDefaultTau, const SegmentOptions& options = {}) {
  const auto& m = trace.manifest;
  if (m.modality != Modality::vision) fail(ErrorKind::invalid_argument, "ITIoU needs a vision trace");
  require_layer(m, layer);
  if (gt.height() != m.image_h || gt.width() != m.image_w)
    fail(ErrorKind::shape_mismatch, "ground truth does not match image size");

  const auto targets = segmentation_targets(m, false);
  RelevanceOptions ropt;
  ropt.apply_skip = options.skip_fix;
  ropt.upsample = options.upsample;
  ropt.normalize_rows = options.normalize_rows;
  ropt.threads = options.threads;
  const auto maps = relevance_maps(trace, targets, ropt);
  std::vector<BinaryMask> masks;
  masks.reserve(maps.size());
  for (const auto& map : maps) masks.push_back(binarize(map, tau));
  return itiou_from_masks(masks, gt, m.grid_h, m.grid_w);
}

// ---------------------------------------------------------------------------
// Cluster matching

struct ConfusionMatrix {
  Grid<std::uint64_t> counts;  // [k_pred, k_gt]

  std::size_t k_pred() const noexcept { return counts.rows(); }
  std::size_t k_gt() const noexcept { return counts.cols(); }
};

enum class MatchMode { hungarian, majority };

inline void check_pair(const LabelRaster& pred, const LabelRaster& gt) {
  if (!pred.values.same_shape(gt.values))
    fail(ErrorKind::shape_mismatch, "prediction and ground truth differ in shape");
  for (std::size_t i = 0; i < pred.values.size(); ++i)
    if (pred.values.values()[i] == pred.ignore_value &&
        gt.values.values()[i] != gt.ignore_value)
      fail(ErrorKind::metric_failure, "prediction labels an evaluable pixel as ignore");
}

/// Counts over pixels whose ground truth is not ignore. Dimensions are
/// max label + 1 on each side, at least the given minimums.
inline ConfusionMatrix confusion(const LabelRaster& pred, const LabelRaster& gt,
                                 std::size_t min_pred = 0, std::size_t min_gt = 0) {
  check_pair(pred, gt);
  std::size_t kp = min_pred, kg = min_gt;
  for (std::size_t i = 0; i < gt.values.size(); ++i) {
    const auto g = gt.values.values()[i];
    if (g == gt.ignore_value) continue;
    kg = std::max<std::size_t>(kg, g + 1u);
    kp = std::max<std::size_t>(kp, pred.values.values()[i] + 1u);
  }
  ConfusionMatrix cm{Grid<std::uint64_t>(kp, kg)};
  for (std::size_t i = 0; i < gt.values.size(); ++i) {
    const auto g = gt.values.values()[i];
    if (g != gt.ignore_value) ++cm.counts(pred.values.values()[i], g);
  }
  return cm;
}

/// Maximum-weight assignment of rows to columns. Returns the column of each
/// row, or -1 for rows left unmatched when rows outnumber columns.
inline std::vector<long> max_weight_assignment(const Grid<std::uint64_t>& weights) {
  const std::size_t rows = weights.rows(), cols = weights.cols();
  const std::size_t n = std::max(rows, cols);
  if (n == 0) return {};
  std::uint64_t top = 0;
  for (auto w : weights.values()) top = std::max(top, w);
  auto cost = [&](std::size_t r, std::size_t c) -> double {
    const std::uint64_t w = (r < rows && c < cols) ? weights(r, c) : 0;
    return static_cast<double>(top - w);
  };

  // Shortest augmenting path (Kuhn-Munkres with potentials), 1-based.
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<long> out(rows, -1);
  for (std::size_t j = 1; j <= n; ++j)
    if (p[j] != 0 && p[j] - 1 < rows && j - 1 < cols) out[p[j] - 1] = static_cast<long>(j - 1);
  return out;
}

/// Prediction id → ground-truth class (kIgnoreLabel when unmatched).
inline std::vector<std::uint16_t> match_clusters(const ConfusionMatrix& cm, MatchMode mode) {
  std::vector<std::uint16_t> mapping(cm.k_pred(), kIgnoreLabel);
  if (cm.k_gt() == 0) return mapping;
  if (mode == MatchMode::majority) {
    for (std::size_t r = 0; r < cm.k_pred(); ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < cm.k_gt(); ++c)
        if (cm.counts(r, c) > cm.counts(r, best)) best = c;
      mapping[r] = static_cast<std::uint16_t>(best);
    }
    return mapping;
  }
  const auto assignment = max_weight_assignment(cm.counts);
  for (std::size_t r = 0; r < cm.k_pred(); ++r)
    if (assignment[r] >= 0) mapping[r] = static_cast<std::uint16_t>(assignment[r]);
  return mapping;
}

// ---------------------------------------------------------------------------
// Unsupervised accuracy / mIoU

/// Integer tallies after relabeling predictions through a matching.
struct MatchedCounts {
  std::uint64_t correct = 0;
  std::uint64_t total = 0;
  std::vector<std::uint64_t> tp, gt_count, pred_count;  // per ground-truth class

  void resize(std::size_t classes) {
    if (tp.size() >= classes) return;
    tp.resize(classes);
    gt_count.resize(classes);
    pred_count.resize(classes);
  }

  void add(const MatchedCounts& other) {
    resize(other.tp.size());
    correct += other.correct;
    total += other.total;
    for (std::size_t c = 0; c < other.tp.size(); ++c) {
      tp[c] += other.tp[c];
      gt_count[c] += other.gt_count[c];
      pred_count[c] += other.pred_count[c];
    }
  }

  double accuracy() const {
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
  }

  /// Mean IoU over classes present in the ground truth.
  double miou() const {
    std::vector<double> ious;
    for (std::size_t c = 0; c < tp.size(); ++c) {
      if (gt_count[c] == 0) continue;
      const auto uni = gt_count[c] + pred_count[c] - tp[c];
      ious.push_back(static_cast<double>(tp[c]) / static_cast<double>(uni));
    }
    return compensated_mean(ious);
  }
};

inline MatchedCounts matched_counts(const LabelRaster& pred, const LabelRaster& gt,
                                    std::span<const std::uint16_t> mapping) {
  check_pair(pred, gt);
  MatchedCounts counts;
  for (std::size_t i = 0; i < gt.values.size(); ++i) {
    const auto g = gt.values.values()[i];
    if (g == gt.ignore_value) continue;
    const auto p = pred.values.values()[i];
    const auto mapped = p < mapping.size() ? mapping[p] : kIgnoreLabel;
    counts.resize(static_cast<std::size_t>(g) + 1);
    ++counts.total;
    ++counts.gt_count[g];
    if (mapped != kIgnoreLabel) {
      counts.resize(static_cast<std::size_t>(mapped) + 1);
      ++counts.pred_count[mapped];
      if (mapped == g) {
        ++counts.correct;
        ++counts.tp[g];
      }
    }
  }
  return counts;
}

struct ImageScore {
  double accuracy = 0.0;
  double miou = 0.0;
  std::size_t k_pred = 0;  // distinct predicted labels on evaluable pixels
  std::size_t k_gt = 0;    // distinct ground-truth classes
  MatchedCounts counts;
};

struct EvalResult {
  double u_miou = 0.0;
  double u_accuracy = 0.0;
  std::vector<ImageScore> images;
};

/// Scores one image with per-image matching.
inline ImageScore score_image(const LabelRaster& pred, const LabelRaster& gt, MatchMode mode) {
  const auto cm = confusion(pred, gt);
  ImageScore score;
  for (std::size_t r = 0; r < cm.k_pred(); ++r) {
    std::uint64_t row = 0;
    for (std::size_t c = 0; c < cm.k_gt(); ++c) row += cm.counts(r, c);
    score.k_pred += row > 0;
  }
  for (std::size_t c = 0; c < cm.k_gt(); ++c) {
    std::uint64_t col = 0;
    for (std::size_t r = 0; r < cm.k_pred(); ++r) col += cm.counts(r, c);
    score.k_gt += col > 0;
  }
  const auto mapping = match_clusters(cm, mode);
  score.counts = matched_counts(pred, gt, mapping);
  score.accuracy = score.counts.accuracy();
  score.miou = score.counts.miou();
  return score;
}

/// Dataset scores: per-image matching, then accuracy and per-class IoU from
/// counts pooled over all images.
inline EvalResult summarize(std::vector<ImageScore> images) {
  EvalResult result;
  MatchedCounts pooled;
  for (const auto& s : images) pooled.add(s.counts);
  if (pooled.total == 0) fail(ErrorKind::metric_failure, "no evaluable pixels");
  result.u_accuracy = pooled.accuracy();
  result.u_miou = pooled.miou();
  result.images = std::move(images);
  return result;
}

inline EvalResult evaluate(std::span<const LabelRaster> preds, std::span<const LabelRaster> gts,
                           MatchMode mode = MatchMode::hungarian) {
  if (preds.empty()) fail(ErrorKind::invalid_argument, "empty evaluation list");
  if (preds.size() != gts.size())
    fail(ErrorKind::invalid_argument, "prediction and ground-truth counts differ");
  std::vector<ImageScore> images;
  images.reserve(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) images.push_back(score_image(preds[i], gts[i], mode));
  return summarize(std::move(images));
}

}  // namespace ultra
