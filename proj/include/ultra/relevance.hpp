#pragma once

// Per-token relevance maps from gradient-weighted attention.
//
// For a target token i and every source layer b below the target layer:
//
//   Abar_b = I + mean_h( max(0, dA_b,h ⊙ A_b,h) )
//   rolled = Abar_1 · Abar_2 · ... · Abar_{l-1}
//   S_i    = rolled[i, first_token:]
//
// followed by the optional self-entry correction and upsampling to pixels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "ultra/error.hpp"
#include "ultra/grid.hpp"
#include "ultra/parallel.hpp"
#include "ultra/trace.hpp"

namespace ultra {

enum class UpsampleMode { bilinear, cubic };

/// H contiguous row-major n×n float matrices (one layer of a stack).
struct HeadStack {
  std::span<const float> values;
  std::size_t heads = 0;
  std::size_t n = 0;

  double operator()(std::size_t h, std::size_t r, std::size_t c) const {
    return values[(h * n + r) * n + c];
  }
};

struct RelevanceMap {
  std::uint64_t target_index = 0;  // full-axis index
  std::uint64_t layer = 0;
  std::vector<double> raw;
  std::optional<Field> upsampled;
  bool skip_corrected = false;
};

struct RelevanceOptions {
  bool apply_skip = true;
  std::optional<UpsampleMode> upsample;
  /// Row-normalize each Abar after adding I (rollout-style). Off by default.
  bool normalize_rows = false;
  unsigned threads = 1;
};

inline Matrix head_aggregate(const HeadStack& attn, const HeadStack& grad,
                             bool normalize_rows = false) {
  if (attn.heads != grad.heads)
    fail(ErrorKind::shape_mismatch, "attention has " + std::to_string(attn.heads) +
                                        " heads but gradients have " +
                                        std::to_string(grad.heads));
  if (attn.n != grad.n) fail(ErrorKind::shape_mismatch, "attention/gradient size mismatch");
  if (attn.heads == 0) fail(ErrorKind::invalid_argument, "need at least one head");
  const std::size_t n = attn.n;
  const std::size_t expected = attn.heads * n * n;
  if (attn.values.size() != expected || grad.values.size() != expected)
    fail(ErrorKind::shape_mismatch, "head stack payload does not match heads*n*n");

  Matrix out(n, n);
  for (std::size_t h = 0; h < attn.heads; ++h) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        const double a = attn(h, r, c);
        const double g = grad(h, r, c);
        if (std::isnan(a) || std::isnan(g))
          fail(ErrorKind::nan_payload, "NaN in attention or gradient input");
        out(r, c) += std::max(0.0, g * a);
      }
    }
  }
  const double inv_heads = 1.0 / static_cast<double>(attn.heads);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) out(r, c) *= inv_heads;
    out(r, r) += 1.0;
  }
  if (normalize_rows) {
    for (std::size_t r = 0; r < n; ++r) {
      double sum = 0.0;
      for (double v : out.row(r)) sum += v;
      for (double& v : out.row(r)) v /= sum;  // sum >= 1
    }
  }
  return out;
}

/// Ordered product aggregated[0] · aggregated[1] · ... .
inline Matrix rollout(std::span<const Matrix> aggregated) {
  if (aggregated.empty()) fail(ErrorKind::invalid_argument, "rollout of an empty sequence");
  const std::size_t n = aggregated.front().rows();
  for (const auto& m : aggregated)
    if (m.rows() != n || m.cols() != n)
      fail(ErrorKind::shape_mismatch, "rollout matrices must be square and equally sized");

  Matrix acc = aggregated.front();
  Matrix next(n, n);
  for (std::size_t k = 1; k < aggregated.size(); ++k) {
    const Matrix& rhs = aggregated[k];
    std::fill(next.values().begin(), next.values().end(), 0.0);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t m = 0; m < n; ++m) {
        const double a = acc(r, m);
        if (a == 0.0) continue;
        for (std::size_t c = 0; c < n; ++c) next(r, c) += a * rhs(m, c);
      }
    std::swap(acc, next);
  }
  return acc;
}

/// Row `target_index` of the rolled matrix with the CLS column dropped.
/// With CLS, index 0 selects the CLS row itself.
inline std::vector<double> extract_relevance(const Matrix& rolled, std::uint64_t target_index,
                                             bool has_cls = true) {
  if (rolled.rows() != rolled.cols() || rolled.rows() < (has_cls ? 2u : 1u))
    fail(ErrorKind::shape_mismatch, "rolled matrix must be square and large enough");
  if (target_index >= rolled.rows())
    fail(ErrorKind::invalid_argument,
         "target index " + std::to_string(target_index) + " out of range");
  const auto row = rolled.row(target_index);
  return {row.begin() + (has_cls ? 1 : 0), row.end()};
}

/// Replaces the token's own entry with the max over all other entries. The
/// own entry sits at target_index - 1 with CLS, at target_index without.
inline std::vector<double> skip_correction(std::span<const double> raw,
                                           std::uint64_t target_index, bool has_cls = true) {
  if (raw.empty()) fail(ErrorKind::invalid_argument, "empty relevance vector");
  const bool in_range = has_cls ? (target_index >= 1 && target_index <= raw.size())
                                : target_index < raw.size();
  if (!in_range)
    fail(ErrorKind::invalid_argument,
         "target index " + std::to_string(target_index) + " out of range");
  const std::size_t self = has_cls ? target_index - 1 : target_index;

  std::vector<double> out(raw.begin(), raw.end());
  double best = 0.0;  // n = 1 leaves no other entry; writes 0
  bool seen = false;
  for (std::size_t j = 0; j < raw.size(); ++j) {
    if (j == self) continue;
    best = seen ? std::max(best, raw[j]) : raw[j];
    seen = true;
  }
  out[self] = best;
  return out;
}

namespace detail {

inline double cubic_weight_near(double x, double a) {
  return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
}
inline double cubic_weight_far(double x, double a) {
  return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
}

// Keys cubic convolution with a = -0.75, clamped taps.
inline double cubic_sample(const double* line, std::size_t len, std::ptrdiff_t i0, double t) {
  constexpr double a = -0.75;
  const double w[4] = {cubic_weight_far(t + 1.0, a), cubic_weight_near(t, a),
                       cubic_weight_near(1.0 - t, a), cubic_weight_far(2.0 - t, a)};
  double acc = 0.0;
  for (int k = 0; k < 4; ++k) {
    const auto idx = std::clamp<std::ptrdiff_t>(i0 - 1 + k, 0, static_cast<std::ptrdiff_t>(len) - 1);
    acc += w[k] * line[idx];
  }
  return acc;
}

}  // namespace detail

/// Reshapes raw row-major to grid_h×grid_w and resamples to out_h×out_w using
/// the align-corners-false convention (pixel centres at +0.5).
inline Field upsample(std::span<const double> raw, std::size_t grid_h, std::size_t grid_w,
                      std::size_t out_h, std::size_t out_w,
                      UpsampleMode mode = UpsampleMode::bilinear) {
  if (grid_h == 0 || grid_w == 0 || grid_h * grid_w != raw.size())
    fail(ErrorKind::shape_mismatch, "grid dims do not match relevance length");
  if (out_h < grid_h || out_w < grid_w)
    fail(ErrorKind::shape_mismatch, "output dims smaller than grid dims");

  const double sy = static_cast<double>(grid_h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(grid_w) / static_cast<double>(out_w);
  Field out(out_h, out_w);

  if (mode == UpsampleMode::bilinear) {
    auto locate = [](std::size_t dst, double scale, std::size_t len) {
      const double src = std::max(0.0, scale * (static_cast<double>(dst) + 0.5) - 0.5);
      auto i0 = std::min(static_cast<std::size_t>(src), len - 1);
      const auto i1 = i0 + (i0 < len - 1 ? 1 : 0);
      const double t = std::min(1.0, src - static_cast<double>(i0));
      return std::tuple{i0, i1, t};
    };
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto [y0, y1, ty] = locate(y, sy, grid_h);
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto [x0, x1, tx] = locate(x, sx, grid_w);
        const double top = std::lerp(raw[y0 * grid_w + x0], raw[y0 * grid_w + x1], tx);
        const double bottom = std::lerp(raw[y1 * grid_w + x0], raw[y1 * grid_w + x1], tx);
        out(y, x) = std::lerp(top, bottom, ty);
      }
    }
    return out;
  }

  // Cubic: separable, horizontal pass first.
  Grid<double> rows(grid_h, out_w);
  for (std::size_t x = 0; x < out_w; ++x) {
    const double src = sx * (static_cast<double>(x) + 0.5) - 0.5;
    const double fl = std::floor(src);
    for (std::size_t r = 0; r < grid_h; ++r)
      rows(r, x) = detail::cubic_sample(raw.data() + r * grid_w, grid_w,
                                        static_cast<std::ptrdiff_t>(fl), src - fl);
  }
  std::vector<double> column(grid_h);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double src = sy * (static_cast<double>(y) + 0.5) - 0.5;
    const double fl = std::floor(src);
    for (std::size_t x = 0; x < out_w; ++x) {
      for (std::size_t r = 0; r < grid_h; ++r) column[r] = rows(r, x);
      out(y, x) = detail::cubic_sample(column.data(), grid_h, static_cast<std::ptrdiff_t>(fl),
                                       src - fl);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trace-level composition

inline HeadStack attention_layer(const Trace& trace, std::size_t layer0) {
  const auto& m = trace.manifest;
  const std::size_t n = m.full_tokens();
  const std::size_t block = m.num_heads * n * n;
  return {std::span<const float>(trace.attention.data).subspan(layer0 * block, block),
          m.num_heads, n};
}

inline HeadStack gradient_layer(const Trace& trace, std::size_t target_slot, std::size_t layer0) {
  const auto& m = trace.manifest;
  const std::size_t n = m.full_tokens();
  const std::size_t block = m.num_heads * n * n;
  const std::size_t depth = m.target_layer - 1;
  return {std::span<const float>(trace.gradients.data)
              .subspan((target_slot * depth + layer0) * block, block),
          m.num_heads, n};
}

inline std::size_t require_target_slot(const TraceManifest& m, std::uint64_t target) {
  const auto slot = m.target_slot(target);
  if (!slot)
    fail(ErrorKind::invalid_argument,
         "trace has no gradients for target token " + std::to_string(target));
  return *slot;
}

/// Head-aggregated matrices for every source layer of one target.
inline std::vector<Matrix> aggregated_layers(const Trace& trace, std::uint64_t target,
                                             bool normalize_rows = false) {
  const std::size_t slot = require_target_slot(trace.manifest, target);
  std::vector<Matrix> out;
  for (std::size_t b = 0; b + 1 < trace.manifest.target_layer; ++b)
    out.push_back(head_aggregate(attention_layer(trace, b), gradient_layer(trace, slot, b),
                                 normalize_rows));
  return out;
}

/// Full rolled matrix for one target.
inline Matrix rolled_matrix(const Trace& trace, std::uint64_t target,
                            bool normalize_rows = false) {
  return rollout(aggregated_layers(trace, target, normalize_rows));
}

/// Row `target` of the rolled matrix, propagated as a row vector through
/// the layer product so the full N×N product is never formed.
inline std::vector<double> rolled_row(const Trace& trace, std::uint64_t target,
                                      bool normalize_rows = false) {
  const std::size_t slot = require_target_slot(trace.manifest, target);
  const std::size_t n = trace.manifest.full_tokens();
  std::vector<double> row(n, 0.0), next(n);
  row[target] = 1.0;
  for (std::size_t b = 0; b + 1 < trace.manifest.target_layer; ++b) {
    const Matrix agg = head_aggregate(attention_layer(trace, b),
                                      gradient_layer(trace, slot, b), normalize_rows);
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t m = 0; m < n; ++m) {
      if (row[m] == 0.0) continue;
      for (std::size_t c = 0; c < n; ++c) next[c] += row[m] * agg(m, c);
    }
    std::swap(row, next);
  }
  return row;
}

inline RelevanceMap relevance_map(const Trace& trace, std::uint64_t target,
                                  const RelevanceOptions& options = {}) {
  const auto& m = trace.manifest;
  RelevanceMap map;
  map.target_index = target;
  map.layer = m.target_layer;
  const auto row = rolled_row(trace, target, options.normalize_rows);
  map.raw.assign(row.begin() + static_cast<std::ptrdiff_t>(m.first_token()), row.end());
  // The CLS row has no own entry among the regular tokens.
  if (options.apply_skip && !(m.has_cls && target == 0)) {
    map.raw = skip_correction(map.raw, target, m.has_cls);
    map.skip_corrected = true;
  }
  if (options.upsample) {
    if (m.modality != Modality::vision)
      fail(ErrorKind::invalid_argument, "upsampling needs a vision trace");
    map.upsampled = upsample(map.raw, m.grid_h, m.grid_w, m.image_h, m.image_w, *options.upsample);
  }
  return map;
}

/// One map per requested target, in request order.
inline std::vector<RelevanceMap> relevance_maps(const Trace& trace,
                                                std::span<const std::uint64_t> targets,
                                                const RelevanceOptions& options = {}) {
  for (auto t : targets) require_target_slot(trace.manifest, t);
  std::vector<RelevanceMap> out(targets.size());
  parallel_for(targets.size(), options.threads,
               [&](std::size_t k) { out[k] = relevance_map(trace, targets[k], options); });
  return out;
}

}  // namespace ultra
