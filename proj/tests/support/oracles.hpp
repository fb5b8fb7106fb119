#pragma once

// Independent reference evaluations used to check the library. These read
// the raw tensors directly and avoid every helper on the library's fast path.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "ultra/ultra.hpp"

namespace ultra::testing {

using Dense = std::vector<std::vector<double>>;

/// Unfactored relevance for one target: builds every I + E_h(grad*attn)^+
/// from the raw tensors, multiplies them in order as full matrices, slices
/// the target row, then optionally copies and overwrites the self entry.
inline std::vector<double> naive_relevance(const Trace& trace, std::uint64_t target,
                                           bool apply_skip) {
  const auto& m = trace.manifest;
  const std::size_t n = m.full_tokens();
  std::size_t slot = 0;
  while (m.target_token_indices[slot] != target) ++slot;

  Dense rolled(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) rolled[i][i] = 1.0;
  for (std::size_t b = 0; b + 1 < m.target_layer; ++b) {
    Dense abar(n, std::vector<double>(n, 0.0));
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) {
        double sum = 0.0;
        for (std::size_t h = 0; h < m.num_heads; ++h) {
          const double prod = static_cast<double>(trace.gradients.at(slot, b, h, r, c)) *
                              static_cast<double>(trace.attention.at(b, h, r, c));
          if (prod > 0.0) sum += prod;
        }
        abar[r][c] = (r == c ? 1.0 : 0.0) + sum / static_cast<double>(m.num_heads);
      }
    Dense next(n, std::vector<double>(n, 0.0));
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c)
        for (std::size_t k = 0; k < n; ++k) next[r][c] += rolled[r][k] * abar[k][c];
    rolled = next;
  }

  const std::size_t first = m.has_cls ? 1 : 0;
  std::vector<double> raw(rolled[target].begin() + first, rolled[target].end());
  if (apply_skip && !(m.has_cls && target == 0)) {
    const std::size_t self = target - first;
    double best = 0.0;
    bool any = false;
    for (std::size_t j = 0; j < raw.size(); ++j)
      if (j != self) {
        best = any ? std::max(best, raw[j]) : raw[j];
        any = true;
      }
    raw[self] = best;
  }
  return raw;
}

/// ITIoU by literal double loop over classes and tokens.
inline double naive_itiou(const std::vector<BinaryMask>& masks, const LabelRaster& gt,
                          std::size_t grid_h, std::size_t grid_w) {
  const std::size_t H = gt.height(), W = gt.width();
  // majority class per token
  std::vector<int> token_class(grid_h * grid_w, -1);
  for (std::size_t r = 0; r < grid_h; ++r)
    for (std::size_t c = 0; c < grid_w; ++c) {
      std::vector<std::size_t> votes(65536, 0);
      for (std::size_t y = r * H / grid_h; y < (r + 1) * H / grid_h; ++y)
        for (std::size_t x = c * W / grid_w; x < (c + 1) * W / grid_w; ++x)
          if (gt.values(y, x) != kIgnoreLabel) ++votes[gt.values(y, x)];
      std::size_t best = 0;
      for (std::size_t v = 0; v < votes.size(); ++v)
        if (votes[v] > best) {
          best = votes[v];
          token_class[r * grid_w + c] = static_cast<int>(v);
        }
    }

  double outer = 0.0;
  int classes = 0;
  for (int cls = 0; cls < 65535; ++cls) {
    double inner = 0.0;
    int members = 0;
    for (std::size_t j = 0; j < masks.size(); ++j) {
      if (token_class[j] != cls) continue;
      std::size_t inter = 0, uni = 0;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          if (gt.values(y, x) == kIgnoreLabel) continue;
          const bool p = masks[j].values(y, x) != 0;
          const bool g = gt.values(y, x) == cls;
          inter += p && g;
          uni += p || g;
        }
      inner += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
      ++members;
    }
    if (members > 0) {
      outer += inner / members;
      ++classes;
    }
  }
  return outer / classes;
}

/// Best total over all one-to-one row→column assignments (partial when the
/// matrix is rectangular), by enumerating column permutations.
inline std::uint64_t exhaustive_best_assignment(const Grid<std::uint64_t>& w) {
  const std::size_t n = std::max(w.rows(), w.cols());
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::uint64_t best = 0;
  do {
    std::uint64_t total = 0;
    for (std::size_t r = 0; r < w.rows(); ++r)
      if (perm[r] < w.cols()) total += w(r, perm[r]);
    best = std::max(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

/// Token Contribution Scores by literal double loop over summary and context.
inline std::vector<double> naive_lambda(const Trace& trace) {
  const auto& m = trace.manifest;
  const std::size_t x_len = m.context_len, y_len = m.summary_len;
  std::vector<double> lambda(x_len, 0.0);
  for (std::size_t i = 0; i < x_len; ++i) {
    double sum = 0.0;
    for (std::size_t j = 1; j <= y_len; ++j) {
      const auto s = naive_relevance(trace, j + x_len, false);
      sum += s[i];
    }
    lambda[i] = sum / static_cast<double>(y_len);
  }
  return lambda;
}

inline bool relative_close(double a, double b, double rel) {
  if (a == b) return true;
  return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b));
}

}  // namespace ultra::testing
