#pragma once

// Token Contribution Scores: for each context token, the mean relevance the
// summary tokens assign to it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ultra/error.hpp"
#include "ultra/format.hpp"
#include "ultra/relevance.hpp"
#include "ultra/trace.hpp"

namespace ultra {

struct TokenContribution {
  std::vector<double> scores;  // one per context token
  std::uint64_t layer = 0;
  std::vector<std::string> tokens;
};

/// Full-axis indices of the summary tokens.
inline std::vector<std::uint64_t> summary_targets(const TraceManifest& m) {
  std::vector<std::uint64_t> targets;
  const auto start = m.resolved_summary_start();
  for (std::uint64_t j = 0; j < m.summary_len; ++j) targets.push_back(start + j);
  return targets;
}

inline TokenContribution token_contributions(const Trace& trace, std::uint64_t layer,
                                             unsigned threads = 1) {
  const auto& m = trace.manifest;
  if (m.modality != Modality::text)
    fail(ErrorKind::invalid_argument, "token contributions need a text trace");
  if (layer != m.target_layer)
    fail(ErrorKind::invalid_argument,
         "trace holds gradients for layer " + std::to_string(m.target_layer) + ", not " +
             std::to_string(layer));
  if (m.summary_len == 0) fail(ErrorKind::invalid_argument, "trace has an empty summary");
  if (m.context_len == 0) fail(ErrorKind::invalid_argument, "trace has an empty context");

  const auto targets = summary_targets(m);
  for (auto t : targets)
    if (!m.target_slot(t))
      fail(ErrorKind::invalid_argument,
           "trace lacks gradients for summary token " + std::to_string(t));

  RelevanceOptions options;
  options.apply_skip = false;
  options.threads = threads;
  const auto maps = relevance_maps(trace, targets, options);

  TokenContribution out;
  out.layer = layer;
  out.scores.assign(m.context_len, 0.0);
  for (const auto& map : maps)
    for (std::size_t i = 0; i < m.context_len; ++i) out.scores[i] += map.raw[i];
  for (double& s : out.scores) s /= static_cast<double>(m.summary_len);

  for (std::size_t i = 0; i < m.context_len; ++i)
    out.tokens.push_back(m.token_surfaces.empty() ? "tok" + std::to_string(i)
                                                  : m.token_surfaces[i]);
  return out;
}

/// Min-max normalized scores; all-equal scores sit at 0.5.
inline std::vector<double> heat_intensities(const std::vector<double>& scores) {
  if (scores.empty()) return {};
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  const double range = *hi - *lo;
  std::vector<double> out;
  out.reserve(scores.size());
  for (double s : scores) out.push_back(range > 0.0 ? (s - *lo) / range : 0.5);
  return out;
}

enum class HeatmapFormat { ansi, html };

inline std::string render_heatmap(const TokenContribution& contrib, HeatmapFormat format) {
  if (contrib.scores.empty()) fail(ErrorKind::invalid_argument, "no scores to render");
  const auto level = heat_intensities(contrib.scores);
  auto token = [&](std::size_t i) {
    return i < contrib.tokens.size() ? contrib.tokens[i] : "tok" + std::to_string(i);
  };
  // White at 0, saturated red at 1.
  auto fade = [](double t) { return static_cast<int>(std::lround(255.0 * (1.0 - t))); };

  std::string out;
  if (format == HeatmapFormat::ansi) {
    for (std::size_t i = 0; i < level.size(); ++i) {
      const int g = fade(level[i]);
      out += "\x1b[48;2;255;" + std::to_string(g) + ";" + std::to_string(g) + "m\x1b[30m" +
             token(i) + "\x1b[0m";
      if (i + 1 < level.size()) out += ' ';
    }
    return out + "\n";
  }

  out +=
      "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n"
      "<title>Token contributions (layer " +
      std::to_string(contrib.layer) +
      ")</title>\n</head>\n<body style=\"font-family:sans-serif;line-height:1.8\">\n<p>\n";
  for (std::size_t i = 0; i < level.size(); ++i) {
    const int g = fade(level[i]);
    out += "<span style=\"background-color:rgb(255," + std::to_string(g) + "," +
           std::to_string(g) + ");padding:1px 2px\" title=\"" + format_g9(contrib.scores[i]) +
           "\" data-intensity=\"" + format_g9(level[i]) + "\">" + html_escape(token(i)) +
           "</span>\n";
  }
  out += "</p>\n</body>\n</html>\n";
  return out;
}

}  // namespace ultra
