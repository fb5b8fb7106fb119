#pragma once

// Text and tensor exports of pipeline results.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "ultra/error.hpp"
#include "ultra/format.hpp"
#include "ultra/relevance.hpp"
#include "ultra/segmentation.hpp"
#include "ultra/tensor.hpp"
#include "ultra/textinterp.hpp"

namespace ultra {

/// One row per map: target index followed by the n raw values.
inline std::string relevance_csv(std::span<const RelevanceMap> maps) {
  std::string out;
  for (const auto& map : maps) {
    out += std::to_string(map.target_index);
    for (double v : map.raw) out += "," + format_g9(v);
    out += '\n';
  }
  return out;
}

/// [targets, n] float32 tensor of the raw maps.
inline Tensor relevance_tensor(std::span<const RelevanceMap> maps) {
  const std::size_t n = maps.empty() ? 0 : maps.front().raw.size();
  Tensor t(Shape{maps.size(), n});
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].raw.size() != n) fail(ErrorKind::shape_mismatch, "maps differ in length");
    for (std::size_t j = 0; j < n; ++j) t.data[i * n + j] = static_cast<float>(maps[i].raw[j]);
  }
  return t;
}

/// JSON numbers carry the same 9 significant digits as the CSV outputs.
inline double round_g9(double v) { return std::stod(format_g9(v)); }

inline nlohmann::ordered_json tree_json(const Segmentation& seg) {
  nlohmann::ordered_json j;
  j["leaf_count"] = seg.tree.leaf_count;
  j["zeta"] = round_g9(seg.assignment.zeta);
  j["k"] = seg.assignment.k;
  j["targets"] = seg.targets;
  j["labels"] = seg.assignment.labels;
  auto merges = nlohmann::ordered_json::array();
  for (const auto& m : seg.tree.merges)
    merges.push_back({{"left", m.left}, {"right", m.right}, {"distance", round_g9(m.distance)},
                      {"id", m.id}});
  j["merges"] = std::move(merges);
  return j;
}

inline std::string raster_csv(const LabelRaster& raster) {
  std::string out;
  for (std::size_t y = 0; y < raster.height(); ++y) {
    for (std::size_t x = 0; x < raster.width(); ++x) {
      if (x) out += ',';
      out += std::to_string(raster.values(y, x));
    }
    out += '\n';
  }
  return out;
}

inline std::string mask_csv(const BinaryMask& mask) {
  std::string out;
  for (std::size_t y = 0; y < mask.values.rows(); ++y) {
    for (std::size_t x = 0; x < mask.values.cols(); ++x) {
      if (x) out += ',';
      out += mask.values(y, x) ? '1' : '0';
    }
    out += '\n';
  }
  return out;
}

inline std::string contribution_csv(const TokenContribution& contrib) {
  std::string out = "token_index,surface,lambda\n";
  for (std::size_t i = 0; i < contrib.scores.size(); ++i)
    out += std::to_string(i) + "," +
           csv_field(i < contrib.tokens.size() ? contrib.tokens[i] : std::string{}) + "," +
           format_g9(contrib.scores[i]) + "\n";
  return out;
}

}  // namespace ultra
