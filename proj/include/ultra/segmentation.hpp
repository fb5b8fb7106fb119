#pragma once

// Object-selection masks and zero-shot segmentation from relevance maps.
//
// segment(): relevance maps → agglomerative clustering on the raw vectors →
// cut at ζ → per-cluster sum of upsampled maps → per-cluster min-max scaling
// → per-pixel argmax.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ultra/error.hpp"
#include "ultra/grid.hpp"
#include "ultra/relevance.hpp"
#include "ultra/tensor.hpp"
#include "ultra/trace.hpp"

namespace ultra {

inline constexpr std::uint16_t kIgnoreLabel = 0xFFFF;
inline constexpr double kDefaultZeta = 0.4;
inline constexpr double kDefaultTau = 0.2;

struct BinaryMask {
  Grid<std::uint8_t> values;
  double threshold = 0.0;
};

enum class DistanceMetric { cosine, euclidean };
enum class Linkage { average, complete };

struct Merge {
  std::size_t left = 0;
  std::size_t right = 0;
  double distance = 0.0;
  std::size_t id = 0;

  friend bool operator==(const Merge&, const Merge&) = default;
};

/// Leaves are ids 0..leaf_count-1; merge k creates id leaf_count + k.
struct ClusterTree {
  std::vector<Merge> merges;
  std::size_t leaf_count = 0;

  friend bool operator==(const ClusterTree&, const ClusterTree&) = default;
};

struct ClusterAssignment {
  std::vector<std::size_t> labels;
  std::size_t k = 0;
  double zeta = 0.0;
};

struct LabelRaster {
  Grid<std::uint16_t> values;  // rows = image_h, cols = image_w
  std::uint16_t ignore_value = kIgnoreLabel;

  std::size_t height() const noexcept { return values.rows(); }
  std::size_t width() const noexcept { return values.cols(); }

  friend bool operator==(const LabelRaster&, const LabelRaster&) = default;
};

// ---------------------------------------------------------------------------

inline BinaryMask binarize(const Field& field, double tau) {
  if (!std::isfinite(tau)) fail(ErrorKind::invalid_argument, "threshold must be finite");
  BinaryMask mask{Grid<std::uint8_t>(field.rows(), field.cols()), tau};
  for (std::size_t i = 0; i < field.size(); ++i)
    mask.values.values()[i] = field.values()[i] < tau ? 0 : 1;
  return mask;
}

inline BinaryMask binarize(const RelevanceMap& map, double tau) {
  if (!map.upsampled) fail(ErrorKind::invalid_argument, "relevance map has no upsampled field");
  return binarize(*map.upsampled, tau);
}

// ---------------------------------------------------------------------------
// Agglomerative clustering

inline double vector_distance(std::span<const double> a, std::span<const double> b,
                              DistanceMetric metric) {
  if (metric == DistanceMetric::euclidean) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  // sqrt(na * nb) rather than |a||b| keeps identical vectors at distance 0.
  return std::clamp(1.0 - dot / std::sqrt(na * nb), 0.0, 2.0);
}

/// Naive O(m^3) agglomeration over a dense distance matrix with
/// Lance-Williams updates. Among equal minimum distances the pair with the
/// lexicographically smallest (lower id, higher id) merges first.
inline ClusterTree cluster(const std::vector<std::vector<double>>& vectors,
                           DistanceMetric metric = DistanceMetric::cosine,
                           Linkage linkage = Linkage::average) {
  if (vectors.empty()) fail(ErrorKind::invalid_argument, "cannot cluster zero maps");
  const std::size_t m = vectors.size();
  for (const auto& v : vectors) {
    if (v.size() != vectors.front().size())
      fail(ErrorKind::shape_mismatch, "relevance vectors differ in length");
    if (metric == DistanceMetric::cosine &&
        std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; }))
      fail(ErrorKind::invalid_argument, "zero relevance vector has no cosine distance");
  }

  ClusterTree tree;
  tree.leaf_count = m;
  if (m == 1) return tree;

  Matrix dist(m, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j)
      dist(i, j) = dist(j, i) = vector_distance(vectors[i], vectors[j], metric);

  // Slot s holds the current cluster with id ids[s]; slots are reused.
  std::vector<std::size_t> ids(m), sizes(m, 1);
  std::iota(ids.begin(), ids.end(), 0);
  std::vector<bool> active(m, true);
  double last = 0.0;

  for (std::size_t step = 0; step + 1 < m; ++step) {
    std::size_t best_a = m, best_b = m;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < m; ++a) {
      if (!active[a]) continue;
      for (std::size_t b = a + 1; b < m; ++b) {
        if (!active[b]) continue;
        const double d = dist(a, b);
        const auto key = std::minmax(ids[a], ids[b]);
        if (d < best ||
            (d == best && key < std::minmax(ids[best_a], ids[best_b]))) {
          best = d;
          best_a = a;
          best_b = b;
        }
      }
    }

    const auto [lo, hi] = std::minmax(ids[best_a], ids[best_b]);
    // Reducible linkages never invert; this only absorbs rounding.
    last = std::max(last, best);
    const std::size_t new_id = m + step;
    tree.merges.push_back({lo, hi, last, new_id});

    const double na = static_cast<double>(sizes[best_a]);
    const double nb = static_cast<double>(sizes[best_b]);
    for (std::size_t c = 0; c < m; ++c) {
      if (!active[c] || c == best_a || c == best_b) continue;
      const double da = dist(best_a, c), db = dist(best_b, c);
      const double d = linkage == Linkage::average ? (na * da + nb * db) / (na + nb)
                                                   : std::max(da, db);
      dist(best_a, c) = dist(c, best_a) = d;
    }
    ids[best_a] = new_id;
    sizes[best_a] += sizes[best_b];
    active[best_b] = false;
  }
  return tree;
}

inline void validate_tree(const ClusterTree& tree) {
  const std::size_t m = tree.leaf_count;
  if (m == 0) fail(ErrorKind::invalid_argument, "tree has no leaves");
  if (tree.merges.size() != m - 1)
    fail(ErrorKind::invalid_argument, "tree must have leaf_count - 1 merges");
  std::vector<bool> used(2 * m - 1, false);
  for (std::size_t k = 0; k < tree.merges.size(); ++k) {
    const auto& mg = tree.merges[k];
    if (mg.id != m + k) fail(ErrorKind::invalid_argument, "merge ids must be sequential");
    for (auto child : {mg.left, mg.right}) {
      if (child >= mg.id || used[child])
        fail(ErrorKind::invalid_argument, "merge child invalid or reused");
      used[child] = true;
    }
    if (k > 0 && mg.distance < tree.merges[k - 1].distance)
      fail(ErrorKind::invalid_argument, "merge distances must be nondecreasing");
  }
}

/// Keeps merges with distance <= zeta; labels follow first leaf appearance.
inline ClusterAssignment cut(const ClusterTree& tree, double zeta) {
  if (!(zeta >= 0.0)) fail(ErrorKind::invalid_argument, "zeta must be nonnegative");
  validate_tree(tree);
  const std::size_t m = tree.leaf_count;
  std::vector<std::size_t> parent(2 * m - 1);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& mg : tree.merges) {
    if (mg.distance > zeta) continue;
    parent[find(mg.left)] = mg.id;
    parent[find(mg.right)] = mg.id;
  }

  ClusterAssignment out;
  out.zeta = zeta;
  out.labels.resize(m);
  std::vector<std::size_t> label_of_root(2 * m - 1, SIZE_MAX);
  for (std::size_t leaf = 0; leaf < m; ++leaf) {
    auto& label = label_of_root[find(leaf)];
    if (label == SIZE_MAX) label = out.k++;
    out.labels[leaf] = label;
  }
  return out;
}

/// Maps every field into [0, 1]; a constant field becomes all zeros.
inline void min_max_scale(Field& field) {
  if (field.empty()) return;
  const auto [lo, hi] = std::minmax_element(field.values().begin(), field.values().end());
  const double min = *lo, range = *hi - *lo;
  for (double& v : field.values()) v = range > 0.0 ? (v - min) / range : 0.0;
}

inline std::vector<Field> aggregate(std::span<const Field> fields,
                                    const ClusterAssignment& assignment) {
  if (fields.size() != assignment.labels.size())
    fail(ErrorKind::shape_mismatch, "map count differs from assignment length");
  if (fields.empty()) return {};
  for (const auto& f : fields)
    if (!f.same_shape(fields.front()))
      fail(ErrorKind::shape_mismatch, "upsampled fields differ in shape");

  std::vector<Field> out(assignment.k, Field(fields.front().rows(), fields.front().cols()));
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (assignment.labels[i] >= assignment.k)
      fail(ErrorKind::invalid_argument, "cluster label out of range");
    auto& dst = out[assignment.labels[i]].values();
    const auto& src = fields[i].values();
    for (std::size_t p = 0; p < src.size(); ++p) dst[p] += src[p];
  }
  for (auto& f : out) min_max_scale(f);
  return out;
}

inline std::vector<Field> aggregate(std::span<const RelevanceMap> maps,
                                    const ClusterAssignment& assignment) {
  std::vector<Field> fields;
  fields.reserve(maps.size());
  for (const auto& m : maps) {
    if (!m.upsampled) fail(ErrorKind::invalid_argument, "relevance map has no upsampled field");
    fields.push_back(*m.upsampled);
  }
  return aggregate(fields, assignment);
}

/// Per-pixel argmax over fields; ties go to the smallest cluster id.
inline LabelRaster assign_labels(std::span<const Field> fields) {
  if (fields.empty()) fail(ErrorKind::invalid_argument, "no aggregated fields to label");
  if (fields.size() >= kIgnoreLabel) fail(ErrorKind::invalid_argument, "too many clusters");
  for (const auto& f : fields)
    if (!f.same_shape(fields.front()))
      fail(ErrorKind::shape_mismatch, "aggregated fields differ in shape");
  LabelRaster raster{Grid<std::uint16_t>(fields.front().rows(), fields.front().cols())};
  for (std::size_t p = 0; p < raster.values.size(); ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < fields.size(); ++c)
      if (fields[c].values()[p] > fields[best].values()[p]) best = c;
    raster.values.values()[p] = static_cast<std::uint16_t>(best);
  }
  return raster;
}

// ---------------------------------------------------------------------------

struct SegmentOptions {
  DistanceMetric metric = DistanceMetric::cosine;
  Linkage linkage = Linkage::average;
  bool include_cls = false;
  bool skip_fix = true;
  UpsampleMode upsample = UpsampleMode::bilinear;
  bool normalize_rows = false;
  unsigned threads = 1;
};

struct Segmentation {
  LabelRaster raster;
  ClusterTree tree;
  ClusterAssignment assignment;
  std::vector<std::uint64_t> targets;  // full-axis index of each leaf
};

/// Full-axis indices of the maps that take part in segmentation.
inline std::vector<std::uint64_t> segmentation_targets(const TraceManifest& m, bool include_cls) {
  std::vector<std::uint64_t> targets;
  if (include_cls && m.has_cls) targets.push_back(0);
  for (std::uint64_t t = m.first_token(); t < m.full_tokens(); ++t) targets.push_back(t);
  return targets;
}

inline void require_layer(const TraceManifest& m, std::uint64_t layer) {
  if (layer != m.target_layer)
    fail(ErrorKind::invalid_argument,
         "trace holds gradients for layer " + std::to_string(m.target_layer) + ", not " +
             std::to_string(layer));
}

inline Segmentation segment(const Trace& trace, std::uint64_t layer, double zeta,
                            const SegmentOptions& options = {}) {
  const auto& m = trace.manifest;
  if (m.modality != Modality::vision)
    fail(ErrorKind::invalid_argument, "segmentation needs a vision trace");
  require_layer(m, layer);

  Segmentation seg;
  seg.targets = segmentation_targets(m, options.include_cls);
  for (auto t : seg.targets)
    if (!m.target_slot(t))
      fail(ErrorKind::invalid_argument,
           "trace lacks gradients for token " + std::to_string(t) +
               "; segmentation needs every patch token");

  RelevanceOptions ropt;
  ropt.apply_skip = options.skip_fix;
  ropt.upsample = options.upsample;
  ropt.normalize_rows = options.normalize_rows;
  ropt.threads = options.threads;
  const auto maps = relevance_maps(trace, seg.targets, ropt);

  std::vector<std::vector<double>> vectors;
  vectors.reserve(maps.size());
  for (const auto& map : maps) vectors.push_back(map.raw);
  seg.tree = cluster(vectors, options.metric, options.linkage);
  seg.assignment = cut(seg.tree, zeta);
  const auto fields = aggregate(std::span<const RelevanceMap>(maps), seg.assignment);
  seg.raster = assign_labels(fields);
  return seg;
}

// ---------------------------------------------------------------------------
// `.ulr`: "ULBL" | u32 version = 1 | u32 width | u32 height | u16 labels,
// all little-endian, row-major.

inline std::vector<unsigned char> encode_raster(const LabelRaster& raster) {
  std::vector<unsigned char> out = {'U', 'L', 'B', 'L'};
  detail::put_le(out, 1, 4);
  detail::put_le(out, raster.width(), 4);
  detail::put_le(out, raster.height(), 4);
  for (auto v : raster.values.values()) detail::put_le(out, v, 2);
  return out;
}

inline LabelRaster decode_raster(const std::vector<unsigned char>& bytes,
                                 const std::string& name = {}) {
  if (bytes.size() < 16) fail(ErrorKind::shape_mismatch, "truncated raster header", name);
  if (std::memcmp(bytes.data(), "ULBL", 4) != 0)
    fail(ErrorKind::bad_magic, "expected magic ULBL", name);
  const auto version = detail::get_le(bytes.data() + 4, 4);
  if (version != 1)
    fail(ErrorKind::version_mismatch, "unsupported version " + std::to_string(version), name);
  const std::size_t width = detail::get_le(bytes.data() + 8, 4);
  const std::size_t height = detail::get_le(bytes.data() + 12, 4);
  if (bytes.size() - 16 != width * height * 2)
    fail(ErrorKind::shape_mismatch,
         "payload has " + std::to_string(bytes.size() - 16) + " bytes but " +
             std::to_string(width) + "x" + std::to_string(height) + " labels need " +
             std::to_string(width * height * 2),
         name);
  LabelRaster raster{Grid<std::uint16_t>(height, width)};
  for (std::size_t i = 0; i < width * height; ++i)
    raster.values.values()[i] = static_cast<std::uint16_t>(detail::get_le(bytes.data() + 16 + 2 * i, 2));
  return raster;
}

inline void write_raster(const std::filesystem::path& path, const LabelRaster& raster) {
  detail::write_file_bytes(path, encode_raster(raster));
}

inline LabelRaster read_raster(const std::filesystem::path& path) {
  return decode_raster(detail::read_file_bytes(path), path.string());
}

/// Binary PGM (P5). Labels spread over 0..254; ignore pixels are 255.
inline std::vector<unsigned char> encode_pgm(const LabelRaster& raster) {
  std::uint16_t max_label = 0;
  for (auto v : raster.values.values())
    if (v != raster.ignore_value) max_label = std::max(max_label, v);
  const std::string header = "P5\n" + std::to_string(raster.width()) + " " +
                             std::to_string(raster.height()) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  for (auto v : raster.values.values()) {
    if (v == raster.ignore_value) out.push_back(255);
    else out.push_back(max_label == 0 ? 0 : static_cast<unsigned char>(v * 254u / max_label));
  }
  return out;
}

inline std::vector<unsigned char> encode_pgm(const BinaryMask& mask) {
  const std::string header = "P5\n" + std::to_string(mask.values.cols()) + " " +
                             std::to_string(mask.values.rows()) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  for (auto v : mask.values.values()) out.push_back(v ? 255 : 0);
  return out;
}

}  // namespace ultra
