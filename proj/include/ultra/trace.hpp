#pragma once

// Interpretation traces: the exported attention probabilities and attention
// gradients of one input, plus the metadata needed to interpret them.
//
// A trace directory holds `manifest.json` and one `.ten` file per tensor.
// Token axes are "full" axes: with a CLS (or BOS) token it sits at index 0
// and the n regular tokens occupy 1..n.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "ultra/error.hpp"
#include "ultra/tensor.hpp"

namespace ultra {

enum class Modality { vision, text };

inline constexpr int kTraceFormatVersion = 1;
inline constexpr double kAttentionRowTolerance = 1e-4;
inline constexpr const char* kAttentionTensor = "attention";
inline constexpr const char* kGradientTensor = "gradients";

struct TensorEntry {
  std::string name;
  std::string filename;
  Shape shape;

  friend bool operator==(const TensorEntry&, const TensorEntry&) = default;
};

struct TraceManifest {
  std::string model_id;
  Modality modality = Modality::vision;
  std::uint64_t n_tokens = 0;
  bool has_cls = true;
  // vision only
  std::uint64_t grid_h = 0, grid_w = 0;
  std::uint64_t image_h = 0, image_w = 0;
  std::uint64_t num_layers = 0;
  std::uint64_t num_heads = 0;
  std::uint64_t target_layer = 0;
  std::vector<std::uint64_t> target_token_indices;
  // text only
  std::uint64_t context_len = 0, summary_len = 0;
  std::vector<TensorEntry> tensors;

  // Optional text extras. `summary_start` is the full-axis index of the first
  // summary token; when absent the summary directly follows the context.
  std::optional<std::uint64_t> summary_start;
  std::vector<std::string> token_surfaces;

  std::uint64_t full_tokens() const noexcept { return n_tokens + (has_cls ? 1 : 0); }
  std::uint64_t first_token() const noexcept { return has_cls ? 1 : 0; }
  std::uint64_t resolved_summary_start() const noexcept {
    return summary_start.value_or(first_token() + context_len);
  }

  /// Position of a full-axis target in the target list, if present.
  std::optional<std::size_t> target_slot(std::uint64_t full_index) const {
    for (std::size_t t = 0; t < target_token_indices.size(); ++t)
      if (target_token_indices[t] == full_index) return t;
    return std::nullopt;
  }

  friend bool operator==(const TraceManifest&, const TraceManifest&) = default;
};

/// Attention [L, H, N, N] and gradients [T, target_layer - 1, H, N, N], where
/// N is the full token count.
struct Trace {
  TraceManifest manifest;
  Tensor attention;
  Tensor gradients;

  friend bool operator==(const Trace&, const Trace&) = default;
};

inline Shape expected_attention_shape(const TraceManifest& m) {
  return {m.num_layers, m.num_heads, m.full_tokens(), m.full_tokens()};
}

inline Shape expected_gradient_shape(const TraceManifest& m) {
  const std::uint64_t depth = m.target_layer > 0 ? m.target_layer - 1 : 0;
  return {m.target_token_indices.size(), depth, m.num_heads, m.full_tokens(),
          m.full_tokens()};
}

/// Fills `manifest.tensors` with the canonical entries for the given stacks.
inline void set_default_tensor_entries(Trace& trace) {
  trace.manifest.tensors = {
      {kAttentionTensor, "attention.ten", trace.attention.shape},
      {kGradientTensor, "gradients.ten", trace.gradients.shape},
  };
}

// ---------------------------------------------------------------------------
// Validation

inline void validate_manifest(const TraceManifest& m) {
  auto bad = [](const std::string& msg) { fail(ErrorKind::invalid_manifest, msg); };
  if (m.n_tokens == 0) bad("n_tokens must be positive");
  if (m.num_layers == 0) bad("num_layers must be positive");
  if (m.num_heads == 0) bad("num_heads must be positive");
  if (m.target_layer < 2 || m.target_layer > m.num_layers)
    bad("target_layer " + std::to_string(m.target_layer) + " outside [2, " +
        std::to_string(m.num_layers) + "]");
  for (auto t : m.target_token_indices)
    if (t >= m.full_tokens()) bad("target token index " + std::to_string(t) + " out of range");
  if (m.modality == Modality::vision) {
    if (m.grid_h == 0 || m.grid_w == 0) bad("vision trace needs positive grid dims");
    if (m.grid_h * m.grid_w != m.n_tokens) bad("grid_h * grid_w must equal n_tokens");
    if (m.image_h < m.grid_h || m.image_w < m.grid_w)
      bad("image dims must be at least the grid dims");
  } else {
    if (m.context_len + m.summary_len > m.n_tokens)
      bad("context_len + summary_len exceeds n_tokens");
    if (m.summary_len > 0 &&
        m.resolved_summary_start() + m.summary_len > m.full_tokens())
      bad("summary range runs past the token axis");
    if (!m.token_surfaces.empty() && m.token_surfaces.size() != m.n_tokens)
      bad("token_surfaces must list exactly n_tokens entries");
  }
}

inline void validate_attention(const TraceManifest& m, const Tensor& attn,
                               const std::string& file = {}) {
  if (attn.shape != expected_attention_shape(m))
    fail(ErrorKind::shape_mismatch,
         "attention shape " + shape_string(attn.shape) + " expected " +
             shape_string(expected_attention_shape(m)),
         file);
  const std::size_t n = m.full_tokens();
  for (std::size_t row = 0; row < attn.data.size() / n; ++row) {
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const float a = attn.data[row * n + j];
      if (!std::isfinite(a))
        fail(ErrorKind::nan_payload, "non-finite attention entry", file);
      if (a < 0.0f || a > 1.0f)
        fail(ErrorKind::invariant_violation, "attention entry outside [0, 1]", file);
      sum += a;
    }
    if (std::abs(sum - 1.0) > kAttentionRowTolerance) {
      std::ostringstream msg;
      msg << "attention row " << row << " sums to " << sum;
      fail(ErrorKind::invariant_violation, msg.str(), file);
    }
  }
}

inline void validate_gradients(const TraceManifest& m, const Tensor& grad,
                               const std::string& file = {}) {
  if (grad.shape != expected_gradient_shape(m))
    fail(ErrorKind::shape_mismatch,
         "gradient shape " + shape_string(grad.shape) + " expected " +
             shape_string(expected_gradient_shape(m)),
         file);
  for (float g : grad.data)
    if (!std::isfinite(g)) fail(ErrorKind::nan_payload, "non-finite gradient entry", file);
}

inline void validate_trace(const Trace& trace) {
  validate_manifest(trace.manifest);
  validate_attention(trace.manifest, trace.attention);
  validate_gradients(trace.manifest, trace.gradients);
}

// ---------------------------------------------------------------------------
// manifest.json

inline nlohmann::ordered_json manifest_to_json(const TraceManifest& m) {
  nlohmann::ordered_json j;
  j["format_version"] = kTraceFormatVersion;
  j["model_id"] = m.model_id;
  j["modality"] = m.modality == Modality::vision ? "vision" : "text";
  j["n_tokens"] = m.n_tokens;
  j["has_cls"] = m.has_cls;
  j["grid_h"] = m.grid_h;
  j["grid_w"] = m.grid_w;
  j["image_h"] = m.image_h;
  j["image_w"] = m.image_w;
  j["num_layers"] = m.num_layers;
  j["num_heads"] = m.num_heads;
  j["target_layer"] = m.target_layer;
  j["target_token_indices"] = m.target_token_indices;
  j["context_len"] = m.context_len;
  j["summary_len"] = m.summary_len;
  auto tensors = nlohmann::ordered_json::array();
  for (const auto& t : m.tensors)
    tensors.push_back({{"name", t.name}, {"filename", t.filename}, {"shape", t.shape}});
  j["tensors"] = std::move(tensors);
  if (m.summary_start) j["summary_start"] = *m.summary_start;
  if (!m.token_surfaces.empty()) j["token_surfaces"] = m.token_surfaces;
  return j;
}

inline TraceManifest manifest_from_json(const nlohmann::json& j, const std::string& file = {}) {
  try {
    if (!j.contains("format_version"))
      fail(ErrorKind::invalid_manifest, "missing format_version", file);
    if (j.at("format_version").get<int>() != kTraceFormatVersion)
      fail(ErrorKind::version_mismatch,
           "unsupported format_version " + j.at("format_version").dump(), file);
    TraceManifest m;
    m.model_id = j.at("model_id").get<std::string>();
    const auto modality = j.at("modality").get<std::string>();
    if (modality == "vision") m.modality = Modality::vision;
    else if (modality == "text") m.modality = Modality::text;
    else fail(ErrorKind::invalid_manifest, "unknown modality '" + modality + "'", file);
    m.n_tokens = j.at("n_tokens").get<std::uint64_t>();
    m.has_cls = j.at("has_cls").get<bool>();
    m.grid_h = j.at("grid_h").get<std::uint64_t>();
    m.grid_w = j.at("grid_w").get<std::uint64_t>();
    m.image_h = j.at("image_h").get<std::uint64_t>();
    m.image_w = j.at("image_w").get<std::uint64_t>();
    m.num_layers = j.at("num_layers").get<std::uint64_t>();
    m.num_heads = j.at("num_heads").get<std::uint64_t>();
    m.target_layer = j.at("target_layer").get<std::uint64_t>();
    m.target_token_indices = j.at("target_token_indices").get<std::vector<std::uint64_t>>();
    m.context_len = j.at("context_len").get<std::uint64_t>();
    m.summary_len = j.at("summary_len").get<std::uint64_t>();
    for (const auto& t : j.at("tensors"))
      m.tensors.push_back({t.at("name").get<std::string>(), t.at("filename").get<std::string>(),
                           t.at("shape").get<Shape>()});
    if (j.contains("summary_start")) m.summary_start = j.at("summary_start").get<std::uint64_t>();
    if (j.contains("token_surfaces"))
      m.token_surfaces = j.at("token_surfaces").get<std::vector<std::string>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_manifest, e.what(), file);
  }
}

// ---------------------------------------------------------------------------
// Directory I/O

namespace detail {

inline const TensorEntry& find_entry(const TraceManifest& m, const std::string& name,
                                     const std::string& file) {
  for (const auto& t : m.tensors)
    if (t.name == name) return t;
  fail(ErrorKind::invalid_manifest, "no tensor entry named '" + name + "'", file);
}

inline void check_entry_names(const TraceManifest& m, const std::string& file) {
  for (const auto& t : m.tensors) {
    const std::filesystem::path p(t.filename);
    if (t.filename.empty() || p.has_parent_path() || p.is_absolute())
      fail(ErrorKind::invalid_manifest, "tensor filename '" + t.filename + "' must be a bare name",
           file);
  }
}

}  // namespace detail

/// Validates everything, then writes the tensors followed by manifest.json.
/// Nothing is written when validation fails.
inline void write_trace(const Trace& input, const std::filesystem::path& dir) {
  Trace trace = input;
  if (trace.manifest.tensors.empty()) set_default_tensor_entries(trace);
  validate_trace(trace);
  detail::check_entry_names(trace.manifest, {});
  const auto& attn_entry = detail::find_entry(trace.manifest, kAttentionTensor, {});
  const auto& grad_entry = detail::find_entry(trace.manifest, kGradientTensor, {});
  if (attn_entry.shape != trace.attention.shape || grad_entry.shape != trace.gradients.shape)
    fail(ErrorKind::shape_mismatch, "manifest tensor entries disagree with tensor shapes");
  if (attn_entry.filename == grad_entry.filename || attn_entry.filename == "manifest.json" ||
      grad_entry.filename == "manifest.json")
    fail(ErrorKind::invalid_manifest, "tensor filenames must be distinct");

  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create directory: " + ec.message(), dir.string());
  write_tensor(dir / attn_entry.filename, trace.attention);
  write_tensor(dir / grad_entry.filename, trace.gradients);

  const auto manifest_path = dir / "manifest.json";
  std::ofstream out(manifest_path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open for writing", manifest_path.string());
  out << manifest_to_json(trace.manifest).dump(2) << '\n';
  if (!out) fail(ErrorKind::io, "write failed", manifest_path.string());
}

inline TraceManifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  const auto bytes = detail::read_file_bytes(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_manifest, e.what(), path.string());
  }
  auto m = manifest_from_json(j, path.string());
  try {
    validate_manifest(m);
  } catch (const Error& e) {
    fail(e.kind(), e.message(), path.string());
  }
  detail::check_entry_names(m, path.string());
  return m;
}

/// Reads and fully re-validates a trace directory. Errors name the offending file.
inline Trace read_trace(const std::filesystem::path& dir) {
  Trace trace;
  trace.manifest = read_manifest(dir);
  const auto manifest_path = (dir / "manifest.json").string();

  auto load = [&](const char* name) {
    const auto& entry = detail::find_entry(trace.manifest, name, manifest_path);
    const auto path = dir / entry.filename;
    Tensor t = read_tensor(path);
    if (t.shape != entry.shape)
      fail(ErrorKind::shape_mismatch,
           "file shape " + shape_string(t.shape) + " but manifest declares " +
               shape_string(entry.shape),
           path.string());
    return std::pair{std::move(t), path.string()};
  };
  auto [attn, attn_file] = load(kAttentionTensor);
  auto [grad, grad_file] = load(kGradientTensor);
  validate_attention(trace.manifest, attn, attn_file);
  validate_gradients(trace.manifest, grad, grad_file);
  trace.attention = std::move(attn);
  trace.gradients = std::move(grad);
  return trace;
}

}  // namespace ultra
