#pragma once

// `ultra` command-line driver. run() is separate from main() so tests can
// call it in-process.
//
// Exit codes: 0 ok, 1 I/O failure, 2 usage error, 3 invalid trace or
// ground truth, 4 metric failure.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ultra/ultra.hpp"

namespace ultra::cli {

namespace fs = std::filesystem;

inline constexpr int kExitIo = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitInvalidInput = 3;
inline constexpr int kExitMetric = 4;

struct RunConfig {
  std::string command;
  std::vector<std::string> traces;
  std::optional<std::uint64_t> layer;
  double zeta = kDefaultZeta;
  double tau = kDefaultTau;
  std::string metric = "cosine";
  std::string linkage = "average";
  std::string matching = "hungarian";
  std::string out;
  unsigned threads = 1;
  bool include_cls = false;
  bool no_skip_fix = false;
  std::string upsample = "bilinear";
  std::string format;
  std::string gt;
  std::string list;
  std::optional<std::uint64_t> token;
  std::string layers;
  std::string maps;
};

/// An error with the exit code it maps to.
struct Failure {
  int code;
  std::string kind;
  std::string file;
  std::string message;
};

class Logger {
 public:
  enum Level { quiet = 0, info = 1, debug = 2 };

  explicit Logger(std::ostream& sink) : sink_(sink) {
    const char* env = std::getenv("ULTRA_LOG");
    const std::string v = env ? env : "";
    if (v == "info" || v == "1") level_ = info;
    else if (v == "debug" || v == "2") level_ = debug;
  }

  void log(Level level, const std::string& msg) const {
    if (level <= level_) sink_ << "[ultra] " << msg << '\n';
  }

 private:
  std::ostream& sink_;
  Level level_ = quiet;
};

namespace detail {

[[noreturn]] inline void fail_with(int code, const Error& e) {
  throw Failure{code, std::string(to_string(e.kind())), e.file(), e.message()};
}

[[noreturn]] inline void usage(const std::string& message) {
  throw Failure{kExitUsage, "usage", {}, message};
}

inline Trace load_trace(const fs::path& dir) {
  try {
    return read_trace(dir);
  } catch (const Error& e) {
    fail_with(kExitInvalidInput, e);
  }
}

inline LabelRaster load_raster(const fs::path& path) {
  try {
    return read_raster(path);
  } catch (const Error& e) {
    fail_with(kExitInvalidInput, e);
  }
}

inline void write_bytes(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Failure{kExitIo, "io", path.string(), "cannot open for writing"};
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Failure{kExitIo, "io", path.string(), "write failed"};
}

inline void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes) {
  write_bytes(path, std::string(bytes.begin(), bytes.end()));
}

inline fs::path sibling(const fs::path& out, const std::string& extension) {
  fs::path p = out;
  return p.replace_extension(extension);
}

inline DistanceMetric parse_metric(const std::string& s) {
  return s == "euclidean" ? DistanceMetric::euclidean : DistanceMetric::cosine;
}
inline Linkage parse_linkage(const std::string& s) {
  return s == "complete" ? Linkage::complete : Linkage::average;
}
inline MatchMode parse_matching(const std::string& s) {
  return s == "majority" ? MatchMode::majority : MatchMode::hungarian;
}

inline SegmentOptions segment_options(const RunConfig& cfg, unsigned threads) {
  SegmentOptions o;
  o.metric = parse_metric(cfg.metric);
  o.linkage = parse_linkage(cfg.linkage);
  o.include_cls = cfg.include_cls;
  o.skip_fix = !cfg.no_skip_fix;
  o.upsample = cfg.upsample == "cubic" ? UpsampleMode::cubic : UpsampleMode::bilinear;
  o.threads = threads;
  return o;
}

inline bool is_trace_dir(const fs::path& p) { return fs::is_regular_file(p / "manifest.json"); }

inline std::vector<fs::path> expand_traces(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    const fs::path p(in);
    if (is_trace_dir(p)) {
      out.push_back(p);
      continue;
    }
    if (!fs::is_directory(p))
      throw Failure{kExitInvalidInput, "missing_file", p.string(), "not a trace directory"};
    std::vector<fs::path> children;
    for (const auto& entry : fs::directory_iterator(p))
      if (entry.is_directory() && is_trace_dir(entry.path())) children.push_back(entry.path());
    std::sort(children.begin(), children.end());
    if (children.empty())
      throw Failure{kExitInvalidInput, "missing_file", p.string(), "no trace directories found"};
    out.insert(out.end(), children.begin(), children.end());
  }
  return out;
}

struct Job {
  std::string stem;
  fs::path trace;
  fs::path gt;
};

inline std::string stem_of(const fs::path& dir) {
  auto s = dir.filename().string();
  return s.empty() ? dir.parent_path().filename().string() : s;
}

/// Trace/ground-truth pairs, either from a list file ("trace gt" per line,
/// relative to the list) or by matching trace directory names to <gt>/<stem>.ulr.
inline std::vector<Job> resolve_jobs(const RunConfig& cfg) {
  std::vector<Job> jobs;
  if (!cfg.list.empty()) {
    std::ifstream in(cfg.list);
    if (!in) throw Failure{kExitInvalidInput, "missing_file", cfg.list, "cannot read list file"};
    const fs::path base = fs::path(cfg.list).parent_path();
    std::string line;
    while (std::getline(in, line)) {
      std::istringstream fields(line);
      std::string trace, gt;
      if (!(fields >> trace) || trace.front() == '#') continue;
      if (!(fields >> gt)) usage("list line needs a trace and a ground truth: " + line);
      const fs::path tp = fs::path(trace).is_absolute() ? fs::path(trace) : base / trace;
      const fs::path gp = fs::path(gt).is_absolute() ? fs::path(gt) : base / gt;
      jobs.push_back({stem_of(tp), tp, gp});
    }
    if (jobs.empty()) usage("list file has no entries");
    return jobs;
  }
  if (cfg.traces.empty()) usage("--trace or --list is required");
  if (cfg.gt.empty()) usage("--gt is required");
  const auto traces = expand_traces(cfg.traces);
  const fs::path gt(cfg.gt);
  const bool gt_dir = fs::is_directory(gt);
  if (!gt_dir && traces.size() > 1) usage("--gt must be a directory when evaluating several traces");
  for (const auto& t : traces) {
    const auto stem = stem_of(t);
    jobs.push_back({stem, t, gt_dir ? gt / (stem + ".ulr") : gt});
  }
  return jobs;
}

inline std::uint64_t resolve_layer(const RunConfig& cfg, const TraceManifest& m) {
  if (!cfg.layer) return m.target_layer;
  if (*cfg.layer != m.target_layer)
    usage("--layer " + std::to_string(*cfg.layer) + " but trace holds gradients for layer " +
          std::to_string(m.target_layer));
  return *cfg.layer;
}

/// Runs segmentation + scoring over every job. Images run in parallel; each
/// image's segmentation is single-threaded.
inline std::vector<std::pair<LabelRaster, LabelRaster>> segment_jobs(const RunConfig& cfg,
                                                                     const std::vector<Job>& jobs,
                                                                     const Logger& log) {
  std::vector<std::pair<LabelRaster, LabelRaster>> out(jobs.size());
  const auto options = segment_options(cfg, 1);
  parallel_for(jobs.size(), cfg.threads, [&](std::size_t i) {
    const Trace trace = load_trace(jobs[i].trace);
    LabelRaster gt = load_raster(jobs[i].gt);
    const auto layer = resolve_layer(cfg, trace.manifest);
    Segmentation seg;
    try {
      seg = segment(trace, layer, cfg.zeta, options);
    } catch (const Error& e) {
      fail_with(e.kind() == ErrorKind::metric_failure ? kExitMetric : kExitUsage, e);
    }
    if (!seg.raster.values.same_shape(gt.values))
      throw Failure{kExitInvalidInput, "shape_mismatch", jobs[i].gt.string(),
                    "ground truth does not match image size"};
    out[i] = {std::move(seg.raster), std::move(gt)};
  });
  log.log(Logger::info, "segmented " + std::to_string(jobs.size()) + " image(s)");
  return out;
}

inline EvalResult score_jobs(const std::vector<std::pair<LabelRaster, LabelRaster>>& pairs,
                             MatchMode mode) {
  try {
    std::vector<ImageScore> images;
    images.reserve(pairs.size());
    for (const auto& [pred, gt] : pairs) images.push_back(score_image(pred, gt, mode));
    return summarize(std::move(images));
  } catch (const Error& e) {
    fail_with(kExitMetric, e);
  }
}

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_validate(const RunConfig& cfg, std::ostream& out) {
  if (cfg.traces.empty()) usage("--trace is required");
  for (const auto& t : cfg.traces) {
    const Trace trace = load_trace(t);
    const auto& m = trace.manifest;
    out << "ok trace=" << t << " model_id=" << m.model_id
        << " modality=" << (m.modality == Modality::vision ? "vision" : "text")
        << " n_tokens=" << m.n_tokens << " has_cls=" << (m.has_cls ? 1 : 0)
        << " layers=" << m.num_layers << " heads=" << m.num_heads
        << " target_layer=" << m.target_layer << " targets=" << m.target_token_indices.size()
        << '\n';
  }
  return 0;
}

inline int cmd_segment(const RunConfig& cfg, std::ostream& out, const Logger& log) {
  if (cfg.traces.size() != 1) usage("segment takes exactly one --trace");
  if (cfg.out.empty()) usage("--out is required");
  const auto format = cfg.format.empty() ? std::string("ulr") : cfg.format;
  if (format != "ulr" && format != "pgm" && format != "csv")
    usage("segment --format must be ulr, pgm or csv");

  const Trace trace = load_trace(cfg.traces.front());
  const auto layer = resolve_layer(cfg, trace.manifest);
  const auto options = segment_options(cfg, cfg.threads);
  Segmentation seg;
  std::vector<RelevanceMap> maps;
  try {
    seg = segment(trace, layer, cfg.zeta, options);
    if (!cfg.maps.empty()) {
      RelevanceOptions ropt;
      ropt.apply_skip = options.skip_fix;
      ropt.threads = cfg.threads;
      maps = relevance_maps(trace, seg.targets, ropt);
    }
  } catch (const Error& e) {
    fail_with(kExitUsage, e);
  }
  log.log(Logger::info, "k=" + std::to_string(seg.assignment.k));

  const fs::path path(cfg.out);
  if (format == "ulr") write_bytes(path, encode_raster(seg.raster));
  else if (format == "pgm") write_bytes(path, encode_pgm(seg.raster));
  else write_bytes(path, raster_csv(seg.raster));
  write_bytes(sibling(path, ".tree.json"), tree_json(seg).dump(2) + "\n");
  if (!cfg.maps.empty()) {
    const fs::path mp(cfg.maps);
    if (mp.extension() == ".ten") write_bytes(mp, encode_tensor(relevance_tensor(maps)));
    else write_bytes(mp, relevance_csv(maps));
  }
  out << "k=" << seg.assignment.k << '\n';
  return 0;
}

inline int cmd_select(const RunConfig& cfg, std::ostream& out) {
  if (cfg.traces.size() != 1) usage("select takes exactly one --trace");
  if (cfg.out.empty()) usage("--out is required");
  if (!cfg.token) usage("--token is required");
  const auto format = cfg.format.empty() ? std::string("pgm") : cfg.format;
  if (format != "ulr" && format != "pgm" && format != "csv")
    usage("select --format must be ulr, pgm or csv");

  const Trace trace = load_trace(cfg.traces.front());
  resolve_layer(cfg, trace.manifest);
  BinaryMask mask;
  try {
    RelevanceOptions ropt;
    ropt.apply_skip = !cfg.no_skip_fix;
    ropt.upsample = cfg.upsample == "cubic" ? UpsampleMode::cubic : UpsampleMode::bilinear;
    mask = binarize(relevance_map(trace, *cfg.token, ropt), cfg.tau);
  } catch (const Error& e) {
    fail_with(kExitUsage, e);
  }
  const fs::path path(cfg.out);
  if (format == "pgm") {
    write_bytes(path, encode_pgm(mask));
  } else if (format == "csv") {
    write_bytes(path, mask_csv(mask));
  } else {
    LabelRaster raster{Grid<std::uint16_t>(mask.values.rows(), mask.values.cols())};
    std::copy(mask.values.values().begin(), mask.values.values().end(),
              raster.values.values().begin());
    write_bytes(path, encode_raster(raster));
  }
  std::size_t on = 0;
  for (auto v : mask.values.values()) on += v;
  out << "selected=" << on << '\n';
  return 0;
}

inline int cmd_itiou(const RunConfig& cfg, std::ostream& out, const Logger& log) {
  const auto jobs = resolve_jobs(cfg);
  const auto options = segment_options(cfg, 1);
  std::vector<double> scores(jobs.size());
  parallel_for(jobs.size(), cfg.threads, [&](std::size_t i) {
    const Trace trace = load_trace(jobs[i].trace);
    const LabelRaster gt = load_raster(jobs[i].gt);
    const auto layer = resolve_layer(cfg, trace.manifest);
    try {
      scores[i] = itiou(trace, gt, layer, cfg.tau, options);
    } catch (const Error& e) {
      fail_with(e.kind() == ErrorKind::invalid_argument ? kExitUsage : kExitMetric, e);
    }
  });
  log.log(Logger::info, "scored " + std::to_string(jobs.size()) + " image(s)");
  const double mean = compensated_mean(scores);

  std::string csv = "image,itiou\n";
  for (std::size_t i = 0; i < jobs.size(); ++i)
    csv += csv_field(jobs[i].stem) + "," + format_g9(scores[i]) + "\n";
  csv += "mean," + format_g9(mean) + "\n";
  nlohmann::ordered_json summary;
  summary["itiou"] = round_g9(mean);
  summary["tau"] = round_g9(cfg.tau);
  summary["images"] = jobs.size();
  if (cfg.out.empty()) {
    out << csv;
  } else {
    write_bytes(cfg.out, csv);
    write_bytes(sibling(cfg.out, ".json"), summary.dump(2) + "\n");
  }
  return 0;
}

inline nlohmann::ordered_json headline(const EvalResult& r) {
  return {{"u_accuracy", round_g9(r.u_accuracy)}, {"u_miou", round_g9(r.u_miou)}};
}

inline int cmd_eval(const RunConfig& cfg, std::ostream& out, const Logger& log) {
  const auto jobs = resolve_jobs(cfg);
  const auto pairs = segment_jobs(cfg, jobs, log);
  const auto mode = parse_matching(cfg.matching);
  const auto primary = score_jobs(pairs, mode);
  const auto hungarian = mode == MatchMode::hungarian ? primary : score_jobs(pairs, MatchMode::hungarian);
  const auto majority = mode == MatchMode::majority ? primary : score_jobs(pairs, MatchMode::majority);

  std::string csv = "image,accuracy,miou,k_pred,k_gt\n";
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const auto& s = primary.images[i];
    csv += csv_field(jobs[i].stem) + "," + format_g9(s.accuracy) + "," + format_g9(s.miou) + "," +
           std::to_string(s.k_pred) + "," + std::to_string(s.k_gt) + "\n";
  }
  csv += "dataset," + format_g9(primary.u_accuracy) + "," + format_g9(primary.u_miou) + ",,\n";

  nlohmann::ordered_json summary = headline(primary);
  summary["matching"] = cfg.matching;
  summary["zeta"] = round_g9(cfg.zeta);
  summary["images"] = jobs.size();
  summary["hungarian"] = headline(hungarian);
  summary["majority"] = headline(majority);

  if (cfg.out.empty()) {
    out << csv;
  } else {
    write_bytes(cfg.out, csv);
    write_bytes(sibling(cfg.out, ".json"), summary.dump(2) + "\n");
  }
  return 0;
}

/// Layer directories are <root>/layer_<l>/, each an eval batch directory.
inline int cmd_layer_sweep(const RunConfig& cfg, std::ostream& out, const Logger& log) {
  if (cfg.traces.size() != 1) usage("layer-sweep takes one --trace root directory");
  const fs::path root(cfg.traces.front());
  std::vector<std::uint64_t> layers;
  if (!cfg.layers.empty()) {
    const auto colon = cfg.layers.find(':');
    try {
      const std::uint64_t lo = std::stoull(cfg.layers.substr(0, colon));
      const std::uint64_t hi =
          colon == std::string::npos ? lo : std::stoull(cfg.layers.substr(colon + 1));
      if (hi < lo) usage("--layers range is empty");
      for (auto l = lo; l <= hi; ++l) layers.push_back(l);
    } catch (const std::logic_error&) {
      usage("--layers must look like A:B");
    }
  } else {
    if (!fs::is_directory(root))
      throw Failure{kExitInvalidInput, "missing_file", root.string(), "not a directory"};
    for (const auto& entry : fs::directory_iterator(root)) {
      const auto name = entry.path().filename().string();
      if (entry.is_directory() && name.rfind("layer_", 0) == 0) {
        try {
          layers.push_back(std::stoull(name.substr(6)));
        } catch (const std::logic_error&) {
        }
      }
    }
    std::sort(layers.begin(), layers.end());
    if (layers.empty())
      throw Failure{kExitInvalidInput, "missing_file", root.string(), "no layer_<l> directories"};
  }

  std::string csv = "layer,u_accuracy,u_miou\n";
  for (auto layer : layers) {
    RunConfig sub = cfg;
    sub.traces = {(root / ("layer_" + std::to_string(layer))).string()};
    sub.layer = layer;
    sub.list.clear();
    const auto jobs = resolve_jobs(sub);
    const auto result = score_jobs(segment_jobs(sub, jobs, log), parse_matching(cfg.matching));
    csv += std::to_string(layer) + "," + format_g9(result.u_accuracy) + "," +
           format_g9(result.u_miou) + "\n";
    log.log(Logger::info, "layer " + std::to_string(layer) + " done");
  }
  if (cfg.out.empty()) out << csv;
  else write_bytes(cfg.out, csv);
  return 0;
}

inline int cmd_text_explain(const RunConfig& cfg, std::ostream& out) {
  if (cfg.traces.size() != 1) usage("text-explain takes exactly one --trace");
  if (!cfg.layer) usage("--layer is required for text-explain");
  if (cfg.out.empty()) usage("--out is required");
  const auto format = cfg.format.empty() ? std::string("html") : cfg.format;
  if (format != "html" && format != "ansi" && format != "csv")
    usage("text-explain --format must be html, ansi or csv");

  const Trace trace = load_trace(cfg.traces.front());
  TokenContribution contrib;
  try {
    contrib = token_contributions(trace, *cfg.layer, cfg.threads);
  } catch (const Error& e) {
    fail_with(kExitUsage, e);
  }
  write_bytes(cfg.out, contribution_csv(contrib));
  if (format != "csv")
    write_bytes(sibling(cfg.out, ".html"), render_heatmap(contrib, HeatmapFormat::html));
  if (format == "ansi") out << render_heatmap(contrib, HeatmapFormat::ansi);
  return 0;
}

inline std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

inline void report(std::ostream& err, const Failure& f) {
  err << "error: code=" << f.code << " kind=" << f.kind;
  if (!f.file.empty()) err << " file=" << one_line(f.file);
  err << " message=" << one_line(f.message) << '\n';
}

inline void add_common(CLI::App* sub, RunConfig& cfg) {
  sub->add_option("--trace", cfg.traces, "Trace directory (or a directory of trace directories)");
  sub->add_option("--layer", cfg.layer, "Target layer; must match the trace");
  sub->add_option("--zeta", cfg.zeta, "Cluster cutoff distance")->check(CLI::NonNegativeNumber);
  sub->add_option("--tau", cfg.tau, "Binary mask threshold");
  sub->add_option("--metric", cfg.metric, "Clustering distance")
      ->check(CLI::IsMember({"cosine", "euclidean"}));
  sub->add_option("--linkage", cfg.linkage, "Clustering linkage")
      ->check(CLI::IsMember({"average", "complete"}));
  sub->add_option("--matching", cfg.matching, "Cluster-to-class matching")
      ->check(CLI::IsMember({"hungarian", "majority"}));
  sub->add_option("--out", cfg.out, "Output path");
  sub->add_option("--threads", cfg.threads, "Worker threads")->check(CLI::Range(1u, 1024u));
  sub->add_flag("--include-cls", cfg.include_cls, "Cluster the CLS map too");
  sub->add_flag("--no-skip-fix", cfg.no_skip_fix, "Keep the self entry of each map");
  sub->add_option("--upsample", cfg.upsample, "Interpolation")
      ->check(CLI::IsMember({"bilinear", "cubic"}));
  sub->add_option("--format", cfg.format, "Output format")
      ->check(CLI::IsMember({"ulr", "pgm", "csv", "html", "ansi"}));
  sub->add_option("--gt", cfg.gt, "Ground-truth .ulr file or directory");
  sub->add_option("--list", cfg.list, "File of 'trace gt' lines");
  sub->add_option("--token", cfg.token, "Full-axis token index (CLS = 0)");
  sub->add_option("--layers", cfg.layers, "Layer range A:B");
  sub->add_option("--maps", cfg.maps, "Also export relevance maps (.csv or .ten)");
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  RunConfig cfg;
  CLI::App app{"Latent-token relevance maps, segmentation and metrics"};
  app.require_subcommand(1);
  app.fallthrough(false);
  const char* names[] = {"validate", "segment", "select", "itiou",
                         "eval",     "layer-sweep", "text-explain"};
  const char* help[] = {"Check a trace directory",
                        "Zero-shot segmentation of one trace",
                        "Binary object mask for one token",
                        "Initial Token IoU against ground truth",
                        "Unsupervised accuracy / mIoU over a batch",
                        "eval for every layer of a range",
                        "Token Contribution Scores for a text trace"};
  for (std::size_t i = 0; i < std::size(names); ++i) {
    auto* sub = app.add_subcommand(names[i], help[i]);
    detail::add_common(sub, cfg);
    sub->callback([&cfg, name = std::string(names[i])] { cfg.command = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    detail::report(err, {kExitUsage, "usage", {}, e.what()});
    return kExitUsage;
  }

  const Logger log(err);
  try {
    if (cfg.command == "validate") return detail::cmd_validate(cfg, out);
    if (cfg.command == "segment") return detail::cmd_segment(cfg, out, log);
    if (cfg.command == "select") return detail::cmd_select(cfg, out);
    if (cfg.command == "itiou") return detail::cmd_itiou(cfg, out, log);
    if (cfg.command == "eval") return detail::cmd_eval(cfg, out, log);
    if (cfg.command == "layer-sweep") return detail::cmd_layer_sweep(cfg, out, log);
    if (cfg.command == "text-explain") return detail::cmd_text_explain(cfg, out);
    detail::usage("unknown command");
  } catch (const Failure& f) {
    detail::report(err, f);
    return f.code;
  } catch (const Error& e) {
    detail::report(err, {kExitIo, std::string(to_string(e.kind())), e.file(), e.message()});
    return kExitIo;
  } catch (const std::exception& e) {
    detail::report(err, {kExitIo, "internal", {}, e.what()});
    return kExitIo;
  }
}

}  // namespace ultra::cli
