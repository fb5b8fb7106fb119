#pragma once

// On-disk trace batches for driving the command-line tool in-process.

#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "support/synthetic.hpp"
#include "ultra_cli.hpp"

namespace ultra::testing {

struct CliResult {
  int code = 0;
  std::string out, err;
};

inline CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "ultra");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliResult r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

/// Writes under `root`:
///   batch/img<k>/        two-block vision traces (split row k+1 on a 4x4 grid)
///   gt/img<k>.ulr        their ground truth
///   sweep/layer_<l>/img<k>/  the same traces with target layer l (L = 4)
///   text/                a random text trace (|x| = 6, |y| = 3)
inline void write_cli_fixture(const std::filesystem::path& root, std::size_t images = 3) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "gt");
  for (std::size_t k = 0; k < images; ++k) {
    const std::string stem = "img" + std::to_string(k);
    const std::uint64_t split = 1 + k % 3;
    write_trace(two_block_trace(4, 4, 2, split), root / "batch" / stem);
    write_raster(root / "gt" / (stem + ".ulr"), two_block_truth(4, 4, 2, split));
    for (std::uint64_t l = 2; l <= 4; ++l)
      write_trace(two_block_trace(4, 4, 2, split, 4, l),
                  root / "sweep" / ("layer_" + std::to_string(l)) / stem);
  }
  std::mt19937_64 rng(21);
  Trace text = random_text_trace(rng, 6, 3, 3, 2);
  text.manifest.token_surfaces = {"The", "cat", "sat", "on", "the", "mat", "A", "cat", "sat"};
  write_trace(text, root / "text");
}

inline std::string slurp(const std::filesystem::path& p) {
  const auto bytes = detail::read_file_bytes(p);
  return std::string(bytes.begin(), bytes.end());
}

}  // namespace ultra::testing
