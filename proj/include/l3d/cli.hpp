#pragma once

#include "l3d/io.hpp"
#include "l3d/recon.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace l3d {

/// Bad flags or flag combinations; the CLI maps it to exit code 2.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Flags of `genmask`, also accepted as the "mask" object of an experiment.
struct MaskSpec {
  int order = 10;
  /// Zero features appended after the sequence; -1 pads order 10 to 1024.
  int pad = -1;
  std::uint32_t seed_state = 1;
  std::optional<std::uint32_t> taps;
  double feature_um = 30.0;
  double blur_um = 15.0;
  double blur_sigma = 5.0;
  std::optional<double> grid_step_um;
  /// Text file of 0/1 characters replacing the generated sequence.
  std::optional<std::filesystem::path> pattern_file;

  BinaryPattern pattern() const;
  MaskProfile build() const;
};

struct ExperimentScene {
  std::string name;
  std::optional<std::filesystem::path> path;
  std::optional<SyntheticSpec> synthetic;
};

struct ExperimentMethod {
  std::string name;
  ReconConfig config;
};

struct ExperimentSpec {
  std::vector<ExperimentScene> scenes;
  double d_m = 4e-3;
  double half_fov_deg = 18.0;
  int scene_px = 32;
  std::optional<std::filesystem::path> mask_path;
  MaskSpec mask;
  std::vector<ExperimentMethod> methods;
  /// nullopt entries are noiseless runs.
  std::vector<std::optional<double>> snr_db;
  std::vector<double> pixel_pitch_um;
  std::vector<int> sensor_px;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output_dir = "results";
  bool record_wall_time = true;
  double depth_threshold = 0.0;
  bool pngs = false;

  /// Relative paths resolve against `base_dir`. Throws ConfigError on
  /// missing files, empty axes or unknown keys.
  static ExperimentSpec from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
};

struct ExperimentOptions {
  int workers = 1;
  /// Stop after this many newly run jobs without finalizing the CSV.
  std::optional<int> max_jobs;
};

struct ExperimentSummary {
  int total = 0;
  int skipped = 0;
  int ran = 0;
  int failed = 0;
  bool finalized = false;
};

ExperimentSummary run_experiment(const ExperimentSpec& spec, const ExperimentOptions& opts,
                                 std::ostream& log);

/// Entry point of the `l3d` tool. Returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace l3d
