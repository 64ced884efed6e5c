#pragma once

#include "l3d/imaging.hpp"
#include "l3d/mask.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace l3d {

namespace fs = std::filesystem;

/// Malformed input; `offset` is the byte where parsing stopped.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::uint64_t offset);
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Float image with rows stored top to bottom and channels interleaved.
struct PfmImage {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<float> data;

  static PfmImage from_matrix(const Eigen::MatrixXd& m);
  /// Single-channel images only; row 0 is the top row.
  Eigen::MatrixXd to_matrix() const;
};

std::string encode_pfm(const PfmImage& img);
PfmImage decode_pfm(const std::string& bytes);
PfmImage read_pfm(const fs::path& path);
void write_pfm(const fs::path& path, const PfmImage& img);

/// Binary PGM (P5), 8 or 16 bit, scaled to [0, 1] by its maxval.
Eigen::MatrixXd decode_pgm(const std::string& bytes);

/// 8-bit PNG; values are clamped to [0, 1]. `rgb` holds three planes.
void write_png_gray(const fs::path& path, const Eigen::MatrixXd& v);
void write_png_rgb(const fs::path& path, const Eigen::MatrixXd& r, const Eigen::MatrixXd& g,
                   const Eigen::MatrixXd& b);

std::string read_file(const fs::path& path);
/// Writes to a sibling temporary file, then renames over `path`.
void atomic_write(const fs::path& path, const std::string& bytes);
nlohmann::json read_json(const fs::path& path);
void write_json(const fs::path& path, const nlohmann::json& j);

std::string sha256_hex(const std::string& bytes);

/// "L3DMASK1", u32 count, f64 grid step, f64 origin, f32 samples (little-endian).
std::string encode_mask(const MaskProfile& profile);
MaskProfile decode_mask(const std::string& bytes);
void write_mask_file(const fs::path& path, const MaskProfile& profile);
MaskProfile read_mask_file(const fs::path& path);

/// Directory with y.pfm and meta.json.
void write_measurement(const fs::path& dir, const Measurement& m);
Measurement read_measurement(const fs::path& dir);
nlohmann::json meta_to_json(const MeasurementMeta& meta);
MeasurementMeta meta_from_json(const nlohmann::json& j);

/// Directory with intensity.pfm (or intensity.pgm), depth_m.pfm and scene.json.
struct SceneBundle {
  Eigen::MatrixXd intensity;
  Eigen::MatrixXd depth_m;
  nlohmann::json info = nlohmann::json::object();
};

void write_scene_bundle(const fs::path& dir, const SceneBundle& bundle);
SceneBundle read_scene_bundle(const fs::path& dir);

/// Area-weighted resampling of an image onto rows x cols.
Eigen::MatrixXd area_resample(const Eigen::MatrixXd& src, int rows, int cols);

/// Reads a bundle, checks depth > d, resamples to the scene size, normalizes
/// intensity by its maximum and converts depth to alpha.
Scene load_scene(const fs::path& dir, const CameraGeometry& geom);

/// Writes intensity.pfm, alpha.pfm, depth_m.pfm, optional PNGs, then
/// report.json (last, so its presence marks a complete directory).
void write_results(const fs::path& dir, const Scene& scene, const CameraGeometry& geom,
                   nlohmann::json report, bool pngs);

/// Depth colormap used by depth.png: viridis anchors at 0, 1/4, 1/2, 3/4, 1
/// of the normalized inverse depth, interpolated linearly (far = dark).
Eigen::Vector3d depth_colormap(double t);

struct ResultRow {
  std::string scene;
  std::string method;
  std::string reg;
  std::optional<double> snr_db;
  double pixel_pitch_um = 0.0;
  int sensor_px = 0;
  double psnr_db = 0.0;
  double depth_rmse_mm = 0.0;
  std::optional<double> wall_s;
  std::uint64_t seed = 0;
};

inline constexpr const char* kCsvHeader =
    "scene,method,reg,snr_db,pixel_pitch_um,sensor_px,psnr_db,depth_rmse_mm,wall_s,seed";

/// Orders rows by scene, method, reg, snr_db, pixel_pitch_um, sensor_px, seed.
bool row_key_less(const ResultRow& a, const ResultRow& b);
std::string csv_field(const std::string& s);
std::string format_csv_row(const ResultRow& row);
/// Header plus rows in key order.
std::string format_results_csv(std::vector<ResultRow> rows);
void write_results_csv(const fs::path& path, const std::vector<ResultRow>& rows);

/// Exclusive advisory lock held for the object's lifetime.
class FileLock {
 public:
  explicit FileLock(const fs::path& path);
  ~FileLock();
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

/// Appends one row under the lock, writing the header first if the file is new.
void append_csv_row(const fs::path& path, const ResultRow& row);

}  // namespace l3d
