#include "l3d/io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <tuple>

namespace l3d {

static_assert(std::endian::native == std::endian::little, "binary formats assume little-endian");

ParseError::ParseError(const std::string& what, std::uint64_t offset)
    : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

namespace {

/// Whitespace-separated header tokens of netpbm-style files.
class HeaderReader {
 public:
  explicit HeaderReader(const std::string& bytes, bool comments)
      : bytes_(bytes), comments_(comments) {}

  std::string token(const char* what) {
    skip_space();
    const std::size_t start = pos_;
    while (pos_ < bytes_.size() && !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) ++pos_;
    if (pos_ == start) throw ParseError(std::string("missing ") + what, start);
    return bytes_.substr(start, pos_ - start);
  }

  long long integer(const char* what) {
    skip_space();
    const std::size_t start = pos_;
    const std::string t = token(what);
    long long v = 0;
    const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size())
      throw ParseError(std::string("bad ") + what + " '" + t + "'", start);
    return v;
  }

  /// Consumes the single whitespace byte that ends the header.
  std::size_t end_of_header() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_])))
      throw ParseError("header must end with one whitespace byte", pos_);
    return ++pos_;
  }

  std::size_t pos() const { return pos_; }

 private:
  void skip_space() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else if (comments_ && c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& bytes_;
  bool comments_;
  std::size_t pos_ = 0;
};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos, const char* what) {
  if (in.size() - pos < sizeof(T) || pos > in.size())
    throw ParseError(std::string("truncated ") + what, in.size());
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<std::uint8_t> to_bytes(const Eigen::MatrixXd& v) {
  std::vector<std::uint8_t> out(v.size());
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (Eigen::Index j = 0; j < v.cols(); ++j) {
      const double x = std::isfinite(v(i, j)) ? std::clamp(v(i, j), 0.0, 1.0) : 0.0;
      out[i * v.cols() + j] = static_cast<std::uint8_t>(std::lround(255.0 * x));
    }
  return out;
}

void write_png(const fs::path& path, int width, int height, int color_type,
               const std::vector<std::uint8_t>& pixels) {
  const int channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("cannot initialize PNG writer");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("cannot initialize PNG writer");
  }
  std::string encoded;
  png_set_write_fn(
      png, &encoded,
      [](png_structp p, png_bytep data, png_size_t len) {
        static_cast<std::string*>(png_get_io_ptr(p))->append(reinterpret_cast<char*>(data), len);
      },
      [](png_structp) {});
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encoding failed for " + path.string());
  }
  png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < height; ++r)
    png_write_row(png, const_cast<png_bytep>(pixels.data() + std::size_t(r) * width * channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  atomic_write(path, encoded);
}

}  // namespace

PfmImage PfmImage::from_matrix(const Eigen::MatrixXd& m) {
  PfmImage img;
  img.width = static_cast<int>(m.cols());
  img.height = static_cast<int>(m.rows());
  img.channels = 1;
  img.data.resize(m.size());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      img.data[i * m.cols() + j] = static_cast<float>(m(i, j));
  return img;
}

Eigen::MatrixXd PfmImage::to_matrix() const {
  if (channels != 1) throw ConfigError("expected a single-channel image");
  Eigen::MatrixXd m(height, width);
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width; ++j) m(i, j) = data[std::size_t(i) * width + j];
  return m;
}

std::string encode_pfm(const PfmImage& img) {
  if (img.channels != 1 && img.channels != 3) throw ConfigError("PFM supports 1 or 3 channels");
  if (img.width <= 0 || img.height <= 0) throw ConfigError("PFM dimensions must be positive");
  const std::size_t row = std::size_t(img.width) * img.channels;
  if (img.data.size() != row * img.height) throw ConfigError("PFM data size does not match dimensions");
  std::string out = img.channels == 1 ? "Pf\n" : "PF\n";
  out += std::to_string(img.width) + " " + std::to_string(img.height) + "\n-1.0\n";
  // Scanlines run bottom to top.
  for (int r = img.height - 1; r >= 0; --r)
    out.append(reinterpret_cast<const char*>(img.data.data() + row * r), row * sizeof(float));
  return out;
}

PfmImage decode_pfm(const std::string& bytes) {
  HeaderReader h(bytes, false);
  const std::string magic = h.token("PFM magic");
  PfmImage img;
  if (magic == "Pf") img.channels = 1;
  else if (magic == "PF") img.channels = 3;
  else throw ParseError("not a PFM file (magic '" + magic + "')", 0);
  const long long w = h.integer("width");
  const long long hgt = h.integer("height");
  if (w <= 0 || hgt <= 0 || w > (1 << 20) || hgt > (1 << 20))
    throw ParseError("PFM dimensions out of range", h.pos());
  const std::size_t scale_at = h.pos();
  const std::string scale_text = h.token("scale");
  double scale = 0.0;
  const auto [p, ec] = std::from_chars(scale_text.data(), scale_text.data() + scale_text.size(), scale);
  if (ec != std::errc() || p != scale_text.data() + scale_text.size() || scale == 0.0 ||
      !std::isfinite(scale))
    throw ParseError("bad PFM scale '" + scale_text + "'", scale_at);
  if (scale > 0.0) throw ParseError("big-endian PFM (positive scale) is not supported", scale_at);
  const std::size_t start = h.end_of_header();
  img.width = static_cast<int>(w);
  img.height = static_cast<int>(hgt);
  const std::size_t row = std::size_t(w) * img.channels;
  const std::size_t need = row * hgt * sizeof(float);
  if (bytes.size() - start < need)
    throw ParseError("truncated PFM data: need " + std::to_string(need) + " bytes", bytes.size());
  if (bytes.size() - start > need) throw ParseError("trailing bytes after PFM data", start + need);
  img.data.resize(row * hgt);
  for (long long r = 0; r < hgt; ++r) {
    const std::size_t dst = row * (hgt - 1 - r);
    std::memcpy(img.data.data() + dst, bytes.data() + start + r * row * sizeof(float),
                row * sizeof(float));
  }
  return img;
}

PfmImage read_pfm(const fs::path& path) {
  const std::string bytes = read_file(path);
  try {
    return decode_pfm(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

void write_pfm(const fs::path& path, const PfmImage& img) { atomic_write(path, encode_pfm(img)); }

Eigen::MatrixXd decode_pgm(const std::string& bytes) {
  HeaderReader h(bytes, true);
  const std::string magic = h.token("PGM magic");
  if (magic != "P5") throw ParseError("not a binary PGM file (magic '" + magic + "')", 0);
  const long long w = h.integer("width");
  const long long hgt = h.integer("height");
  const long long maxval = h.integer("maxval");
  if (w <= 0 || hgt <= 0 || w > (1 << 20) || hgt > (1 << 20))
    throw ParseError("PGM dimensions out of range", h.pos());
  if (maxval <= 0 || maxval > 65535) throw ParseError("PGM maxval out of range", h.pos());
  const std::size_t start = h.end_of_header();
  const std::size_t bpp = maxval > 255 ? 2 : 1;
  const std::size_t need = std::size_t(w) * hgt * bpp;
  if (bytes.size() - start < need) throw ParseError("truncated PGM data", bytes.size());
  if (bytes.size() - start > need) throw ParseError("trailing bytes after PGM data", start + need);
  Eigen::MatrixXd m(hgt, w);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + start);
  for (long long i = 0; i < hgt; ++i)
    for (long long j = 0; j < w; ++j) {
      const std::size_t k = (i * w + j) * bpp;
      const unsigned v = bpp == 2 ? (unsigned(p[k]) << 8) | p[k + 1] : p[k];
      if (v > maxval) throw ParseError("PGM sample exceeds maxval", start + k);
      m(i, j) = double(v) / double(maxval);
    }
  return m;
}

void write_png_gray(const fs::path& path, const Eigen::MatrixXd& v) {
  write_png(path, static_cast<int>(v.cols()), static_cast<int>(v.rows()), PNG_COLOR_TYPE_GRAY,
            to_bytes(v));
}

void write_png_rgb(const fs::path& path, const Eigen::MatrixXd& r, const Eigen::MatrixXd& g,
                   const Eigen::MatrixXd& b) {
  if (r.rows() != g.rows() || r.rows() != b.rows() || r.cols() != g.cols() || r.cols() != b.cols())
    throw ConfigError("RGB planes differ in size");
  const auto br = to_bytes(r), bg = to_bytes(g), bb = to_bytes(b);
  std::vector<std::uint8_t> px(br.size() * 3);
  for (std::size_t k = 0; k < br.size(); ++k) {
    px[3 * k] = br[k];
    px[3 * k + 1] = bg[k];
    px[3 * k + 2] = bb[k];
  }
  write_png(path, static_cast<int>(r.cols()), static_cast<int>(r.rows()), PNG_COLOR_TYPE_RGB, px);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed for " + path.string());
  return ss.str();
}

void atomic_write(const fs::path& path, const std::string& bytes) {
  static std::atomic<unsigned> counter{0};
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot create " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw IoError("write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot rename onto " + path.string());
  }
}

nlohmann::json read_json(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": invalid JSON", e.byte);
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  atomic_write(path, j.dump(2) + "\n");
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw IoError("SHA-256 computation failed");
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i)
    hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

std::string encode_mask(const MaskProfile& profile) {
  const Eigen::VectorXd& s = profile.samples();
  std::string out = "L3DMASK1";
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  put<double>(out, profile.grid_step_m());
  put<double>(out, profile.origin_m());
  for (Eigen::Index k = 0; k < s.size(); ++k) put<float>(out, static_cast<float>(s[k]));
  return out;
}

MaskProfile decode_mask(const std::string& bytes) {
  if (bytes.size() < 8 || bytes.compare(0, 8, "L3DMASK1") != 0)
    throw ParseError("not a mask file (bad magic)", 0);
  std::size_t pos = 8;
  const auto count = get<std::uint32_t>(bytes, pos, "mask header");
  const auto step = get<double>(bytes, pos, "mask header");
  const auto origin = get<double>(bytes, pos, "mask header");
  if (count < 2) throw ParseError("mask needs at least two samples", 8);
  if (!(step > 0.0) || !std::isfinite(step)) throw ParseError("mask grid step must be positive", 12);
  if (!std::isfinite(origin)) throw ParseError("mask origin must be finite", 20);
  const std::size_t need = std::size_t(count) * sizeof(float);
  if (bytes.size() - pos < need) throw ParseError("truncated mask samples", bytes.size());
  if (bytes.size() - pos > need) throw ParseError("trailing bytes after mask samples", pos + need);
  Eigen::VectorXd samples(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::size_t at = pos;
    const float v = get<float>(bytes, pos, "mask samples");
    if (!(v >= 0.0f && v <= 1.0f)) throw ParseError("mask sample outside [0, 1]", at);
    samples[k] = v;
  }
  return MaskProfile(std::move(samples), step, origin);
}

void write_mask_file(const fs::path& path, const MaskProfile& profile) {
  atomic_write(path, encode_mask(profile));
}

MaskProfile read_mask_file(const fs::path& path) {
  const std::string bytes = read_file(path);
  try {
    return decode_mask(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

nlohmann::json meta_to_json(const MeasurementMeta& meta) {
  nlohmann::json j = meta.extra;
  nlohmann::json geom = j.contains("geometry") && j["geometry"].is_object() ? j["geometry"]
                                                                              : nlohmann::json::object();
  const CameraGeometry& g = meta.geometry;
  geom["d_m"] = g.mask_sensor_distance_m;
  geom["M"] = g.sensor_pixels;
  geom["pixel_pitch_m"] = g.pixel_pitch_m;
  geom["half_fov_deg"] = g.half_fov_deg;
  geom["N"] = g.scene_pixels;
  j["geometry"] = geom;
  j["mask_sha256"] = meta.mask_sha256;
  j["snr_db"] = meta.snr_db ? nlohmann::json(*meta.snr_db) : nlohmann::json(nullptr);
  j["seed"] = meta.seed;
  return j;
}

MeasurementMeta meta_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("meta.json must be an object");
  MeasurementMeta m;
  try {
    const nlohmann::json& g = j.at("geometry");
    m.geometry.mask_sensor_distance_m = g.at("d_m").get<double>();
    m.geometry.sensor_pixels = g.at("M").get<int>();
    m.geometry.pixel_pitch_m = g.at("pixel_pitch_m").get<double>();
    m.geometry.half_fov_deg = g.at("half_fov_deg").get<double>();
    m.geometry.scene_pixels = g.at("N").get<int>();
    m.mask_sha256 = j.at("mask_sha256").get<std::string>();
    const nlohmann::json& snr = j.at("snr_db");
    if (!snr.is_null()) m.snr_db = snr.get<double>();
    m.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("meta.json: missing or mistyped key: ") + e.what());
  }
  m.geometry.validate();
  m.extra = j;
  for (const char* k : {"mask_sha256", "snr_db", "seed"}) m.extra.erase(k);
  nlohmann::json& geom = m.extra["geometry"];
  for (const char* k : {"d_m", "M", "pixel_pitch_m", "half_fov_deg", "N"}) geom.erase(k);
  if (geom.empty()) m.extra.erase("geometry");
  return m;
}

void write_measurement(const fs::path& dir, const Measurement& m) {
  const int size = m.meta.geometry.sensor_pixels;
  if (m.y.rows() != size || m.y.cols() != size)
    throw ConfigError("measurement size does not match its geometry");
  fs::create_directories(dir);
  write_pfm(dir / "y.pfm", PfmImage::from_matrix(m.y));
  write_json(dir / "meta.json", meta_to_json(m.meta));
}

Measurement read_measurement(const fs::path& dir) {
  Measurement m;
  m.meta = meta_from_json(read_json(dir / "meta.json"));
  m.y = read_pfm(dir / "y.pfm").to_matrix();
  const int size = m.meta.geometry.sensor_pixels;
  if (m.y.rows() != size || m.y.cols() != size)
    throw ConfigError("y.pfm is " + std::to_string(m.y.rows()) + "x" + std::to_string(m.y.cols()) +
                      " but meta.json declares M = " + std::to_string(size));
  if (!m.y.allFinite()) throw ConfigError("y.pfm has non-finite entries");
  return m;
}

void write_scene_bundle(const fs::path& dir, const SceneBundle& b) {
  if (b.intensity.rows() != b.depth_m.rows() || b.intensity.cols() != b.depth_m.cols())
    throw ConfigError("scene intensity and depth differ in size");
  fs::create_directories(dir);
  write_pfm(dir / "intensity.pfm", PfmImage::from_matrix(b.intensity));
  write_pfm(dir / "depth_m.pfm", PfmImage::from_matrix(b.depth_m));
  nlohmann::json info = b.info;
  info["N"] = b.intensity.rows();
  write_json(dir / "scene.json", info);
}

SceneBundle read_scene_bundle(const fs::path& dir) {
  SceneBundle b;
  if (fs::exists(dir / "intensity.pfm")) {
    const PfmImage img = read_pfm(dir / "intensity.pfm");
    if (img.channels != 1) throw ConfigError("only single-channel intensity is supported");
    b.intensity = img.to_matrix();
  } else if (fs::exists(dir / "intensity.pgm")) {
    const std::string bytes = read_file(dir / "intensity.pgm");
    try {
      b.intensity = decode_pgm(bytes);
    } catch (const ParseError& e) {
      throw ParseError((dir / "intensity.pgm").string() + ": " + e.what(), e.offset());
    }
  } else {
    throw IoError("scene bundle " + dir.string() + " has no intensity.pfm or intensity.pgm");
  }
  b.depth_m = read_pfm(dir / "depth_m.pfm").to_matrix();
  if (fs::exists(dir / "scene.json")) b.info = read_json(dir / "scene.json");
  if (!b.info.is_object()) throw ConfigError("scene.json must be an object");
  if (b.intensity.rows() != b.depth_m.rows() || b.intensity.cols() != b.depth_m.cols())
    throw ConfigError("scene intensity and depth differ in size");
  if (!b.intensity.allFinite() || !b.depth_m.allFinite())
    throw ConfigError("scene bundle has non-finite values");
  return b;
}

Eigen::MatrixXd area_resample(const Eigen::MatrixXd& src, int rows, int cols) {
  if (rows <= 0 || cols <= 0 || src.size() == 0) throw ConfigError("resample sizes must be positive");
  // Overlap of destination cell k with source cell s on the unit interval.
  auto weights = [](Eigen::Index from, Eigen::Index to) {
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(to, from);
    for (Eigen::Index k = 0; k < to; ++k) {
      const double lo = double(k) / to, hi = double(k + 1) / to;
      for (Eigen::Index s = 0; s < from; ++s) {
        const double a = std::max(lo, double(s) / from), b = std::min(hi, double(s + 1) / from);
        if (b > a) w(k, s) = (b - a) * to;
      }
    }
    return w;
  };
  if (src.rows() == rows && src.cols() == cols) return src;
  return weights(src.rows(), rows) * src * weights(src.cols(), cols).transpose();
}

Scene load_scene(const fs::path& dir, const CameraGeometry& geom) {
  geom.validate();
  const SceneBundle b = read_scene_bundle(dir);
  const double d = geom.mask_sensor_distance_m;
  std::vector<std::string> bad;
  std::size_t bad_count = 0;
  for (Eigen::Index i = 0; i < b.depth_m.rows(); ++i)
    for (Eigen::Index j = 0; j < b.depth_m.cols(); ++j)
      if (!(b.depth_m(i, j) > d)) {
        if (bad.size() < 10)
          bad.push_back("(" + std::to_string(i) + "," + std::to_string(j) +
                        ")=" + format_number(b.depth_m(i, j)));
        ++bad_count;
      }
  if (bad_count) {
    std::string msg = std::to_string(bad_count) + " pixel(s) have depth <= d = " + format_number(d) +
                      " m:";
    for (const auto& s : bad) msg += " " + s;
    if (bad_count > bad.size()) msg += " ...";
    throw DomainError(msg);
  }
  const int n = geom.scene_pixels;
  Eigen::MatrixXd intensity = area_resample(b.intensity, n, n);
  const Eigen::MatrixXd depth = area_resample(b.depth_m, n, n);
  const double peak = intensity.maxCoeff();
  if (peak > 0.0) intensity /= peak;
  return {intensity, alpha_map_from_depth(depth, d)};
}

Eigen::Vector3d depth_colormap(double t) {
  static const std::array<Eigen::Vector3d, 5> anchors = {
      Eigen::Vector3d(0.267, 0.005, 0.329), Eigen::Vector3d(0.229, 0.322, 0.546),
      Eigen::Vector3d(0.128, 0.567, 0.551), Eigen::Vector3d(0.369, 0.789, 0.383),
      Eigen::Vector3d(0.993, 0.906, 0.144)};
  t = std::isfinite(t) ? std::clamp(t, 0.0, 1.0) : 0.0;
  const double x = t * 4.0;
  const int k = std::min(3, static_cast<int>(x));
  return anchors[k] + (x - k) * (anchors[k + 1] - anchors[k]);
}

void write_results(const fs::path& dir, const Scene& scene, const CameraGeometry& geom,
                   nlohmann::json report, bool pngs) {
  fs::create_directories(dir);
  const Eigen::MatrixXd depth = depth_map_from_alpha(scene.inv_depth, geom.mask_sensor_distance_m);
  write_pfm(dir / "intensity.pfm", PfmImage::from_matrix(scene.intensity));
  write_pfm(dir / "alpha.pfm", PfmImage::from_matrix(scene.inv_depth));
  write_pfm(dir / "depth_m.pfm", PfmImage::from_matrix(depth));
  if (pngs) {
    write_png_gray(dir / "intensity.png", scene.intensity);
    // Near points are bright; the colormap runs over alpha so far points compress.
    const double a_lo = scene.inv_depth.minCoeff(), a_hi = scene.inv_depth.maxCoeff();
    const double span = a_hi > a_lo ? a_hi - a_lo : 1.0;
    Eigen::MatrixXd r(depth.rows(), depth.cols()), g(r.rows(), r.cols()), b(r.rows(), r.cols());
    for (Eigen::Index k = 0; k < depth.size(); ++k) {
      const Eigen::Vector3d c = depth_colormap(1.0 - (scene.inv_depth(k) - a_lo) / span);
      r(k) = c[0];
      g(k) = c[1];
      b(k) = c[2];
    }
    write_png_rgb(dir / "depth.png", r, g, b);
    report["visualization"] = {{"intensity_png", {{"min", 0.0}, {"max", 1.0}}},
                               {"depth_png",
                                {{"colormap", "viridis, 5 anchors, linear in alpha, near = yellow"},
                                 {"min_depth_m", depth.minCoeff()},
                                 {"max_depth_m", depth.maxCoeff()}}}};
  }
  write_json(dir / "report.json", report);
}

bool row_key_less(const ResultRow& a, const ResultRow& b) {
  const double snr_a = a.snr_db.value_or(-std::numeric_limits<double>::infinity());
  const double snr_b = b.snr_db.value_or(-std::numeric_limits<double>::infinity());
  return std::tie(a.scene, a.method, a.reg, snr_a, a.pixel_pitch_um, a.sensor_px, a.seed) <
         std::tie(b.scene, b.method, b.reg, snr_b, b.pixel_pitch_um, b.sensor_px, b.seed);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string format_csv_row(const ResultRow& r) {
  std::string out;
  out += csv_field(r.scene) + ",";
  out += csv_field(r.method) + ",";
  out += csv_field(r.reg) + ",";
  out += (r.snr_db ? format_number(*r.snr_db) : std::string()) + ",";
  out += format_number(r.pixel_pitch_um) + ",";
  out += std::to_string(r.sensor_px) + ",";
  out += format_number(r.psnr_db) + ",";
  out += format_number(r.depth_rmse_mm) + ",";
  out += (r.wall_s ? format_number(*r.wall_s) : std::string()) + ",";
  out += std::to_string(r.seed);
  return out + "\r\n";
}

std::string format_results_csv(std::vector<ResultRow> rows) {
  std::stable_sort(rows.begin(), rows.end(), row_key_less);
  std::string out = std::string(kCsvHeader) + "\r\n";
  for (const ResultRow& r : rows) out += format_csv_row(r);
  return out;
}

void write_results_csv(const fs::path& path, const std::vector<ResultRow>& rows) {
  atomic_write(path, format_results_csv(rows));
}

FileLock::FileLock(const fs::path& path) {
  fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw IoError("cannot open lock file " + path.string());
  if (::flock(fd_, LOCK_EX) != 0) {
    ::close(fd_);
    throw IoError("cannot lock " + path.string());
  }
}

FileLock::~FileLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

void append_csv_row(const fs::path& path, const ResultRow& row) {
  fs::path lock_path = path;
  lock_path += ".lock";
  FileLock lock(lock_path);
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot append to " + path.string());
  if (fresh) out << kCsvHeader << "\r\n";
  out << format_csv_row(row);
  out.flush();
  if (!out) throw IoError("append failed for " + path.string());
}

}  // namespace l3d
