#include "l3d/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>

namespace l3d {

namespace {

using nlohmann::json;

std::string fmt(double v, int precision = 6) {
  std::ostringstream ss;
  ss.precision(precision);
  ss << v;
  return ss.str();
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("key '") + key + "' has the wrong type");
  }
}

ExecPolicy exec_from_flags(int threads, bool deterministic) {
  ExecPolicy e;
  e.threads = threads;
  e.deterministic = deterministic;
  return e;
}

}  // namespace

BinaryPattern MaskSpec::pattern() const {
  if (!(feature_um > 0.0)) throw UsageError("--feature-um must be positive");
  const double fw = feature_um / 1e6;
  BinaryPattern p;
  if (pattern_file) {
    const std::string text = read_file(*pattern_file);
    p.feature_width_m = fw;
    for (char c : text) {
      if (c == '0' || c == '1') p.bits.push_back(static_cast<std::uint8_t>(c - '0'));
      else if (!std::isspace(static_cast<unsigned char>(c)))
        throw ConfigError("pattern file may only contain 0, 1 and whitespace");
    }
    if (p.bits.empty()) throw ConfigError("pattern file is empty");
  } else {
    if (order < 2 || order > 31) throw UsageError("--order must lie in [2, 31]");
    if (seed_state == 0) throw UsageError("--seed-state must be nonzero");
    p = generate_mls(order, taps, seed_state, fw);
  }
  int extra = pad;
  if (extra < 0) extra = (!pattern_file && order == 10) ? 1 : 0;
  return pad_pattern(std::move(p), static_cast<std::size_t>(extra));
}

MaskProfile MaskSpec::build() const {
  if (!(blur_um > 0.0)) throw UsageError("--blur-um must be positive");
  if (!(blur_sigma > 0.0)) throw UsageError("--blur-sigma must be positive");
  MaskBuildOptions o;
  o.blur_len_m = blur_um / 1e6;
  o.blur_sigma_samples = blur_sigma;
  if (grid_step_um) {
    if (!(*grid_step_um > 0.0)) throw UsageError("--grid-step-um must be positive");
    o.grid_step_m = *grid_step_um / 1e6;
  }
  return build_mask_profile(pattern(), o);
}

namespace {

MaskSpec mask_spec_from_json(const json& j, const fs::path& base) {
  check_keys(j,
             {"order", "pad", "seed_state", "taps", "feature_um", "blur_um", "blur_sigma",
              "grid_step_um", "pattern_file"},
             "mask");
  MaskSpec m;
  m.order = get_or(j, "order", m.order);
  m.pad = get_or(j, "pad", m.pad);
  m.seed_state = get_or(j, "seed_state", m.seed_state);
  if (j.contains("taps")) m.taps = get_or<std::uint32_t>(j, "taps", 0);
  m.feature_um = get_or(j, "feature_um", m.feature_um);
  m.blur_um = get_or(j, "blur_um", m.blur_um);
  m.blur_sigma = get_or(j, "blur_sigma", m.blur_sigma);
  if (j.contains("grid_step_um")) m.grid_step_um = get_or<double>(j, "grid_step_um", 0.0);
  if (j.contains("pattern_file")) {
    m.pattern_file = base / get_or<std::string>(j, "pattern_file", "");
    if (!fs::exists(*m.pattern_file))
      throw ConfigError("mask pattern file not found: " + m.pattern_file->string());
  }
  return m;
}

}  // namespace

ExperimentSpec ExperimentSpec::from_json(const json& j, const fs::path& base) {
  if (!j.is_object()) throw ConfigError("experiment spec must be a JSON object");
  check_keys(j,
             {"scenes", "geometry", "mask", "methods", "sweep", "seeds", "output_dir",
              "record_wall_time", "depth_threshold", "pngs"},
             "experiment spec");
  ExperimentSpec s;

  if (!j.contains("scenes") || !j["scenes"].is_array() || j["scenes"].empty())
    throw ConfigError("experiment spec needs a non-empty 'scenes' list");
  std::set<std::string> names;
  for (const json& e : j["scenes"]) {
    check_keys(e, {"name", "path", "synthetic"}, "scene entry");
    ExperimentScene sc;
    sc.name = get_or<std::string>(e, "name", "");
    if (sc.name.empty()) throw ConfigError("every scene needs a name");
    if (!names.insert(sc.name).second) throw ConfigError("duplicate scene name '" + sc.name + "'");
    if (e.contains("path") == e.contains("synthetic"))
      throw ConfigError("scene '" + sc.name + "' needs exactly one of 'path' or 'synthetic'");
    if (e.contains("path")) {
      sc.path = base / get_or<std::string>(e, "path", "");
      if (!fs::is_directory(*sc.path))
        throw ConfigError("scene directory not found: " + sc.path->string());
    } else {
      const json& y = e["synthetic"];
      check_keys(y, {"kind", "n", "z_near_m", "z_far_m", "seed"}, "synthetic scene");
      SyntheticSpec sy;
      sy.kind = get_or(y, "kind", sy.kind);
      sy.n = get_or(y, "n", sy.n);
      sy.z_near_m = get_or(y, "z_near_m", sy.z_near_m);
      sy.z_far_m = get_or(y, "z_far_m", sy.z_far_m);
      sy.seed = get_or(y, "seed", sy.seed);
      make_synthetic_scene(sy);  // validates
      sc.synthetic = sy;
    }
    s.scenes.push_back(std::move(sc));
  }

  if (j.contains("geometry")) {
    const json& g = j["geometry"];
    check_keys(g, {"d_mm", "half_fov_deg", "scene_px"}, "geometry");
    s.d_m = get_or(g, "d_mm", s.d_m * 1e3) / 1e3;
    s.half_fov_deg = get_or(g, "half_fov_deg", s.half_fov_deg);
    s.scene_px = get_or(g, "scene_px", s.scene_px);
  }

  if (j.contains("mask")) {
    const json& m = j["mask"];
    if (m.is_string()) {
      s.mask_path = base / m.get<std::string>();
      if (!fs::exists(*s.mask_path)) throw ConfigError("mask file not found: " + s.mask_path->string());
    } else if (m.is_object()) {
      s.mask = mask_spec_from_json(m, base);
    } else {
      throw ConfigError("'mask' must be a file path or a mask object");
    }
  }

  if (!j.contains("methods") || !j["methods"].is_array() || j["methods"].empty())
    throw ConfigError("experiment spec needs a non-empty 'methods' list");
  names.clear();
  for (const json& e : j["methods"]) {
    check_keys(e, {"name", "config", "config_file"}, "method entry");
    ExperimentMethod m;
    m.name = get_or<std::string>(e, "name", "");
    if (m.name.empty()) throw ConfigError("every method needs a name");
    if (!names.insert(m.name).second) throw ConfigError("duplicate method name '" + m.name + "'");
    json cfg = json::object();
    if (e.contains("config_file")) {
      const fs::path p = base / get_or<std::string>(e, "config_file", "");
      if (!fs::exists(p)) throw ConfigError("method config file not found: " + p.string());
      cfg = read_json(p);
    }
    if (e.contains("config")) cfg.update(e["config"]);
    m.config = ReconConfig::from_json(cfg);
    s.methods.push_back(std::move(m));
  }

  const json sweep = j.value("sweep", json::object());
  check_keys(sweep, {"snr_db", "pixel_pitch_um", "sensor_px"}, "sweep");
  auto axis = [&](const char* key) {
    if (!sweep.contains(key) || !sweep[key].is_array() || sweep[key].empty())
      throw ConfigError(std::string("sweep axis '") + key + "' must be a non-empty list");
    return sweep[key];
  };
  for (const json& v : axis("snr_db")) {
    if (v.is_null()) s.snr_db.push_back(std::nullopt);
    else if (v.is_number()) s.snr_db.push_back(v.get<double>());
    else throw ConfigError("snr_db entries must be numbers or null");
  }
  try {
    s.pixel_pitch_um = axis("pixel_pitch_um").get<std::vector<double>>();
    s.sensor_px = axis("sensor_px").get<std::vector<int>>();
    if (!j.contains("seeds") || !j["seeds"].is_array() || j["seeds"].empty())
      throw ConfigError("experiment spec needs a non-empty 'seeds' list");
    s.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
  } catch (const json::exception&) {
    throw ConfigError("sweep axes and seeds must be numeric lists");
  }
  for (double p : s.pixel_pitch_um)
    if (!(p > 0.0)) throw ConfigError("pixel pitches must be positive");
  for (int m : s.sensor_px)
    if (m < 2) throw ConfigError("sensor_px entries must be >= 2");

  if (j.contains("output_dir")) s.output_dir = base / get_or<std::string>(j, "output_dir", "");
  s.record_wall_time = get_or(j, "record_wall_time", s.record_wall_time);
  s.depth_threshold = get_or(j, "depth_threshold", s.depth_threshold);
  s.pngs = get_or(j, "pngs", s.pngs);
  return s;
}

namespace {

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_';
  return out;
}

struct Job {
  std::size_t scene;
  std::size_t method;
  std::optional<double> snr;
  double pitch_um;
  int sensor_px;
  std::uint64_t seed;

  std::string id(const ExperimentSpec& s) const {
    std::ostringstream ss;
    ss << sanitize(s.scenes[scene].name) << "__" << sanitize(s.methods[method].name) << "__snr"
       << (snr ? fmt(*snr, 10) : std::string("none")) << "__p" << fmt(pitch_um, 10) << "__m"
       << sensor_px << "__s" << seed;
    return ss.str();
  }
};

json row_to_json(const ResultRow& r) {
  return {{"scene", r.scene},
          {"method", r.method},
          {"reg", r.reg},
          {"snr_db", r.snr_db ? json(*r.snr_db) : json(nullptr)},
          {"pixel_pitch_um", r.pixel_pitch_um},
          {"sensor_px", r.sensor_px},
          {"psnr_db", r.psnr_db},
          {"depth_rmse_mm", r.depth_rmse_mm},
          {"wall_s", r.wall_s ? json(*r.wall_s) : json(nullptr)},
          {"seed", r.seed}};
}

std::optional<ResultRow> row_from_report(const fs::path& path, const std::string& job_id) {
  try {
    const json rep = read_json(path);
    if (rep.value("status", "") != "ok" || rep.value("job", "") != job_id) return std::nullopt;
    const json& r = rep.at("row");
    ResultRow row;
    row.scene = r.at("scene").get<std::string>();
    row.method = r.at("method").get<std::string>();
    row.reg = r.at("reg").get<std::string>();
    if (!r.at("snr_db").is_null()) row.snr_db = r.at("snr_db").get<double>();
    row.pixel_pitch_um = r.at("pixel_pitch_um").get<double>();
    row.sensor_px = r.at("sensor_px").get<int>();
    row.psnr_db = r.at("psnr_db").get<double>();
    row.depth_rmse_mm = r.at("depth_rmse_mm").get<double>();
    if (!r.at("wall_s").is_null()) row.wall_s = r.at("wall_s").get<double>();
    row.seed = r.at("seed").get<std::uint64_t>();
    for (const char* f : {"intensity.pfm", "alpha.pfm", "depth_m.pfm"})
      if (!fs::exists(path.parent_path() / f)) return std::nullopt;
    return row;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

Scene experiment_scene(const ExperimentScene& sc, const CameraGeometry& geom) {
  if (sc.path) return load_scene(*sc.path, geom);
  SyntheticSpec sy = *sc.synthetic;
  const SyntheticScene s = make_synthetic_scene(sy);
  const int n = geom.scene_pixels;
  Eigen::MatrixXd intensity = area_resample(s.intensity, n, n);
  if (intensity.maxCoeff() > 0.0) intensity /= intensity.maxCoeff();
  const Eigen::MatrixXd depth = area_resample(s.depth_m, n, n);
  return {intensity, alpha_map_from_depth(depth, geom.mask_sensor_distance_m)};
}

}  // namespace

ExperimentSummary run_experiment(const ExperimentSpec& spec, const ExperimentOptions& opts,
                                 std::ostream& log) {
  if (opts.workers < 1) throw UsageError("--workers must be >= 1");
  if (opts.max_jobs && *opts.max_jobs < 0) throw UsageError("--max-jobs must be >= 0");
  const fs::path out_dir = spec.output_dir;
  fs::create_directories(out_dir / "jobs");

  MaskProfile profile;
  std::string mask_sha;
  if (spec.mask_path) {
    const std::string bytes = read_file(*spec.mask_path);
    profile = decode_mask(bytes);
    mask_sha = sha256_hex(bytes);
  } else {
    const std::string bytes = encode_mask(spec.mask.build());
    // Round-trip through the file encoding so runs match the saved mask exactly.
    profile = decode_mask(bytes);
    mask_sha = sha256_hex(bytes);
    atomic_write(out_dir / "mask.bin", bytes);
  }

  std::vector<Job> jobs;
  for (std::size_t sc = 0; sc < spec.scenes.size(); ++sc)
    for (std::size_t me = 0; me < spec.methods.size(); ++me)
      for (const auto& snr : spec.snr_db)
        for (double pitch : spec.pixel_pitch_um)
          for (int m : spec.sensor_px)
            for (std::uint64_t seed : spec.seeds) jobs.push_back({sc, me, snr, pitch, m, seed});

  ExperimentSummary summary;
  summary.total = static_cast<int>(jobs.size());
  std::vector<std::optional<ResultRow>> rows(jobs.size());
  std::vector<std::size_t> pending;
  for (std::size_t k = 0; k < jobs.size(); ++k) {
    const std::string id = jobs[k].id(spec);
    rows[k] = row_from_report(out_dir / "jobs" / id / "report.json", id);
    if (rows[k]) ++summary.skipped;
    else pending.push_back(k);
  }
  bool interrupted = false;
  if (opts.max_jobs && static_cast<std::size_t>(*opts.max_jobs) < pending.size()) {
    pending.resize(*opts.max_jobs);
    interrupted = true;
  }
  log << "experiment: " << summary.total << " jobs, " << summary.skipped << " already complete, "
      << pending.size() << " to run with " << opts.workers << " worker(s)\n";

  const int workers = std::max(1, std::min<int>(opts.workers, static_cast<int>(pending.size())));
  const fs::path csv_path = out_dir / "results.csv";
  std::mutex log_mutex;
  std::atomic<std::size_t> next{0};
  std::atomic<int> failed{0};

  auto run_one = [&](std::size_t k) {
    const Job& job = jobs[k];
    const std::string id = job.id(spec);
    const fs::path dir = out_dir / "jobs" / id;
    const ExperimentMethod& method = spec.methods[job.method];
    ResultRow row;
    row.scene = spec.scenes[job.scene].name;
    row.method = method.name;
    row.reg = method.config.method == Method::continuous ? to_string(method.config.reg)
              : method.config.method == Method::grid3d   ? "l1"
                                                         : "none";
    row.snr_db = job.snr;
    row.pixel_pitch_um = job.pitch_um;
    row.sensor_px = job.sensor_px;
    row.seed = job.seed;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      CameraGeometry geom;
      geom.mask_sensor_distance_m = spec.d_m;
      geom.sensor_pixels = job.sensor_px;
      geom.pixel_pitch_m = job.pitch_um / 1e6;
      geom.half_fov_deg = spec.half_fov_deg;
      geom.scene_pixels = spec.scene_px;
      const Scene gt = experiment_scene(spec.scenes[job.scene], geom);
      // Serial accumulation keeps results independent of the worker count.
      ForwardModel model(profile, geom, exec_from_flags(1, true));
      Measurement meas = model.simulate(gt, job.snr, job.seed);
      meas.meta.mask_sha256 = mask_sha;
      // Reconstruct from the stored float32 data of record.
      meas.y = meas.y.cast<float>().cast<double>();
      fs::create_directories(dir);
      write_measurement(dir / "measurement", meas);
      const ReconResult res = reconstruct(model, meas.y, method.config);
      const Metrics met = evaluate(res.scene, gt, geom, spec.depth_threshold);
      row.psnr_db = met.psnr_db;
      row.depth_rmse_mm = met.depth_rmse_m * 1e3;
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (spec.record_wall_time) row.wall_s = wall;
      json report = {{"status", "ok"},
                     {"job", id},
                     {"row", row_to_json(row)},
                     {"metrics", {{"psnr_db", met.psnr_db}, {"depth_rmse_m", met.depth_rmse_m},
                                  {"depth_threshold", spec.depth_threshold}}},
                     {"config", method.config.to_json()},
                     {"geometry", meta_to_json(meas.meta)["geometry"]},
                     {"objective_history", res.objective_history},
                     {"stages", res.stages}};
      if (spec.record_wall_time) report["timings"] = {{"reconstruct_s", res.wall_time_s}, {"job_s", wall}};
      write_results(dir, res.scene, geom, report, spec.pngs);
      append_csv_row(csv_path, row);
      rows[k] = row;
      std::lock_guard<std::mutex> lock(log_mutex);
      log << "  done " << id << ": psnr " << fmt(row.psnr_db, 4) << " dB, depth rmse "
          << fmt(row.depth_rmse_mm, 4) << " mm\n";
    } catch (const std::exception& e) {
      ++failed;
      row.psnr_db = std::numeric_limits<double>::quiet_NaN();
      row.depth_rmse_mm = std::numeric_limits<double>::quiet_NaN();
      rows[k] = row;
      try {
        fs::create_directories(dir);
        write_json(dir / "error.json", {{"status", "failed"}, {"job", id}, {"error", e.what()}});
        append_csv_row(csv_path, row);
      } catch (const std::exception&) {
      }
      std::lock_guard<std::mutex> lock(log_mutex);
      log << "  FAILED " << id << ": " << e.what() << "\n";
    }
  };

  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i; (i = next++) < pending.size();) run_one(pending[i]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  summary.ran = static_cast<int>(pending.size());
  summary.failed = failed;
  if (!interrupted) {
    std::vector<ResultRow> all;
    for (const auto& r : rows)
      if (r) all.push_back(*r);
    write_results_csv(csv_path, all);
    summary.finalized = true;
  }
  log << "experiment: ran " << summary.ran << ", failed " << summary.failed
      << (summary.finalized ? ", results.csv finalized\n" : ", stopped early (resume to finish)\n");
  return summary;
}

namespace {

struct Globals {
  int threads = 0;
  bool deterministic = false;
};

int cmd_genmask(const MaskSpec& spec, const fs::path& out_path, std::ostream& out) {
  const MaskProfile p = spec.build();
  const BinaryPattern pat = spec.pattern();
  const std::string bytes = encode_mask(p);
  atomic_write(out_path, bytes);
  out << "pattern: " << pat.bits.size() << " features x " << fmt(pat.feature_width_m * 1e6)
      << " um = " << fmt(pat.width_m() * 1e3) << " mm, " << pat.ones() << " open\n";
  out << "profile: " << p.samples().size() << " samples, step " << fmt(p.grid_step_m() * 1e6)
      << " um, support [" << fmt(p.support_lo_m() * 1e3) << ", " << fmt(p.support_hi_m() * 1e3)
      << "] mm (width " << fmt((p.support_hi_m() - p.support_lo_m()) * 1e3) << " mm)\n";
  out << "sha256: " << sha256_hex(bytes) << "\n";
  return kExitOk;
}

int cmd_genscene(const SyntheticSpec& spec, const fs::path& out_dir, std::ostream& out) {
  const SyntheticScene s = make_synthetic_scene(spec);
  SceneBundle b{s.intensity, s.depth_m,
                {{"provenance", {{"generator", "synthetic"}, {"kind", spec.kind}, {"seed", spec.seed},
                                 {"z_near_m", spec.z_near_m}, {"z_far_m", spec.z_far_m}}}}};
  write_scene_bundle(out_dir, b);
  out << "scene " << spec.kind << " " << spec.n << "x" << spec.n << " depth ["
      << fmt(s.depth_m.minCoeff()) << ", " << fmt(s.depth_m.maxCoeff()) << "] m -> "
      << out_dir.string() << "\n";
  return kExitOk;
}

struct SimulateArgs {
  fs::path scene, mask, out;
  double d_mm = 4.0;
  int sensor_px = 512;
  double pixel_um = 50.0;
  double half_fov_deg = 18.0;
  int scene_px = 128;
  double snr_db = 0.0;
  bool has_snr = false;
  std::uint64_t seed = 0;
};

int cmd_simulate(const SimulateArgs& a, const Globals& g, std::ostream& out) {
  CameraGeometry geom;
  geom.mask_sensor_distance_m = a.d_mm / 1e3;
  geom.sensor_pixels = a.sensor_px;
  geom.pixel_pitch_m = a.pixel_um / 1e6;
  geom.half_fov_deg = a.half_fov_deg;
  geom.scene_pixels = a.scene_px;
  try {
    geom.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const SceneBundle bundle = read_scene_bundle(a.scene);
  if (bundle.info.contains("half_fov_deg") &&
      std::abs(bundle.info["half_fov_deg"].get<double>() - geom.half_fov_deg) > 1e-9)
    throw ConfigError("scene was sampled for half_fov_deg = " + bundle.info["half_fov_deg"].dump() +
                      " but --half-fov-deg is " + fmt(geom.half_fov_deg));
  const Scene scene = load_scene(a.scene, geom);
  const std::string mask_bytes = read_file(a.mask);
  ForwardModel model(decode_mask(mask_bytes), geom, exec_from_flags(g.threads, g.deterministic));
  std::optional<double> snr;
  if (a.has_snr) snr = a.snr_db;
  Measurement m = model.simulate(scene, snr, a.seed);
  m.meta.mask_sha256 = sha256_hex(mask_bytes);
  m.meta.extra["scene"] = {{"path", a.scene.string()}};
  write_measurement(a.out, m);
  out << "measurement " << geom.sensor_pixels << "x" << geom.sensor_pixels << " ("
      << (snr ? fmt(*snr) + " dB SNR" : std::string("noiseless")) << ", seed " << a.seed << ") -> "
      << a.out.string() << "\n";
  return kExitOk;
}

struct ReconstructArgs {
  fs::path measurement, mask, out;
  std::optional<fs::path> config, gt;
  std::string method = "continuous", reg = "wtv2", init = "greedy", candidates;
  std::optional<double> lambda, sigma, mu;
  std::optional<int> outer_iters;
  double threshold = 0.0;
  bool png = false;
};

int cmd_reconstruct(const ReconstructArgs& a, const Globals& g, std::ostream& out) {
  ReconConfig cfg;
  try {
    json j = a.config ? read_json(*a.config) : json::object();
    j["method"] = a.method;
    j["reg"] = a.reg;
    j["init"] = a.init;
    if (!a.candidates.empty()) j["candidates"] = a.candidates;
    if (a.lambda) j["lambda"] = *a.lambda;
    if (a.sigma) j["sigma"] = *a.sigma;
    if (a.mu) j["mu"] = *a.mu;
    if (a.outer_iters) j["outer_iters"] = *a.outer_iters;
    cfg = ReconConfig::from_json(j);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const Measurement m = read_measurement(a.measurement);
  const std::string mask_bytes = read_file(a.mask);
  const std::string sha = sha256_hex(mask_bytes);
  if (!m.meta.mask_sha256.empty() && m.meta.mask_sha256 != sha)
    throw ConfigError("mask file does not match the measurement (sha256 " + sha + " vs " +
                      m.meta.mask_sha256 + ")");
  ForwardModel model(decode_mask(mask_bytes), m.meta.geometry,
                     exec_from_flags(g.threads, g.deterministic));
  const ReconResult res = reconstruct(model, m.y, cfg);
  json report = {{"status", "ok"},
                 {"config", cfg.to_json()},
                 {"measurement", meta_to_json(m.meta)},
                 {"objective_history", res.objective_history},
                 {"stages", res.stages},
                 {"timings", {{"reconstruct_s", res.wall_time_s}}}};
  if (a.gt) {
    const Scene gt = load_scene(*a.gt, m.meta.geometry);
    const Metrics met = evaluate(res.scene, gt, m.meta.geometry, a.threshold);
    report["metrics"] = {{"psnr_db", met.psnr_db}, {"depth_rmse_m", met.depth_rmse_m},
                         {"depth_threshold", a.threshold}};
    out << "psnr " << fmt(met.psnr_db, 4) << " dB, depth rmse " << fmt(met.depth_rmse_m * 1e3, 4)
        << " mm\n";
  }
  write_results(a.out, res.scene, m.meta.geometry, report, a.png);
  out << to_string(cfg.method) << " reconstruction written to " << a.out.string() << " ("
      << fmt(res.wall_time_s, 3) << " s)\n";
  return kExitOk;
}

struct GradcheckArgs {
  int scene_px = 8;
  int sensor_px = 32;
  std::uint64_t seed = 1;
  double h = 1e-7;
  int order = 6;
  double pixel_um = 50.0;
  bool zero = false;
};

int cmd_gradcheck(const GradcheckArgs& a, const Globals& g, std::ostream& out, std::ostream& err) {
  if (a.scene_px < 2 || a.sensor_px < 2) throw UsageError("--scene-px and --sensor-px must be >= 2");
  if (!(a.h > 0.0)) throw UsageError("--h must be positive");
  if (a.h > 1e-4)
    err << "warning: h = " << a.h
        << " is large; finite-difference truncation error will dominate the comparison\n";
  CameraGeometry geom;
  geom.sensor_pixels = a.sensor_px;
  geom.scene_pixels = a.scene_px;
  geom.pixel_pitch_m = a.pixel_um / 1e6;
  MaskSpec ms;
  ms.order = a.order;
  ForwardModel model(ms.build(), geom, exec_from_flags(g.threads, g.deterministic));
  const int n = a.scene_px;
  std::mt19937_64 rng(a.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto alpha_map = [&] { return Eigen::MatrixXd::NullaryExpr(n, n, [&] { return 0.99 + 0.008 * unif(rng); }); };
  Scene truth{Eigen::MatrixXd::NullaryExpr(n, n, [&] { return unif(rng); }), alpha_map()};
  Scene at{a.zero ? Eigen::MatrixXd::Zero(n, n) : Eigen::MatrixXd(Eigen::MatrixXd::NullaryExpr(n, n, [&] { return unif(rng); })),
           alpha_map()};
  const Eigen::MatrixXd y = model.forward(truth);
  const Eigen::MatrixXd grad = model.depth_gradient(y, at);
  Eigen::MatrixXd fd(n, n);
  for (Eigen::Index k = 0; k < fd.size(); ++k) {
    Scene p = at, q = at;
    p.inv_depth(k) += a.h;
    q.inv_depth(k) -= a.h;
    fd(k) = (model.data_loss(y, p) - model.data_loss(y, q)) / (2.0 * a.h);
  }
  const double diff = (grad - fd).norm();
  const double scale = fd.norm();
  const double rel = scale > 0.0 ? diff / scale : diff;
  out << "analytic vs central differences (h = " << a.h << "): relative l2 error " << rel
      << ", max abs diff " << (grad - fd).cwiseAbs().maxCoeff() << "\n";
  if (grad.isZero(0.0) && fd.isZero(0.0)) out << "gradient is exactly zero\n";
  return rel < 1e-4 ? kExitOk : kExitFailure;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Lensless depth and intensity reconstruction toolkit", "l3d"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--threads", g.threads, "Operator threads (0 = L3D_THREADS or all cores)")
      ->check(CLI::NonNegativeNumber);
  app.add_flag("--deterministic", g.deterministic, "Serial accumulation for bit-stable output");

  MaskSpec mask;
  fs::path mask_out;
  std::string taps_text;
  std::string pattern_file;
  auto* genmask = app.add_subcommand("genmask", "Generate an MLS mask profile file");
  genmask->add_option("--order", mask.order, "LFSR order")->capture_default_str();
  genmask->add_option("--pad", mask.pad, "Zero features appended (-1: pad order 10 to 1024)")
      ->capture_default_str();
  genmask->add_option("--seed-state", mask.seed_state, "Nonzero LFSR start state")->capture_default_str();
  genmask->add_option("--taps", taps_text, "Feedback polynomial bitmask (e.g. 0xB)");
  genmask->add_option("--pattern", pattern_file, "Text file of 0/1 features instead of an MLS");
  genmask->add_option("--feature-um", mask.feature_um, "Feature width")->capture_default_str();
  genmask->add_option("--blur-um", mask.blur_um, "Gaussian kernel length")->capture_default_str();
  genmask->add_option("--blur-sigma", mask.blur_sigma, "Kernel std in fine-grid samples")
      ->capture_default_str();
  auto* step_opt = genmask->add_option("--grid-step-um", "Fine grid step (default feature/20)");
  genmask->add_option("--out", mask_out, "Output mask file")->required();

  SyntheticSpec syn;
  fs::path scene_out;
  auto* genscene = app.add_subcommand("genscene", "Write a synthetic scene bundle");
  genscene->add_option("--kind", syn.kind, "ramp_step | plane | two_plane")->capture_default_str();
  genscene->add_option("--n", syn.n, "Scene size")->capture_default_str();
  genscene->add_option("--z-near-m", syn.z_near_m, "Nearest depth")->capture_default_str();
  genscene->add_option("--z-far-m", syn.z_far_m, "Farthest depth")->capture_default_str();
  genscene->add_option("--seed", syn.seed, "Texture seed")->capture_default_str();
  genscene->add_option("--out", scene_out, "Output directory")->required();

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "Simulate a measurement bundle from a scene");
  simulate->add_option("--scene", sim.scene, "Scene bundle directory")->required();
  simulate->add_option("--mask", sim.mask, "Mask file")->required();
  simulate->add_option("--d-mm", sim.d_mm, "Mask-sensor distance")->capture_default_str();
  simulate->add_option("--sensor-px", sim.sensor_px, "Sensor pixels per side")->capture_default_str();
  simulate->add_option("--pixel-um", sim.pixel_um, "Sensor pixel pitch")->capture_default_str();
  simulate->add_option("--half-fov-deg", sim.half_fov_deg, "Half field of view")->capture_default_str();
  simulate->add_option("--scene-px", sim.scene_px, "Scene angles per side")->capture_default_str();
  auto* snr_opt = simulate->add_option("--snr-db", sim.snr_db, "Noise level (omit for noiseless)");
  simulate->add_option("--seed", sim.seed, "Noise seed")->capture_default_str();
  simulate->add_option("--out", sim.out, "Output measurement directory")->required();

  ReconstructArgs rec;
  std::string config_path, gt_path;
  double lambda = 0, sigma = 0, mu = 0;
  int outer = 0;
  auto* reconstruct_cmd = app.add_subcommand("reconstruct", "Recover intensity and depth");
  reconstruct_cmd->add_option("--measurement", rec.measurement, "Measurement directory")->required();
  reconstruct_cmd->add_option("--mask", rec.mask, "Mask file")->required();
  reconstruct_cmd->add_option("--method", rec.method, "sweep | greedy | continuous | grid3d")
      ->check(CLI::IsMember({"sweep", "greedy", "continuous", "grid3d"}))
      ->capture_default_str();
  reconstruct_cmd->add_option("--reg", rec.reg, "none | tv2 | wtv2 | tv1")
      ->check(CLI::IsMember({"none", "tv2", "wtv2", "tv1"}))
      ->capture_default_str();
  reconstruct_cmd->add_option("--init", rec.init, "greedy | single_plane")
      ->check(CLI::IsMember({"greedy", "single_plane"}))
      ->capture_default_str();
  auto* lambda_opt = reconstruct_cmd->add_option("--lambda", lambda, "Regularization weight");
  auto* sigma_opt = reconstruct_cmd->add_option("--sigma", sigma, "Weighted-TV scale");
  auto* mu_opt = reconstruct_cmd->add_option("--mu", mu, "Split-Bregman coupling");
  reconstruct_cmd->add_option("--candidates", rec.candidates, "a0:a1:D inverse-depth candidates");
  auto* outer_opt = reconstruct_cmd->add_option("--outer-iters", outer, "Alternations");
  reconstruct_cmd->add_option("--config", config_path, "JSON reconstruction config");
  reconstruct_cmd->add_option("--gt", gt_path, "Ground-truth scene bundle for metrics");
  reconstruct_cmd->add_option("--depth-threshold", rec.threshold, "Intensity mask for depth RMSE");
  reconstruct_cmd->add_flag("--png", rec.png, "Also write PNG previews");
  reconstruct_cmd->add_option("--out", rec.out, "Results directory")->required();

  GradcheckArgs gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "Compare the depth gradient with finite differences");
  gradcheck->set_help_flag("--help", "Print this help message and exit");
  gradcheck->add_option("--scene-px", gc.scene_px)->capture_default_str();
  gradcheck->add_option("--sensor-px", gc.sensor_px)->capture_default_str();
  gradcheck->add_option("--seed", gc.seed)->capture_default_str();
  gradcheck->add_option("--h", gc.h, "Finite-difference step")->capture_default_str();
  gradcheck->add_option("--order", gc.order, "Mask LFSR order")->capture_default_str();
  gradcheck->add_option("--pixel-um", gc.pixel_um)->capture_default_str();
  gradcheck->add_flag("--zero-intensity", gc.zero, "Evaluate at an all-zero intensity");

  fs::path spec_path, exp_out;
  ExperimentOptions eo;
  int max_jobs = -1;
  auto* experiment = app.add_subcommand("experiment", "Run a sweep experiment from a JSON spec");
  experiment->add_option("--spec", spec_path, "Experiment spec file")->required();
  experiment->add_option("--workers", eo.workers, "Concurrent jobs")->capture_default_str();
  experiment->add_option("--out", exp_out, "Output directory (overrides the spec)");
  experiment->add_option("--max-jobs", max_jobs, "Run at most this many jobs, then stop");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*genmask) {
      if (!taps_text.empty()) {
        try {
          std::size_t used = 0;
          mask.taps = static_cast<std::uint32_t>(std::stoul(taps_text, &used, 0));
          if (used != taps_text.size()) throw std::invalid_argument(taps_text);
        } catch (const std::logic_error&) {
          throw UsageError("--taps must be an integer bitmask");
        }
      }
      if (!pattern_file.empty()) mask.pattern_file = pattern_file;
      if (step_opt->count()) mask.grid_step_um = step_opt->as<double>();
      return cmd_genmask(mask, mask_out, out);
    }
    if (*genscene) return cmd_genscene(syn, scene_out, out);
    if (*simulate) {
      sim.has_snr = snr_opt->count() > 0;
      return cmd_simulate(sim, g, out);
    }
    if (*reconstruct_cmd) {
      if (rec.method == "grid3d" && rec.reg == "tv1")
        throw UsageError("--method grid3d cannot be combined with --reg tv1");
      if (!config_path.empty()) rec.config = config_path;
      if (!gt_path.empty()) rec.gt = gt_path;
      if (lambda_opt->count()) rec.lambda = lambda;
      if (sigma_opt->count()) rec.sigma = sigma;
      if (mu_opt->count()) rec.mu = mu;
      if (outer_opt->count()) rec.outer_iters = outer;
      return cmd_reconstruct(rec, g, out);
    }
    if (*gradcheck) return cmd_gradcheck(gc, g, out, err);
    if (*experiment) {
      if (max_jobs >= 0) eo.max_jobs = max_jobs;
      if (!fs::exists(spec_path)) throw UsageError("spec file not found: " + spec_path.string());
      ExperimentSpec spec = ExperimentSpec::from_json(read_json(spec_path), spec_path.parent_path());
      if (!exp_out.empty()) spec.output_dir = exp_out;
      const ExperimentSummary s = run_experiment(spec, eo, out);
      return s.failed > 0 ? kExitFailure : kExitOk;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace l3d
