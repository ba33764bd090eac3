#pragma once

// Synthetic BEV dataset: labeled scenes of lane dividers, road boundaries and
// pedestrian crossings plus a rendered feature grid, so the detection head is
// trainable without cameras. (seed, config) fully determines every byte;
// vertex and grid values are snapped to f32 so disk round-trips are
// bit-exact.
//
// On-disk layout: <dir>/manifest.json plus one <split>.bin per split. Each
// record is length-prefixed (u64 LE payload bytes):
//   scene_id u64 | element count u16 | per element:
//     class u8, closed u8, vertex count u16, vertices as f32 LE (x,y) pairs
//   | C*H*W f32 LE grid, channel-major rows of W.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ean/errors.hpp"
#include "ean/geometry.hpp"
#include "ean/rng.hpp"
#include "ean/tensor.hpp"
#include "ean/util.hpp"

namespace ean {

struct DataConfig {
  int64_t train_scenes = 512;
  int64_t val_scenes = 64;
  int channels = 16;  // 3 class channels + zero-filled spare capacity
  int height = 100;   // y axis, 0.6 m / cell
  int width = 50;     // x axis, 0.6 m / cell
  double sigma = 0.75;        // render sharpness, meters
  double noise_sigma = 0.05;  // i.i.d. Gaussian noise on class channels
  int max_instances = 8;
  int n_points = 10;  // resampled points per element downstream
  int dividers_min = 1, dividers_max = 3;
  int boundaries_min = 2, boundaries_max = 2;
  int crossings_min = 1, crossings_max = 2;
  int raw_vertices = 16;  // vertices sampled per generated curve
  double divider_drift = 2.0;
  double divider_bow = 2.5;
  double boundary_bow = 1.0;

  void validate() const {
    if (channels < kNumMapClasses) throw ConfigError("data: need >= 3 BEV channels");
    if (height < 2 || width < 2) throw ConfigError("data: BEV grid too small");
    if (dividers_min < 0 || dividers_max < dividers_min ||
        boundaries_min < 0 || boundaries_max < boundaries_min ||
        crossings_min < 0 || crossings_max < crossings_min) {
      throw ConfigError("data: malformed per-class count ranges");
    }
    if (dividers_max + boundaries_max + crossings_max == 0) {
      throw ConfigError("data: no element classes requested");
    }
    if (dividers_max + boundaries_max + crossings_max > max_instances) {
      throw ConfigError("data: class count ranges can exceed max_instances");
    }
    if (dividers_max > 6) throw ConfigError("data: at most 6 dividers fit the lateral slots");
    if (n_points < 2) throw ConfigError("data: n_points must be >= 2");
  }
};

inline void to_json(nlohmann::json& j, const DataConfig& c) {
  j = nlohmann::json{{"train_scenes", c.train_scenes},
                     {"val_scenes", c.val_scenes},
                     {"channels", c.channels},
                     {"height", c.height},
                     {"width", c.width},
                     {"sigma", c.sigma},
                     {"noise_sigma", c.noise_sigma},
                     {"max_instances", c.max_instances},
                     {"n_points", c.n_points},
                     {"dividers_min", c.dividers_min},
                     {"dividers_max", c.dividers_max},
                     {"boundaries_min", c.boundaries_min},
                     {"boundaries_max", c.boundaries_max},
                     {"crossings_min", c.crossings_min},
                     {"crossings_max", c.crossings_max},
                     {"raw_vertices", c.raw_vertices},
                     {"divider_drift", c.divider_drift},
                     {"divider_bow", c.divider_bow},
                     {"boundary_bow", c.boundary_bow}};
}

inline void from_json(const nlohmann::json& j, DataConfig& c) {
  j.at("train_scenes").get_to(c.train_scenes);
  j.at("val_scenes").get_to(c.val_scenes);
  j.at("channels").get_to(c.channels);
  j.at("height").get_to(c.height);
  j.at("width").get_to(c.width);
  j.at("sigma").get_to(c.sigma);
  j.at("noise_sigma").get_to(c.noise_sigma);
  j.at("max_instances").get_to(c.max_instances);
  j.at("n_points").get_to(c.n_points);
  j.at("dividers_min").get_to(c.dividers_min);
  j.at("dividers_max").get_to(c.dividers_max);
  j.at("boundaries_min").get_to(c.boundaries_min);
  j.at("boundaries_max").get_to(c.boundaries_max);
  j.at("crossings_min").get_to(c.crossings_min);
  j.at("crossings_max").get_to(c.crossings_max);
  j.at("raw_vertices").get_to(c.raw_vertices);
  j.at("divider_drift").get_to(c.divider_drift);
  j.at("divider_bow").get_to(c.divider_bow);
  j.at("boundary_bow").get_to(c.boundary_bow);
}

struct Scene {
  uint64_t scene_id = 0;
  std::vector<MapElement> elements;
  Tensor bev_feature;  // [C,H,W]
  uint64_t generator_seed = 0;
  double noise_sigma = 0.0;
};

struct DatasetManifest {
  std::string split;
  int64_t count = 0;
  int n_points = 0;
  int channels = 0, height = 0, width = 0;
  uint64_t seed = 0;
  uint64_t config_hash = 0;
  uint64_t content_hash = 0;
};

namespace detail_data {

// The volatile store blocks GCC from eliding the f32 rounding when this
// inlines next to vectorized caller loops (observed with GCC 11 at -O3).
inline double snap_f32(double v) {
  volatile float f = static_cast<float>(v);
  return static_cast<double>(f);
}

inline Vec2 bezier2(Vec2 p0, Vec2 p1, Vec2 p2, double t) {
  const double u = 1.0 - t;
  return (u * u) * p0 + (2.0 * u * t) * p1 + (t * t) * p2;
}

inline MapElement sample_curve(int class_id, Vec2 p0, Vec2 p1, Vec2 p2, int n_vertices) {
  MapElement e;
  e.class_id = class_id;
  e.closed = false;
  for (int i = 0; i < n_vertices; ++i) {
    const double t = static_cast<double>(i) / (n_vertices - 1);
    Vec2 v = bezier2(p0, p1, p2, t);
    v.x = std::clamp(v.x, kBevXMin, kBevXMax);
    v.y = std::clamp(v.y, kBevYMin, kBevYMax);
    e.vertices.push_back({snap_f32(v.x), snap_f32(v.y)});
  }
  return e;
}

inline double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = ab.x * ab.x + ab.y * ab.y;
  if (len2 <= 0.0) return (p - a).norm();
  double t = ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2;
  t = std::clamp(t, 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

inline double point_element_distance(Vec2 p, const MapElement& e) {
  double best = 1e300;
  for (size_t i = 0; i + 1 < e.vertices.size(); ++i) {
    best = std::min(best, point_segment_distance(p, e.vertices[i], e.vertices[i + 1]));
  }
  if (e.closed && e.vertices.size() >= 2) {
    best = std::min(best, point_segment_distance(p, e.vertices.back(), e.vertices.front()));
  }
  return best;
}

}  // namespace detail_data

inline Scene generate_scene(const DataConfig& cfg, uint64_t scene_id, uint64_t dataset_seed) {
  cfg.validate();
  using detail_data::snap_f32;
  RandomStream rng = RandomStream::derived(dataset_seed, scene_id);
  Scene scene;
  scene.scene_id = scene_id;
  scene.generator_seed = dataset_seed;
  scene.noise_sigma = cfg.noise_sigma;

  auto count_in = [&](int lo, int hi) {
    return lo + static_cast<int>(rng.uniform_index(static_cast<uint64_t>(hi - lo + 1)));
  };

  // Lane dividers: gentle curves roughly parallel to the y axis, kept apart
  // laterally so instances stay distinguishable.
  const int n_div = count_in(cfg.dividers_min, cfg.dividers_max);
  std::vector<double> slots = {-7.5, -4.5, -1.5, 1.5, 4.5, 7.5};
  rng.shuffle(slots);
  for (int i = 0; i < n_div; ++i) {
    const double x0 = slots[static_cast<size_t>(i)] + rng.uniform(-1.0, 1.0);
    const double y0 = rng.uniform(-28.0, -22.0);
    const double y1 = rng.uniform(22.0, 28.0);
    const double drift = rng.uniform(-cfg.divider_drift, cfg.divider_drift);
    const double bow = rng.uniform(-cfg.divider_bow, cfg.divider_bow);
    scene.elements.push_back(detail_data::sample_curve(
        kLaneDivider, {x0, y0}, {x0 + drift / 2 + bow, (y0 + y1) / 2}, {x0 + drift, y1},
        cfg.raw_vertices));
  }

  // Road boundaries: long curves hugging the lateral borders.
  const int n_bound = count_in(cfg.boundaries_min, cfg.boundaries_max);
  for (int i = 0; i < n_bound; ++i) {
    const double side = (i % 2 == 0) ? -1.0 : 1.0;
    const double x0 = side * rng.uniform(11.5, 13.8);
    const double bow = rng.uniform(-cfg.boundary_bow, cfg.boundary_bow);
    const double y0 = -29.0 + rng.uniform(0.0, 1.0);
    const double y1 = 29.0 - rng.uniform(0.0, 1.0);
    scene.elements.push_back(detail_data::sample_curve(
        kBoundary, {x0, y0}, {x0 + bow, (y0 + y1) / 2}, {x0 + rng.uniform(-0.5, 0.5), y1},
        cfg.raw_vertices));
  }

  // Pedestrian crossings: closed rectangles with random pose, redrawn until
  // all corners are inside the BEV range.
  const int n_cross = count_in(cfg.crossings_min, cfg.crossings_max);
  for (int i = 0; i < n_cross; ++i) {
    MapElement e;
    e.class_id = kPedestrianCrossing;
    e.closed = true;
    for (int attempt = 0; attempt < 32; ++attempt) {
      const double cx = rng.uniform(-5.0, 5.0);
      const double cy = rng.uniform(-18.0, 18.0);
      const double hw = rng.uniform(2.5, 4.5);
      const double hh = rng.uniform(1.2, 2.2);
      const double th = rng.uniform(-0.3, 0.3);
      const double c = std::cos(th), s = std::sin(th);
      std::vector<Vec2> corners;
      bool ok = true;
      for (auto [sx, sy] : {std::pair{-1, -1}, {1, -1}, {1, 1}, {-1, 1}}) {
        Vec2 v{cx + c * sx * hw - s * sy * hh, cy + s * sx * hw + c * sy * hh};
        if (v.x < kBevXMin + 0.5 || v.x > kBevXMax - 0.5 || v.y < kBevYMin + 0.5 ||
            v.y > kBevYMax - 0.5) {
          ok = false;
        }
        corners.push_back({snap_f32(v.x), snap_f32(v.y)});
      }
      if (ok) {
        e.vertices = std::move(corners);
        break;
      }
    }
    if (e.vertices.empty()) continue;  // extremely unlucky stream; skip instance
    scene.elements.push_back(std::move(e));
  }

  if (scene.elements.empty() ||
      static_cast<int>(scene.elements.size()) > cfg.max_instances) {
    throw ConfigError("generate_scene: instance count outside [1, max_instances]");
  }

  // Render: per-class channel holds exp(-d^2 / 2 sigma^2) against the nearest
  // element of that class, plus noise; remaining channels stay zero.
  const int C = cfg.channels, H = cfg.height, W = cfg.width;
  std::vector<double> grid(static_cast<size_t>(C) * H * W, 0.0);
  const double inv2s2 = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
  for (int cls = 0; cls < kNumMapClasses; ++cls) {
    double* ch = grid.data() + static_cast<size_t>(cls) * H * W;
    for (int r = 0; r < H; ++r) {
      for (int col = 0; col < W; ++col) {
        const Vec2 cell = from_normalized(
            {(col + 0.5) / static_cast<double>(W), (r + 0.5) / static_cast<double>(H)});
        double best = 1e300;
        for (const MapElement& e : scene.elements) {
          if (e.class_id != cls) continue;
          best = std::min(best, detail_data::point_element_distance(cell, e));
        }
        if (best < 1e300) ch[r * W + col] = std::exp(-best * best * inv2s2);
      }
    }
  }
  if (cfg.noise_sigma > 0.0) {
    for (int cls = 0; cls < kNumMapClasses; ++cls) {
      double* ch = grid.data() + static_cast<size_t>(cls) * H * W;
      for (int i = 0; i < H * W; ++i) ch[i] += rng.normal(0.0, cfg.noise_sigma);
    }
  }
  for (double& v : grid) v = snap_f32(v);
  scene.bev_feature = Tensor::from_data({C, H, W}, std::move(grid));
  return scene;
}

// ---------------------------------------------------------------------------
// dataset files
// ---------------------------------------------------------------------------

namespace detail_data {

template <typename T>
void append_raw(std::string& buf, T v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(const std::string& buf, size_t& at) {
  if (at + sizeof(T) > buf.size()) throw CorruptDatasetError("record file truncated");
  T v;
  std::memcpy(&v, buf.data() + at, sizeof(T));
  at += sizeof(T);
  return v;
}

inline std::string encode_scene(const Scene& s) {
  std::string payload;
  append_raw<uint64_t>(payload, s.scene_id);
  append_raw<uint16_t>(payload, static_cast<uint16_t>(s.elements.size()));
  for (const MapElement& e : s.elements) {
    append_raw<uint8_t>(payload, static_cast<uint8_t>(e.class_id));
    append_raw<uint8_t>(payload, e.closed ? 1 : 0);
    append_raw<uint16_t>(payload, static_cast<uint16_t>(e.vertices.size()));
    for (const Vec2& v : e.vertices) {
      append_raw<float>(payload, static_cast<float>(v.x));
      append_raw<float>(payload, static_cast<float>(v.y));
    }
  }
  for (double v : s.bev_feature.values()) append_raw<float>(payload, static_cast<float>(v));
  std::string rec;
  append_raw<uint64_t>(rec, payload.size());
  rec += payload;
  return rec;
}

}  // namespace detail_data

inline uint64_t data_config_hash(const DataConfig& cfg, uint64_t seed) {
  nlohmann::json j = cfg;
  j["seed"] = seed;
  return fnv1a(j.dump());
}

inline void save_split(const std::filesystem::path& dir, const std::string& split,
                       const std::vector<Scene>& scenes, const DataConfig& cfg, uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path bin = dir / (split + ".bin");
  std::ofstream f(bin, std::ios::binary);
  if (!f) throw IoError("cannot open '" + bin.string() + "' for writing");
  uint64_t hash = fnv1a("", 0);
  for (const Scene& s : scenes) {
    const std::string rec = detail_data::encode_scene(s);
    hash = fnv1a(rec.data(), rec.size(), hash);
    f.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  }
  if (!f) throw IoError("write failed for '" + bin.string() + "'");
  f.close();

  const fs::path mpath = dir / "manifest.json";
  nlohmann::json manifest;
  if (fs::exists(mpath)) {
    std::ifstream mf(mpath);
    mf >> manifest;
  }
  manifest["config"] = cfg;
  manifest["seed"] = seed;
  manifest["config_hash"] = data_config_hash(cfg, seed);
  manifest["splits"][split] = {{"count", scenes.size()},
                               {"records_file", split + ".bin"},
                               {"content_hash", hash},
                               {"n_points", cfg.n_points},
                               {"channels", cfg.channels},
                               {"height", cfg.height},
                               {"width", cfg.width}};
  std::ofstream mf(mpath);
  if (!mf) throw IoError("cannot write manifest at '" + mpath.string() + "'");
  mf << manifest.dump(2) << "\n";
}

// Split summary (and generator config) without touching the record file.
inline DatasetManifest load_manifest(const std::filesystem::path& dir, const std::string& split,
                                     DataConfig* cfg_out = nullptr) {
  const auto mpath = dir / "manifest.json";
  std::ifstream mf(mpath);
  if (!mf) throw IoError("missing manifest at '" + mpath.string() + "'");
  nlohmann::json manifest;
  mf >> manifest;
  if (!manifest["splits"].contains(split)) {
    throw IoError("manifest has no split '" + split + "'");
  }
  const auto& js = manifest["splits"][split];
  DatasetManifest m;
  m.split = split;
  m.count = js.at("count").get<int64_t>();
  m.n_points = js.at("n_points").get<int>();
  m.channels = js.at("channels").get<int>();
  m.height = js.at("height").get<int>();
  m.width = js.at("width").get<int>();
  m.seed = manifest.at("seed").get<uint64_t>();
  m.config_hash = manifest.at("config_hash").get<uint64_t>();
  m.content_hash = js.at("content_hash").get<uint64_t>();
  if (cfg_out) *cfg_out = manifest.at("config").get<DataConfig>();
  return m;
}

inline std::vector<Scene> load_split(const std::filesystem::path& dir, const std::string& split) {
  DataConfig cfg;
  const DatasetManifest m = load_manifest(dir, split, &cfg);
  const auto bin = dir / (split + ".bin");
  std::ifstream f(bin, std::ios::binary);
  if (!f) throw IoError("missing record file '" + bin.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (fnv1a(bytes.data(), bytes.size()) != m.content_hash) {
    throw CorruptDatasetError("'" + bin.string() + "' does not match its manifest hash");
  }

  using detail_data::read_raw;
  std::vector<Scene> scenes;
  size_t at = 0;
  while (at < bytes.size()) {
    const uint64_t plen = read_raw<uint64_t>(bytes, at);
    const size_t end = at + plen;
    if (end > bytes.size()) throw CorruptDatasetError("record overruns file");
    Scene s;
    s.scene_id = read_raw<uint64_t>(bytes, at);
    s.generator_seed = m.seed;
    s.noise_sigma = cfg.noise_sigma;
    const uint16_t n_elems = read_raw<uint16_t>(bytes, at);
    for (int e = 0; e < n_elems; ++e) {
      MapElement el;
      el.class_id = read_raw<uint8_t>(bytes, at);
      el.closed = read_raw<uint8_t>(bytes, at) != 0;
      const uint16_t nv = read_raw<uint16_t>(bytes, at);
      for (int v = 0; v < nv; ++v) {
        const float x = read_raw<float>(bytes, at);
        const float y = read_raw<float>(bytes, at);
        el.vertices.push_back({static_cast<double>(x), static_cast<double>(y)});
      }
      s.elements.push_back(std::move(el));
    }
    std::vector<double> grid(static_cast<size_t>(m.channels) * m.height * m.width);
    for (double& v : grid) v = static_cast<double>(read_raw<float>(bytes, at));
    if (at != end) throw CorruptDatasetError("record length mismatch");
    s.bev_feature = Tensor::from_data({m.channels, m.height, m.width}, std::move(grid));
    scenes.push_back(std::move(s));
  }
  if (static_cast<int64_t>(scenes.size()) != m.count) {
    throw CorruptDatasetError("scene count differs from manifest");
  }
  return scenes;
}

// Generates a whole split in parallel; scene content depends only on
// (seed, config, scene_id), so the thread count never changes the bytes.
inline std::vector<Scene> generate_split(const DataConfig& cfg, uint64_t seed,
                                         uint64_t first_scene_id, int64_t count) {
  std::vector<Scene> scenes(static_cast<size_t>(count));
  parallel_for(count, [&](int64_t i) {
    scenes[static_cast<size_t>(i)] =
        generate_scene(cfg, first_scene_id + static_cast<uint64_t>(i), seed);
  });
  return scenes;
}

}  // namespace ean
