#include "rdd/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "rdd/serialize.hpp"

namespace rdd {

void SceneConfig::validate() const {
  std::ostringstream problems;
  auto bad = [&](const std::string& msg) { problems << "  scene: " << msg << "\n"; };
  if (grid_h < 4 || grid_w < 4) bad("grid must be at least 4x4");
  if (cell_size <= 0) bad("cell_size must be positive");
  if (num_classes < 1) bad("num_classes must be at least 1");
  if (min_objects < 0) bad("min_objects must be non-negative");
  if (max_objects < min_objects) bad("max_objects must be >= min_objects");
  if (points_per_object < 0) bad("points_per_object must be non-negative");
  if (clutter_density < 0) bad("clutter_density must be non-negative");
  if (count_norm <= 0) bad("count_norm must be positive");
  if (max_place_tries < 1) bad("max_place_tries must be at least 1");
  std::string all = problems.str();
  if (!all.empty()) throw ConfigError("invalid scene configuration:\n" + all);
}

KvMap SceneConfig::to_kv(const std::string& prefix) const {
  KvMap kv;
  auto put = [&](const std::string& k, const std::string& v) { kv[prefix + k] = v; };
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  put("grid_h", std::to_string(grid_h));
  put("grid_w", std::to_string(grid_w));
  put("cell_size", num(cell_size));
  put("num_classes", std::to_string(num_classes));
  put("min_objects", std::to_string(min_objects));
  put("max_objects", std::to_string(max_objects));
  put("points_per_object", num(points_per_object));
  put("clutter_density", num(clutter_density));
  put("count_norm", num(count_norm));
  put("max_place_tries", std::to_string(max_place_tries));
  return kv;
}

SceneConfig SceneConfig::from_kv(KvReader& reader, const std::string& prefix) {
  SceneConfig cfg;
  cfg.grid_h = reader.get_int(prefix + "grid_h", cfg.grid_h);
  cfg.grid_w = reader.get_int(prefix + "grid_w", cfg.grid_w);
  cfg.cell_size = reader.get_double(prefix + "cell_size", cfg.cell_size);
  cfg.num_classes = reader.get_int(prefix + "num_classes", cfg.num_classes);
  cfg.min_objects = reader.get_int(prefix + "min_objects", cfg.min_objects);
  cfg.max_objects = reader.get_int(prefix + "max_objects", cfg.max_objects);
  cfg.points_per_object =
      reader.get_double(prefix + "points_per_object", cfg.points_per_object);
  cfg.clutter_density =
      reader.get_double(prefix + "clutter_density", cfg.clutter_density);
  cfg.count_norm = reader.get_double(prefix + "count_norm", cfg.count_norm);
  cfg.max_place_tries = reader.get_int(prefix + "max_place_tries", cfg.max_place_tries);
  return cfg;
}

bool scenes_equal(const Scene& a, const Scene& b) {
  return a.seed == b.seed && a.objects == b.objects && a.points == b.points &&
         a.bev.shape() == b.bev.shape() && a.bev.vec() == b.bev.vec();
}

namespace {

// Per-class size templates in grid units: large / small / elongated footprints.
struct SizeTemplate {
  double w_lo, w_hi, l_lo, l_hi;
};
constexpr SizeTemplate kTemplates[3] = {
    {3.0, 5.0, 6.0, 9.0},   // car-like
    {1.0, 2.0, 1.0, 2.0},   // pedestrian-like
    {1.5, 2.5, 3.0, 5.0},   // cyclist-like
};

struct Aabb {
  double x0, x1, y0, y1;
  bool overlaps(const Aabb& o) const {
    return x0 < o.x1 && o.x0 < x1 && y0 < o.y1 && o.y0 < y1;
  }
};

Aabb object_aabb(double cx, double cy, double w, double l, double heading) {
  const double c = std::fabs(std::cos(heading)), s = std::fabs(std::sin(heading));
  const double hx = 0.5 * (c * l + s * w);
  const double hy = 0.5 * (s * l + c * w);
  return {cx - hx, cx + hx, cy - hy, cy + hy};
}

}  // namespace

Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0x5ce9e5));
  Scene scene;
  scene.seed = seed;

  const int n_objects =
      cfg.max_objects == 0 ? 0 : rng.uniform_int(cfg.min_objects, cfg.max_objects);
  std::vector<Aabb> placed;
  for (int i = 0; i < n_objects; ++i) {
    const int cls = rng.uniform_int(0, cfg.num_classes - 1);
    const SizeTemplate& tpl = kTemplates[cls % 3];
    const double w = rng.uniform(tpl.w_lo, tpl.w_hi);
    const double l = rng.uniform(tpl.l_lo, tpl.l_hi);
    const double heading = rng.uniform(-std::numbers::pi, std::numbers::pi);
    bool ok = false;
    for (int attempt = 0; attempt < cfg.max_place_tries && !ok; ++attempt) {
      const Aabb probe = object_aabb(0, 0, w, l, heading);
      const double hx = probe.x1, hy = probe.y1;
      if (2 * hx >= cfg.grid_w - 1 || 2 * hy >= cfg.grid_h - 1)
        throw GenerationError("object footprint larger than grid (seed " +
                              std::to_string(seed) + ")");
      const double cx = rng.uniform(hx, cfg.grid_w - 1 - hx);
      const double cy = rng.uniform(hy, cfg.grid_h - 1 - hy);
      Aabb box = object_aabb(cx, cy, w, l, heading);
      bool clash = false;
      for (const Aabb& p : placed)
        if (box.overlaps(p)) {
          clash = true;
          break;
        }
      if (clash) continue;
      placed.push_back(box);
      ObjectGT obj;
      obj.cx = static_cast<float>(cx);
      obj.cy = static_cast<float>(cy);
      obj.w = static_cast<float>(w);
      obj.l = static_cast<float>(l);
      obj.heading = static_cast<float>(heading);
      obj.class_id = cls;
      scene.objects.push_back(obj);
      ok = true;
    }
    if (!ok)
      throw GenerationError("could not place object " + std::to_string(i) +
                            " without overlap after " +
                            std::to_string(cfg.max_place_tries) +
                            " tries (seed " + std::to_string(seed) + ")");
  }

  auto push_point = [&](double gx, double gy, double z, double intensity) {
    ScenePoint p;
    p.x = static_cast<float>((gx + 0.5) * cfg.cell_size);
    p.y = static_cast<float>((gy + 0.5) * cfg.cell_size);
    p.z = static_cast<float>(z);
    p.intensity = static_cast<float>(intensity);
    scene.points.push_back(p);
  };

  for (const ObjectGT& obj : scene.objects) {
    const int count = rng.poisson(cfg.points_per_object);
    const double c = std::cos(obj.heading), s = std::sin(obj.heading);
    for (int k = 0; k < count; ++k) {
      const double u = rng.uniform(-obj.l / 2.0, obj.l / 2.0);
      const double v = rng.uniform(-obj.w / 2.0, obj.w / 2.0);
      const double gx = obj.cx + u * c - v * s;
      const double gy = obj.cy + u * s + v * c;
      push_point(gx, gy, rng.uniform(0.0, 2.0), rng.uniform(0.4, 1.0));
    }
  }

  const double area = cfg.extent_x() * cfg.extent_y();
  const int clutter = rng.poisson(cfg.clutter_density * area);
  for (int k = 0; k < clutter; ++k) {
    const double gx = rng.uniform(-0.5, cfg.grid_w - 0.5);
    const double gy = rng.uniform(-0.5, cfg.grid_h - 0.5);
    push_point(gx, gy, rng.uniform(0.0, 0.5), rng.uniform(0.05, 0.35));
  }

  scene.bev = rasterize_bev(scene.points, cfg);
  return scene;
}

Tensor rasterize_bev(const std::vector<ScenePoint>& points, const SceneConfig& cfg) {
  const int H = cfg.grid_h, W = cfg.grid_w;
  Tensor bev(Shape{3, H, W});
  std::vector<int> counts(static_cast<std::size_t>(H) * W, 0);
  std::vector<double> intensity(static_cast<std::size_t>(H) * W, 0.0);
  for (const ScenePoint& p : points) {
    if (p.x < 0 || p.x >= cfg.extent_x() || p.y < 0 || p.y >= cfg.extent_y()) continue;
    const int j = static_cast<int>(p.x / cfg.cell_size);
    const int i = static_cast<int>(p.y / cfg.cell_size);
    counts[static_cast<std::size_t>(i) * W + j] += 1;
    intensity[static_cast<std::size_t>(i) * W + j] += p.intensity;
  }
  double* occ = bev.data();
  double* inten = bev.data() + static_cast<std::size_t>(H) * W;
  double* cnt = bev.data() + 2 * static_cast<std::size_t>(H) * W;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] > 0) {
      occ[c] = 1.0;
      inten[c] = intensity[c] / counts[c];
    }
    cnt[c] = counts[c] / cfg.count_norm;
  }
  return bev;
}

Tensor render_gt_heatmap(const std::vector<ObjectGT>& objects, int num_classes,
                         int H, int W) {
  Tensor heat(Shape{num_classes, H, W});
  for (const ObjectGT& obj : objects) {
    if (obj.class_id < 0 || obj.class_id >= num_classes)
      throw ConfigError("object class " + std::to_string(obj.class_id) +
                        " outside [0," + std::to_string(num_classes) + ")");
    const int cx = std::clamp(static_cast<int>(std::lround(obj.cx)), 0, W - 1);
    const int cy = std::clamp(static_cast<int>(std::lround(obj.cy)), 0, H - 1);
    const double sigma = std::max(1.0, std::min(obj.w, obj.l) / 6.0);
    const double inv = 1.0 / (2.0 * sigma * sigma);
    double* plane = heat.data() + static_cast<std::size_t>(obj.class_id) * H * W;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double d2 = static_cast<double>(x - cx) * (x - cx) +
                          static_cast<double>(y - cy) * (y - cy);
        double& cell = plane[static_cast<std::size_t>(y) * W + x];
        cell = std::max(cell, std::exp(-d2 * inv));
      }
  }
  return heat;
}

std::vector<ObjectGT> scale_objects(const std::vector<ObjectGT>& objects, double factor) {
  std::vector<ObjectGT> out = objects;
  for (ObjectGT& o : out) {
    o.cx = static_cast<float>(o.cx * factor);
    o.cy = static_cast<float>(o.cy * factor);
    o.w = static_cast<float>(o.w * factor);
    o.l = static_cast<float>(o.l * factor);
  }
  return out;
}

namespace {
constexpr std::uint32_t kSceneSetVersion = 1;
}

void save_scene_set(const std::string& path, const SceneSet& scenes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_magic(os, "RDDS");
  write_u32(os, kSceneSetVersion);
  write_u32(os, static_cast<std::uint32_t>(scenes.size()));
  for (const Scene& s : scenes) {
    write_u64(os, s.seed);
    write_u32(os, static_cast<std::uint32_t>(s.objects.size()));
    for (const ObjectGT& o : s.objects) {
      write_f32(os, o.cx);
      write_f32(os, o.cy);
      write_f32(os, o.w);
      write_f32(os, o.l);
      write_f32(os, o.heading);
      write_i32(os, o.class_id);
    }
    write_u32(os, static_cast<std::uint32_t>(s.points.size()));
    for (const ScenePoint& p : s.points) {
      write_f32(os, p.x);
      write_f32(os, p.y);
      write_f32(os, p.z);
      write_f32(os, p.intensity);
    }
    write_tensor_record(os, s.bev);
  }
  if (!os) throw IoError("failed writing " + path);
}

SceneSet load_scene_set(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::string(magic, 4) != "RDDS")
    throw IoError("malformed scene-set header in " + path);
  const std::uint32_t version = read_u32(is);
  if (version != kSceneSetVersion)
    throw IoError("unsupported scene-set version " + std::to_string(version) +
                  " in " + path);
  const std::uint32_t count = read_u32(is);
  SceneSet scenes;
  scenes.reserve(count);
  for (std::uint32_t si = 0; si < count; ++si) {
    Scene s;
    s.seed = read_u64(is);
    const std::uint32_t n_obj = read_u32(is);
    s.objects.resize(n_obj);
    for (ObjectGT& o : s.objects) {
      o.cx = read_f32(is);
      o.cy = read_f32(is);
      o.w = read_f32(is);
      o.l = read_f32(is);
      o.heading = read_f32(is);
      o.class_id = read_i32(is);
    }
    const std::uint32_t n_pts = read_u32(is);
    s.points.resize(n_pts);
    for (ScenePoint& p : s.points) {
      p.x = read_f32(is);
      p.y = read_f32(is);
      p.z = read_f32(is);
      p.intensity = read_f32(is);
    }
    s.bev = read_tensor_record(is);
    scenes.push_back(std::move(s));
  }
  return scenes;
}

}  // namespace rdd
