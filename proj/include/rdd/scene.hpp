// Synthetic labeled point-cloud scenes on a bird's-eye-view grid.
//
// A scene is a set of oriented rectangular objects, each contributing a dense
// point cluster, over sparse background clutter. Scenes rasterize to a
// [3, H, W] grid (occupancy / mean intensity / normalized count) and render
// per-class Gaussian center heatmaps for supervision.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rdd/config.hpp"
#include "rdd/errors.hpp"
#include "rdd/rng.hpp"
#include "rdd/tensor.hpp"

namespace rdd {

struct SceneConfig {
  int grid_h = 64;
  int grid_w = 64;
  double cell_size = 1.0;  // scene units per cell; extent = grid * cell_size
  int num_classes = 3;
  int min_objects = 2;
  int max_objects = 6;
  double points_per_object = 60.0;  // Poisson mean of each object's cluster
  double clutter_density = 0.02;    // background points per square scene unit
  double count_norm = 8.0;          // cell capacity normalizing the count channel
  int max_place_tries = 64;         // per-object rejection-sampling budget

  double extent_x() const { return grid_w * cell_size; }
  double extent_y() const { return grid_h * cell_size; }
  void validate() const;  // throws ConfigError listing every problem

  KvMap to_kv(const std::string& prefix) const;
  static SceneConfig from_kv(KvReader& reader, const std::string& prefix);
};

// Ground-truth object. Center/size live in grid coordinates (cell centers at
// integers); fields are 32-bit so scene files round-trip bit-exactly.
struct ObjectGT {
  float cx = 0, cy = 0;
  float w = 1, l = 1;
  float heading = 0;  // radians
  std::int32_t class_id = 0;

  bool operator==(const ObjectGT&) const = default;
};

struct ScenePoint {
  float x = 0, y = 0, z = 0, intensity = 0;  // scene units

  bool operator==(const ScenePoint&) const = default;
};

struct Scene {
  std::uint64_t seed = 0;
  std::vector<ObjectGT> objects;
  std::vector<ScenePoint> points;
  Tensor bev;  // [3, grid_h, grid_w]
};

using SceneSet = std::vector<Scene>;

bool scenes_equal(const Scene& a, const Scene& b);

Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed);

// Channel 0: binary occupancy. Channel 1: mean intensity. Channel 2: point
// count / count_norm. Out-of-extent points are dropped.
Tensor rasterize_bev(const std::vector<ScenePoint>& points, const SceneConfig& cfg);

// Per-class heatmaps: each object splats exp(-(dx^2+dy^2)/(2 sigma^2)) around
// its rounded center cell, sigma = max(1, min(w,l)/6); overlaps combine by max,
// so the value at the rounded center is exactly 1.
Tensor render_gt_heatmap(const std::vector<ObjectGT>& objects, int num_classes,
                         int H, int W);

// Rescales centers and sizes by `factor` (used to map grid-space ground truth
// onto a strided output map).
std::vector<ObjectGT> scale_objects(const std::vector<ObjectGT>& objects, double factor);

void save_scene_set(const std::string& path, const SceneSet& scenes);
SceneSet load_scene_set(const std::string& path);

}  // namespace rdd
