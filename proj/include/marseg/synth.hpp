// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic LiDAR sequences. A scene is a set of boxes on a
// ground disc; each box translates by a fixed per-frame velocity and the
// sensor moves along its own path. Surface sample positions and intensities
// are drawn once per (spec, seed) so the same physical spots reappear in
// every frame; only the coordinate noise is redrawn per frame.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "marseg/align.hpp"
#include "marseg/core.hpp"
#include "marseg/errors.hpp"
#include "marseg/rng.hpp"

namespace marseg::synth {

using align::Pose;
using align::invert_pose;
using core::ClassTaxonomy;
using core::Point;
using core::PointCloud;
using core::compose_label;

inline ClassTaxonomy default_taxonomy() {
  return ClassTaxonomy({{0, "car", true},
                        {1, "pedestrian", true},
                        {2, "cyclist", true},
                        {3, "ground", false},
                        {4, "building", false},
                        {5, "vegetation", false},
                        {6, "pole", false}});
}

struct ObjectSpec {
  int class_id = 0;
  double center_x = 0.0, center_y = 0.0;     // footprint center, meters
  double size_x = 1.0, size_y = 1.0, size_z = 1.0;
  double velocity_x = 0.0, velocity_y = 0.0;  // meters per frame, xy plane

  double speed() const { return std::hypot(velocity_x, velocity_y); }
};

struct SceneSpec {
  double extent = 10.0;  // half-width of the square region
  std::vector<ObjectSpec> objects;
  std::vector<Pose> sensor_path;  // one pose per frame, k >= 1
  int points_per_frame = 150;
  double noise_sigma = 0.01;
  double motion_threshold = 0.5;  // meters of total displacement
  int ground_class_id = 3;

  int k() const { return static_cast<int>(sensor_path.size()); }

  void validate(const ClassTaxonomy& tax) const {
    if (extent <= 0.0) throw ConfigError("extent must be positive");
    if (sensor_path.empty()) throw ConfigError("sensor path must have k >= 1");
    if (points_per_frame < 1)
      throw ConfigError("points_per_frame must be positive");
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
    if (ground_class_id < 0 || ground_class_id >= static_cast<int>(tax.size()) ||
        tax.movable(ground_class_id))
      throw ConfigError("ground class must be a valid non-movable class");
    for (const auto& obj : objects) {
      if (obj.class_id < 0 || obj.class_id >= static_cast<int>(tax.size()))
        throw ConfigError("object class id out of range");
      if (obj.size_x <= 0.0 || obj.size_y <= 0.0 || obj.size_z <= 0.0)
        throw ConfigError("object sizes must be positive");
      if (!tax.movable(obj.class_id) && obj.speed() != 0.0)
        throw ConfigError("non-movable object " +
                          tax.info(obj.class_id).name +
                          " has nonzero velocity");
    }
  }
};

// Straight line along +x with a constant small yaw increment per frame.
inline std::vector<Pose> straight_path(int k, double step, double yaw_step) {
  if (k < 1) throw ConfigError("path needs k >= 1");
  std::vector<Pose> path;
  path.reserve(k);
  for (int t = 0; t < k; ++t)
    path.push_back(Pose::yaw(yaw_step * t,
                             Eigen::Vector3d(step * t, 0.0, 0.0)));
  return path;
}

namespace detail {

inline constexpr uint64_t kSurfaceSalt = 0x5u;
inline constexpr uint64_t kNoiseSalt = 0x9000u;

struct SurfacePoint {
  double lx, ly, lz;  // object-local offset, or world position for ground
  double intensity;
  int object;  // index into spec.objects, -1 for ground
};

struct IntensityBand {
  double lo, hi;
};

// Indexed by default taxonomy class id.
// disjoint per class so reflectance identifies material; motion state stays
// unobservable from a single return
inline constexpr IntensityBand kIntensityBands[] = {
    {0.82, 0.92},  // car
    {0.60, 0.67},  // pedestrian
    {0.71, 0.78},  // cyclist
    {0.05, 0.12},  // ground
    {0.32, 0.40},  // building
    {0.46, 0.54},  // vegetation
    {0.18, 0.26},  // pole
};

inline double object_surface_area(const ObjectSpec& o) {
  return o.size_x * o.size_y +
         2.0 * (o.size_x * o.size_z + o.size_y * o.size_z);
}

// Uniform sample on the box surface excluding the ground-contact face.
// Output is object-local with z in [0, size_z].
inline void sample_box_surface(const ObjectSpec& o, Rng& rng, double& lx,
                               double& ly, double& lz) {
  const double top = o.size_x * o.size_y;
  const double side_x = o.size_y * o.size_z;  // faces at +-x
  const double side_y = o.size_x * o.size_z;  // faces at +-y
  const double total = top + 2.0 * side_x + 2.0 * side_y;
  double pick = rng.uniform(0.0, total);
  const double u = rng.uniform(), v = rng.uniform();
  if (pick < top) {
    lx = (u - 0.5) * o.size_x;
    ly = (v - 0.5) * o.size_y;
    lz = o.size_z;
    return;
  }
  pick -= top;
  if (pick < 2.0 * side_x) {
    lx = (pick < side_x ? 0.5 : -0.5) * o.size_x;
    ly = (u - 0.5) * o.size_y;
    lz = v * o.size_z;
    return;
  }
  pick -= 2.0 * side_x;
  lx = (u - 0.5) * o.size_x;
  ly = (pick < side_y ? 0.5 : -0.5) * o.size_y;
  lz = v * o.size_z;
}

// Exact allocation: ground takes 40% when objects exist, the rest is split
// by surface area with largest-remainder rounding, one point minimum each.
inline std::vector<int> allocate_points(const SceneSpec& spec) {
  const int n = spec.points_per_frame;
  const int m = static_cast<int>(spec.objects.size());
  std::vector<int> counts(m + 1, 0);  // slot 0 = ground
  if (m == 0) {
    counts[0] = n;
    return counts;
  }
  counts[0] = static_cast<int>(std::lround(0.4 * n));
  int budget = n - counts[0];
  if (budget < m) {  // tiny budgets: give objects priority
    counts[0] = std::max(0, n - m);
    budget = n - counts[0];
  }
  for (int i = 0; i < m; ++i) counts[1 + i] = 1;
  budget -= m;
  double total_area = 0.0;
  for (const auto& o : spec.objects) total_area += object_surface_area(o);
  std::vector<double> frac(m);
  int assigned = 0;
  for (int i = 0; i < m; ++i) {
    const double share =
        budget * object_surface_area(spec.objects[i]) / total_area;
    const int whole = static_cast<int>(share);
    counts[1 + i] += whole;
    assigned += whole;
    frac[i] = share - whole;
  }
  for (int left = budget - assigned; left > 0; --left) {
    int best = 0;
    for (int i = 1; i < m; ++i)
      if (frac[i] > frac[best]) best = i;
    counts[1 + best] += 1;
    frac[best] = -1.0;
  }
  return counts;
}

inline std::vector<SurfacePoint> build_surface_table(const SceneSpec& spec,
                                                     uint64_t seed) {
  Rng rng(mix_seed(seed, kSurfaceSalt));
  const auto counts = allocate_points(spec);
  std::vector<SurfacePoint> table;
  table.reserve(spec.points_per_frame);
  for (int i = 0; i < counts[0]; ++i) {
    // uniform over the ground disc inscribed in the extent square
    const double r = spec.extent * std::sqrt(rng.uniform());
    const double theta = 2.0 * M_PI * rng.uniform();
    SurfacePoint sp;
    sp.lx = r * std::cos(theta);
    sp.ly = r * std::sin(theta);
    sp.lz = 0.0;
    const auto band = kIntensityBands[spec.ground_class_id];
    sp.intensity = rng.uniform(band.lo, band.hi);
    sp.object = -1;
    table.push_back(sp);
  }
  for (size_t oi = 0; oi < spec.objects.size(); ++oi) {
    const auto& obj = spec.objects[oi];
    const auto band = kIntensityBands[obj.class_id];
    for (int i = 0; i < counts[1 + oi]; ++i) {
      SurfacePoint sp;
      sample_box_surface(obj, rng, sp.lx, sp.ly, sp.lz);
      sp.intensity = rng.uniform(band.lo, band.hi);
      sp.object = static_cast<int>(oi);
      table.push_back(sp);
    }
  }
  return table;
}

}  // namespace detail

// One frame in the sensor coordinate system at time t. The surface table is
// shared across frames; only the additive noise depends on t.
inline PointCloud sample_surfaces(const SceneSpec& spec, int t,
                                  const Pose& sensor, uint64_t seed) {
  const auto tax = default_taxonomy();
  spec.validate(tax);
  if (t < 0 || t >= spec.k()) throw ConfigError("frame index out of range");
  const auto table = detail::build_surface_table(spec, seed);
  Rng noise(mix_seed(seed, detail::kNoiseSalt + static_cast<uint64_t>(t)));
  const Pose to_sensor = invert_pose(sensor);
  const int steps = spec.k() - 1;

  PointCloud cloud;
  cloud.frame_index = t;
  cloud.points.reserve(table.size());
  cloud.labels.reserve(table.size());
  for (const auto& sp : table) {
    Eigen::Vector3d world(sp.lx, sp.ly, sp.lz);
    int class_id = spec.ground_class_id;
    bool moving = false;
    if (sp.object >= 0) {
      const auto& obj = spec.objects[sp.object];
      world.x() += obj.center_x + obj.velocity_x * t;
      world.y() += obj.center_y + obj.velocity_y * t;
      class_id = obj.class_id;
      moving = obj.speed() * steps > spec.motion_threshold;
    }
    world.x() += noise.truncated_normal(spec.noise_sigma);
    world.y() += noise.truncated_normal(spec.noise_sigma);
    world.z() += noise.truncated_normal(spec.noise_sigma);
    const Eigen::Vector3d local = to_sensor.apply(world);
    Point p;
    p.x = local.x();
    p.y = local.y();
    p.z = local.z();
    p.intensity = sp.intensity;
    cloud.points.push_back(p);
    cloud.labels.push_back(compose_label(class_id, moving, tax));
  }
  return cloud;
}

struct SequenceData {
  std::vector<PointCloud> frames;
  std::vector<Pose> poses;
  ClassTaxonomy taxonomy;
};

inline SequenceData generate_sequence(const SceneSpec& spec, uint64_t seed) {
  auto tax = default_taxonomy();
  spec.validate(tax);
  if (spec.objects.empty()) throw ConfigError("scene has no objects");
  SequenceData out{{}, spec.sensor_path, std::move(tax)};
  out.frames.reserve(spec.k());
  for (int t = 0; t < spec.k(); ++t)
    out.frames.push_back(sample_surfaces(spec, t, spec.sensor_path[t], seed));
  return out;
}

// ------------------------------------------------------ randomized scenes

struct SceneParams {
  double extent = 10.0;
  int k = 3;
  int points_per_frame = 150;
  double noise_sigma = 0.01;
  double sensor_step = 0.4;  // meters per frame
  double yaw_step = 0.02;    // radians per frame
};

namespace detail {

struct SizeRange {
  double x_lo, x_hi, y_lo, y_hi, z_lo, z_hi;
};

inline constexpr SizeRange kSizeRanges[] = {
    {1.8, 2.4, 0.9, 1.2, 0.5, 0.7},  // car
    {0.3, 0.4, 0.3, 0.4, 0.8, 1.0},  // pedestrian
    {0.7, 0.9, 0.3, 0.4, 0.8, 1.0},  // cyclist
    {0.0, 0.0, 0.0, 0.0, 0.0, 0.0},  // ground (never boxed)
    {2.0, 4.0, 2.0, 4.0, 1.5, 2.5},  // building
    {0.8, 1.5, 0.8, 1.5, 0.8, 1.6},  // vegetation
    {0.1, 0.15, 0.1, 0.15, 1.4, 2.0},  // pole
};

inline ObjectSpec random_object(Rng& rng, int class_id, double extent,
                                bool force_moving, bool allow_moving) {
  const auto& sr = kSizeRanges[class_id];
  ObjectSpec o;
  o.class_id = class_id;
  o.center_x = rng.uniform(-0.7 * extent, 0.7 * extent);
  o.center_y = rng.uniform(-0.7 * extent, 0.7 * extent);
  o.size_x = rng.uniform(sr.x_lo, sr.x_hi);
  o.size_y = rng.uniform(sr.y_lo, sr.y_hi);
  o.size_z = rng.uniform(sr.z_lo, sr.z_hi);
  if (allow_moving && (force_moving || rng.uniform() < 0.5)) {
    const double speed = rng.uniform(0.6, 1.5);
    const double theta = 2.0 * M_PI * rng.uniform();
    o.velocity_x = speed * std::cos(theta);
    o.velocity_y = speed * std::sin(theta);
  }
  return o;
}

}  // namespace detail

// A plausible mixed scene: at least one moving car plus a scatter of other
// movable and static objects. Deterministic in (params, seed).
inline SceneSpec random_scene(const SceneParams& params, uint64_t seed) {
  Rng rng(mix_seed(seed, 0x5ce7eull));
  SceneSpec spec;
  spec.extent = params.extent;
  spec.points_per_frame = params.points_per_frame;
  spec.noise_sigma = params.noise_sigma;
  spec.sensor_path =
      straight_path(params.k, params.sensor_step, params.yaw_step);

  // one moving and one parked car per scene keep class and motion state
  // decorrelated, so motion cannot be inferred from semantics alone
  const int cars = 2;
  const int pedestrians = static_cast<int>(rng.uniform_int(0, 2));
  const int cyclists = static_cast<int>(rng.uniform_int(0, 1));
  const int buildings = 1 + static_cast<int>(rng.uniform_int(0, 1));
  const int vegetation = 1 + static_cast<int>(rng.uniform_int(0, 2));
  const int poles = 1 + static_cast<int>(rng.uniform_int(0, 1));
  for (int i = 0; i < cars; ++i)
    spec.objects.push_back(
        detail::random_object(rng, 0, spec.extent, i == 0, i == 0));
  for (int i = 0; i < pedestrians; ++i)
    spec.objects.push_back(
        detail::random_object(rng, 1, spec.extent, false, true));
  for (int i = 0; i < cyclists; ++i)
    spec.objects.push_back(
        detail::random_object(rng, 2, spec.extent, false, true));
  for (int i = 0; i < buildings; ++i)
    spec.objects.push_back(
        detail::random_object(rng, 4, spec.extent, false, false));
  for (int i = 0; i < vegetation; ++i)
    spec.objects.push_back(
        detail::random_object(rng, 5, spec.extent, false, false));
  for (int i = 0; i < poles; ++i)
    spec.objects.push_back(
        detail::random_object(rng, 6, spec.extent, false, false));
  return spec;
}

}  // namespace marseg::synth
