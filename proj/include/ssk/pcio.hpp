#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ssk/geom.hpp"

namespace ssk {

struct PointCloud {
  std::vector<Vec3> xyz;
  std::vector<double> reflectance;

  std::size_t size() const { return xyz.size(); }
  bool empty() const { return xyz.empty(); }
  void push_back(const Vec3& p, double r) {
    xyz.push_back(p);
    reflectance.push_back(r);
  }
  /// Keeps only points inside the spec's half-open range.
  PointCloud cropped(const VoxelSpec& spec) const;
};

struct Scene {
  PointCloud cloud;
  std::vector<Box3D> gt_boxes;
  std::string id;
};

inline constexpr int kNumClasses = 3;
const std::string& class_name(int class_id);
int class_from_name(const std::string& name);

/// Rows of four little-endian float32 values (x, y, z, reflectance).
PointCloud read_point_cloud(const std::filesystem::path& path);
void write_point_cloud(const std::filesystem::path& path, const PointCloud& cloud);

/// One box per line: `class cx cy cz l w h yaw`, LiDAR frame.
std::vector<Box3D> read_labels(const std::filesystem::path& path);
void write_labels(const std::filesystem::path& path, std::span<const Box3D> boxes);

/// Writes `<stem>.bin` + `<stem>.txt`.
void write_scene(const std::filesystem::path& dir, const Scene& scene);
Scene read_scene(const std::filesystem::path& dir, const std::string& id);
/// Scene ids (file stems with both .bin and .txt present), sorted.
std::vector<std::string> list_scenes(const std::filesystem::path& dir);

struct SynthConfig {
  int n_objects = 4;
  std::vector<double> class_mix{0.5, 0.25, 0.25};
  /// Object points at 10 m range; scales with (10 / range)^2, floored at kMinObjectPoints.
  double points_at_10m = 250.0;
  int max_object_points = 600;
  int clutter_points = 600;
  double ground_z = -1.78;
};

inline constexpr int kMinObjectPoints = 8;

/// Canonical per-class (l, w, h) used for synthesis and anchors.
Vec3 canonical_dims(int class_id);

/// Hollow objects: points on the five non-bottom faces of each box, plus
/// ground clutter. Deterministic in (seed, spec, cfg).
Scene synth_scene(std::uint64_t seed, const VoxelSpec& spec, const SynthConfig& cfg);

struct AugmentConfig {
  double max_rotation = 0.7853981633974483;  // pi / 4
  double min_scale = 0.95;
  double max_scale = 1.05;
  bool flip = true;
  int paste_per_class = 3;
  int paste_attempts = 10;
};

/// Draws one similarity transform (rotation, scale, optional y-flip) and applies
/// it to points and boxes; optionally pastes objects from `library` first.
Scene augment(const Scene& scene, std::uint64_t seed, const AugmentConfig& cfg = {},
              std::span<const Scene> library = {});

/// The transform part of `augment`, exposed for tests.
Scene apply_similarity(const Scene& scene, double rotation, double scale, bool flip_y);

}  // namespace ssk
