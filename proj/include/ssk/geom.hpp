#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace ssk {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using VoxelIndex = std::array<int, 3>;

/// Oriented 3D box. `center` is the geometric center, `dims` is (length along
/// heading, width, height), yaw is the heading about +z.
struct Box3D {
  Vec3 center = Vec3::Zero();
  Vec3 dims = Vec3::Ones();
  double yaw = 0.0;
  int class_id = 0;

  bool valid() const;
};

/// Axis-aligned voxel grid over a crop range.
struct VoxelSpec {
  Vec3 range_min = Vec3::Zero();
  Vec3 range_max = Vec3::Ones();
  Vec3 voxel_size = Vec3::Constant(0.1);
  std::array<int, 3> grid_dims{10, 10, 10};

  /// Builds a spec with grid_dims = ceil((max - min) / size), tolerant to
  /// floating-point noise in the division.
  static VoxelSpec make(const Vec3& range_min, const Vec3& range_max, const Vec3& voxel_size);

  /// Same range with cells scaled per axis (grid dims recomputed).
  VoxelSpec scaled(const Vec3& factor) const;

  bool contains(const Vec3& p) const;
  bool in_grid(const VoxelIndex& idx) const;
  std::int64_t flat_key(const VoxelIndex& idx) const;
  std::int64_t num_cells() const;
};

/// Signed distances to the front/back/left/right/up/down faces, measured in
/// the box frame. Negative components mean the point is outside that face.
struct SurfaceDistances {
  double f = 0, b = 0, l = 0, r = 0, u = 0, d = 0;
};

using BoxResidual = std::array<double, 7>;

/// Wraps an angle into (-pi, pi].
double wrap_angle(double a);

/// World point expressed in the box frame (origin at center, x along heading).
Vec3 to_box_frame(const Vec3& p, const Box3D& box);
Vec3 from_box_frame(const Vec3& local, const Box3D& box);

SurfaceDistances surface_distances(const Vec3& p, const Box3D& box);

/// Cube root of the product of the min/max ratios over the three opposite face
/// pairs. 1 at the centroid, 0 on or outside the box.
double centerness_mask(const Vec3& p, const Box3D& box);

Vec3 voxel_to_world(const VoxelIndex& idx, const VoxelSpec& spec);
VoxelIndex world_to_voxel(const Vec3& p, const VoxelSpec& spec);

/// BEV footprint corners, counter-clockwise.
std::array<Vec2, 4> bev_corners(const Box3D& box);

/// Intersection area of two convex polygons given counter-clockwise.
double convex_intersection_area(std::span<const Vec2> a, std::span<const Vec2> b);

double bev_intersection(const Box3D& a, const Box3D& b);
double iou_bev(const Box3D& a, const Box3D& b);
double iou_3d(const Box3D& a, const Box3D& b);

BoxResidual encode_box_residual(const Box3D& gt, const Box3D& anchor);
Box3D decode_box_residual(const BoxResidual& res, const Box3D& anchor);

/// Closed-box containment: a face point counts as inside.
bool point_in_box(const Vec3& p, const Box3D& box);
std::vector<std::uint8_t> points_in_box(std::span<const Vec3> points, const Box3D& box);

}  // namespace ssk
