#include "ssk/geom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace ssk {

namespace {

constexpr double kAreaEps = 1e-12;

int grid_extent(double span, double size) {
  const double cells = span / size;
  const double nearest = std::round(cells);
  if (std::abs(cells - nearest) < 1e-9 * std::max(1.0, nearest)) return static_cast<int>(nearest);
  return static_cast<int>(std::ceil(cells));
}

double cross(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

// Signed side of p against the directed edge a->b; >= 0 means left (inside for CCW).
double side(const Vec2& a, const Vec2& b, const Vec2& p) { return cross(b - a, p - a); }

double polygon_area(const std::vector<Vec2>& poly) {
  if (poly.size() < 3) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) s += cross(poly[i], poly[(i + 1) % poly.size()]);
  return 0.5 * s;
}

double ratio(double a, double b) {
  if (a <= 0.0 || b <= 0.0) return 0.0;
  return std::min(a, b) / std::max(a, b);
}

}  // namespace

bool Box3D::valid() const {
  return center.allFinite() && dims.allFinite() && std::isfinite(yaw) && (dims.array() > 0.0).all() &&
         yaw > -std::numbers::pi && yaw <= std::numbers::pi;
}

VoxelSpec VoxelSpec::make(const Vec3& range_min, const Vec3& range_max, const Vec3& voxel_size) {
  if (!((voxel_size.array() > 0.0).all())) throw std::invalid_argument("voxel size must be positive");
  if (!((range_min.array() < range_max.array()).all())) throw std::invalid_argument("empty voxel range");
  VoxelSpec s;
  s.range_min = range_min;
  s.range_max = range_max;
  s.voxel_size = voxel_size;
  for (int a = 0; a < 3; ++a) s.grid_dims[a] = grid_extent(range_max[a] - range_min[a], voxel_size[a]);
  return s;
}

VoxelSpec VoxelSpec::scaled(const Vec3& factor) const {
  return make(range_min, range_max, voxel_size.cwiseProduct(factor));
}

bool VoxelSpec::contains(const Vec3& p) const {
  return (p.array() >= range_min.array()).all() && (p.array() < range_max.array()).all();
}

bool VoxelSpec::in_grid(const VoxelIndex& idx) const {
  for (int a = 0; a < 3; ++a)
    if (idx[a] < 0 || idx[a] >= grid_dims[a]) return false;
  return true;
}

std::int64_t VoxelSpec::flat_key(const VoxelIndex& idx) const {
  return (static_cast<std::int64_t>(idx[0]) * grid_dims[1] + idx[1]) * grid_dims[2] + idx[2];
}

std::int64_t VoxelSpec::num_cells() const {
  return static_cast<std::int64_t>(grid_dims[0]) * grid_dims[1] * grid_dims[2];
}

double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double r = std::fmod(a, two_pi);
  if (r <= -std::numbers::pi) r += two_pi;
  if (r > std::numbers::pi) r -= two_pi;
  return r;
}

Vec3 to_box_frame(const Vec3& p, const Box3D& box) {
  const Vec3 d = p - box.center;
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  return {c * d.x() + s * d.y(), -s * d.x() + c * d.y(), d.z()};
}

Vec3 from_box_frame(const Vec3& local, const Box3D& box) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  return box.center + Vec3{c * local.x() - s * local.y(), s * local.x() + c * local.y(), local.z()};
}

SurfaceDistances surface_distances(const Vec3& p, const Box3D& box) {
  const Vec3 q = to_box_frame(p, box);
  const Vec3 half = 0.5 * box.dims;
  return {half.x() - q.x(), half.x() + q.x(), half.y() - q.y(),
          half.y() + q.y(), half.z() - q.z(), half.z() + q.z()};
}

double centerness_mask(const Vec3& p, const Box3D& box) {
  const SurfaceDistances s = surface_distances(p, box);
  const double prod = ratio(s.f, s.b) * ratio(s.l, s.r) * ratio(s.u, s.d);
  return std::cbrt(prod);
}

Vec3 voxel_to_world(const VoxelIndex& idx, const VoxelSpec& spec) {
  if (!spec.in_grid(idx)) throw std::out_of_range("voxel index outside grid");
  Vec3 w;
  for (int a = 0; a < 3; ++a) w[a] = (idx[a] + 0.5) * spec.voxel_size[a] + spec.range_min[a];
  return w;
}

VoxelIndex world_to_voxel(const Vec3& p, const VoxelSpec& spec) {
  if (!spec.contains(p)) throw std::out_of_range("point outside voxel range");
  VoxelIndex idx;
  for (int a = 0; a < 3; ++a) {
    idx[a] = static_cast<int>(std::floor((p[a] - spec.range_min[a]) / spec.voxel_size[a]));
    idx[a] = std::clamp(idx[a], 0, spec.grid_dims[a] - 1);
  }
  return idx;
}

std::array<Vec2, 4> bev_corners(const Box3D& box) {
  const double hl = 0.5 * box.dims.x(), hw = 0.5 * box.dims.y();
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const std::array<Vec2, 4> local{Vec2{hl, hw}, Vec2{-hl, hw}, Vec2{-hl, -hw}, Vec2{hl, -hw}};
  std::array<Vec2, 4> out;
  for (int i = 0; i < 4; ++i)
    out[i] = Vec2{box.center.x() + c * local[i].x() - s * local[i].y(),
                  box.center.y() + s * local[i].x() + c * local[i].y()};
  return out;
}

double convex_intersection_area(std::span<const Vec2> a, std::span<const Vec2> b) {
  // Sutherland-Hodgman: clip `a` against every edge of `b`.
  std::vector<Vec2> poly(a.begin(), a.end());
  for (std::size_t e = 0; e < b.size() && !poly.empty(); ++e) {
    const Vec2& c0 = b[e];
    const Vec2& c1 = b[(e + 1) % b.size()];
    std::vector<Vec2> next;
    next.reserve(poly.size() + 1);
    for (std::size_t i = 0; i < poly.size(); ++i) {
      const Vec2& p = poly[i];
      const Vec2& q = poly[(i + 1) % poly.size()];
      const double sp = side(c0, c1, p);
      const double sq = side(c0, c1, q);
      if (sp >= 0) next.push_back(p);
      if ((sp >= 0) != (sq >= 0)) {
        const double t = sp / (sp - sq);
        next.push_back(p + t * (q - p));
      }
    }
    poly = std::move(next);
  }
  const double area = polygon_area(poly);
  return area > kAreaEps ? area : 0.0;
}

double bev_intersection(const Box3D& a, const Box3D& b) {
  const double reach = 0.5 * (a.dims.head<2>().norm() + b.dims.head<2>().norm());
  if ((a.center.head<2>() - b.center.head<2>()).norm() > reach) return 0.0;
  const auto ca = bev_corners(a);
  const auto cb = bev_corners(b);
  return convex_intersection_area(ca, cb);
}

double iou_bev(const Box3D& a, const Box3D& b) {
  const double inter = bev_intersection(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.dims.x() * a.dims.y() + b.dims.x() * b.dims.y() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double iou_3d(const Box3D& a, const Box3D& b) {
  const double za0 = a.center.z() - 0.5 * a.dims.z(), za1 = a.center.z() + 0.5 * a.dims.z();
  const double zb0 = b.center.z() - 0.5 * b.dims.z(), zb1 = b.center.z() + 0.5 * b.dims.z();
  const double dz = std::min(za1, zb1) - std::max(za0, zb0);
  if (dz <= 0.0) return 0.0;
  const double inter = bev_intersection(a, b) * dz;
  if (inter <= 0.0) return 0.0;
  const double uni = a.dims.prod() + b.dims.prod() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

BoxResidual encode_box_residual(const Box3D& gt, const Box3D& anchor) {
  if (!((anchor.dims.array() > 0.0).all())) throw std::invalid_argument("anchor dims must be positive");
  const double diag = anchor.dims.head<2>().norm();
  return {(gt.center.x() - anchor.center.x()) / diag,
          (gt.center.y() - anchor.center.y()) / diag,
          (gt.center.z() - anchor.center.z()) / anchor.dims.z(),
          std::log(gt.dims.x() / anchor.dims.x()),
          std::log(gt.dims.y() / anchor.dims.y()),
          std::log(gt.dims.z() / anchor.dims.z()),
          wrap_angle(gt.yaw - anchor.yaw)};
}

Box3D decode_box_residual(const BoxResidual& res, const Box3D& anchor) {
  const double diag = anchor.dims.head<2>().norm();
  Box3D b;
  b.center = {anchor.center.x() + res[0] * diag, anchor.center.y() + res[1] * diag,
              anchor.center.z() + res[2] * anchor.dims.z()};
  b.dims = {anchor.dims.x() * std::exp(res[3]), anchor.dims.y() * std::exp(res[4]),
            anchor.dims.z() * std::exp(res[5])};
  b.yaw = wrap_angle(anchor.yaw + res[6]);
  b.class_id = anchor.class_id;
  return b;
}

bool point_in_box(const Vec3& p, const Box3D& box) {
  const SurfaceDistances s = surface_distances(p, box);
  return s.f >= 0 && s.b >= 0 && s.l >= 0 && s.r >= 0 && s.u >= 0 && s.d >= 0;
}

std::vector<std::uint8_t> points_in_box(std::span<const Vec3> points, const Box3D& box) {
  std::vector<std::uint8_t> mask(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) mask[i] = point_in_box(points[i], box) ? 1 : 0;
  return mask;
}

}  // namespace ssk
