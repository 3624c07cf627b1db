#include "ssk/pcio.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace ssk {

namespace {

const std::array<std::string, kNumClasses> kClassNames{"Car", "Pedestrian", "Cyclist"};

// Points sit this far inside their face so closed-box tests and centerness
// treat them as strictly interior.
constexpr double kSurfaceInset = 1e-7;

float load_f32_le(const unsigned char* p) {
  std::uint32_t bits = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
                       (std::uint32_t(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

void store_f32_le(unsigned char* p, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  p[0] = bits & 0xff;
  p[1] = (bits >> 8) & 0xff;
  p[2] = (bits >> 16) & 0xff;
  p[3] = (bits >> 24) & 0xff;
}

bool boxes_collide(const Box3D& a, std::span<const Box3D> others) {
  for (const auto& o : others)
    if (iou_bev(a, o) > 0.0) return true;
  return false;
}

}  // namespace

PointCloud PointCloud::cropped(const VoxelSpec& spec) const {
  PointCloud out;
  for (std::size_t i = 0; i < xyz.size(); ++i)
    if (spec.contains(xyz[i])) out.push_back(xyz[i], reflectance[i]);
  return out;
}

const std::string& class_name(int class_id) {
  if (class_id < 0 || class_id >= kNumClasses) throw std::out_of_range("class id");
  return kClassNames[class_id];
}

int class_from_name(const std::string& name) {
  for (int c = 0; c < kNumClasses; ++c)
    if (kClassNames[c] == name) return c;
  throw std::invalid_argument("unknown class '" + name + "'");
}

PointCloud read_point_cloud(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 16 != 0)
    throw std::runtime_error(path.string() + ": truncated point file (" + std::to_string(bytes.size()) +
                             " bytes)");
  PointCloud cloud;
  const std::size_t n = bytes.size() / 16;
  cloud.xyz.reserve(n);
  cloud.reflectance.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* row = bytes.data() + 16 * i;
    const float x = load_f32_le(row), y = load_f32_le(row + 4), z = load_f32_le(row + 8),
                r = load_f32_le(row + 12);
    if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z) || !std::isfinite(r))
      throw std::runtime_error(path.string() + ": non-finite value in point " + std::to_string(i));
    cloud.push_back(Vec3{x, y, z}, r);
  }
  return cloud;
}

void write_point_cloud(const std::filesystem::path& path, const PointCloud& cloud) {
  std::vector<unsigned char> bytes(cloud.size() * 16);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    unsigned char* row = bytes.data() + 16 * i;
    store_f32_le(row, static_cast<float>(cloud.xyz[i].x()));
    store_f32_le(row + 4, static_cast<float>(cloud.xyz[i].y()));
    store_f32_le(row + 8, static_cast<float>(cloud.xyz[i].z()));
    store_f32_le(row + 12, static_cast<float>(cloud.reflectance[i]));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<Box3D> read_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<Box3D> boxes;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    std::string cls;
    Box3D b;
    std::string extra;
    auto fail = [&](const std::string& why) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + why);
    };
    if (!(ss >> cls >> b.center.x() >> b.center.y() >> b.center.z() >> b.dims.x() >> b.dims.y() >>
          b.dims.z() >> b.yaw))
      fail("expected `class cx cy cz l w h yaw`");
    if (ss >> extra) fail("trailing tokens");
    try {
      b.class_id = class_from_name(cls);
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
    if (!((b.dims.array() > 0.0).all())) fail("box dimensions must be positive");
    b.yaw = wrap_angle(b.yaw);
    if (!b.valid()) fail("non-finite box");
    boxes.push_back(b);
  }
  return boxes;
}

void write_labels(const std::filesystem::path& path, std::span<const Box3D> boxes) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  for (const auto& b : boxes)
    out << class_name(b.class_id) << ' ' << b.center.x() << ' ' << b.center.y() << ' ' << b.center.z() << ' '
        << b.dims.x() << ' ' << b.dims.y() << ' ' << b.dims.z() << ' ' << b.yaw << '\n';
}

void write_scene(const std::filesystem::path& dir, const Scene& scene) {
  std::filesystem::create_directories(dir);
  write_point_cloud(dir / (scene.id + ".bin"), scene.cloud);
  write_labels(dir / (scene.id + ".txt"), scene.gt_boxes);
}

Scene read_scene(const std::filesystem::path& dir, const std::string& id) {
  Scene s;
  s.id = id;
  s.cloud = read_point_cloud(dir / (id + ".bin"));
  s.gt_boxes = read_labels(dir / (id + ".txt"));
  return s;
}

std::vector<std::string> list_scenes(const std::filesystem::path& dir) {
  std::vector<std::string> ids;
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() != ".bin") continue;
    auto labels = e.path();
    labels.replace_extension(".txt");
    if (std::filesystem::exists(labels)) ids.push_back(e.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

Vec3 canonical_dims(int class_id) {
  switch (class_id) {
    case 0: return {3.9, 1.6, 1.56};
    case 1: return {0.8, 0.6, 1.73};
    case 2: return {1.76, 0.6, 1.73};
    default: throw std::out_of_range("class id");
  }
}

Scene synth_scene(std::uint64_t seed, const VoxelSpec& spec, const SynthConfig& cfg) {
  if (cfg.n_objects < 0) throw std::invalid_argument("n_objects must be >= 0");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  Scene scene;
  scene.id = "synth_" + std::to_string(seed);

  std::discrete_distribution<int> pick_class(cfg.class_mix.begin(), cfg.class_mix.end());
  const double margin = 1.0;
  for (int k = 0; k < cfg.n_objects; ++k) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      Box3D b;
      b.class_id = pick_class(rng);
      b.dims = canonical_dims(b.class_id) * uniform(0.95, 1.05);
      b.yaw = wrap_angle(uniform(-std::numbers::pi, std::numbers::pi));
      b.center = {uniform(spec.range_min.x() + margin, spec.range_max.x() - margin),
                  uniform(spec.range_min.y() + margin, spec.range_max.y() - margin),
                  cfg.ground_z + 0.5 * b.dims.z()};
      bool inside = true;
      for (const auto& c : bev_corners(b))
        inside = inside && c.x() > spec.range_min.x() && c.x() < spec.range_max.x() &&
                 c.y() > spec.range_min.y() && c.y() < spec.range_max.y();
      if (!inside || boxes_collide(b, scene.gt_boxes)) continue;
      scene.gt_boxes.push_back(b);
      break;
    }
  }

  for (const auto& b : scene.gt_boxes) {
    const double range = std::max(1.0, b.center.head<2>().norm());
    const int n = std::clamp(static_cast<int>(cfg.points_at_10m * (10.0 / range) * (10.0 / range)),
                             kMinObjectPoints, std::max(kMinObjectPoints, cfg.max_object_points));
    const double l = b.dims.x(), w = b.dims.y(), h = b.dims.z();
    // top, front, back, left, right
    const std::array<double, 5> areas{l * w, w * h, w * h, l * h, l * h};
    std::discrete_distribution<int> pick_face(areas.begin(), areas.end());
    const Vec3 half = 0.5 * b.dims - Vec3::Constant(kSurfaceInset);
    for (int i = 0; i < n; ++i) {
      const int face = pick_face(rng);
      const double s = uniform(-1.0, 1.0), t = uniform(-1.0, 1.0);
      Vec3 local;
      switch (face) {
        case 0: local = {s * half.x(), t * half.y(), half.z()}; break;
        case 1: local = {half.x(), s * half.y(), t * half.z()}; break;
        case 2: local = {-half.x(), s * half.y(), t * half.z()}; break;
        case 3: local = {s * half.x(), half.y(), t * half.z()}; break;
        default: local = {s * half.x(), -half.y(), t * half.z()}; break;
      }
      scene.cloud.push_back(from_box_frame(local, b), uniform(0.2, 0.9));
    }
  }

  for (int i = 0; i < cfg.clutter_points; ++i) {
    const Vec3 p{uniform(spec.range_min.x(), spec.range_max.x()), uniform(spec.range_min.y(), spec.range_max.y()),
                 cfg.ground_z - 0.05 * uniform(0.01, 1.0)};
    if (spec.contains(p)) scene.cloud.push_back(p, uniform(0.0, 0.3));
  }
  return scene;
}

Scene apply_similarity(const Scene& scene, double rotation, double scale, bool flip_y) {
  Scene out = scene;
  const double c = std::cos(rotation), s = std::sin(rotation);
  auto map_point = [&](Vec3 p) {
    if (flip_y) p.y() = -p.y();
    const Vec3 r{c * p.x() - s * p.y(), s * p.x() + c * p.y(), p.z()};
    return Vec3(r * scale);
  };
  for (auto& p : out.cloud.xyz) p = map_point(p);
  for (auto& b : out.gt_boxes) {
    b.center = map_point(b.center);
    b.dims *= scale;
    b.yaw = wrap_angle((flip_y ? -b.yaw : b.yaw) + rotation);
  }
  return out;
}

Scene augment(const Scene& scene, std::uint64_t seed, const AugmentConfig& cfg, std::span<const Scene> library) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Scene work = scene;

  if (!library.empty() && cfg.paste_per_class > 0) {
    for (int cls = 0; cls < kNumClasses; ++cls) {
      std::vector<std::pair<std::size_t, std::size_t>> candidates;
      for (std::size_t si = 0; si < library.size(); ++si)
        for (std::size_t bi = 0; bi < library[si].gt_boxes.size(); ++bi)
          if (library[si].gt_boxes[bi].class_id == cls) candidates.emplace_back(si, bi);
      if (candidates.empty()) continue;
      int pasted = 0;
      for (int attempt = 0; attempt < cfg.paste_per_class * cfg.paste_attempts && pasted < cfg.paste_per_class;
           ++attempt) {
        const auto [si, bi] = candidates[static_cast<std::size_t>(unit(rng) * candidates.size()) % candidates.size()];
        const Box3D& box = library[si].gt_boxes[bi];
        if (boxes_collide(box, work.gt_boxes)) continue;
        PointCloud kept;
        for (std::size_t i = 0; i < work.cloud.size(); ++i)
          if (!point_in_box(work.cloud.xyz[i], box)) kept.push_back(work.cloud.xyz[i], work.cloud.reflectance[i]);
        const auto& src = library[si].cloud;
        for (std::size_t i = 0; i < src.size(); ++i)
          if (point_in_box(src.xyz[i], box)) kept.push_back(src.xyz[i], src.reflectance[i]);
        work.cloud = std::move(kept);
        work.gt_boxes.push_back(box);
        ++pasted;
      }
    }
  }

  const double rotation = (2.0 * unit(rng) - 1.0) * cfg.max_rotation;
  const double scale = cfg.min_scale + (cfg.max_scale - cfg.min_scale) * unit(rng);
  const bool flip = cfg.flip && unit(rng) < 0.5;
  return apply_similarity(work, rotation, scale, flip);
}

}  // namespace ssk
