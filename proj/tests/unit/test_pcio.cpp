#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "ssk/pcio.hpp"

using namespace ssk;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ssk_unit_pcio";
  fs::create_directories(dir);
  return dir / name;
}

VoxelSpec desk() { return VoxelSpec::make({0, -9.6, -3}, {19.2, 9.6, 1}, {0.1, 0.1, 0.1}); }

double nearest_face(const Vec3& p, const Box3D& b) {
  const Vec3 l = to_box_frame(p, b);
  double d = 1e9;
  for (int a = 0; a < 3; ++a) d = std::min(d, std::abs(std::abs(l[a]) - 0.5 * b.dims[a]));
  return d;
}

}  // namespace

TEST_CASE("point file io") {
  SUBCASE("empty file") {
    std::ofstream(scratch("empty.bin"), std::ios::binary);
    CHECK(read_point_cloud(scratch("empty.bin")).empty());
  }
  SUBCASE("32 bytes hold two points") {
    std::ofstream out(scratch("two.bin"), std::ios::binary);
    const float v[8] = {1, 2, 3, 0.5f, -1, -2, -3, 0.25f};
    out.write(reinterpret_cast<const char*>(v), sizeof v);
    out.close();
    const PointCloud c = read_point_cloud(scratch("two.bin"));
    REQUIRE(c.size() == 2);
    CHECK(c.xyz[1] == Vec3(-1, -2, -3));
    CHECK(c.reflectance[0] == 0.5);
  }
  SUBCASE("truncated file is rejected") {
    std::ofstream out(scratch("bad.bin"), std::ios::binary);
    out.write("abcdefg", 7);
    out.close();
    CHECK_THROWS(read_point_cloud(scratch("bad.bin")));
  }
  SUBCASE("round trip is bit exact for float-representable values") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<float> u(-50, 50);
    PointCloud c;
    for (int i = 0; i < 500; ++i) c.push_back(Vec3(u(rng), u(rng), u(rng)), static_cast<float>(i) / 500.0f);
    write_point_cloud(scratch("rt.bin"), c);
    const PointCloud r = read_point_cloud(scratch("rt.bin"));
    CHECK(r.xyz == c.xyz);
    CHECK(r.reflectance == c.reflectance);
  }
}

TEST_CASE("label io") {
  SUBCASE("empty file") {
    std::ofstream(scratch("empty.txt"));
    CHECK(read_labels(scratch("empty.txt")).empty());
  }
  SUBCASE("single line round trip") {
    Box3D b;
    b.center = {1.5, -2.25, -0.75};
    b.dims = {3.9, 1.6, 1.56};
    b.yaw = 0.3;
    b.class_id = 2;
    write_labels(scratch("one.txt"), std::vector<Box3D>{b});
    const auto r = read_labels(scratch("one.txt"));
    REQUIRE(r.size() == 1);
    CHECK(r[0].center == b.center);
    CHECK(r[0].dims == b.dims);
    CHECK(r[0].yaw == b.yaw);
    CHECK(r[0].class_id == 2);
  }
  SUBCASE("negative dims rejected") {
    std::ofstream(scratch("neg.txt")) << "Car 1 2 3 -4 1 1 0\n";
    CHECK_THROWS(read_labels(scratch("neg.txt")));
  }
  SUBCASE("unknown class rejected") {
    std::ofstream(scratch("cls.txt")) << "Truck 1 2 3 4 1 1 0\n";
    CHECK_THROWS(read_labels(scratch("cls.txt")));
  }
}

TEST_CASE("scene directory round trip") {
  const Scene s = synth_scene(4, desk(), SynthConfig{});
  const fs::path dir = scratch("scenes");
  fs::remove_all(dir);
  Scene named = s;
  named.id = "scene_0001";
  write_scene(dir, named);
  CHECK(list_scenes(dir) == std::vector<std::string>{"scene_0001"});
  const Scene r = read_scene(dir, "scene_0001");
  CHECK(r.gt_boxes.size() == s.gt_boxes.size());
  CHECK(r.cloud.size() == s.cloud.size());
}

TEST_CASE("crop keeps only in-range points") {
  const VoxelSpec spec = desk();
  PointCloud c;
  c.push_back({1, 1, 0}, 0.1);
  c.push_back({-1, 1, 0}, 0.1);
  c.push_back({19.2, 0, 0}, 0.1);
  c.push_back(spec.range_min, 0.1);
  const PointCloud k = c.cropped(spec);
  CHECK(k.size() == 2);
  for (const auto& p : k.xyz) CHECK(spec.contains(p));
}

TEST_CASE("synthetic scenes") {
  const VoxelSpec spec = desk();
  SUBCASE("no objects gives clutter only") {
    SynthConfig cfg;
    cfg.n_objects = 0;
    const Scene s = synth_scene(3, spec, cfg);
    CHECK(s.gt_boxes.empty());
    CHECK(s.cloud.size() == static_cast<std::size_t>(cfg.clutter_points));
  }
  SUBCASE("deterministic in the seed") {
    const Scene a = synth_scene(11, spec, SynthConfig{}), b = synth_scene(11, spec, SynthConfig{});
    CHECK(a.cloud.xyz == b.cloud.xyz);
    CHECK(a.cloud.reflectance == b.cloud.reflectance);
    REQUIRE(a.gt_boxes.size() == b.gt_boxes.size());
    for (std::size_t i = 0; i < a.gt_boxes.size(); ++i) CHECK(a.gt_boxes[i].center == b.gt_boxes[i].center);
    CHECK(synth_scene(12, spec, SynthConfig{}).cloud.xyz != a.cloud.xyz);
  }
  SUBCASE("object points sit on their box surface and boxes lie in range") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      SynthConfig cfg;
      cfg.clutter_points = 0;
      const Scene s = synth_scene(seed, spec, cfg);
      for (const auto& p : s.cloud.xyz) {
        double best = 1e9;
        for (const auto& b : s.gt_boxes) best = std::min(best, nearest_face(p, b));
        CHECK(best < 1e-6);
      }
      for (const auto& b : s.gt_boxes) {
        CHECK(b.valid());
        CHECK(spec.contains(b.center));
      }
    }
  }
}

TEST_CASE("augmentation") {
  const VoxelSpec spec = desk();
  const Scene s = synth_scene(21, spec, SynthConfig{});
  SUBCASE("identity transform") {
    const Scene r = apply_similarity(s, 0.0, 1.0, false);
    CHECK(r.cloud.xyz == s.cloud.xyz);
    for (std::size_t i = 0; i < s.gt_boxes.size(); ++i) CHECK(r.gt_boxes[i].yaw == s.gt_boxes[i].yaw);
  }
  SUBCASE("flip mirrors y and negates yaw") {
    const Scene r = apply_similarity(s, 0.0, 1.0, true);
    for (std::size_t i = 0; i < s.cloud.size(); ++i) {
      CHECK(r.cloud.xyz[i].x() == s.cloud.xyz[i].x());
      CHECK(r.cloud.xyz[i].y() == -s.cloud.xyz[i].y());
    }
    for (std::size_t i = 0; i < s.gt_boxes.size(); ++i) {
      CHECK(r.gt_boxes[i].center.y() == -s.gt_boxes[i].center.y());
      CHECK(r.gt_boxes[i].yaw == doctest::Approx(wrap_angle(-s.gt_boxes[i].yaw)));
    }
  }
  SUBCASE("per-object point counts survive any transform") {
    std::vector<Scene> library{synth_scene(22, spec, SynthConfig{}), synth_scene(23, spec, SynthConfig{})};
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const Scene base = seed % 2 ? s : augment(s, seed, AugmentConfig{}, library);
      std::vector<int> before;
      for (const auto& b : base.gt_boxes) {
        int n = 0;
        for (auto f : points_in_box(base.cloud.xyz, b)) n += f;
        before.push_back(n);
      }
      const Scene r = augment(base, seed + 100);
      REQUIRE(r.gt_boxes.size() == base.gt_boxes.size());
      for (std::size_t i = 0; i < r.gt_boxes.size(); ++i) {
        int n = 0;
        for (auto f : points_in_box(r.cloud.xyz, r.gt_boxes[i])) n += f;
        CHECK(n == before[i]);
      }
    }
  }
}
