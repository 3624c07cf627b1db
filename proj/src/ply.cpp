#include "ssk/ply.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ssk {

PlyStage parse_ply_stage(const std::string& s) {
  if (s == "semantic_points") return PlyStage::semantic_points;
  if (s == "pre_vote") return PlyStage::pre_vote;
  if (s == "post_vote") return PlyStage::post_vote;
  throw std::invalid_argument("unknown stage '" + s + "' (semantic_points, pre_vote, post_vote)");
}

std::vector<PlyVertex> ply_vertices(const SemanticPoints& points) {
  std::vector<PlyVertex> v;
  for (std::size_t i = 0; i < points.size(); ++i) v.push_back({points.coords[i], static_cast<int>(points.tags[i])});
  return v;
}

std::vector<PlyVertex> ply_vertices(const FeatureLayer3D& layer, bool post_vote) {
  const std::vector<Vec3> centers = post_vote ? layer.center_values() : layer.pre_centers;
  std::vector<PlyVertex> v;
  for (std::size_t i = 0; i < layer.size(); ++i) {
    const int tag = layer.has_shallow[i] && layer.has_deep[i] ? 2 : (layer.has_deep[i] ? 1 : 0);
    v.push_back({centers[i], tag});
  }
  return v;
}

void write_ply(const std::filesystem::path& path, const std::vector<PlyVertex>& vertices) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "ply\nformat ascii 1.0\nelement vertex " << vertices.size()
      << "\nproperty double x\nproperty double y\nproperty double z\nproperty int tag\nend_header\n";
  out.precision(17);
  for (const auto& v : vertices) out << v.xyz.x() << ' ' << v.xyz.y() << ' ' << v.xyz.z() << ' ' << v.tag << '\n';
}

std::vector<PlyVertex> read_ply(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::size_t count = 0;
  bool header_done = false;
  while (std::getline(in, line)) {
    if (line.rfind("element vertex ", 0) == 0) count = std::stoul(line.substr(15));
    if (line == "end_header") {
      header_done = true;
      break;
    }
  }
  if (!header_done) throw std::runtime_error(path.string() + ": missing end_header");
  std::vector<PlyVertex> v(count);
  for (auto& p : v)
    if (!(in >> p.xyz.x() >> p.xyz.y() >> p.xyz.z() >> p.tag)) throw std::runtime_error(path.string() + ": truncated");
  return v;
}

}  // namespace ssk
