#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ssk/agg.hpp"

namespace ssk {

enum class PlyStage { semantic_points, pre_vote, post_vote };
PlyStage parse_ply_stage(const std::string& s);

struct PlyVertex {
  Vec3 xyz;
  /// SourceTag index for semantic points. For voxels: 0 shallow only, 1 deep
  /// only, 2 mixed.
  int tag = 0;
};

std::vector<PlyVertex> ply_vertices(const SemanticPoints& points);
std::vector<PlyVertex> ply_vertices(const FeatureLayer3D& layer, bool post_vote);

/// ASCII PLY with `x y z` doubles and an int `tag` per vertex.
void write_ply(const std::filesystem::path& path, const std::vector<PlyVertex>& vertices);
std::vector<PlyVertex> read_ply(const std::filesystem::path& path);

}  // namespace ssk
