#pragma once

#include <array>
#include <span>
#include <vector>

#include "ssk/geom.hpp"
#include "ssk/nn/layers.hpp"
#include "ssk/pcio.hpp"

namespace ssk {

using nn::Mat;
using nn::Var;
using nn::Tape;

/// Result of dynamic voxelization: every point keeps its own voxel, no cap,
/// no padding. `voxels` is duplicate-free and sorted by flattened key
/// (x-major).
struct VoxelAssignment {
  std::vector<VoxelIndex> point_voxel;
  std::vector<VoxelIndex> voxels;
  std::vector<int> point_slot;

  int num_voxels() const { return static_cast<int>(voxels.size()); }
  std::vector<int> counts() const;
};

/// Points must lie inside the spec range (crop first).
VoxelAssignment dynamic_voxelize(std::span<const Vec3> points, const VoxelSpec& spec);

/// N x 10 rows (x, y, z, r, xc, yc, zc, xp, yp, zp) with (xc, yc, zc) the mean
/// of the points sharing the voxel and (xp, yp, zp) the offset from it.
Mat compose_coord_feature(std::span<const Vec3> points, std::span<const double> reflectance,
                          const VoxelAssignment& assignment);

Mat scatter_mean(const Mat& features, const VoxelAssignment& assignment);
Mat scatter_max(const Mat& features, const VoxelAssignment& assignment);
/// Per-voxel mean of (w_i * feature_i). This is a plain mean of weighted rows,
/// not a weight-normalized average.
Mat weighted_mean(const Mat& features, std::span<const double> weights, const VoxelAssignment& assignment);

/// Per-point output of one encoder level.
struct PointwiseFeature {
  std::vector<Vec3> coords;
  std::vector<double> reflectance;
  /// Row index of each point in the level-1 (cropped) cloud.
  std::vector<int> source_index;
  Var features;  // N x C_out, already scaled by the weights
  Var weights;   // N x 1, sigmoid output

  std::size_t size() const { return coords.size(); }
};

struct SparseVoxelTensor {
  std::vector<VoxelIndex> coords;
  Var features;  // M x C, rows aligned with coords
  VoxelSpec spec;
  int level = 0;

  std::size_t size() const { return coords.size(); }
};

/// Channel schedule of one encoder level: FCN_C and FCN_P map to mid/2 each,
/// integration maps 2*mid -> out -> out.
struct MsvLevelChannels {
  int in = 10;
  int mid = 16;
  int out = 16;
};

/// Parameters of one multi-scale voxelization level.
class MsvLevel {
 public:
  MsvLevel() = default;
  MsvLevel(nn::ParamStore& store, const std::string& name, const MsvLevelChannels& ch);

  /// Encodes `point_feat` (N x in) at this level's voxel grid. Throws when the
  /// feature width does not match the channel schedule.
  std::pair<SparseVoxelTensor, PointwiseFeature> encode(nn::Context& ctx, std::span<const Vec3> coords,
                                                        std::span<const double> reflectance,
                                                        std::vector<int> source_index, Var point_feat,
                                                        const VoxelSpec& spec, int level) const;

  const MsvLevelChannels& channels() const { return ch_; }

 private:
  MsvLevelChannels ch_;
  nn::Fcn fcn_coord_, fcn_point_;
  nn::Linear weight_head_;
  nn::Fcn integrate_a_, integrate_b_;
};

/// Level-1 coordinate features feed both inputs; later levels take the
/// sampled V_{i-1} rows as point features.
std::pair<SparseVoxelTensor, PointwiseFeature> msv_encode(nn::Context& ctx, const MsvLevel& level,
                                                          const PointCloud& cloud, const VoxelSpec& spec);

/// Indices of the ceil(rate * N) largest weights; ties go to the lower index.
/// Returned in ascending index order.
std::vector<int> topk_by_weight(std::span<const double> weights, double rate);
PointwiseFeature topk_by_weight(const PointwiseFeature& pw, double rate);

inline const std::array<double, 3> kVoteClamp{3.0, 3.0, 2.0};

struct VoteResult {
  Var new_coords;   // K x 3
  Var raw_offsets;  // K x 3, before clamping
};

/// Predicts per-point offsets with `head` (C -> 3), clamps them to +-(3, 3, 2) m
/// and adds them to the coordinates.
VoteResult center_vote(nn::Context& ctx, std::span<const Vec3> coords, Var features, const nn::Linear& head);

Mat coords_to_mat(std::span<const Vec3> coords);

/// Output of the four-level encoder.
struct MsvOutput {
  std::vector<SparseVoxelTensor> sparse;    // S_1..S_4
  std::vector<PointwiseFeature> pointwise;  // V_1..V_4 (rows before top-K)
  std::vector<VoxelSpec> specs;
  VoteResult vote;                          // applied to the last level
};

struct MsvConfig {
  std::array<MsvLevelChannels, 4> channels{{{10, 16, 16}, {16, 24, 24}, {24, 24, 32}, {32, 32, 48}}};
  std::array<double, 3> sample_rates{0.4, 0.4, 0.6};
};

class MultiScaleVoxelizer {
 public:
  MultiScaleVoxelizer() = default;
  MultiScaleVoxelizer(nn::ParamStore& store, const MsvConfig& cfg);

  /// `base` is the finest spec; level i uses voxel_size * 2^i.
  MsvOutput forward(nn::Context& ctx, const PointCloud& cloud, const VoxelSpec& base) const;

  const MsvConfig& config() const { return cfg_; }
  const nn::Linear& vote_head() const { return vote_head_; }

 private:
  MsvConfig cfg_;
  std::array<MsvLevel, 4> levels_;
  nn::Linear vote_head_;
};

std::vector<VoxelSpec> level_specs(const VoxelSpec& base, int levels);

}  // namespace ssk
