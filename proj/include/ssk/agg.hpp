#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ssk/bev.hpp"

namespace ssk {

enum class SourceTag : std::uint8_t { V1, V2, V3, V4, F1, F2, F3, F4 };

inline bool is_shallow(SourceTag t) { return static_cast<int>(t) < 4; }
const char* tag_name(SourceTag t);

/// One branch feeding the semantic point cloud.
struct SemanticSource {
  SourceTag tag = SourceTag::V1;
  std::vector<Vec3> coords;
  Var features;
};

/// Deep-branch source: voxel centers mapped back to world coordinates.
SemanticSource f_source(const SparseVoxelTensor& t, SourceTag tag);

struct SemanticPoints {
  std::vector<Vec3> coords;
  std::vector<SourceTag> tags;
  Var features;  // N x C_s

  std::size_t size() const { return coords.size(); }
};

/// Per-source two-layer FCN projection to a common width.
class SemanticProjector {
 public:
  SemanticProjector() = default;
  /// `widths` are the input widths of V1..V4, F1..F4.
  SemanticProjector(nn::ParamStore& store, const std::array<int, 8>& widths, int common);
  SemanticPoints operator()(nn::Context& ctx, const std::vector<SemanticSource>& sources) const;
  int width() const { return common_; }

 private:
  std::array<nn::Fcn, 8> first_, second_;
  int common_ = 0;
};

struct SemanticVoxels {
  std::vector<VoxelIndex> coords;
  std::vector<Vec3> centers;            // mean of member coordinates
  std::vector<std::uint8_t> has_shallow;
  std::vector<std::uint8_t> has_deep;
  std::vector<std::uint8_t> mask_vote;  // 1 iff no shallow member
  std::vector<int> point_slot;
  Var features;                         // M x C_s, member mean

  std::size_t size() const { return coords.size(); }
};

/// Groups points by cell of `spec`; coordinates outside the range clamp to the
/// border cell. Cells are ordered by flattened key.
SemanticVoxels semantic_voxelize(nn::Context& ctx, const SemanticPoints& points, const VoxelSpec& spec);

enum class VoteScheme { all, v_only, f_only, none };
VoteScheme parse_scheme(const std::string& s);
const char* scheme_name(VoteScheme s);

struct FeatureLayer3D {
  std::vector<Vec3> pre_centers;
  Var centers;  // M x 3 after voting
  Var raw_offsets;
  std::vector<std::uint8_t> voted;
  std::vector<std::uint8_t> has_shallow;
  std::vector<std::uint8_t> has_deep;
  Var features;

  std::size_t size() const { return pre_centers.size(); }
  std::vector<Vec3> center_values() const;
};

/// centers = pre + offsets on gated rows; the other rows copy `pre` exactly
/// and pass no gradient.
Var gated_move(Tape& t, const std::vector<Vec3>& pre, Var offsets, const std::vector<std::uint8_t>& gate);

/// Voted voxels move by the clamped head output; the others keep their center
/// bit-for-bit. f_only votes where Mask_vote = 1, v_only where the voxel holds
/// only shallow points, all everywhere, none nowhere.
FeatureLayer3D masked_center_vote(nn::Context& ctx, const SemanticVoxels& voxels, VoteScheme scheme,
                                  const nn::Linear& head);

struct RoiPoolConfig {
  int coarse = 3;
  int fine = 6;
  double coarse_radius = 0.6;
  double fine_radius = 0.3;
  int max_neighbors = 16;
  int width = 32;
};

/// Cell centers of an n x n x n grid inside the (rotated) box.
std::vector<Vec3> roi_grid_points(const Box3D& box, int n);

struct NeighborList {
  std::vector<int> point;  // index into the queried set
  std::vector<int> group;  // index of the grid point
};

/// Up to `max_k` nearest points within `radius` of each query (inclusive),
/// nearest first, ties by lower index.
NeighborList radius_neighbors(std::span<const Vec3> points, std::span<const Vec3> queries, double radius, int max_k);

class HvRoiPool {
 public:
  HvRoiPool() = default;
  HvRoiPool(nn::ParamStore& store, int in, const RoiPoolConfig& cfg);
  /// P x ((coarse^3 + fine^3) * width); grid points without neighbors are zero.
  Var operator()(nn::Context& ctx, const FeatureLayer3D& layer, std::span<const Box3D> boxes) const;
  int out_width() const;

 private:
  RoiPoolConfig cfg_;
  nn::Fcn coarse_fcn_, fine_fcn_;
  Var pool_level(nn::Context& ctx, const FeatureLayer3D& layer, const std::vector<Vec3>& centers,
                 std::span<const Box3D> boxes, int n, double radius, const nn::Fcn& fcn) const;
};

struct HeadConfig {
  double theta_h = 0.75;
  double theta_l = 0.25;
  double theta_reg = 0.55;
  int hidden = 128;
  int num_samples = 64;
  double fg_fraction = 0.25;
};

/// Piecewise-linear confidence target: 0 below theta_l, 1 above theta_h.
double confidence_target(double iou, const HeadConfig& cfg);

struct HeadOutput {
  Var confidence;  // P x 1 logits
  Var refinement;  // P x 7 residuals w.r.t. the proposal box
};

class RefineHead {
 public:
  RefineHead() = default;
  RefineHead(nn::ParamStore& store, int in, const HeadConfig& cfg);
  HeadOutput operator()(nn::Context& ctx, Var pooled) const;

 private:
  nn::Fcn fc0_, fc1_;
  nn::Linear conf_, reg_;
};

struct HeadTargets {
  std::vector<double> iou;     // 3D IoU with the best same-class gt
  std::vector<int> gt_index;   // -1 when no overlap
  std::vector<double> conf;    // r*
  std::vector<BoxResidual> reg;
  std::vector<std::uint8_t> reg_mask;  // IoU >= theta_reg
};

HeadTargets assign_head_targets(std::span<const Proposal> proposals, std::span<const Box3D> gt, const HeadConfig& cfg);

/// Training subset of at most num_samples proposals: those with IoU > theta_reg
/// first (up to half the budget, at least fg_fraction when available), then
/// the rest in proposal order. Returned ascending.
std::vector<int> sample_proposals(std::span<const double> iou, const HeadConfig& cfg);

struct Detection {
  Box3D box;
  double score = 0.0;
};

/// Applies refinement residuals, scores by sigmoid(confidence), per-class NMS.
std::vector<Detection> final_decode(std::span<const Proposal> proposals, const Mat& confidence, const Mat& refinement,
                                    double nms_iou);

}  // namespace ssk
