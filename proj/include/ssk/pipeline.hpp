#pragma once

#include <array>
#include <vector>

#include "ssk/config.hpp"

namespace ssk {

/// Grids of F_1..F_4 for a base spec (F_i lives on the grid of branch i's
/// last strided layer).
std::array<VoxelSpec, 4> encoder_output_specs(const VoxelSpec& base, const Encoder3dConfig& cfg);

/// All network modules of the two-stage detector, built against one store.
class Model {
 public:
  Model(nn::ParamStore& store, const PipelineConfig& cfg);

  const PipelineConfig& config() const { return cfg_; }
  const VoxelSpec& base_spec() const { return base_; }
  const AnchorGrid& anchors() const { return anchors_; }
  const RoiPoolConfig& roi_config() const { return roi_cfg_; }

  MultiScaleVoxelizer msv;
  Encoder3d enc3d;
  Encoder2d enc2d;
  RpnHead rpn;
  SemanticProjector projector;
  nn::Linear agg_vote;
  HvRoiPool roi;
  RefineHead head;

 private:
  PipelineConfig cfg_;
  VoxelSpec base_;
  AnchorGrid anchors_;
  RoiPoolConfig roi_cfg_;
};

/// Everything up to (but excluding) the refinement head.
struct StageOneOutput {
  MsvOutput msv;
  std::vector<SparseVoxelTensor> deep;  // F_1..F_4
  Encoder2dOutput bev;
  RpnOutput rpn;
  std::vector<Proposal> proposals;
  SemanticPoints semantic;
  SemanticVoxels voxels;
  FeatureLayer3D layer;
};

/// `cloud` must already be cropped to the model's range and nonempty.
StageOneOutput run_stage_one(nn::Context& ctx, const Model& model, const PointCloud& cloud, int top_n);

/// Per-point foreground flags and centerness / centroid targets against gt.
struct PointTargets {
  std::vector<std::uint8_t> fg;
  std::vector<double> mask;
  std::vector<Vec3> centroid;
};
PointTargets point_targets(std::span<const Vec3> points, std::span<const Box3D> gt);

struct SceneLoss {
  Var total;
  LossBreakdown parts;
  int rpn_fg = 0;
  int head_samples = 0;
};

/// Forward plus every loss term for one training scene.
SceneLoss scene_loss(nn::Context& ctx, const Model& model, const Scene& scene);

struct SceneDetections {
  std::vector<Detection> detections;
  std::vector<Proposal> proposals;
  double seconds = 0.0;
};

/// Evaluation-mode forward on a raw cloud (cropping included). An empty crop
/// yields no detections.
SceneDetections detect(const Model& model, nn::ParamStore& store, const PointCloud& cloud);

/// Fraction of gt boxes covered by some proposal of the same class at BEV IoU
/// >= thr (1 when there is no gt).
double proposal_recall(std::span<const Proposal> proposals, std::span<const Box3D> gt, double thr);

/// Mean distance of voted foreground layer voxels to the centroid of their
/// containing gt box, before and after voting. count == 0 when none qualify.
struct VoteDisplacement {
  double pre = 0.0;
  double post = 0.0;
  int count = 0;
};
VoteDisplacement vote_displacement(const FeatureLayer3D& layer, std::span<const Box3D> gt);

}  // namespace ssk
