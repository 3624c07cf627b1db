#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "ssk/eval.hpp"
#include "ssk/loss.hpp"
#include "ssk/pcio.hpp"

namespace ssk {

struct TrainConfig {
  int epochs = 100;
  double lr_max = 0.01;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double bn_momentum = 0.1;
  bool augment = false;
  int paste_per_class = 3;
  /// Scenes per optimizer step; gradients are averaged in scene order.
  int batch_size = 1;
};

/// Everything a run depends on. Defaults use the desk-scale crop with the
/// full-size channel schedule.
struct PipelineConfig {
  Vec3 range_min{0.0, -9.6, -3.0};
  Vec3 range_max{19.2, 9.6, 1.0};
  Vec3 voxel_size{0.1, 0.1, 0.1};
  /// Use the 70.4 x 80 m crop instead of range_min / range_max.
  bool full_range = false;

  MsvConfig msv;
  Encoder3dConfig enc3d;
  std::array<int, 4> enc2d_mid{128, 128, 128, 128};
  std::array<int, 4> enc2d_out{256, 256, 256, 256};
  int enc2d_blocks = 3;
  AnchorConfig anchors;

  /// Normalize with the current scene's statistics at inference as well as in
  /// training. Running statistics are still tracked and saved.
  bool norm_scene_stats = false;

  int semantic_width = 32;
  RoiPoolConfig roi;
  /// RoI query radii in units of the aggregation voxel edge.
  double roi_coarse_radius_cells = 6.0;
  double roi_fine_radius_cells = 3.0;
  HeadConfig head;
  LossConfig loss;

  int rpn_top_n_train = 128;
  int rpn_top_n_eval = 64;
  double rpn_nms_iou = 0.7;
  double detect_nms_iou = 0.1;
  double detect_score_threshold = 0.0;

  VoteScheme scheme = VoteScheme::f_only;
  std::uint64_t seed = 0;

  TrainConfig train;
  SynthConfig synth;

  /// The finest voxel grid over the active crop.
  VoxelSpec base_spec() const;
  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

/// Reduced widths for CPU-scale training; same structure as the default.
PipelineConfig toy_config();

/// Flat `key = value` text with dotted keys; `#` starts a comment. Unknown keys
/// and malformed values are errors reported with line numbers.
PipelineConfig parse_config(const std::string& text, const PipelineConfig& base = {});
PipelineConfig load_config(const std::filesystem::path& path, const PipelineConfig& base = {});
std::string serialize_config(const PipelineConfig& cfg);

}  // namespace ssk
