#pragma once

#include <array>
#include <span>
#include <vector>

#include "ssk/sparse3d.hpp"

namespace ssk {

/// Dense top-down map stored as (H*W) x C with row = y * W + x.
struct BevMap {
  Var data;
  int height = 0;
  int width = 0;

  int channels() const { return static_cast<int>(data.cols()); }
};

/// Voxel (i, j, k) with C features lands on pixel (x = i, y = j), channels
/// [k*C, (k+1)*C). Inactive pixels are zero.
BevMap to_bev(nn::Context& ctx, const SparseVoxelTensor& t);

/// Conv2d -> ReLU -> ChannelNorm.
class ConvUnit2d {
 public:
  ConvUnit2d() = default;
  ConvUnit2d(nn::ParamStore& store, const std::string& name, int in, int out, int kernel, int stride = 1,
             int groups = 1);
  BevMap operator()(nn::Context& ctx, const BevMap& x) const;
  int out() const { return conv_.out(); }

 private:
  nn::Conv2d conv_;
  nn::ChannelNorm norm_;
};

/// 1x1 and 3x3 branches (three conv units each, mid -> out/2) concatenated,
/// added to the residual path (1x1 projection when in != out), then a 1x1 and
/// a 3x3 integration unit.
class BaseBlock {
 public:
  BaseBlock() = default;
  BaseBlock(nn::ParamStore& store, const std::string& name, int in, int mid, int out);
  BevMap operator()(nn::Context& ctx, const BevMap& x) const;

 private:
  std::array<ConvUnit2d, 3> branch1_, branch3_;
  nn::Conv2d proj_;
  bool project_ = false;
  ConvUnit2d integrate1_, integrate3_;
};

struct Encoder2dConfig {
  std::array<int, 4> in_channels{320, 240, 480, 720};
  std::array<int, 4> mid{128, 128, 128, 128};
  std::array<int, 4> out{256, 256, 256, 256};
  int blocks = 3;
};

struct Encoder2dOutput {
  std::vector<BevMap> pre_concat;  // B'_1..B'_4
  std::vector<BevMap> branch;      // B_1..B_4
  std::vector<BevMap> down;        // D_1..D_3
  BevMap fused;                    // B_4
};

/// Branch i: stem (1x1 then 3x3 unit) -> `blocks` Base Blocks -> B'_i. For
/// i > 1, D_{i-1} is concatenated and integrated (1x1 + 3x3) into B_i. D_i is
/// B_i through a stride-2 depthwise 3x3, a depthwise 3x3 and a 1x1 unit.
class Encoder2d {
 public:
  Encoder2d() = default;
  Encoder2d(nn::ParamStore& store, const Encoder2dConfig& cfg);
  Encoder2dOutput forward(nn::Context& ctx, const std::vector<BevMap>& inputs) const;
  const Encoder2dConfig& config() const { return cfg_; }

 private:
  struct Branch {
    ConvUnit2d stem1, stem3;
    std::vector<BaseBlock> blocks;
    ConvUnit2d merge1, merge3;
    ConvUnit2d down_a, down_b, down_c;
  };
  Encoder2dConfig cfg_;
  std::array<Branch, 4> branches_;
};

struct AnchorConfig {
  std::array<Vec3, 3> dims{Vec3{3.9, 1.6, 1.56}, Vec3{0.8, 0.6, 1.73}, Vec3{1.76, 0.6, 1.73}};
  /// Anchor center heights; car at -1.0, the others resting on the same ground.
  std::array<double, 3> z{-1.0, -1.78 + 0.5 * 1.73, -1.78 + 0.5 * 1.73};
  std::array<double, 3> pos_iou{0.6, 0.5, 0.5};
  std::array<double, 3> neg_iou{0.45, 0.35, 0.35};
  std::array<double, 2> yaws{0.0, 1.5707963267948966};
};

/// Anchors ordered pixel-major: index = (pixel * classes + class) * yaws + yaw.
struct AnchorGrid {
  std::vector<Box3D> anchors;
  int height = 0, width = 0;
  int per_cell = 0;

  std::size_t size() const { return anchors.size(); }
};

/// One anchor set per BEV cell of `spec` (x-y plane only).
AnchorGrid make_anchors(const VoxelSpec& spec, const AnchorConfig& cfg);

inline constexpr int kIgnore = -1;

struct RpnTargets {
  std::vector<int> labels;            // 1 foreground, 0 background, kIgnore
  std::vector<int> matched_gt;        // -1 when unmatched
  std::vector<BoxResidual> residuals;  // valid where labels == 1
  int num_fg = 0;
};

/// BEV-IoU matching against same-class gt; every gt is force-matched to its
/// best overlapping anchor.
RpnTargets assign_rpn_targets(const AnchorGrid& grid, std::span<const Box3D> gt, const AnchorConfig& cfg);

struct RpnOutput {
  Var cls;  // A x 1 logits
  Var reg;  // A x 7 residuals
};

class RpnHead {
 public:
  RpnHead() = default;
  RpnHead(nn::ParamStore& store, int in, int per_cell);
  RpnOutput operator()(nn::Context& ctx, const BevMap& fused) const;

 private:
  nn::Conv2d cls_, reg_;
  int per_cell_ = 0;
};

struct Proposal {
  Box3D box;
  double score = 0.0;
  int anchor = -1;
};

/// Greedy rotated BEV NMS. Candidates are visited by descending score, ties by
/// lower index. With `per_class`, boxes of different classes never suppress
/// each other. Returns kept indices in visiting order.
std::vector<int> nms_bev(std::span<const Box3D> boxes, std::span<const double> scores, double iou_thr,
                         bool per_class = false);

std::vector<Proposal> decode_proposals(const RpnOutput& out, const AnchorGrid& grid, int top_n, double nms_iou);

}  // namespace ssk
