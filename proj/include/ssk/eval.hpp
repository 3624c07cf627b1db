#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ssk/agg.hpp"

namespace ssk {

enum class IouKind { bev, iou3d };

struct MatchResult {
  std::vector<std::uint8_t> tp;    // per detection
  std::vector<int> matched_gt;     // per detection, -1 for false positives
  std::vector<std::uint8_t> gt_matched;
};

/// Greedy by descending score (stable for equal scores): each detection claims
/// the unclaimed gt of its class with the highest IoU at or above `iou_thr`.
/// A detection whose only candidates are already claimed is a false positive.
MatchResult match(std::span<const Detection> dets, std::span<const Box3D> gts, double iou_thr, IouKind kind);

struct ScoredHit {
  double score = 0.0;
  bool tp = false;
};

struct PrCurve {
  std::vector<double> recall;
  std::vector<double> precision;
  /// Max-interpolated precision at recall k / 40, k = 1..40.
  std::array<double, 40> interpolated{};
  double ap = 0.0;
};

/// Builds the curve from hits pooled over a dataset. num_gt must be >= 1.
PrCurve pr_curve(std::vector<ScoredHit> hits, int num_gt);
/// Empty when num_gt == 0.
std::optional<double> ap_r40(std::vector<ScoredHit> hits, int num_gt);

/// Two-column CSV `recall,precision` in curve order.
void export_pr(const PrCurve& curve, const std::filesystem::path& path);
PrCurve read_pr(const std::filesystem::path& path);

struct RangeBucket {
  std::string name;
  double min_range = 0.0;
  double max_range = std::numeric_limits<double>::infinity();
  bool contains(const Box3D& b) const;
};

struct EvalConfig {
  std::array<double, 3> iou_thr{0.7, 0.5, 0.5};
  IouKind kind = IouKind::iou3d;
  std::vector<RangeBucket> buckets{{"overall", 0.0, std::numeric_limits<double>::infinity()},
                                   {"0-30m", 0.0, 30.0},
                                   {"30-50m", 30.0, 50.0},
                                   {">50m", 50.0, std::numeric_limits<double>::infinity()}};
};

struct ClassBucketAp {
  int class_id = 0;
  std::string bucket;
  int num_gt = 0;
  int num_det = 0;
  std::optional<double> ap;
  PrCurve curve;
};

struct EvalReport {
  std::vector<ClassBucketAp> entries;
  /// Mean of the first bucket's per-class AP over classes that have gt.
  std::optional<double> mean_ap;
  std::string to_json() const;
};

EvalReport evaluate(std::span<const std::vector<Detection>> dets, std::span<const std::vector<Box3D>> gts,
                    const EvalConfig& cfg = {});

}  // namespace ssk
