#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ssk/agg.hpp"

namespace ssk {

struct LossConfig {
  double alpha = 1.0;   // vote weight
  double beta = 0.25;   // centerness weight
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double smooth_l1_delta = 1.0 / 9.0;
  double eps = 1e-7;
  /// Supervise W_d at every encoder level (otherwise only the sampled ones).
  bool ctr_all_levels = true;
};

/// Mean over points of -(mask * a * log w + (1 - a) * log(1 - w)), with w
/// clamped to [eps, 1 - eps] (zero gradient outside).
Var l_ctr(Var weights, std::span<const double> mask, std::span<const std::uint8_t> fg, double eps = 1e-7);

/// Per-axis L1 distance between voted coordinates and centroids, summed over
/// rows with fg (and `gate`, when given) set, divided by the count of such
/// rows floored at 1.
Var l_vote(Var voted, std::span<const Vec3> centroids, std::span<const std::uint8_t> fg,
           std::span<const std::uint8_t> gate = {});

/// Sigmoid focal loss summed over rows with label 0 or 1; kIgnore rows skipped.
Var focal_loss(Var logits, std::span<const int> labels, double gamma = 2.0, double alpha = 0.25);

/// Sum over all entries of the smooth L1 penalty of (pred - target).
Var smooth_l1(Var pred, const Mat& target, double delta = 1.0 / 9.0);

/// Binary cross entropy of probabilities against targets, minus the target
/// entropy, summed. Zero exactly at p = t; the gradient is the usual one.
double bce(double p, double t, double eps = 1e-7);
/// Same quantity from logits, summed over rows.
Var bce_with_logits(Var logits, std::span<const double> targets);

Var l_rpn(const RpnOutput& out, const RpnTargets& targets, const LossConfig& cfg);

/// `rows` selects the sampled proposals (N_s = rows.size(), floored at 1).
Var l_head(const HeadOutput& out, const HeadTargets& targets, std::span<const int> rows, const LossConfig& cfg);

struct LossBreakdown {
  double rpn = 0, head = 0, vote_v = 0, vote_f = 0, vote = 0, ctr = 0, total = 0;
};

/// total = rpn + head + alpha * vote + beta * ctr.
LossBreakdown l_total(double rpn, double head, double vote_v, double vote_f, double ctr, const LossConfig& cfg);
Var l_total(Var rpn, Var head, Var vote_v, Var vote_f, Var ctr, const LossConfig& cfg);

}  // namespace ssk
