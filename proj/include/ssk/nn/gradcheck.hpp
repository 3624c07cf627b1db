#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ssk/nn/tape.hpp"

namespace ssk::nn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  /// Set when some coordinate's second difference is far larger than a
  /// smooth function allows (kink or jump inside the stencil).
  bool discontinuity = false;
};

using TapeFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares reverse-mode gradients of sum(fn(inputs)) against central
/// differences. Error per coordinate is |a - n| / max(|a|, |n|, 1e-6 * G)
/// with G = max(1, max |a|).
GradCheckResult finite_difference_check(const TapeFn& fn, const std::vector<Mat>& inputs, double step = 1e-5);

}  // namespace ssk::nn
