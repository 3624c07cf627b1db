#pragma once

#include <span>
#include <utility>
#include <vector>

#include "ssk/nn/tape.hpp"

namespace ssk::nn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Increments the store's step counter.
/// Non-finite gradients are rejected before any parameter is touched.
void adam_step(ParamStore& store, std::span<const std::pair<Parameter*, Mat>> grads, double lr,
               const AdamConfig& cfg);

/// Linear warm-up from lr_max / 10 to lr_max over the first 40% of steps,
/// then cosine decay to lr_max / 1000.
double one_cycle_lr(std::int64_t step, std::int64_t total, double lr_max);

/// Sums per-scene gradient lists (name-sorted, same parameter order) in order.
std::vector<std::pair<Parameter*, Mat>> merge_grads(const std::vector<std::vector<std::pair<Parameter*, Mat>>>& parts);

}  // namespace ssk::nn
