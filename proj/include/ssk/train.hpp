#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "ssk/pipeline.hpp"

namespace ssk {

struct LossRow {
  std::int64_t step = 0;
  double lr = 0.0;
  LossBreakdown parts;
};

struct TrainOptions {
  /// Worker threads over the scenes of a batch. Results do not depend on it.
  int jobs = 1;
  /// Called after every optimizer step.
  std::function<void(const LossRow&)> on_step;
};

/// Visiting order of `n` scenes in `epoch`, a pure function of (seed, epoch).
std::vector<int> epoch_order(std::uint64_t seed, int epoch, int n);

/// Trains in place for cfg.train.epochs passes over `scenes` with AdamW and the
/// one-cycle schedule. Deterministic in (config, seed, scenes).
std::vector<LossRow> train(const Model& model, nn::ParamStore& store, std::span<const Scene> scenes,
                           const TrainOptions& opts = {});

/// Header `step,lr,rpn,head,vote_v,vote_f,vote,ctr,total`, 17 significant digits.
void write_loss_csv(const std::filesystem::path& path, std::span<const LossRow> rows);

}  // namespace ssk
