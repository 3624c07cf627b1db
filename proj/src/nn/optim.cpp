#include "ssk/nn/optim.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>

namespace ssk::nn {

void adam_step(ParamStore& store, std::span<const std::pair<Parameter*, Mat>> grads, double lr,
               const AdamConfig& cfg) {
  for (const auto& [p, g] : grads)
    if (!g.allFinite()) throw std::runtime_error("non-finite gradient for '" + p->name + "'");
  const std::int64_t step = store.step() + 1;
  store.set_step(step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (const auto& [p, g] : grads) {
    if (!p->trainable) continue;
    if (p->adam_m.size() == 0) {
      p->adam_m = Mat::Zero(p->value.rows(), p->value.cols());
      p->adam_v = Mat::Zero(p->value.rows(), p->value.cols());
    }
    p->adam_m = cfg.beta1 * p->adam_m + (1.0 - cfg.beta1) * g;
    p->adam_v = cfg.beta2 * p->adam_v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const Mat update = (p->adam_m / bc1).array() / ((p->adam_v / bc2).array().sqrt() + cfg.eps);
    p->value -= lr * (update + cfg.weight_decay * p->value);
  }
}

double one_cycle_lr(std::int64_t step, std::int64_t total, double lr_max) {
  if (total <= 1) return lr_max;
  const double warm = 0.4 * static_cast<double>(total);
  const double s = static_cast<double>(std::clamp<std::int64_t>(step, 0, total));
  const double lr_start = lr_max / 10.0, lr_end = lr_max / 1000.0;
  if (s < warm) return lr_start + (lr_max - lr_start) * s / warm;
  const double frac = (s - warm) / std::max(1.0, static_cast<double>(total) - warm);
  return lr_end + 0.5 * (lr_max - lr_end) * (1.0 + std::cos(std::numbers::pi * frac));
}

std::vector<std::pair<Parameter*, Mat>> merge_grads(const std::vector<std::vector<std::pair<Parameter*, Mat>>>& parts) {
  std::map<std::string, std::pair<Parameter*, Mat>> acc;
  for (const auto& part : parts)
    for (const auto& [p, g] : part) {
      auto it = acc.find(p->name);
      if (it == acc.end())
        acc.emplace(p->name, std::make_pair(p, g));
      else
        it->second.second += g;
    }
  std::vector<std::pair<Parameter*, Mat>> out;
  out.reserve(acc.size());
  for (auto& [_, v] : acc) out.push_back(std::move(v));
  return out;
}

}  // namespace ssk::nn
