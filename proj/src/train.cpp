#include "ssk/train.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>
#include <thread>

#include "ssk/nn/optim.hpp"

namespace ssk {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

struct SceneResult {
  LossBreakdown parts;
  std::vector<std::pair<nn::Parameter*, Mat>> grads;
  std::vector<nn::StatUpdate> stats;
  std::string error;
};

SceneResult run_scene(const Model& model, nn::ParamStore& store, const Scene& scene) {
  SceneResult r;
  try {
    Tape tape;
    nn::Context ctx{tape, store, true};
    SceneLoss loss = scene_loss(ctx, model, scene);
    tape.backward(loss.total);
    r.parts = loss.parts;
    r.grads = tape.param_grads();
    r.stats = std::move(tape.stat_updates());
  } catch (const std::exception& e) {
    r.error = scene.id + ": " + e.what();
  }
  return r;
}

}  // namespace

std::vector<int> epoch_order(std::uint64_t seed, int epoch, int n) {
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::uint64_t state = seed ^ (0xA24BAED4963EE407ull * static_cast<std::uint64_t>(epoch + 1));
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(splitmix64(state) % static_cast<std::uint64_t>(i + 1));
    std::swap(order[i], order[j]);
  }
  return order;
}

std::vector<LossRow> train(const Model& model, nn::ParamStore& store, std::span<const Scene> scenes,
                           const TrainOptions& opts) {
  const PipelineConfig& cfg = model.config();
  if (scenes.empty()) throw std::invalid_argument("train: no scenes");
  const int n = static_cast<int>(scenes.size());
  const int batch = std::min(cfg.train.batch_size, n);
  const int steps_per_epoch = (n + batch - 1) / batch;
  const std::int64_t total = static_cast<std::int64_t>(steps_per_epoch) * cfg.train.epochs;
  const nn::AdamConfig adam{cfg.train.beta1, cfg.train.beta2, 1e-8, cfg.train.weight_decay};
  AugmentConfig aug;
  aug.paste_per_class = cfg.train.paste_per_class;

  std::vector<LossRow> rows;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    const std::vector<int> order = epoch_order(cfg.seed, epoch, n);
    for (int start = 0; start < n; start += batch) {
      const int count = std::min(batch, n - start);
      std::vector<Scene> inputs(count);
      for (int k = 0; k < count; ++k) {
        const Scene& src = scenes[order[start + k]];
        inputs[k] = cfg.train.augment
                        ? augment(src, cfg.seed ^ (0x5851F42D4C957F2Dull * static_cast<std::uint64_t>(step * n + k + 1)),
                                  aug, scenes)
                        : src;
      }

      std::vector<SceneResult> results(count);
      const int workers = std::max(1, std::min(opts.jobs, count));
      if (workers == 1) {
        for (int k = 0; k < count; ++k) results[k] = run_scene(model, store, inputs[k]);
      } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w)
          pool.emplace_back([&, w] {
            for (int k = w; k < count; k += workers) results[k] = run_scene(model, store, inputs[k]);
          });
        for (auto& t : pool) t.join();
      }
      for (const auto& r : results)
        if (!r.error.empty()) throw std::runtime_error("train: " + r.error);

      std::vector<std::vector<std::pair<nn::Parameter*, Mat>>> parts;
      LossRow row;
      row.step = step;
      row.lr = nn::one_cycle_lr(step, total, cfg.train.lr_max);
      double rpn = 0, head = 0, vv = 0, vf = 0, ctr = 0;
      for (auto& r : results) {
        parts.push_back(std::move(r.grads));
        rpn += r.parts.rpn;
        head += r.parts.head;
        vv += r.parts.vote_v;
        vf += r.parts.vote_f;
        ctr += r.parts.ctr;
      }
      auto grads = nn::merge_grads(parts);
      for (auto& [p, g] : grads) g /= static_cast<double>(count);
      nn::adam_step(store, grads, row.lr, adam);
      for (auto& r : results) nn::apply_stat_updates(r.stats, cfg.train.bn_momentum);

      const double inv = 1.0 / count;
      row.parts = l_total(rpn * inv, head * inv, vv * inv, vf * inv, ctr * inv, cfg.loss);
      rows.push_back(row);
      if (opts.on_step) opts.on_step(row);
      ++step;
    }
  }
  return rows;
}

void write_loss_csv(const std::filesystem::path& path, std::span<const LossRow> rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "step,lr,rpn,head,vote_v,vote_f,vote,ctr,total\n";
  for (const auto& r : rows) {
    const auto& p = r.parts;
    out << r.step << ',' << r.lr << ',' << p.rpn << ',' << p.head << ',' << p.vote_v << ',' << p.vote_f << ','
        << p.vote << ',' << p.ctr << ',' << p.total << '\n';
  }
}

}  // namespace ssk
