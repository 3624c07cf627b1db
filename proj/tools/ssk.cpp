#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ssk/config.hpp"
#include "ssk/eval.hpp"
#include "ssk/pipeline.hpp"
#include "ssk/ply.hpp"
#include "ssk/train.hpp"

namespace fs = std::filesystem;
using namespace ssk;

namespace {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

Level log_level() {
  static const Level level = [] {
    const char* env = std::getenv("SSK_LOG");
    const std::string v = env ? env : "info";
    if (v == "error") return Level::error;
    if (v == "warn") return Level::warn;
    if (v == "debug") return Level::debug;
    return Level::info;
  }();
  return level;
}

template <typename... Args>
void log(Level level, const char* format, Args... args) {
  if (level > log_level()) return;
  static const char* names[] = {"error", "warn", "info", "debug"};
  std::fprintf(stderr, "[%s] ", names[static_cast<int>(level)]);
  if constexpr (sizeof...(Args) == 0)
    std::fputs(format, stderr);
  else
    std::fprintf(stderr, format, args...);
  std::fputc('\n', stderr);
}

struct Common {
  std::string config;
  std::string preset = "toy";
  std::uint64_t seed = 0;
  bool seed_set = false;
  int jobs = 1;
  std::string scheme;
};

PipelineConfig resolve(const Common& c) {
  PipelineConfig base;
  if (c.preset == "toy")
    base = toy_config();
  else if (c.preset != "full")
    throw std::invalid_argument("unknown preset '" + c.preset + "' (toy, full)");
  PipelineConfig cfg = c.config.empty() ? base : load_config(c.config, base);
  if (c.seed_set) cfg.seed = c.seed;
  if (!c.scheme.empty()) cfg.scheme = parse_scheme(c.scheme);
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "key = value config file")->check(CLI::ExistingFile);
  app->add_option("--preset", c.preset, "base configuration: toy or full")->capture_default_str();
  app->add_option_function<std::uint64_t>(
      "--seed",
      [&c](const std::uint64_t& s) {
        c.seed = s;
        c.seed_set = true;
      },
      "overrides the config seed");
  app->add_option("--jobs", c.jobs, "scene-level worker threads")->check(CLI::PositiveNumber);
  app->add_option("--scheme", c.scheme, "feature-layer vote scheme: all, v, f, none");
}

void load_checkpoint(nn::ParamStore& store, const std::string& path) {
  if (path.empty()) {
    log(Level::warn, "no checkpoint given; using freshly initialized weights");
    return;
  }
  store.load(path);
}

std::uint64_t scene_seed(std::uint64_t seed, int index) {
  return seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(index) + 1;
}

std::string scene_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04d", index);
  return buf;
}

std::vector<Scene> load_scenes(const fs::path& dir) {
  std::vector<Scene> scenes;
  for (const auto& id : list_scenes(dir)) scenes.push_back(read_scene(dir, id));
  if (scenes.empty()) throw std::runtime_error("no scenes in " + dir.string());
  return scenes;
}

void print_box(std::ostream& out, const Box3D& b) {
  out << class_name(b.class_id) << ',' << b.center.x() << ',' << b.center.y() << ',' << b.center.z() << ','
      << b.dims.x() << ',' << b.dims.y() << ',' << b.dims.z() << ',' << b.yaw;
}

int cmd_synth(const Common& c, const fs::path& out, int n) {
  const PipelineConfig cfg = resolve(c);
  fs::create_directories(out);
  for (int i = 0; i < n; ++i) {
    Scene s = synth_scene(scene_seed(cfg.seed, i), cfg.base_spec(), cfg.synth);
    s.id = scene_name(i);
    write_scene(out, s);
  }
  log(Level::info, "wrote %d scenes to %s", n, out.string().c_str());
  return 0;
}

int cmd_forward(const Common& c, const std::string& checkpoint, const fs::path& data, const std::string& id) {
  const PipelineConfig cfg = resolve(c);
  nn::ParamStore store(cfg.seed);
  Model model(store, cfg);
  load_checkpoint(store, checkpoint);
  const Scene scene = read_scene(data, id);
  const SceneDetections det = detect(model, store, scene.cloud);
  std::cout.precision(17);
  std::cout << "class,cx,cy,cz,l,w,h,yaw,score\n";
  for (const auto& d : det.detections) {
    print_box(std::cout, d.box);
    std::cout << ',' << d.score << '\n';
  }
  std::cout << "timing," << det.seconds << '\n';
  return 0;
}

int cmd_train(const Common& c, const fs::path& data, const fs::path& out) {
  const PipelineConfig cfg = resolve(c);
  const std::vector<Scene> scenes = load_scenes(data);
  nn::ParamStore store(cfg.seed);
  Model model(store, cfg);
  fs::create_directories(out);
  {
    std::ofstream cf(out / "config.txt");
    cf << serialize_config(cfg);
  }
  TrainOptions opts;
  opts.jobs = c.jobs;
  const std::int64_t steps_per_epoch = (static_cast<std::int64_t>(scenes.size()) + cfg.train.batch_size - 1) /
                                       std::min<std::int64_t>(cfg.train.batch_size, scenes.size());
  opts.on_step = [&](const LossRow& r) {
    if ((r.step + 1) % steps_per_epoch == 0)
      log(Level::info, "epoch %lld  lr %.3g  total %.5f  rpn %.4f  head %.4f  vote %.4f  ctr %.4f",
          static_cast<long long>((r.step + 1) / steps_per_epoch), r.lr, r.parts.total, r.parts.rpn, r.parts.head,
          r.parts.vote, r.parts.ctr);
    else
      log(Level::debug, "step %lld  total %.5f", static_cast<long long>(r.step), r.parts.total);
  };
  const auto rows = train(model, store, scenes, opts);
  write_loss_csv(out / "loss.csv", rows);
  store.save(out / "checkpoint.bin");
  log(Level::info, "wrote %s", (out / "checkpoint.bin").string().c_str());
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const fs::path& data, const fs::path& out) {
  const PipelineConfig cfg = resolve(c);
  const std::vector<Scene> scenes = load_scenes(data);
  nn::ParamStore store(cfg.seed);
  Model model(store, cfg);
  load_checkpoint(store, checkpoint);
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Box3D>> gts;
  for (const auto& s : scenes) {
    dets.push_back(detect(model, store, s.cloud).detections);
    gts.push_back(s.gt_boxes);
  }
  const EvalReport report = evaluate(dets, gts);
  fs::create_directories(out);
  std::ofstream(out / "report.json") << report.to_json() << '\n';
  for (const auto& e : report.entries) {
    if (!e.ap) continue;
    std::string bucket = e.bucket;
    for (char& ch : bucket)
      if (ch == '>') ch = 'g';
    export_pr(e.curve, out / ("pr_" + class_name(e.class_id) + "_" + bucket + ".csv"));
  }
  std::cout << report.to_json() << '\n';
  return 0;
}

int cmd_export_ply(const Common& c, const std::string& checkpoint, const fs::path& data, const std::string& id,
                   const std::string& stage_name, const fs::path& out) {
  const PipelineConfig cfg = resolve(c);
  const PlyStage stage = parse_ply_stage(stage_name);
  nn::ParamStore store(cfg.seed);
  Model model(store, cfg);
  load_checkpoint(store, checkpoint);
  const Scene scene = read_scene(data, id);
  const PointCloud cloud = scene.cloud.cropped(model.base_spec());
  std::vector<PlyVertex> vertices;
  if (!cloud.empty()) {
    Tape tape;
    nn::Context ctx{tape, store, cfg.norm_scene_stats};
    const StageOneOutput s1 = run_stage_one(ctx, model, cloud, cfg.rpn_top_n_eval);
    vertices = stage == PlyStage::semantic_points ? ply_vertices(s1.semantic)
                                                  : ply_vertices(s1.layer, stage == PlyStage::post_vote);
  }
  write_ply(out, vertices);
  log(Level::info, "wrote %zu vertices to %s", vertices.size(), out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage voxel 3D detector at desk scale"};
  app.require_subcommand(1);
  Common common;
  std::string checkpoint, data, out, id, stage;
  int scenes = 20;

  auto* synth = app.add_subcommand("synth", "generate synthetic scenes");
  add_common(synth, common);
  synth->add_option("--out", out, "output directory")->required();
  synth->add_option("--scenes", scenes, "number of scenes")->check(CLI::NonNegativeNumber);

  auto* forward = app.add_subcommand("forward", "detect objects in one scene");
  add_common(forward, common);
  forward->add_option("--checkpoint", checkpoint);
  forward->add_option("--data", data, "scene directory")->required();
  forward->add_option("--id", id, "scene id")->required();

  auto* trn = app.add_subcommand("train", "train on a scene directory");
  add_common(trn, common);
  trn->add_option("--data", data, "scene directory")->required();
  trn->add_option("--out", out, "output directory (checkpoint.bin, loss.csv, config.txt)")->required();

  auto* evl = app.add_subcommand("eval", "AP report over a scene directory");
  add_common(evl, common);
  evl->add_option("--checkpoint", checkpoint);
  evl->add_option("--data", data, "scene directory")->required();
  evl->add_option("--out", out, "output directory (report.json, PR CSVs)")->required();

  auto* ply = app.add_subcommand("export-ply", "write semantic points or feature-layer voxels as PLY");
  add_common(ply, common);
  ply->add_option("--checkpoint", checkpoint);
  ply->add_option("--data", data, "scene directory")->required();
  ply->add_option("--id", id, "scene id")->required();
  ply->add_option("--stage", stage, "semantic_points, pre_vote or post_vote")->required();
  ply->add_option("--out", out, "output .ply path")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (synth->parsed()) return cmd_synth(common, out, scenes);
    if (forward->parsed()) return cmd_forward(common, checkpoint, data, id);
    if (trn->parsed()) return cmd_train(common, data, out);
    if (evl->parsed()) return cmd_eval(common, checkpoint, data, out);
    if (ply->parsed()) return cmd_export_ply(common, checkpoint, data, id, stage, out);
  } catch (const std::exception& e) {
    log(Level::error, "%s", e.what());
    return 1;
  }
  return 0;
}
