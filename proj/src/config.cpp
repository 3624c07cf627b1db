#include "ssk/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace ssk {

namespace {

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

template <typename T>
std::vector<T> parse_list(const std::string& s, std::size_t n) {
  std::istringstream ss(s);
  std::vector<T> out;
  T v;
  while (ss >> v) out.push_back(v);
  if (!ss.eof() || out.size() != n)
    throw std::invalid_argument("expected " + std::to_string(n) + " numeric value" + (n == 1 ? "" : "s"));
  return out;
}

double parse_double(const std::string& s) { return parse_list<double>(s, 1)[0]; }
int parse_int(const std::string& s) {
  const double v = parse_double(s);
  if (v != static_cast<int>(v)) throw std::invalid_argument("expected an integer");
  return static_cast<int>(v);
}
bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("expected true or false");
}

template <std::size_t N, typename T>
std::string join(const std::array<T, N>& a) {
  std::string out;
  for (std::size_t i = 0; i < N; ++i) out += (i ? " " : "") + fmt(static_cast<double>(a[i]));
  return out;
}

std::string join(const Vec3& v) { return fmt(v.x()) + " " + fmt(v.y()) + " " + fmt(v.z()); }

template <std::size_t N>
std::array<int, N> ints(const std::string& s) {
  const auto v = parse_list<double>(s, N);
  std::array<int, N> out{};
  for (std::size_t i = 0; i < N; ++i) {
    if (v[i] != static_cast<int>(v[i])) throw std::invalid_argument("expected integers");
    out[i] = static_cast<int>(v[i]);
  }
  return out;
}

struct Field {
  const char* key;
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&)> set;
};

#define SSK_DOUBLE(KEY, EXPR)                                                          \
  Field {                                                                              \
    KEY, [](const PipelineConfig& c) { return fmt(c.EXPR); },                          \
        [](PipelineConfig& c, const std::string& v) { c.EXPR = parse_double(v); }      \
  }
#define SSK_INT(KEY, EXPR)                                                             \
  Field {                                                                              \
    KEY, [](const PipelineConfig& c) { return std::to_string(c.EXPR); },               \
        [](PipelineConfig& c, const std::string& v) { c.EXPR = parse_int(v); }         \
  }
#define SSK_BOOL(KEY, EXPR)                                                            \
  Field {                                                                              \
    KEY, [](const PipelineConfig& c) { return std::string(c.EXPR ? "true" : "false"); }, \
        [](PipelineConfig& c, const std::string& v) { c.EXPR = parse_bool(v); }        \
  }
#define SSK_VEC3(KEY, EXPR)                                                            \
  Field {                                                                              \
    KEY, [](const PipelineConfig& c) { return join(c.EXPR); },                         \
        [](PipelineConfig& c, const std::string& v) {                                  \
          const auto d = parse_list<double>(v, 3);                                     \
          c.EXPR = Vec3{d[0], d[1], d[2]};                                             \
        }                                                                              \
  }
#define SSK_INTS4(KEY, EXPR)                                                           \
  Field {                                                                              \
    KEY, [](const PipelineConfig& c) { return join(c.EXPR); },                         \
        [](PipelineConfig& c, const std::string& v) { c.EXPR = ints<4>(v); }           \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      SSK_VEC3("voxel.range_min", range_min),
      SSK_VEC3("voxel.range_max", range_max),
      SSK_VEC3("voxel.size", voxel_size),
      SSK_BOOL("voxel.full_range", full_range),
      Field{"msv.in", [](const PipelineConfig& c) {
              return join(std::array<int, 4>{c.msv.channels[0].in, c.msv.channels[1].in, c.msv.channels[2].in,
                                             c.msv.channels[3].in});
            },
            [](PipelineConfig& c, const std::string& v) {
              const auto a = ints<4>(v);
              for (int i = 0; i < 4; ++i) c.msv.channels[i].in = a[i];
            }},
      Field{"msv.mid", [](const PipelineConfig& c) {
              return join(std::array<int, 4>{c.msv.channels[0].mid, c.msv.channels[1].mid, c.msv.channels[2].mid,
                                             c.msv.channels[3].mid});
            },
            [](PipelineConfig& c, const std::string& v) {
              const auto a = ints<4>(v);
              for (int i = 0; i < 4; ++i) c.msv.channels[i].mid = a[i];
            }},
      Field{"msv.out", [](const PipelineConfig& c) {
              return join(std::array<int, 4>{c.msv.channels[0].out, c.msv.channels[1].out, c.msv.channels[2].out,
                                             c.msv.channels[3].out});
            },
            [](PipelineConfig& c, const std::string& v) {
              const auto a = ints<4>(v);
              for (int i = 0; i < 4; ++i) c.msv.channels[i].out = a[i];
            }},
      Field{"msv.sample_rates", [](const PipelineConfig& c) { return join(c.msv.sample_rates); },
            [](PipelineConfig& c, const std::string& v) {
              const auto d = parse_list<double>(v, 3);
              for (int i = 0; i < 3; ++i) c.msv.sample_rates[i] = d[i];
            }},
      SSK_INTS4("enc2d.mid", enc2d_mid),
      SSK_INTS4("enc2d.out", enc2d_out),
      SSK_INT("enc2d.blocks", enc2d_blocks),
      SSK_BOOL("norm.scene_stats", norm_scene_stats),
      SSK_INT("semantic.width", semantic_width),
      SSK_INT("roi.coarse", roi.coarse),
      SSK_INT("roi.fine", roi.fine),
      SSK_DOUBLE("roi.coarse_radius", roi_coarse_radius_cells),
      SSK_DOUBLE("roi.fine_radius", roi_fine_radius_cells),
      SSK_INT("roi.max_neighbors", roi.max_neighbors),
      SSK_INT("roi.width", roi.width),
      SSK_DOUBLE("head.theta_h", head.theta_h),
      SSK_DOUBLE("head.theta_l", head.theta_l),
      SSK_DOUBLE("head.theta_reg", head.theta_reg),
      SSK_INT("head.hidden", head.hidden),
      SSK_INT("head.num_samples", head.num_samples),
      SSK_DOUBLE("head.fg_fraction", head.fg_fraction),
      SSK_DOUBLE("loss.alpha", loss.alpha),
      SSK_DOUBLE("loss.beta", loss.beta),
      SSK_DOUBLE("loss.focal_gamma", loss.focal_gamma),
      SSK_DOUBLE("loss.focal_alpha", loss.focal_alpha),
      SSK_DOUBLE("loss.smooth_l1_delta", loss.smooth_l1_delta),
      SSK_DOUBLE("loss.eps", loss.eps),
      SSK_BOOL("loss.ctr_all_levels", loss.ctr_all_levels),
      SSK_INT("rpn.top_n_train", rpn_top_n_train),
      SSK_INT("rpn.top_n_eval", rpn_top_n_eval),
      SSK_DOUBLE("rpn.nms_iou", rpn_nms_iou),
      SSK_DOUBLE("detect.nms_iou", detect_nms_iou),
      SSK_DOUBLE("detect.score_threshold", detect_score_threshold),
      Field{"vote.scheme", [](const PipelineConfig& c) { return std::string(scheme_name(c.scheme)); },
            [](PipelineConfig& c, const std::string& v) { c.scheme = parse_scheme(v); }},
      Field{"seed", [](const PipelineConfig& c) { return std::to_string(c.seed); },
            [](PipelineConfig& c, const std::string& v) {
              std::size_t used = 0;
              const unsigned long long s = std::stoull(v, &used);
              if (used != v.size()) throw std::invalid_argument("expected an unsigned integer");
              c.seed = s;
            }},
      SSK_INT("train.epochs", train.epochs),
      SSK_DOUBLE("train.lr_max", train.lr_max),
      SSK_DOUBLE("train.weight_decay", train.weight_decay),
      SSK_DOUBLE("train.beta1", train.beta1),
      SSK_DOUBLE("train.beta2", train.beta2),
      SSK_DOUBLE("train.bn_momentum", train.bn_momentum),
      SSK_BOOL("train.augment", train.augment),
      SSK_INT("train.paste_per_class", train.paste_per_class),
      SSK_INT("train.batch_size", train.batch_size),
      SSK_INT("synth.n_objects", synth.n_objects),
      SSK_INT("synth.clutter_points", synth.clutter_points),
      SSK_DOUBLE("synth.points_at_10m", synth.points_at_10m),
      SSK_INT("synth.max_object_points", synth.max_object_points),
      SSK_DOUBLE("synth.ground_z", synth.ground_z),
  };
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

VoxelSpec PipelineConfig::base_spec() const {
  if (full_range) return VoxelSpec::make({0.0, -40.0, -3.0}, {70.4, 40.0, 1.0}, voxel_size);
  return VoxelSpec::make(range_min, range_max, voxel_size);
}

void PipelineConfig::validate() const {
  auto fail = [](const std::string& why) { throw std::invalid_argument("config: " + why); };
  if (!((voxel_size.array() > 0.0).all())) fail("voxel.size must be positive");
  if (!full_range && !((range_min.array() < range_max.array()).all())) fail("voxel.range_min must be below range_max");
  if (msv.channels[0].in != 10) fail("msv.in[0] must be 10 (coordinate feature width)");
  for (int i = 0; i < 4; ++i) {
    const auto& ch = msv.channels[i];
    if (ch.in < 1 || ch.mid < 2 || ch.out < 1) fail("msv widths must be positive");
    if (ch.mid % 2) fail("msv.mid values must be even");
    if (i > 0 && ch.in != msv.channels[i - 1].out) fail("msv.in[i] must equal msv.out[i-1]");
  }
  for (double r : msv.sample_rates)
    if (!(r > 0.0 && r <= 1.0)) fail("msv.sample_rates must lie in (0, 1]");
  for (int i = 0; i < 4; ++i) {
    if (enc2d_mid[i] < 1 || enc2d_out[i] < 2 || enc2d_out[i] % 2) fail("enc2d widths must be positive, out even");
  }
  if (enc2d_blocks < 1) fail("enc2d.blocks must be >= 1");
  if (semantic_width < 1 || roi.width < 1 || roi.coarse < 1 || roi.fine < 1 || roi.max_neighbors < 1)
    fail("roi / semantic sizes must be positive");
  if (!(roi_coarse_radius_cells > 0.0 && roi_fine_radius_cells > 0.0)) fail("roi radii must be positive");
  if (!(0.0 <= head.theta_l && head.theta_l < head.theta_h && head.theta_h <= 1.0))
    fail("head thresholds must satisfy 0 <= theta_l < theta_h <= 1");
  if (!(head.theta_reg >= 0.0 && head.theta_reg <= 1.0)) fail("head.theta_reg must lie in [0, 1]");
  if (head.hidden < 1 || head.num_samples < 1) fail("head sizes must be positive");
  if (!(loss.alpha >= 0 && loss.beta >= 0 && loss.focal_gamma >= 0 && loss.focal_alpha > 0 && loss.focal_alpha < 1 &&
        loss.smooth_l1_delta > 0 && loss.eps > 0 && loss.eps < 0.5))
    fail("loss parameters out of range");
  if (rpn_top_n_train < 1 || rpn_top_n_eval < 1) fail("rpn.top_n values must be >= 1");
  if (train.batch_size < 1) fail("train.batch_size must be >= 1");
  if (train.epochs < 0 || !(train.lr_max > 0.0)) fail("train.epochs must be >= 0 and train.lr_max > 0");
  if (synth.n_objects < 0) fail("synth.n_objects must be >= 0");
}

PipelineConfig toy_config() {
  PipelineConfig c;
  c.msv.channels = {{{10, 8, 8}, {8, 12, 12}, {12, 12, 16}, {16, 16, 24}}};
  c.enc2d_mid = {8, 8, 8, 8};
  c.enc2d_out = {16, 16, 16, 16};
  c.enc2d_blocks = 1;
  c.norm_scene_stats = true;
  c.semantic_width = 16;
  c.roi.width = 16;
  c.head.hidden = 32;
  c.head.num_samples = 32;
  c.rpn_top_n_train = 64;
  c.rpn_top_n_eval = 32;
  c.train.epochs = 100;
  c.train.lr_max = 0.01;
  return c;
}

PipelineConfig parse_config(const std::string& text, const PipelineConfig& base) {
  PipelineConfig cfg = base;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    auto fail = [&](const std::string& why) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": " + why);
    };
    if (eq == std::string::npos) fail("expected `key = value`");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const Field* field = nullptr;
    for (const auto& f : fields())
      if (key == f.key) field = &f;
    if (!field) fail("unknown key '" + key + "'");
    try {
      field->set(cfg, value);
    } catch (const std::exception& e) {
      fail(key + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path, const PipelineConfig& base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), base);
}

std::string serialize_config(const PipelineConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(cfg) + "\n";
  return out;
}

}  // namespace ssk
