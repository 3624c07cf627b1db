#include "ssk/bev.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace ssk {

BevMap to_bev(nn::Context& ctx, const SparseVoxelTensor& t) {
  const int W = t.spec.grid_dims[0], H = t.spec.grid_dims[1], D = t.spec.grid_dims[2];
  const int C = t.features.valid() ? static_cast<int>(t.features.cols()) : 0;
  BevMap m;
  m.height = H;
  m.width = W;
  if (t.coords.empty()) {
    m.data = ctx.tape.constant(Mat::Zero(static_cast<Eigen::Index>(H) * W, static_cast<Eigen::Index>(D) * C));
    return m;
  }
  std::vector<int> rows;
  rows.reserve(t.coords.size());
  for (const auto& c : t.coords) {
    if (!t.spec.in_grid(c)) throw std::invalid_argument("to_bev: coordinate outside grid");
    rows.push_back((c[1] * W + c[0]) * D + c[2]);
  }
  Var dense = nn::scatter_add_rows(t.features, std::move(rows), H * W * D);
  m.data = nn::reshape(dense, H * W, D * C);
  return m;
}

ConvUnit2d::ConvUnit2d(nn::ParamStore& store, const std::string& name, int in, int out, int kernel, int stride,
                       int groups)
    : conv_(store, name + ".conv", in, out, kernel, stride, groups), norm_(store, name + ".norm", out) {}

BevMap ConvUnit2d::operator()(nn::Context& ctx, const BevMap& x) const {
  BevMap y;
  y.data = norm_(ctx, nn::relu(conv_(ctx, x.data, x.height, x.width)));
  y.height = conv_.out_size(x.height);
  y.width = conv_.out_size(x.width);
  return y;
}

BaseBlock::BaseBlock(nn::ParamStore& store, const std::string& name, int in, int mid, int out) {
  if (out % 2 != 0) throw std::invalid_argument(name + ": output width must be even");
  const std::array<int, 4> w{in, mid, mid, out / 2};
  for (int k = 0; k < 3; ++k) {
    branch1_[k] = ConvUnit2d(store, name + ".b1_" + std::to_string(k), w[k], w[k + 1], 1);
    branch3_[k] = ConvUnit2d(store, name + ".b3_" + std::to_string(k), w[k], w[k + 1], 3);
  }
  project_ = in != out;
  if (project_) proj_ = nn::Conv2d(store, name + ".proj", in, out, 1, 1);
  integrate1_ = ConvUnit2d(store, name + ".int1", out, out, 1);
  integrate3_ = ConvUnit2d(store, name + ".int3", out, out, 3);
}

BevMap BaseBlock::operator()(nn::Context& ctx, const BevMap& x) const {
  BevMap a = x, b = x;
  for (int k = 0; k < 3; ++k) {
    a = branch1_[k](ctx, a);
    b = branch3_[k](ctx, b);
  }
  Var residual = project_ ? proj_(ctx, x.data, x.height, x.width) : x.data;
  BevMap sum{nn::add(nn::concat_cols({a.data, b.data}), residual), x.height, x.width};
  return integrate3_(ctx, integrate1_(ctx, sum));
}

Encoder2d::Encoder2d(nn::ParamStore& store, const Encoder2dConfig& cfg) : cfg_(cfg) {
  if (cfg.blocks < 1) throw std::invalid_argument("encoder2d: at least one base block per branch");
  for (int i = 0; i < 4; ++i) {
    const std::string name = "enc2d.branch" + std::to_string(i + 1);
    const int out = cfg.out[i];
    Branch& br = branches_[i];
    br.stem1 = ConvUnit2d(store, name + ".stem1", cfg.in_channels[i], out, 1);
    br.stem3 = ConvUnit2d(store, name + ".stem3", out, out, 3);
    for (int b = 0; b < cfg.blocks; ++b)
      br.blocks.emplace_back(store, name + ".block" + std::to_string(b), out, cfg.mid[i], out);
    if (i > 0) {
      br.merge1 = ConvUnit2d(store, name + ".merge1", out + cfg.out[i - 1], out, 1);
      br.merge3 = ConvUnit2d(store, name + ".merge3", out, out, 3);
    }
    if (i < 3) {
      br.down_a = ConvUnit2d(store, name + ".down0", out, out, 3, 2, out);
      br.down_b = ConvUnit2d(store, name + ".down1", out, out, 3, 1, out);
      br.down_c = ConvUnit2d(store, name + ".down2", out, out, 1);
    }
  }
}

Encoder2dOutput Encoder2d::forward(nn::Context& ctx, const std::vector<BevMap>& inputs) const {
  if (inputs.size() != 4) throw std::invalid_argument("encoder2d expects four inputs");
  Encoder2dOutput out;
  for (int i = 0; i < 4; ++i) {
    const Branch& br = branches_[i];
    if (inputs[i].channels() != cfg_.in_channels[i])
      throw std::invalid_argument("encoder2d branch " + std::to_string(i + 1) + ": expected " +
                                  std::to_string(cfg_.in_channels[i]) + " channels, got " +
                                  std::to_string(inputs[i].channels()));
    BevMap x = br.stem3(ctx, br.stem1(ctx, inputs[i]));
    for (const auto& block : br.blocks) x = block(ctx, x);
    out.pre_concat.push_back(x);
    if (i > 0) {
      const BevMap& d = out.down.back();
      if (d.height != x.height || d.width != x.width)
        throw std::invalid_argument("encoder2d branch " + std::to_string(i + 1) + ": downsampled map is " +
                                    std::to_string(d.height) + "x" + std::to_string(d.width) + ", branch map is " +
                                    std::to_string(x.height) + "x" + std::to_string(x.width));
      x = br.merge3(ctx, br.merge1(ctx, BevMap{nn::concat_cols({x.data, d.data}), x.height, x.width}));
    }
    out.branch.push_back(x);
    if (i < 3) out.down.push_back(br.down_c(ctx, br.down_b(ctx, br.down_a(ctx, x))));
  }
  out.fused = out.branch.back();
  return out;
}

AnchorGrid make_anchors(const VoxelSpec& spec, const AnchorConfig& cfg) {
  AnchorGrid g;
  g.width = spec.grid_dims[0];
  g.height = spec.grid_dims[1];
  g.per_cell = kNumClasses * static_cast<int>(cfg.yaws.size());
  g.anchors.reserve(static_cast<std::size_t>(g.width) * g.height * g.per_cell);
  for (int y = 0; y < g.height; ++y)
    for (int x = 0; x < g.width; ++x)
      for (int c = 0; c < kNumClasses; ++c)
        for (double yaw : cfg.yaws) {
          Box3D a;
          a.center = {spec.range_min.x() + (x + 0.5) * spec.voxel_size.x(),
                      spec.range_min.y() + (y + 0.5) * spec.voxel_size.y(), cfg.z[c]};
          a.dims = cfg.dims[c];
          a.yaw = yaw;
          a.class_id = c;
          g.anchors.push_back(a);
        }
  return g;
}

RpnTargets assign_rpn_targets(const AnchorGrid& grid, std::span<const Box3D> gt, const AnchorConfig& cfg) {
  const std::size_t A = grid.size();
  RpnTargets t;
  t.labels.assign(A, 0);
  t.matched_gt.assign(A, -1);
  t.residuals.assign(A, BoxResidual{});
  std::vector<double> best(A, 0.0);
  std::vector<double> gt_best(gt.size(), 0.0);
  std::vector<int> gt_best_anchor(gt.size(), -1);

  for (std::size_t a = 0; a < A; ++a) {
    const Box3D& an = grid.anchors[a];
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (gt[g].class_id != an.class_id) continue;
      const double iou = iou_bev(an, gt[g]);
      if (iou > best[a]) {
        best[a] = iou;
        t.matched_gt[a] = static_cast<int>(g);
      }
      if (iou > gt_best[g]) {
        gt_best[g] = iou;
        gt_best_anchor[g] = static_cast<int>(a);
      }
    }
  }
  for (std::size_t a = 0; a < A; ++a) {
    const int c = grid.anchors[a].class_id;
    if (t.matched_gt[a] >= 0 && best[a] >= cfg.pos_iou[c])
      t.labels[a] = 1;
    else if (best[a] >= cfg.neg_iou[c])
      t.labels[a] = kIgnore;
    else
      t.matched_gt[a] = -1;
  }
  for (std::size_t g = 0; g < gt.size(); ++g) {
    int a = gt_best_anchor[g];
    // Small objects can fall between coarse anchors; take the nearest
    // same-class anchor (closest heading on ties) instead.
    if (a < 0) {
      double best_d = std::numeric_limits<double>::infinity(), best_yaw = 0.0;
      for (std::size_t k = 0; k < A; ++k) {
        const Box3D& an = grid.anchors[k];
        if (an.class_id != gt[g].class_id) continue;
        const double d = (an.center.head<2>() - gt[g].center.head<2>()).norm();
        const double dyaw = std::abs(std::sin(gt[g].yaw - an.yaw));
        if (d < best_d - 1e-12 || (std::abs(d - best_d) <= 1e-12 && dyaw < best_yaw)) {
          best_d = d;
          best_yaw = dyaw;
          a = static_cast<int>(k);
        }
      }
      if (a < 0) continue;
    }
    t.labels[a] = 1;
    t.matched_gt[a] = static_cast<int>(g);
  }
  for (std::size_t a = 0; a < A; ++a) {
    if (t.labels[a] != 1) continue;
    t.residuals[a] = encode_box_residual(gt[t.matched_gt[a]], grid.anchors[a]);
    ++t.num_fg;
  }
  return t;
}

RpnHead::RpnHead(nn::ParamStore& store, int in, int per_cell) : per_cell_(per_cell) {
  // Foreground prior of 0.01 keeps the initial focal loss small. Creating the
  // bias first makes the conv layer pick it up instead of zero-initializing.
  store.get("rpn.cls.bias", 1, per_cell, nn::constant_init(-std::log((1.0 - 0.01) / 0.01)));
  cls_ = nn::Conv2d(store, "rpn.cls", in, per_cell, 1, 1);
  reg_ = nn::Conv2d(store, "rpn.reg", in, per_cell * 7, 1, 1);
}

RpnOutput RpnHead::operator()(nn::Context& ctx, const BevMap& fused) const {
  const int pixels = fused.height * fused.width;
  Var cls = cls_(ctx, fused.data, fused.height, fused.width);
  Var reg = reg_(ctx, fused.data, fused.height, fused.width);
  return {nn::reshape(cls, pixels * per_cell_, 1), nn::reshape(reg, pixels * per_cell_, 7)};
}

std::vector<int> nms_bev(std::span<const Box3D> boxes, std::span<const double> scores, double iou_thr,
                         bool per_class) {
  if (boxes.size() != scores.size()) throw std::invalid_argument("nms: size mismatch");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> kept;
  for (int i : order) {
    bool suppressed = false;
    for (int k : kept) {
      if (per_class && boxes[k].class_id != boxes[i].class_id) continue;
      if (iou_bev(boxes[k], boxes[i]) > iou_thr) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(i);
  }
  return kept;
}

std::vector<Proposal> decode_proposals(const RpnOutput& out, const AnchorGrid& grid, int top_n, double nms_iou) {
  if (top_n < 1) throw std::invalid_argument("top_n must be >= 1");
  const Mat& cls = out.cls.value();
  const Mat& reg = out.reg.value();
  if (static_cast<std::size_t>(cls.rows()) != grid.size()) throw std::invalid_argument("rpn output / anchor mismatch");
  std::vector<Box3D> boxes(grid.size());
  std::vector<double> scores(grid.size());
  for (std::size_t a = 0; a < grid.size(); ++a) {
    const auto i = static_cast<Eigen::Index>(a);
    BoxResidual r;
    for (int k = 0; k < 7; ++k) r[k] = reg(i, k);
    // Clamp log-size residuals so decoded dims stay finite and positive.
    for (int k = 3; k < 6; ++k) r[k] = std::clamp(r[k], -4.0, 4.0);
    boxes[a] = decode_box_residual(r, grid.anchors[a]);
    scores[a] = 1.0 / (1.0 + std::exp(-cls(i, 0)));
  }
  std::vector<Proposal> props;
  for (int k : nms_bev(boxes, scores, nms_iou)) {
    if (static_cast<int>(props.size()) >= top_n) break;
    props.push_back({boxes[k], scores[k], k});
  }
  return props;
}

}  // namespace ssk
