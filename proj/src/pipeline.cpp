#include "ssk/pipeline.hpp"

#include <chrono>
#include <stdexcept>

namespace ssk {

std::array<VoxelSpec, 4> encoder_output_specs(const VoxelSpec& base, const Encoder3dConfig& cfg) {
  const auto levels = level_specs(base, 4);
  std::array<VoxelSpec, 4> out;
  for (int i = 0; i < 4; ++i) {
    VoxelSpec s = levels[i];
    for (const auto& stride : cfg.strides[i]) {
      std::array<int, 3> dims{};
      for (int a = 0; a < 3; ++a) dims[a] = (s.grid_dims[a] - 1) / stride[a] + 1;
      s = strided_spec(s, stride, dims);
    }
    out[i] = s;
  }
  return out;
}

namespace {

Encoder3dConfig enc3d_config(const PipelineConfig& cfg) {
  Encoder3dConfig e = cfg.enc3d;
  for (int i = 0; i < 4; ++i) e.in_channels[i] = cfg.msv.channels[i].out;
  return e;
}

Encoder2dConfig enc2d_config(const PipelineConfig& cfg, const VoxelSpec& base, const std::array<int, 4>& widths) {
  const auto specs = encoder_output_specs(base, cfg.enc3d);
  Encoder2dConfig e;
  for (int i = 0; i < 4; ++i) e.in_channels[i] = specs[i].grid_dims[2] * widths[i];
  e.mid = cfg.enc2d_mid;
  e.out = cfg.enc2d_out;
  e.blocks = cfg.enc2d_blocks;
  return e;
}

RoiPoolConfig pool_config(const PipelineConfig& cfg) {
  RoiPoolConfig r = cfg.roi;
  r.coarse_radius = cfg.roi_coarse_radius_cells * cfg.voxel_size.x();
  r.fine_radius = cfg.roi_fine_radius_cells * cfg.voxel_size.x();
  return r;
}

std::array<int, 8> semantic_widths(const PipelineConfig& cfg, const std::array<int, 4>& deep) {
  std::array<int, 8> w{};
  for (int i = 0; i < 4; ++i) {
    w[i] = cfg.msv.channels[i].out;
    w[4 + i] = deep[i];
  }
  return w;
}

}  // namespace

Model::Model(nn::ParamStore& store, const PipelineConfig& cfg)
    : cfg_(cfg), base_(cfg.base_spec()), roi_cfg_(pool_config(cfg)) {
  cfg_.validate();
  msv = MultiScaleVoxelizer(store, cfg.msv);
  enc3d = Encoder3d(store, enc3d_config(cfg));
  const auto deep = enc3d.out_channels();
  enc2d = Encoder2d(store, enc2d_config(cfg, base_, deep));
  anchors_ = make_anchors(encoder_output_specs(base_, cfg.enc3d)[3], cfg.anchors);
  rpn = RpnHead(store, cfg.enc2d_out[3], anchors_.per_cell);
  projector = SemanticProjector(store, semantic_widths(cfg, deep), cfg.semantic_width);
  agg_vote = nn::Linear(store, "agg.vote", cfg.semantic_width, 3);
  roi = HvRoiPool(store, cfg.semantic_width, roi_cfg_);
  head = RefineHead(store, roi.out_width(), cfg.head);
}

StageOneOutput run_stage_one(nn::Context& ctx, const Model& model, const PointCloud& cloud, int top_n) {
  if (cloud.empty()) throw std::invalid_argument("run_stage_one: empty cloud");
  StageOneOutput out;
  out.msv = model.msv.forward(ctx, cloud, model.base_spec());
  out.deep = model.enc3d.forward(ctx, out.msv.sparse);

  std::vector<BevMap> maps;
  for (const auto& f : out.deep) maps.push_back(to_bev(ctx, f));
  out.bev = model.enc2d.forward(ctx, maps);
  out.rpn = model.rpn(ctx, out.bev.fused);
  out.proposals = decode_proposals(out.rpn, model.anchors(), top_n, model.config().rpn_nms_iou);

  std::vector<SemanticSource> sources;
  for (int i = 0; i < 4; ++i) {
    const PointwiseFeature& v = out.msv.pointwise[i];
    SemanticSource s;
    s.tag = static_cast<SourceTag>(i);
    s.features = v.features;
    if (i == 3) {
      const Mat& voted = out.msv.vote.new_coords.value();
      for (Eigen::Index r = 0; r < voted.rows(); ++r) s.coords.emplace_back(voted(r, 0), voted(r, 1), voted(r, 2));
    } else {
      s.coords = v.coords;
    }
    sources.push_back(std::move(s));
  }
  for (int i = 0; i < 4; ++i) sources.push_back(f_source(out.deep[i], static_cast<SourceTag>(4 + i)));
  out.semantic = model.projector(ctx, sources);
  out.voxels = semantic_voxelize(ctx, out.semantic, model.base_spec());
  out.layer = masked_center_vote(ctx, out.voxels, model.config().scheme, model.agg_vote);
  return out;
}

PointTargets point_targets(std::span<const Vec3> points, std::span<const Box3D> gt) {
  PointTargets t;
  t.fg.assign(points.size(), 0);
  t.mask.assign(points.size(), 0.0);
  t.centroid.assign(points.size(), Vec3::Zero());
  for (std::size_t i = 0; i < points.size(); ++i) {
    // First containing box wins; synthetic boxes do not overlap.
    for (const auto& b : gt) {
      if (!point_in_box(points[i], b)) continue;
      t.fg[i] = 1;
      t.mask[i] = centerness_mask(points[i], b);
      t.centroid[i] = b.center;
      break;
    }
  }
  return t;
}

namespace {

HeadTargets select_targets(const HeadTargets& all, std::span<const int> rows) {
  HeadTargets t;
  for (int r : rows) {
    t.iou.push_back(all.iou[r]);
    t.gt_index.push_back(all.gt_index[r]);
    t.conf.push_back(all.conf[r]);
    t.reg.push_back(all.reg[r]);
    t.reg_mask.push_back(all.reg_mask[r]);
  }
  return t;
}

Var zero_scalar(Tape& tape) { return tape.constant(Mat::Zero(1, 1)); }

}  // namespace

SceneLoss scene_loss(nn::Context& ctx, const Model& model, const Scene& scene) {
  const PipelineConfig& cfg = model.config();
  const PointCloud cloud = scene.cloud.cropped(model.base_spec());
  if (cloud.empty()) throw std::invalid_argument("scene_loss: scene " + scene.id + " has no points in range");
  const std::span<const Box3D> gt = scene.gt_boxes;
  StageOneOutput s1 = run_stage_one(ctx, model, cloud, cfg.rpn_top_n_train);
  SceneLoss loss;

  // Centerness supervision of W_d.
  const int ctr_levels = cfg.loss.ctr_all_levels ? 4 : 3;
  std::vector<Var> ctr_terms;
  for (int i = 0; i < ctr_levels; ++i) {
    const PointwiseFeature& v = s1.msv.pointwise[i];
    const PointTargets t = point_targets(v.coords, gt);
    ctr_terms.push_back(l_ctr(v.weights, t.mask, t.fg, cfg.loss.eps));
  }
  Var ctr = nn::weighted_sum(ctr_terms, std::vector<double>(ctr_terms.size(), 1.0 / ctr_terms.size()));

  // V_4 vote, targets from the pre-vote coordinates.
  const PointTargets tv = point_targets(s1.msv.pointwise[3].coords, gt);
  Var vote_v = l_vote(s1.msv.vote.new_coords, tv.centroid, tv.fg);

  // Feature-layer vote on voted voxels only.
  const PointTargets tf = point_targets(s1.layer.pre_centers, gt);
  Var vote_f = l_vote(s1.layer.centers, tf.centroid, tf.fg, s1.layer.voted);

  const RpnTargets rpn_t = assign_rpn_targets(model.anchors(), gt, cfg.anchors);
  Var rpn = l_rpn(s1.rpn, rpn_t, cfg.loss);
  loss.rpn_fg = rpn_t.num_fg;

  Var head = zero_scalar(ctx.tape);
  if (!s1.proposals.empty()) {
    const HeadTargets all = assign_head_targets(s1.proposals, gt, cfg.head);
    const std::vector<int> rows = sample_proposals(all.iou, cfg.head);
    std::vector<Box3D> boxes;
    for (int r : rows) boxes.push_back(s1.proposals[r].box);
    const HeadOutput out = model.head(ctx, model.roi(ctx, s1.layer, boxes));
    std::vector<int> local(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) local[k] = static_cast<int>(k);
    head = l_head(out, select_targets(all, rows), local, cfg.loss);
    loss.head_samples = static_cast<int>(rows.size());
  }

  loss.total = l_total(rpn, head, vote_v, vote_f, ctr, cfg.loss);
  loss.parts = l_total(rpn.scalar(), head.scalar(), vote_v.scalar(), vote_f.scalar(), ctr.scalar(), cfg.loss);
  return loss;
}

SceneDetections detect(const Model& model, nn::ParamStore& store, const PointCloud& raw) {
  const auto t0 = std::chrono::steady_clock::now();
  SceneDetections out;
  const PointCloud cloud = raw.cropped(model.base_spec());
  if (!cloud.empty()) {
    Tape tape;
    nn::Context ctx{tape, store, model.config().norm_scene_stats};
    StageOneOutput s1 = run_stage_one(ctx, model, cloud, model.config().rpn_top_n_eval);
    out.proposals = s1.proposals;
    if (!s1.proposals.empty()) {
      std::vector<Box3D> boxes;
      for (const auto& p : s1.proposals) boxes.push_back(p.box);
      const HeadOutput h = model.head(ctx, model.roi(ctx, s1.layer, boxes));
      for (auto& d : final_decode(s1.proposals, h.confidence.value(), h.refinement.value(),
                                  model.config().detect_nms_iou))
        if (d.score >= model.config().detect_score_threshold) out.detections.push_back(d);
    }
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

double proposal_recall(std::span<const Proposal> proposals, std::span<const Box3D> gt, double thr) {
  if (gt.empty()) return 1.0;
  int hit = 0;
  for (const auto& g : gt) {
    for (const auto& p : proposals) {
      if (p.box.class_id == g.class_id && iou_bev(p.box, g) >= thr) {
        ++hit;
        break;
      }
    }
  }
  return static_cast<double>(hit) / static_cast<double>(gt.size());
}

VoteDisplacement vote_displacement(const FeatureLayer3D& layer, std::span<const Box3D> gt) {
  VoteDisplacement d;
  const PointTargets t = point_targets(layer.pre_centers, gt);
  const auto post = layer.center_values();
  for (std::size_t i = 0; i < layer.size(); ++i) {
    if (!layer.voted[i] || !t.fg[i]) continue;
    d.pre += (layer.pre_centers[i] - t.centroid[i]).norm();
    d.post += (post[i] - t.centroid[i]).norm();
    ++d.count;
  }
  if (d.count > 0) {
    d.pre /= d.count;
    d.post /= d.count;
  }
  return d;
}

}  // namespace ssk
