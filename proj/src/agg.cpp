#include "ssk/agg.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace ssk {

namespace {

VoxelIndex clamped_voxel(const Vec3& p, const VoxelSpec& spec) {
  VoxelIndex idx;
  for (int a = 0; a < 3; ++a) {
    const double f = std::floor((p[a] - spec.range_min[a]) / spec.voxel_size[a]);
    idx[a] = static_cast<int>(std::clamp(f, 0.0, static_cast<double>(spec.grid_dims[a] - 1)));
  }
  return idx;
}

}  // namespace

Var gated_move(Tape& t, const std::vector<Vec3>& pre, Var offsets, const std::vector<std::uint8_t>& gate) {
  Mat out = coords_to_mat(pre);
  const Mat& off = offsets.value();
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    if (gate[i]) out.row(i) += off.row(i);
  const int io = offsets.id();
  return t.record(std::move(out), {io}, [io, gate](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Mat& go = t.grad(io);
    for (Eigen::Index i = 0; i < g.rows(); ++i)
      if (gate[i]) go.row(i) += g.row(i);
  });
}

const char* tag_name(SourceTag t) {
  static const char* names[] = {"V1", "V2", "V3", "V4", "F1", "F2", "F3", "F4"};
  return names[static_cast<int>(t)];
}

SemanticSource f_source(const SparseVoxelTensor& t, SourceTag tag) {
  SemanticSource s;
  s.tag = tag;
  s.features = t.features;
  s.coords.reserve(t.coords.size());
  for (const auto& c : t.coords) s.coords.push_back(voxel_to_world(c, t.spec));
  return s;
}

SemanticProjector::SemanticProjector(nn::ParamStore& store, const std::array<int, 8>& widths, int common)
    : common_(common) {
  for (int k = 0; k < 8; ++k) {
    const std::string name = std::string("semantic.") + tag_name(static_cast<SourceTag>(k));
    first_[k] = nn::Fcn(store, name + ".fc0", widths[k], common);
    second_[k] = nn::Fcn(store, name + ".fc1", common, common);
  }
}

SemanticPoints SemanticProjector::operator()(nn::Context& ctx, const std::vector<SemanticSource>& sources) const {
  SemanticPoints out;
  std::vector<Var> parts;
  for (const auto& s : sources) {
    if (s.coords.empty()) continue;
    const int k = static_cast<int>(s.tag);
    parts.push_back(second_[k](ctx, first_[k](ctx, s.features)));
    out.coords.insert(out.coords.end(), s.coords.begin(), s.coords.end());
    out.tags.insert(out.tags.end(), s.coords.size(), s.tag);
  }
  out.features = parts.empty() ? ctx.tape.constant(Mat::Zero(0, common_)) : nn::concat_rows(parts);
  return out;
}

SemanticVoxels semantic_voxelize(nn::Context& ctx, const SemanticPoints& points, const VoxelSpec& spec) {
  SemanticVoxels v;
  std::map<std::int64_t, int> slots;
  std::vector<VoxelIndex> idx(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    idx[i] = clamped_voxel(points.coords[i], spec);
    slots.emplace(spec.flat_key(idx[i]), 0);
  }
  for (auto& [key, slot] : slots) slot = static_cast<int>(v.coords.size()), v.coords.push_back({0, 0, 0});
  const std::size_t M = v.coords.size();
  v.centers.assign(M, Vec3::Zero());
  v.has_shallow.assign(M, 0);
  v.has_deep.assign(M, 0);
  v.point_slot.resize(points.size());
  std::vector<int> count(M, 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const int s = slots.at(spec.flat_key(idx[i]));
    v.point_slot[i] = s;
    v.coords[s] = idx[i];
    v.centers[s] += points.coords[i];
    ++count[s];
    (is_shallow(points.tags[i]) ? v.has_shallow : v.has_deep)[s] = 1;
  }
  for (std::size_t s = 0; s < M; ++s) v.centers[s] /= count[s];
  v.mask_vote.resize(M);
  for (std::size_t s = 0; s < M; ++s) v.mask_vote[s] = v.has_shallow[s] ? 0 : 1;
  v.features = points.size() ? nn::group_mean(points.features, v.point_slot, static_cast<int>(M))
                             : ctx.tape.constant(Mat::Zero(0, points.features.valid() ? points.features.cols() : 0));
  return v;
}

VoteScheme parse_scheme(const std::string& s) {
  if (s == "all") return VoteScheme::all;
  if (s == "v" || s == "v_only") return VoteScheme::v_only;
  if (s == "f" || s == "f_only") return VoteScheme::f_only;
  if (s == "none") return VoteScheme::none;
  throw std::invalid_argument("unknown vote scheme '" + s + "' (expected all, v, f or none)");
}

const char* scheme_name(VoteScheme s) {
  switch (s) {
    case VoteScheme::all: return "all";
    case VoteScheme::v_only: return "v";
    case VoteScheme::f_only: return "f";
    case VoteScheme::none: return "none";
  }
  return "?";
}

std::vector<Vec3> FeatureLayer3D::center_values() const {
  std::vector<Vec3> out(size());
  const Mat& c = centers.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c.row(static_cast<Eigen::Index>(i)).transpose();
  return out;
}

FeatureLayer3D masked_center_vote(nn::Context& ctx, const SemanticVoxels& voxels, VoteScheme scheme,
                                  const nn::Linear& head) {
  if (head.out() != 3) throw std::invalid_argument("vote head must output 3 channels");
  FeatureLayer3D layer;
  layer.pre_centers = voxels.centers;
  layer.has_shallow = voxels.has_shallow;
  layer.has_deep = voxels.has_deep;
  layer.features = voxels.features;
  layer.voted.resize(voxels.size());
  for (std::size_t s = 0; s < voxels.size(); ++s) {
    switch (scheme) {
      case VoteScheme::all: layer.voted[s] = 1; break;
      case VoteScheme::v_only: layer.voted[s] = voxels.has_shallow[s] && !voxels.has_deep[s]; break;
      case VoteScheme::f_only: layer.voted[s] = voxels.mask_vote[s]; break;
      case VoteScheme::none: layer.voted[s] = 0; break;
    }
  }
  layer.raw_offsets = head(ctx, voxels.features);
  Var applied = nn::clamp_cols(layer.raw_offsets, {kVoteClamp[0], kVoteClamp[1], kVoteClamp[2]});
  layer.centers = gated_move(ctx.tape, layer.pre_centers, applied, layer.voted);
  return layer;
}

std::vector<Vec3> roi_grid_points(const Box3D& box, int n) {
  std::vector<Vec3> pts;
  pts.reserve(static_cast<std::size_t>(n) * n * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        const Vec3 local{((i + 0.5) / n - 0.5) * box.dims.x(), ((j + 0.5) / n - 0.5) * box.dims.y(),
                         ((k + 0.5) / n - 0.5) * box.dims.z()};
        pts.push_back(from_box_frame(local, box));
      }
  return pts;
}

NeighborList radius_neighbors(std::span<const Vec3> points, std::span<const Vec3> queries, double radius, int max_k) {
  NeighborList out;
  const double r2 = radius * radius;
  std::vector<std::pair<double, int>> hits;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    hits.clear();
    for (std::size_t i = 0; i < points.size(); ++i) {
      const double d2 = (points[i] - queries[q]).squaredNorm();
      if (d2 <= r2) hits.emplace_back(d2, static_cast<int>(i));
    }
    const std::size_t k = std::min(hits.size(), static_cast<std::size_t>(std::max(0, max_k)));
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end());
    for (std::size_t h = 0; h < k; ++h) {
      out.point.push_back(hits[h].second);
      out.group.push_back(static_cast<int>(q));
    }
  }
  return out;
}

HvRoiPool::HvRoiPool(nn::ParamStore& store, int in, const RoiPoolConfig& cfg) : cfg_(cfg) {
  coarse_fcn_ = nn::Fcn(store, "roi.coarse", in + 3, cfg.width);
  fine_fcn_ = nn::Fcn(store, "roi.fine", in + 3, cfg.width);
}

int HvRoiPool::out_width() const {
  return (cfg_.coarse * cfg_.coarse * cfg_.coarse + cfg_.fine * cfg_.fine * cfg_.fine) * cfg_.width;
}

Var HvRoiPool::pool_level(nn::Context& ctx, const FeatureLayer3D& layer, const std::vector<Vec3>& centers,
                          std::span<const Box3D> boxes, int n, double radius, const nn::Fcn& fcn) const {
  const int cells = n * n * n;
  std::vector<int> idx, group;
  std::vector<Vec3> rel;
  std::vector<Vec3> cand;
  std::vector<int> cand_idx;
  for (std::size_t p = 0; p < boxes.size(); ++p) {
    const Box3D& box = boxes[p];
    const double reach = 0.5 * box.dims.norm() + radius;
    cand.clear();
    cand_idx.clear();
    for (std::size_t i = 0; i < centers.size(); ++i)
      if ((centers[i] - box.center).squaredNorm() <= reach * reach) {
        cand.push_back(centers[i]);
        cand_idx.push_back(static_cast<int>(i));
      }
    const std::vector<Vec3> grid = roi_grid_points(box, n);
    const NeighborList nb = radius_neighbors(cand, grid, radius, cfg_.max_neighbors);
    const double c = std::cos(box.yaw), s = std::sin(box.yaw);
    for (std::size_t h = 0; h < nb.point.size(); ++h) {
      const int i = cand_idx[nb.point[h]];
      idx.push_back(i);
      group.push_back(static_cast<int>(p) * cells + nb.group[h]);
      const Vec3 d = centers[i] - grid[nb.group[h]];
      rel.push_back({c * d.x() + s * d.y(), -s * d.x() + c * d.y(), d.z()});
    }
  }
  const int P = static_cast<int>(boxes.size());
  Var input = nn::concat_cols({nn::gather_rows(layer.features, idx), ctx.tape.constant(coords_to_mat(rel))});
  Var pooled = nn::group_max(fcn(ctx, input), std::move(group), P * cells);
  return nn::reshape(pooled, P, cells * cfg_.width);
}

Var HvRoiPool::operator()(nn::Context& ctx, const FeatureLayer3D& layer, std::span<const Box3D> boxes) const {
  const std::vector<Vec3> centers = layer.center_values();
  if (boxes.empty()) return ctx.tape.constant(Mat::Zero(0, out_width()));
  return nn::concat_cols({pool_level(ctx, layer, centers, boxes, cfg_.coarse, cfg_.coarse_radius, coarse_fcn_),
                          pool_level(ctx, layer, centers, boxes, cfg_.fine, cfg_.fine_radius, fine_fcn_)});
}

double confidence_target(double iou, const HeadConfig& cfg) {
  if (iou <= cfg.theta_l) return 0.0;
  if (iou >= cfg.theta_h) return 1.0;
  return (iou - cfg.theta_l) / (cfg.theta_h - cfg.theta_l);
}

RefineHead::RefineHead(nn::ParamStore& store, int in, const HeadConfig& cfg) {
  fc0_ = nn::Fcn(store, "head.fc0", in, cfg.hidden);
  fc1_ = nn::Fcn(store, "head.fc1", cfg.hidden, cfg.hidden);
  conf_ = nn::Linear(store, "head.conf", cfg.hidden, 1);
  reg_ = nn::Linear(store, "head.reg", cfg.hidden, 7);
}

HeadOutput RefineHead::operator()(nn::Context& ctx, Var pooled) const {
  Var h = fc1_(ctx, fc0_(ctx, pooled));
  return {conf_(ctx, h), reg_(ctx, h)};
}

HeadTargets assign_head_targets(std::span<const Proposal> proposals, std::span<const Box3D> gt,
                                const HeadConfig& cfg) {
  HeadTargets t;
  const std::size_t P = proposals.size();
  t.iou.assign(P, 0.0);
  t.gt_index.assign(P, -1);
  t.conf.assign(P, 0.0);
  t.reg.assign(P, BoxResidual{});
  t.reg_mask.assign(P, 0);
  for (std::size_t p = 0; p < P; ++p) {
    const Box3D& box = proposals[p].box;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (gt[g].class_id != box.class_id) continue;
      const double iou = iou_3d(box, gt[g]);
      if (iou > t.iou[p]) {
        t.iou[p] = iou;
        t.gt_index[p] = static_cast<int>(g);
      }
    }
    t.conf[p] = confidence_target(t.iou[p], cfg);
    if (t.gt_index[p] >= 0) t.reg[p] = encode_box_residual(gt[t.gt_index[p]], box);
    t.reg_mask[p] = t.gt_index[p] >= 0 && t.iou[p] >= cfg.theta_reg;
  }
  return t;
}

std::vector<int> sample_proposals(std::span<const double> iou, const HeadConfig& cfg) {
  const int budget = cfg.num_samples;
  std::vector<int> fg, rest;
  for (std::size_t i = 0; i < iou.size(); ++i) (iou[i] > cfg.theta_reg ? fg : rest).push_back(static_cast<int>(i));
  const int fg_cap = std::max(budget / 2, static_cast<int>(std::ceil(cfg.fg_fraction * budget)));
  std::vector<int> out;
  for (int i : fg)
    if (static_cast<int>(out.size()) < fg_cap) out.push_back(i);
  std::vector<int> leftover(fg.begin() + static_cast<std::ptrdiff_t>(std::min(fg.size(), out.size())), fg.end());
  rest.insert(rest.end(), leftover.begin(), leftover.end());
  std::sort(rest.begin(), rest.end());
  for (int i : rest)
    if (static_cast<int>(out.size()) < budget) out.push_back(i);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Detection> final_decode(std::span<const Proposal> proposals, const Mat& confidence, const Mat& refinement,
                                    double nms_iou) {
  const std::size_t P = proposals.size();
  if (static_cast<std::size_t>(confidence.rows()) != P || static_cast<std::size_t>(refinement.rows()) != P)
    throw std::invalid_argument("final_decode: head output / proposal mismatch");
  std::vector<Box3D> boxes(P);
  std::vector<double> scores(P);
  for (std::size_t p = 0; p < P; ++p) {
    const auto i = static_cast<Eigen::Index>(p);
    BoxResidual r;
    for (int k = 0; k < 7; ++k) r[k] = refinement(i, k);
    for (int k = 3; k < 6; ++k) r[k] = std::clamp(r[k], -4.0, 4.0);
    boxes[p] = decode_box_residual(r, proposals[p].box);
    scores[p] = 1.0 / (1.0 + std::exp(-confidence(i, 0)));
  }
  std::vector<Detection> out;
  for (int k : nms_bev(boxes, scores, nms_iou, true)) out.push_back({boxes[k], scores[k]});
  return out;
}

}  // namespace ssk
