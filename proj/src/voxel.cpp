#include "ssk/voxel.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>

namespace ssk {

std::vector<int> VoxelAssignment::counts() const {
  std::vector<int> c(voxels.size(), 0);
  for (int s : point_slot) ++c[s];
  return c;
}

VoxelAssignment dynamic_voxelize(std::span<const Vec3> points, const VoxelSpec& spec) {
  VoxelAssignment a;
  a.point_voxel.reserve(points.size());
  std::vector<std::int64_t> keys;
  keys.reserve(points.size());
  for (const auto& p : points) {
    const VoxelIndex idx = world_to_voxel(p, spec);
    a.point_voxel.push_back(idx);
    keys.push_back(spec.flat_key(idx));
  }
  std::vector<int> order(points.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) { return keys[i] < keys[j] || (keys[i] == keys[j] && i < j); });
  a.point_slot.assign(points.size(), -1);
  std::int64_t last = -1;
  for (int i : order) {
    if (a.voxels.empty() || keys[i] != last) {
      a.voxels.push_back(a.point_voxel[i]);
      last = keys[i];
    }
    a.point_slot[i] = static_cast<int>(a.voxels.size()) - 1;
  }
  return a;
}

Mat compose_coord_feature(std::span<const Vec3> points, std::span<const double> reflectance,
                          const VoxelAssignment& assignment) {
  const auto n = static_cast<Eigen::Index>(points.size());
  if (reflectance.size() != points.size() || assignment.point_slot.size() != points.size())
    throw std::invalid_argument("compose_coord_feature: size mismatch");
  Mat xyz = coords_to_mat(points);
  const Mat centers = nn::scatter_mean_rows(xyz, assignment.point_slot, assignment.num_voxels());
  Mat out(n, 10);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto c = centers.row(assignment.point_slot[i]);
    out.block<1, 3>(i, 0) = xyz.row(i);
    out(i, 3) = reflectance[i];
    out.block<1, 3>(i, 4) = c;
    out.block<1, 3>(i, 7) = xyz.row(i) - c;
  }
  return out;
}

Mat scatter_mean(const Mat& features, const VoxelAssignment& assignment) {
  return nn::scatter_mean_rows(features, assignment.point_slot, assignment.num_voxels());
}

Mat scatter_max(const Mat& features, const VoxelAssignment& assignment) {
  return nn::scatter_max_rows(features, assignment.point_slot, assignment.num_voxels());
}

Mat weighted_mean(const Mat& features, std::span<const double> weights, const VoxelAssignment& assignment) {
  if (static_cast<Eigen::Index>(weights.size()) != features.rows())
    throw std::invalid_argument("weighted_mean: weight count mismatch");
  Mat w = features;
  for (Eigen::Index i = 0; i < w.rows(); ++i) w.row(i) *= weights[i];
  return scatter_mean(w, assignment);
}

Mat coords_to_mat(std::span<const Vec3> coords) {
  Mat m(static_cast<Eigen::Index>(coords.size()), 3);
  for (std::size_t i = 0; i < coords.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = coords[i].transpose();
  return m;
}

MsvLevel::MsvLevel(nn::ParamStore& store, const std::string& name, const MsvLevelChannels& ch) : ch_(ch) {
  if (ch.mid % 2 != 0) throw std::invalid_argument(name + ": mid width must be even");
  fcn_coord_ = nn::Fcn(store, name + ".fcn_c", 10, ch.mid / 2);
  fcn_point_ = nn::Fcn(store, name + ".fcn_p", ch.in, ch.mid / 2);
  weight_head_ = nn::Linear(store, name + ".weight", 2 * ch.mid, 1);
  integrate_a_ = nn::Fcn(store, name + ".integrate0", 2 * ch.mid, ch.out);
  integrate_b_ = nn::Fcn(store, name + ".integrate1", ch.out, ch.out);
}

std::pair<SparseVoxelTensor, PointwiseFeature> MsvLevel::encode(nn::Context& ctx, std::span<const Vec3> coords,
                                                                std::span<const double> reflectance,
                                                                std::vector<int> source_index, Var point_feat,
                                                                const VoxelSpec& spec, int level) const {
  if (point_feat.cols() != ch_.in)
    throw std::invalid_argument("msv level " + std::to_string(level) + ": expected " + std::to_string(ch_.in) +
                                " input channels, got " + std::to_string(point_feat.cols()));
  if (point_feat.rows() != static_cast<Eigen::Index>(coords.size()))
    throw std::invalid_argument("msv level " + std::to_string(level) + ": row mismatch");

  const VoxelAssignment va = dynamic_voxelize(coords, spec);
  const int M = va.num_voxels();
  Var coord_feat = ctx.tape.constant(compose_coord_feature(coords, reflectance, va));

  Var p = nn::concat_cols({fcn_coord_(ctx, coord_feat), fcn_point_(ctx, point_feat)});
  Var local = nn::concat_cols({p, nn::gather_rows(nn::group_max(p, va.point_slot, M), va.point_slot)});
  Var w = nn::sigmoid(weight_head_(ctx, local));
  Var v = nn::mul_rows(integrate_b_(ctx, integrate_a_(ctx, local)), w);
  Var s = nn::group_mean(v, va.point_slot, M);

  SparseVoxelTensor st{va.voxels, s, spec, level};
  PointwiseFeature pw;
  pw.coords.assign(coords.begin(), coords.end());
  pw.reflectance.assign(reflectance.begin(), reflectance.end());
  pw.source_index = std::move(source_index);
  pw.features = v;
  pw.weights = w;
  return {std::move(st), std::move(pw)};
}

std::pair<SparseVoxelTensor, PointwiseFeature> msv_encode(nn::Context& ctx, const MsvLevel& level,
                                                          const PointCloud& cloud, const VoxelSpec& spec) {
  const VoxelAssignment va = dynamic_voxelize(cloud.xyz, spec);
  Var feat = ctx.tape.constant(compose_coord_feature(cloud.xyz, cloud.reflectance, va));
  std::vector<int> src(cloud.size());
  std::iota(src.begin(), src.end(), 0);
  return level.encode(ctx, cloud.xyz, cloud.reflectance, std::move(src), feat, spec, 1);
}

std::vector<int> topk_by_weight(std::span<const double> weights, double rate) {
  if (!(rate > 0.0 && rate <= 1.0)) throw std::invalid_argument("top-k rate must be in (0, 1]");
  const std::size_t n = weights.size();
  // Guard against products like 0.6 * 5 = 3.0000000000000004.
  const auto k = std::min(n, static_cast<std::size_t>(std::ceil(rate * static_cast<double>(n) - 1e-9)));
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](int a, int b) { return weights[a] > weights[b] || (weights[a] == weights[b] && a < b); });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

PointwiseFeature topk_by_weight(const PointwiseFeature& pw, double rate) {
  const Mat& w = pw.weights.value();
  const std::vector<int> keep = topk_by_weight(std::span<const double>(w.data(), static_cast<std::size_t>(w.rows())), rate);
  PointwiseFeature out;
  for (int i : keep) {
    out.coords.push_back(pw.coords[i]);
    out.reflectance.push_back(pw.reflectance[i]);
    out.source_index.push_back(pw.source_index[i]);
  }
  out.features = nn::gather_rows(pw.features, keep);
  out.weights = nn::gather_rows(pw.weights, keep);
  return out;
}

VoteResult center_vote(nn::Context& ctx, std::span<const Vec3> coords, Var features, const nn::Linear& head) {
  if (head.out() != 3) throw std::invalid_argument("vote head must output 3 channels");
  Var raw = head(ctx, features);
  Var applied = nn::clamp_cols(raw, {kVoteClamp[0], kVoteClamp[1], kVoteClamp[2]});
  return {nn::add(ctx.tape.constant(coords_to_mat(coords)), applied), raw};
}

std::vector<VoxelSpec> level_specs(const VoxelSpec& base, int levels) {
  std::vector<VoxelSpec> specs;
  double f = 1.0;
  for (int i = 0; i < levels; ++i, f *= 2.0) specs.push_back(base.scaled(Vec3::Constant(f)));
  return specs;
}

MultiScaleVoxelizer::MultiScaleVoxelizer(nn::ParamStore& store, const MsvConfig& cfg) : cfg_(cfg) {
  if (cfg.channels[0].in != 10) throw std::invalid_argument("first level takes the 10-d coordinate feature");
  for (int i = 0; i < 4; ++i) {
    if (i > 0 && cfg.channels[i].in != cfg.channels[i - 1].out)
      throw std::invalid_argument("msv level " + std::to_string(i + 1) + " input width does not match level " +
                                  std::to_string(i) + " output");
    levels_[i] = MsvLevel(store, "msv" + std::to_string(i + 1), cfg.channels[i]);
  }
  for (double r : cfg.sample_rates)
    if (!(r > 0.0 && r <= 1.0)) throw std::invalid_argument("sampling rate must be in (0, 1]");
  vote_head_ = nn::Linear(store, "msv.vote", cfg.channels[3].out, 3);
}

MsvOutput MultiScaleVoxelizer::forward(nn::Context& ctx, const PointCloud& cloud, const VoxelSpec& base) const {
  MsvOutput out;
  out.specs = level_specs(base, 4);
  auto [s1, v1] = msv_encode(ctx, levels_[0], cloud, out.specs[0]);
  out.sparse.push_back(std::move(s1));
  out.pointwise.push_back(std::move(v1));
  for (int i = 1; i < 4; ++i) {
    const PointwiseFeature sampled = topk_by_weight(out.pointwise.back(), cfg_.sample_rates[i - 1]);
    auto [s, v] = levels_[i].encode(ctx, sampled.coords, sampled.reflectance, sampled.source_index,
                                    sampled.features, out.specs[i], i + 1);
    out.sparse.push_back(std::move(s));
    out.pointwise.push_back(std::move(v));
  }
  const auto& last = out.pointwise.back();
  out.vote = center_vote(ctx, last.coords, last.features, vote_head_);
  return out;
}

}  // namespace ssk
