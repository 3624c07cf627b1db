#include "ssk/sparse3d.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>

namespace ssk {

namespace {

std::int64_t key_of(const VoxelIndex& v, const std::array<int, 3>& dims) {
  return (static_cast<std::int64_t>(v[0]) * dims[1] + v[1]) * dims[2] + v[2];
}

bool inside(const VoxelIndex& v, const std::array<int, 3>& dims) {
  return v[0] >= 0 && v[1] >= 0 && v[2] >= 0 && v[0] < dims[0] && v[1] < dims[1] && v[2] < dims[2];
}

Mat gather(const Mat& x, const std::vector<std::pair<int, int>>& pairs, bool first) {
  Mat out(static_cast<Eigen::Index>(pairs.size()), x.cols());
  for (std::size_t p = 0; p < pairs.size(); ++p)
    out.row(static_cast<Eigen::Index>(p)) = x.row(first ? pairs[p].first : pairs[p].second);
  return out;
}

}  // namespace

std::size_t Rulebook::num_pairs() const {
  std::size_t n = 0;
  for (const auto& p : pairs) n += p.size();
  return n;
}

Rulebook build_rulebook(std::span<const VoxelIndex> coords, const std::array<int, 3>& in_dims,
                        const std::array<int, 3>& stride, ConvMode mode) {
  for (int a = 0; a < 3; ++a)
    if (stride[a] < 1) throw std::invalid_argument("rulebook: stride must be >= 1");
  Rulebook rb;
  rb.num_inputs = static_cast<int>(coords.size());

  std::unordered_map<std::int64_t, int> in_slots;
  in_slots.reserve(coords.size() * 2);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    if (!inside(coords[i], in_dims)) throw std::invalid_argument("rulebook: input coordinate outside grid");
    if (!in_slots.emplace(key_of(coords[i], in_dims), static_cast<int>(i)).second)
      throw std::invalid_argument("rulebook: duplicate input coordinate");
  }

  if (mode == ConvMode::submanifold) {
    if (stride != std::array<int, 3>{1, 1, 1}) throw std::invalid_argument("submanifold convolution needs stride 1");
    rb.out_dims = in_dims;
    rb.out_coords.assign(coords.begin(), coords.end());
    for (std::size_t o = 0; o < coords.size(); ++o)
      for (int dx = -1; dx <= 1; ++dx)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dz = -1; dz <= 1; ++dz) {
            const VoxelIndex j{coords[o][0] + dx, coords[o][1] + dy, coords[o][2] + dz};
            if (!inside(j, in_dims)) continue;
            const auto it = in_slots.find(key_of(j, in_dims));
            if (it != in_slots.end())
              rb.pairs[kernel_offset_index(dx, dy, dz)].emplace_back(it->second, static_cast<int>(o));
          }
    return rb;
  }

  for (int a = 0; a < 3; ++a) rb.out_dims[a] = (in_dims[a] - 1) / stride[a] + 1;

  // Output o reads input o * s + d, so input i reaches o = (i - d) / s.
  auto output_of = [&](const VoxelIndex& i, int dx, int dy, int dz, VoxelIndex& o) {
    const int d[3]{dx, dy, dz};
    for (int a = 0; a < 3; ++a) {
      const int num = i[a] - d[a];
      if (num < 0 || num % stride[a] != 0) return false;
      o[a] = num / stride[a];
    }
    return inside(o, rb.out_dims);
  };

  std::vector<std::pair<std::int64_t, VoxelIndex>> out_sites;
  out_sites.reserve(coords.size() * 8);
  for (const auto& c : coords)
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dz = -1; dz <= 1; ++dz) {
          VoxelIndex o;
          if (output_of(c, dx, dy, dz, o)) out_sites.emplace_back(key_of(o, rb.out_dims), o);
        }
  std::sort(out_sites.begin(), out_sites.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::int64_t> out_keys;
  for (const auto& [key, site] : out_sites) {
    if (!out_keys.empty() && out_keys.back() == key) continue;
    out_keys.push_back(key);
    rb.out_coords.push_back(site);
  }
  auto slot_of = [&](std::int64_t key) {
    return static_cast<int>(std::lower_bound(out_keys.begin(), out_keys.end(), key) - out_keys.begin());
  };
  for (std::size_t i = 0; i < coords.size(); ++i)
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dz = -1; dz <= 1; ++dz) {
          VoxelIndex o;
          if (output_of(coords[i], dx, dy, dz, o))
            rb.pairs[kernel_offset_index(dx, dy, dz)].emplace_back(static_cast<int>(i),
                                                                   slot_of(key_of(o, rb.out_dims)));
        }
  return rb;
}

Var sparse_conv_apply(const Rulebook& rb, Var features, Var weight, Var bias) {
  const auto cin = features.cols();
  const auto cout = weight.cols();
  if (features.rows() != rb.num_inputs) throw std::invalid_argument("sparse conv: feature rows do not match rulebook");
  if (weight.rows() != kKernelVolume * cin)
    throw std::invalid_argument("sparse conv: weight has " + std::to_string(weight.rows()) + " rows, expected " +
                                std::to_string(kKernelVolume * cin));
  if (bias.valid() && (bias.rows() != 1 || bias.cols() != cout))
    throw std::invalid_argument("sparse conv: bias shape mismatch");

  Tape& t = features.tape();
  const Mat& x = features.value();
  const Mat& w = weight.value();
  Mat out = Mat::Zero(rb.num_outputs(), cout);
  for (int k = 0; k < kKernelVolume; ++k) {
    const auto& pairs = rb.pairs[k];
    if (pairs.empty()) continue;
    const Mat y = gather(x, pairs, true) * w.middleRows(k * cin, cin);
    for (std::size_t p = 0; p < pairs.size(); ++p) out.row(pairs[p].second) += y.row(static_cast<Eigen::Index>(p));
  }
  if (bias.valid()) out.rowwise() += bias.value().row(0);

  const int ix = features.id(), iw = weight.id(), ib = bias.valid() ? bias.id() : -1;
  std::vector<int> parents{ix, iw};
  if (ib >= 0) parents.push_back(ib);
  // The rulebook outlives the tape in normal use, but copy the pairs so the
  // backward closure never dangles.
  auto pairs = std::make_shared<const std::array<std::vector<std::pair<int, int>>, kKernelVolume>>(rb.pairs);
  return t.record(std::move(out), parents, [ix, iw, ib, cin, pairs](Tape& t, int self) {
    const Mat& g = t.grad(self);
    const Mat& x = t.value(ix);
    const Mat& w = t.value(iw);
    const bool gx = t.needs_grad(ix), gw = t.needs_grad(iw);
    for (int k = 0; k < kKernelVolume; ++k) {
      const auto& pr = (*pairs)[k];
      if (pr.empty()) continue;
      const Mat gy = gather(g, pr, false);
      if (gw) t.grad(iw).middleRows(k * cin, cin).noalias() += gather(x, pr, true).transpose() * gy;
      if (gx) {
        const Mat gin = gy * w.middleRows(k * cin, cin).transpose();
        Mat& gxm = t.grad(ix);
        for (std::size_t p = 0; p < pr.size(); ++p) gxm.row(pr[p].first) += gin.row(static_cast<Eigen::Index>(p));
      }
    }
    if (ib >= 0 && t.needs_grad(ib)) t.grad(ib) += g.colwise().sum();
  });
}

VoxelSpec strided_spec(const VoxelSpec& in, const std::array<int, 3>& stride, const std::array<int, 3>& out_dims) {
  VoxelSpec s;
  s.range_min = in.range_min;
  for (int a = 0; a < 3; ++a) {
    s.voxel_size[a] = in.voxel_size[a] * stride[a];
    s.grid_dims[a] = out_dims[a];
    s.range_max[a] = in.range_min[a] + s.voxel_size[a] * out_dims[a];
  }
  return s;
}

SparseConvUnit::SparseConvUnit(nn::ParamStore& store, const std::string& name, int in, int out)
    : norm_(store, name + ".norm", out), in_(in), out_(out) {
  const int fan_in = kKernelVolume * in;
  weight_ = &store.get(name + ".weight", fan_in, out, nn::uniform_init(std::sqrt(6.0 / fan_in)));
}

Var SparseConvUnit::operator()(nn::Context& ctx, const Rulebook& rb, Var x) const {
  return nn::relu(norm_(ctx, sparse_conv_apply(rb, x, ctx.tape.param(*weight_), Var{})));
}

SparseBlock::SparseBlock(nn::ParamStore& store, const std::string& name, int in, int out,
                         const std::array<int, 3>& stride)
    : stride_(stride),
      down_(store, name + ".conv0", in, out),
      sub_a_(store, name + ".subm1", out, out),
      sub_b_(store, name + ".subm2", out, out) {}

SparseVoxelTensor SparseBlock::operator()(nn::Context& ctx, const SparseVoxelTensor& x) const {
  const Rulebook down = build_rulebook(x.coords, x.spec.grid_dims, stride_, ConvMode::strided);
  Var h = down_(ctx, down, x.features);
  const Rulebook sub = build_rulebook(down.out_coords, down.out_dims, {1, 1, 1}, ConvMode::submanifold);
  h = sub_b_(ctx, sub, sub_a_(ctx, sub, h));
  return {down.out_coords, h, strided_spec(x.spec, stride_, down.out_dims), x.level};
}

SparseVoxelTensor pool_to_grid(const SparseVoxelTensor& src, const VoxelSpec& dst_spec) {
  std::array<int, 3> factor{};
  for (int a = 0; a < 3; ++a) {
    const double f = dst_spec.voxel_size[a] / src.spec.voxel_size[a];
    factor[a] = static_cast<int>(std::lround(f));
    if (factor[a] < 1 || std::abs(f - factor[a]) > 1e-9 * f ||
        std::abs(dst_spec.range_min[a] - src.spec.range_min[a]) > 1e-9 * std::max(1.0, std::abs(src.spec.range_min[a])))
      throw std::invalid_argument("pool_to_grid: grids do not nest");
  }
  std::map<std::int64_t, int> slots;
  std::vector<VoxelIndex> coarse(src.coords.size());
  for (std::size_t i = 0; i < src.coords.size(); ++i) {
    for (int a = 0; a < 3; ++a) coarse[i][a] = src.coords[i][a] / factor[a];
    if (!dst_spec.in_grid(coarse[i])) throw std::invalid_argument("pool_to_grid: grid misalignment");
    slots.emplace(dst_spec.flat_key(coarse[i]), 0);
  }
  SparseVoxelTensor out;
  out.spec = dst_spec;
  out.level = src.level;
  for (auto& [key, slot] : slots) {
    slot = static_cast<int>(out.coords.size());
    out.coords.push_back({0, 0, 0});
  }
  std::vector<int> groups(src.coords.size());
  for (std::size_t i = 0; i < src.coords.size(); ++i) {
    groups[i] = slots.at(dst_spec.flat_key(coarse[i]));
    out.coords[groups[i]] = coarse[i];
  }
  out.features = nn::group_mean(src.features, groups, static_cast<int>(out.coords.size()));
  return out;
}

SparseVoxelTensor concat_sparse(const SparseVoxelTensor& a, const SparseVoxelTensor& b) {
  if (a.spec.grid_dims != b.spec.grid_dims) throw std::invalid_argument("concat_sparse: grid misalignment");
  std::map<std::int64_t, VoxelIndex> sites;
  for (const auto& c : a.coords) sites.emplace(a.spec.flat_key(c), c);
  for (const auto& c : b.coords) sites.emplace(a.spec.flat_key(c), c);
  SparseVoxelTensor out;
  out.spec = b.spec;
  out.level = b.level;
  std::map<std::int64_t, int> slot;
  for (const auto& [key, c] : sites) {
    slot.emplace(key, static_cast<int>(out.coords.size()));
    out.coords.push_back(c);
  }
  const int U = static_cast<int>(out.coords.size());
  auto place = [&](const SparseVoxelTensor& t) {
    std::vector<int> idx;
    idx.reserve(t.coords.size());
    for (const auto& c : t.coords) idx.push_back(slot.at(a.spec.flat_key(c)));
    return nn::scatter_add_rows(t.features, idx, U);
  };
  out.features = nn::concat_cols({place(a), place(b)});
  return out;
}

Encoder3d::Encoder3d(nn::ParamStore& store, const Encoder3dConfig& cfg) : cfg_(cfg) {
  for (int i = 0; i < 4; ++i) {
    const int w = 2 * cfg.in_channels[i];
    const std::string name = "enc3d.branch" + std::to_string(i + 1);
    blocks_[i][0] = SparseBlock(store, name + ".block0", cfg.in_channels[i], w, cfg.strides[i][0]);
    blocks_[i][1] = SparseBlock(store, name + ".block1", w, w, cfg.strides[i][1]);
  }
}

std::array<int, 4> Encoder3d::out_channels() const {
  const auto& c = cfg_.in_channels;
  return {2 * c[0], 2 * c[1], 2 * c[0] + 2 * c[2], 2 * c[1] + 2 * c[3]};
}

std::vector<SparseVoxelTensor> Encoder3d::forward(nn::Context& ctx, const std::vector<SparseVoxelTensor>& s) const {
  if (s.size() != 4) throw std::invalid_argument("encoder3d expects four sparse inputs");
  std::vector<SparseVoxelTensor> f;
  for (int i = 0; i < 4; ++i) {
    if (s[i].features.cols() != cfg_.in_channels[i])
      throw std::invalid_argument("encoder3d branch " + std::to_string(i + 1) + ": expected " +
                                  std::to_string(cfg_.in_channels[i]) + " channels");
    f.push_back(blocks_[i][1](ctx, blocks_[i][0](ctx, s[i])));
    f.back().level = i + 1;
  }
  f[2] = concat_sparse(pool_to_grid(f[0], f[2].spec), f[2]);
  f[3] = concat_sparse(pool_to_grid(f[1], f[3].spec), f[3]);
  return f;
}

}  // namespace ssk
