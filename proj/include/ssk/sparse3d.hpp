#pragma once

#include <array>
#include <span>
#include <utility>
#include <vector>

#include "ssk/voxel.hpp"

namespace ssk {

enum class ConvMode { submanifold, strided };

inline constexpr int kKernelVolume = 27;

/// Kernel offset index for (dx, dy, dz) in {-1, 0, 1}^3.
constexpr int kernel_offset_index(int dx, int dy, int dz) { return (dx + 1) * 9 + (dy + 1) * 3 + (dz + 1); }

/// Gather/scatter pairs per kernel offset for a 3x3x3 sparse convolution with
/// padding 1. An output site o reads input site o * stride + delta through
/// offset delta.
struct Rulebook {
  std::array<std::vector<std::pair<int, int>>, kKernelVolume> pairs;  // (input slot, output slot)
  std::vector<VoxelIndex> out_coords;
  std::array<int, 3> out_dims{0, 0, 0};
  int num_inputs = 0;

  int num_outputs() const { return static_cast<int>(out_coords.size()); }
  std::size_t num_pairs() const;
};

/// `coords` must be unique and inside `in_dims`. Submanifold mode requires
/// unit stride and keeps the input site list (order included). Strided mode
/// activates every output whose receptive field holds an input site; outputs
/// are sorted by flattened key.
Rulebook build_rulebook(std::span<const VoxelIndex> coords, const std::array<int, 3>& in_dims,
                        const std::array<int, 3>& stride, ConvMode mode);

/// Gather-multiply-scatter. weight is (27 * Cin) x Cout with row
/// k * Cin + ci; `bias` (1 x Cout) may be invalid.
Var sparse_conv_apply(const Rulebook& rb, Var features, Var weight, Var bias);

/// Spec of the output grid of a strided layer: same origin, cells scaled by
/// `stride`, dims taken from the rulebook.
VoxelSpec strided_spec(const VoxelSpec& in, const std::array<int, 3>& stride, const std::array<int, 3>& out_dims);

/// Sparse conv (no bias) -> ChannelNorm -> ReLU.
class SparseConvUnit {
 public:
  SparseConvUnit() = default;
  SparseConvUnit(nn::ParamStore& store, const std::string& name, int in, int out);
  Var operator()(nn::Context& ctx, const Rulebook& rb, Var x) const;
  int out() const { return out_; }

 private:
  nn::Parameter* weight_ = nullptr;
  nn::ChannelNorm norm_;
  int in_ = 0, out_ = 0;
};

/// One encoder block: a sparse conv carrying the block's stride and channel
/// change, then two submanifold convs.
class SparseBlock {
 public:
  SparseBlock() = default;
  SparseBlock(nn::ParamStore& store, const std::string& name, int in, int out, const std::array<int, 3>& stride);
  SparseVoxelTensor operator()(nn::Context& ctx, const SparseVoxelTensor& x) const;

 private:
  std::array<int, 3> stride_{1, 1, 1};
  SparseConvUnit down_, sub_a_, sub_b_;
};

struct Encoder3dConfig {
  /// Per branch, per block stride.
  std::array<std::array<std::array<int, 3>, 2>, 4> strides{{
      {{{2, 2, 2}, {2, 2, 2}}},
      {{{2, 2, 2}, {2, 2, 2}}},
      {{{2, 2, 2}, {2, 2, 1}}},
      {{{2, 2, 1}, {2, 2, 1}}},
  }};
  std::array<int, 4> in_channels{16, 24, 32, 48};
};

/// Moves `src` onto the grid of `dst_spec` by integer factor pooling (scatter
/// mean). Throws when the grids do not nest.
SparseVoxelTensor pool_to_grid(const SparseVoxelTensor& src, const VoxelSpec& dst_spec);

/// Channel concatenation on the union of active sites; a side missing at a
/// site contributes zeros. Both tensors must share a grid.
SparseVoxelTensor concat_sparse(const SparseVoxelTensor& a, const SparseVoxelTensor& b);

class Encoder3d {
 public:
  Encoder3d() = default;
  Encoder3d(nn::ParamStore& store, const Encoder3dConfig& cfg);

  /// S_1..S_4 -> F_1..F_4. F_3 = Cat(F_1, f_3(S_3)) and F_4 = Cat(F_2, f_4(S_4)),
  /// with F_1 / F_2 pooled onto the grids of f_3 / f_4.
  std::vector<SparseVoxelTensor> forward(nn::Context& ctx, const std::vector<SparseVoxelTensor>& s) const;

  /// Output channel widths of F_1..F_4.
  std::array<int, 4> out_channels() const;

 private:
  Encoder3dConfig cfg_;
  std::array<std::array<SparseBlock, 2>, 4> blocks_;
};

}  // namespace ssk
