#pragma once

#include <span>
#include <vector>

#include "ssk/nn/tape.hpp"

namespace ssk::nn {

// Shapes are N x C (rows = items, columns = channels) unless noted.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var matmul(Var a, Var b);

/// x (N x Cin) * weight (Cin x Cout) + bias (1 x Cout). `bias` may be invalid.
Var linear(Var x, Var weight, Var bias);

Var relu(Var x);
Var sigmoid(Var x);

Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(Var x, int start, int count);
/// Row-major reinterpretation; rows * cols must be preserved.
Var reshape(Var x, int rows, int cols);

/// out[i] = x[idx[i]].
Var gather_rows(Var x, std::vector<int> idx);
/// out (rows x C), out[idx[i]] += x[i].
Var scatter_add_rows(Var x, std::vector<int> idx, int rows);

/// Row-wise scaling: x (N x C) times w (N x 1).
Var mul_rows(Var x, Var w);

/// Componentwise clamp of column c into [-bound[c], bound[c]]; zero gradient
/// where the clamp is active.
Var clamp_cols(Var x, std::vector<double> bound);

Var sum(Var x);
Var mean(Var x);
Var weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& weights);

/// Per-channel normalization over rows followed by gamma/beta (1 x C each).
/// Training mode uses batch statistics and queues a running-stat update on the
/// tape; evaluation mode uses the running statistics.
Var channel_norm(Var x, Var gamma, Var beta, Parameter& running_mean, Parameter& running_var, bool training,
                 double eps = 1e-5);

// Group reductions over rows; groups[i] in [0, M).
Mat scatter_sum_rows(const Mat& x, std::span<const int> groups, int M);
Mat scatter_mean_rows(const Mat& x, std::span<const int> groups, int M);
/// Componentwise max; `argmax` (M x C) receives the lowest winning row index.
Mat scatter_max_rows(const Mat& x, std::span<const int> groups, int M, Eigen::MatrixXi* argmax = nullptr);

Var group_max(Var x, std::vector<int> groups, int M);
Var group_mean(Var x, std::vector<int> groups, int M);

/// Dense 2D convolution (cross-correlation) on an H x W map stored as
/// (H*W) x Cin, row = y * W + x. weight is (k*k*Cin/groups) x Cout with row
/// index (ky * k + kx) * (Cin/groups) + ci; output is (H'*W') x Cout with
/// H' = floor((H + 2*pad - k) / stride) + 1.
struct Conv2dShape {
  int height = 0, width = 0;
  int kernel = 3, stride = 1, pad = 1, groups = 1;
  int out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};
Var conv2d(Var x, const Conv2dShape& shape, Var weight, Var bias);

}  // namespace ssk::nn
