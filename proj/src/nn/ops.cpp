#include "ssk/nn/ops.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ssk::nn {

namespace {

void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tape& t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t.record(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += g;
    if (t.needs_grad(ib)) t.grad(ib) += g;
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tape& t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t.record(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += g;
    if (t.needs_grad(ib)) t.grad(ib) -= g;
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tape& t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t.record(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += g.cwiseProduct(t.value(ib));
    if (t.needs_grad(ib)) t.grad(ib) += g.cwiseProduct(t.value(ia));
  });
}

Var scale(Var a, double s) {
  Tape& t = a.tape();
  const int ia = a.id();
  return t.record(a.value() * s, {ia}, [ia, s](Tape& t, int self) { t.grad(ia) += t.grad(self) * s; });
}

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Tape& t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t.record(a.value() * b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia).noalias() += g * t.value(ib).transpose();
    if (t.needs_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * g;
  });
}

Var linear(Var x, Var weight, Var bias) {
  if (x.cols() != weight.rows())
    throw std::invalid_argument("linear: input has " + std::to_string(x.cols()) + " channels, weight expects " +
                                std::to_string(weight.rows()));
  if (bias.valid() && (bias.rows() != 1 || bias.cols() != weight.cols()))
    throw std::invalid_argument("linear: bias shape mismatch");
  Tape& t = x.tape();
  Mat out = x.value() * weight.value();
  if (bias.valid()) out.rowwise() += bias.value().row(0);
  const int ix = x.id(), iw = weight.id(), ib = bias.valid() ? bias.id() : -1;
  std::vector<int> parents{ix, iw};
  if (ib >= 0) parents.push_back(ib);
  return t.record(std::move(out), parents, [ix, iw, ib](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.needs_grad(ix)) t.grad(ix).noalias() += g * t.value(iw).transpose();
    if (t.needs_grad(iw)) t.grad(iw).noalias() += t.value(ix).transpose() * g;
    if (ib >= 0 && t.needs_grad(ib)) t.grad(ib) += g.colwise().sum();
  });
}

Var relu(Var x) {
  Tape& t = x.tape();
  const int ix = x.id();
  return t.record(x.value().cwiseMax(0.0), {ix}, [ix](Tape& t, int self) {
    const Mat& g = t.grad(self);
    const Mat& v = t.value(ix);
    t.grad(ix).array() += (v.array() > 0.0).select(g.array(), 0.0);
  });
}

Var sigmoid(Var x) {
  Tape& t = x.tape();
  const int ix = x.id();
  Mat y = x.value().unaryExpr([](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  return t.record(std::move(y), {ix}, [ix](Tape& t, int self) {
    const Mat& y = t.value(self);
    t.grad(ix).array() += t.grad(self).array() * y.array() * (1.0 - y.array());
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Tape& t = parts.front().tape();
  const auto rows = parts.front().rows();
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row count mismatch");
    total += p.cols();
  }
  Mat out(rows, total);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.cols();
  }
  return t.record(std::move(out), ids, [ids, offsets](Tape& t, int self) {
    const Mat& g = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k)
      if (t.needs_grad(ids[k])) t.grad(ids[k]) += g.middleCols(offsets[k], t.value(ids[k]).cols());
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Tape& t = parts.front().tape();
  const auto cols = parts.front().cols();
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column count mismatch");
    total += p.rows();
  }
  Mat out(total, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.rows();
  }
  return t.record(std::move(out), ids, [ids, offsets](Tape& t, int self) {
    const Mat& g = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k)
      if (t.needs_grad(ids[k])) t.grad(ids[k]) += g.middleRows(offsets[k], t.value(ids[k]).rows());
  });
}

Var slice_cols(Var x, int start, int count) {
  require(start >= 0 && count >= 0 && start + count <= x.cols(), "slice_cols: out of range");
  Tape& t = x.tape();
  const int ix = x.id();
  return t.record(x.value().middleCols(start, count), {ix}, [ix, start, count](Tape& t, int self) {
    t.grad(ix).middleCols(start, count) += t.grad(self);
  });
}

Var reshape(Var x, int rows, int cols) {
  require(static_cast<Eigen::Index>(rows) * cols == x.value().size(), "reshape: element count mismatch");
  Tape& t = x.tape();
  const int ix = x.id();
  const auto r0 = x.rows(), c0 = x.cols();
  Mat out = Eigen::Map<const Mat>(x.value().data(), rows, cols);
  return t.record(std::move(out), {ix}, [ix, r0, c0](Tape& t, int self) {
    t.grad(ix) += Eigen::Map<const Mat>(t.grad(self).data(), r0, c0);
  });
}

Var gather_rows(Var x, std::vector<int> idx) {
  Tape& t = x.tape();
  const Mat& v = x.value();
  Mat out(static_cast<Eigen::Index>(idx.size()), v.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= v.rows()) throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = v.row(idx[i]);
  }
  const int ix = x.id();
  return t.record(std::move(out), {ix}, [ix, idx = std::move(idx)](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Mat& gx = t.grad(ix);
    for (std::size_t i = 0; i < idx.size(); ++i) gx.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var scatter_add_rows(Var x, std::vector<int> idx, int rows) {
  if (static_cast<Eigen::Index>(idx.size()) != x.rows()) throw std::invalid_argument("scatter_add_rows: size mismatch");
  Tape& t = x.tape();
  const Mat& v = x.value();
  Mat out = Mat::Zero(rows, v.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= rows) throw std::out_of_range("scatter_add_rows: index out of range");
    out.row(idx[i]) += v.row(static_cast<Eigen::Index>(i));
  }
  const int ix = x.id();
  return t.record(std::move(out), {ix}, [ix, idx = std::move(idx)](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Mat& gx = t.grad(ix);
    for (std::size_t i = 0; i < idx.size(); ++i) gx.row(static_cast<Eigen::Index>(i)) += g.row(idx[i]);
  });
}

Var mul_rows(Var x, Var w) {
  if (w.cols() != 1 || w.rows() != x.rows()) throw std::invalid_argument("mul_rows: weight must be N x 1");
  Tape& t = x.tape();
  Mat out = x.value().array().colwise() * w.value().col(0).array();
  const int ix = x.id(), iw = w.id();
  return t.record(std::move(out), {ix, iw}, [ix, iw](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.needs_grad(ix)) t.grad(ix).array() += g.array().colwise() * t.value(iw).col(0).array();
    if (t.needs_grad(iw)) t.grad(iw).col(0) += g.cwiseProduct(t.value(ix)).rowwise().sum();
  });
}

Var clamp_cols(Var x, std::vector<double> bound) {
  if (static_cast<Eigen::Index>(bound.size()) != x.cols()) throw std::invalid_argument("clamp_cols: bound size");
  Tape& t = x.tape();
  Mat out = x.value();
  for (Eigen::Index c = 0; c < out.cols(); ++c)
    out.col(c) = out.col(c).cwiseMax(-bound[c]).cwiseMin(bound[c]);
  const int ix = x.id();
  return t.record(std::move(out), {ix}, [ix, bound = std::move(bound)](Tape& t, int self) {
    const Mat& g = t.grad(self);
    const Mat& v = t.value(ix);
    Mat& gx = t.grad(ix);
    for (Eigen::Index r = 0; r < v.rows(); ++r)
      for (Eigen::Index c = 0; c < v.cols(); ++c)
        if (std::abs(v(r, c)) < bound[c]) gx(r, c) += g(r, c);
  });
}

Var sum(Var x) {
  Tape& t = x.tape();
  Mat out(1, 1);
  out(0, 0) = x.value().sum();
  const int ix = x.id();
  return t.record(std::move(out), {ix}, [ix](Tape& t, int self) { t.grad(ix).array() += t.grad(self)(0, 0); });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  return n > 0 ? scale(sum(x), 1.0 / n) : sum(x);
}

Var weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& weights) {
  require(!scalars.empty() && scalars.size() == weights.size(), "weighted_sum: size mismatch");
  Tape& t = scalars.front().tape();
  Mat out = Mat::Zero(1, 1);
  std::vector<int> ids;
  for (std::size_t k = 0; k < scalars.size(); ++k) {
    require(scalars[k].rows() == 1 && scalars[k].cols() == 1, "weighted_sum: inputs must be 1x1");
    out(0, 0) += weights[k] * scalars[k].scalar();
    ids.push_back(scalars[k].id());
  }
  return t.record(std::move(out), ids, [ids, weights](Tape& t, int self) {
    const double g = t.grad(self)(0, 0);
    for (std::size_t k = 0; k < ids.size(); ++k)
      if (t.needs_grad(ids[k])) t.grad(ids[k])(0, 0) += weights[k] * g;
  });
}

Var channel_norm(Var x, Var gamma, Var beta, Parameter& running_mean, Parameter& running_var, bool training,
                 double eps) {
  const auto C = x.cols();
  if (gamma.cols() != C || beta.cols() != C || running_mean.value.cols() != C)
    throw std::invalid_argument("channel_norm: channel mismatch");
  Tape& t = x.tape();
  const Mat& v = x.value();
  const auto N = v.rows();
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();

  if (!training || N == 0) {
    Mat inv_std = (running_var.value.array() + eps).rsqrt().matrix();
    Mat out = v;
    if (N > 0) {
      out.rowwise() -= running_mean.value.row(0);
      out.array().rowwise() *= (inv_std.array() * gamma.value().array()).row(0);
      out.rowwise() += beta.value().row(0);
    }
    Mat xhat = v;
    if (N > 0) {
      xhat.rowwise() -= running_mean.value.row(0);
      xhat.array().rowwise() *= inv_std.array().row(0);
    }
    return t.record(std::move(out), {ix, ig, ib}, [ix, ig, ib, inv_std, xhat](Tape& t, int self) {
      const Mat& g = t.grad(self);
      if (t.needs_grad(ix)) {
        Mat gx = g;
        gx.array().rowwise() *= (inv_std.array() * t.value(ig).array()).row(0);
        t.grad(ix) += gx;
      }
      if (t.needs_grad(ig)) t.grad(ig) += g.cwiseProduct(xhat).colwise().sum();
      if (t.needs_grad(ib)) t.grad(ib) += g.colwise().sum();
    });
  }

  const Mat mu = v.colwise().mean();
  Mat centered = v.rowwise() - mu.row(0);
  const Mat var = centered.array().square().colwise().mean().matrix();
  const Mat inv_std = (var.array() + eps).rsqrt().matrix();
  Mat xhat = centered.array().rowwise() * inv_std.array().row(0);
  Mat out = xhat.array().rowwise() * gamma.value().array().row(0);
  out.rowwise() += beta.value().row(0);

  // Unbiased variance for the running estimate, as is conventional.
  const double unbias = N > 1 ? static_cast<double>(N) / static_cast<double>(N - 1) : 1.0;
  t.stat_updates().push_back(StatUpdate{&running_mean, &running_var, mu, var * unbias});

  return t.record(std::move(out), {ix, ig, ib}, [ix, ig, ib, inv_std, xhat](Tape& t, int self) {
    const Mat& g = t.grad(self);
    const double n = static_cast<double>(g.rows());
    if (t.needs_grad(ig)) t.grad(ig) += g.cwiseProduct(xhat).colwise().sum();
    if (t.needs_grad(ib)) t.grad(ib) += g.colwise().sum();
    if (t.needs_grad(ix)) {
      Mat gxhat = g.array().rowwise() * t.value(ig).array().row(0);
      const Mat sum_g = gxhat.colwise().sum();
      const Mat sum_gx = gxhat.cwiseProduct(xhat).colwise().sum();
      Mat gx = (n * gxhat).rowwise() - sum_g.row(0);
      gx -= (xhat.array().rowwise() * sum_gx.array().row(0)).matrix();
      gx.array().rowwise() *= (inv_std.array() / n).row(0);
      t.grad(ix) += gx;
    }
  });
}

Mat scatter_sum_rows(const Mat& x, std::span<const int> groups, int M) {
  if (static_cast<Eigen::Index>(groups.size()) != x.rows()) throw std::invalid_argument("scatter: size mismatch");
  Mat out = Mat::Zero(M, x.cols());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i] < 0 || groups[i] >= M) throw std::out_of_range("scatter: group id out of range");
    out.row(groups[i]) += x.row(static_cast<Eigen::Index>(i));
  }
  return out;
}

Mat scatter_mean_rows(const Mat& x, std::span<const int> groups, int M) {
  Mat out = scatter_sum_rows(x, groups, M);
  std::vector<int> counts(M, 0);
  for (int g : groups) ++counts[g];
  for (int m = 0; m < M; ++m)
    if (counts[m] > 0) out.row(m) /= static_cast<double>(counts[m]);
  return out;
}

Mat scatter_max_rows(const Mat& x, std::span<const int> groups, int M, Eigen::MatrixXi* argmax) {
  if (static_cast<Eigen::Index>(groups.size()) != x.rows()) throw std::invalid_argument("scatter: size mismatch");
  Mat out = Mat::Zero(M, x.cols());
  Eigen::MatrixXi arg = Eigen::MatrixXi::Constant(M, x.cols(), -1);
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const int g = groups[i];
    if (g < 0 || g >= M) throw std::out_of_range("scatter: group id out of range");
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double v = x(static_cast<Eigen::Index>(i), c);
      if (arg(g, c) < 0 || v > out(g, c)) {
        out(g, c) = v;
        arg(g, c) = static_cast<int>(i);
      }
    }
  }
  if (argmax) *argmax = std::move(arg);
  return out;
}

Var group_max(Var x, std::vector<int> groups, int M) {
  if (M <= 0 && x.rows() > 0) throw std::invalid_argument("group_max: empty group id space");
  Tape& t = x.tape();
  Eigen::MatrixXi arg;
  Mat out = scatter_max_rows(x.value(), groups, std::max(M, 0), &arg);
  const int ix = x.id();
  return t.record(std::move(out), {ix}, [ix, arg = std::move(arg)](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Mat& gx = t.grad(ix);
    for (Eigen::Index m = 0; m < arg.rows(); ++m)
      for (Eigen::Index c = 0; c < arg.cols(); ++c)
        if (arg(m, c) >= 0) gx(arg(m, c), c) += g(m, c);
  });
}

Var group_mean(Var x, std::vector<int> groups, int M) {
  if (M <= 0 && x.rows() > 0) throw std::invalid_argument("group_mean: empty group id space");
  Tape& t = x.tape();
  Mat out = scatter_mean_rows(x.value(), groups, std::max(M, 0));
  std::vector<double> inv_count(std::max(M, 0), 0.0);
  for (int g : groups) inv_count[g] += 1.0;
  for (auto& c : inv_count) c = c > 0 ? 1.0 / c : 0.0;
  const int ix = x.id();
  return t.record(std::move(out), {ix}, [ix, groups = std::move(groups), inv_count](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Mat& gx = t.grad(ix);
    for (std::size_t i = 0; i < groups.size(); ++i)
      gx.row(static_cast<Eigen::Index>(i)) += g.row(groups[i]) * inv_count[groups[i]];
  });
}

namespace {

// Builds the (H'*W') x (k*k*cin_g) patch matrix for channel group `grp`.
Mat im2col(const Mat& x, const Conv2dShape& s, int grp, int cin_g) {
  const int oh = s.out_height(), ow = s.out_width(), k = s.kernel;
  Mat cols = Mat::Zero(static_cast<Eigen::Index>(oh) * ow, static_cast<Eigen::Index>(k) * k * cin_g);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      const Eigen::Index row = static_cast<Eigen::Index>(oy) * ow + ox;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * s.stride - s.pad + ky;
        if (iy < 0 || iy >= s.height) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * s.stride - s.pad + kx;
          if (ix < 0 || ix >= s.width) continue;
          cols.row(row).segment((ky * k + kx) * cin_g, cin_g) =
              x.row(static_cast<Eigen::Index>(iy) * s.width + ix).segment(grp * cin_g, cin_g);
        }
      }
    }
  return cols;
}

void col2im_add(const Mat& dcols, const Conv2dShape& s, int grp, int cin_g, Mat& dx) {
  const int oh = s.out_height(), ow = s.out_width(), k = s.kernel;
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      const Eigen::Index row = static_cast<Eigen::Index>(oy) * ow + ox;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * s.stride - s.pad + ky;
        if (iy < 0 || iy >= s.height) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * s.stride - s.pad + kx;
          if (ix < 0 || ix >= s.width) continue;
          dx.row(static_cast<Eigen::Index>(iy) * s.width + ix).segment(grp * cin_g, cin_g) +=
              dcols.row(row).segment((ky * k + kx) * cin_g, cin_g);
        }
      }
    }
}

}  // namespace

Var conv2d(Var x, const Conv2dShape& s, Var weight, Var bias) {
  const auto cin = x.cols();
  const auto cout = weight.cols();
  if (s.kernel != 1 && s.kernel != 3) throw std::invalid_argument("conv2d: kernel must be 1 or 3");
  if (s.stride < 1 || s.groups < 1 || cin % s.groups != 0 || cout % s.groups != 0)
    throw std::invalid_argument("conv2d: stride/groups mismatch");
  if (x.rows() != static_cast<Eigen::Index>(s.height) * s.width)
    throw std::invalid_argument("conv2d: input rows != H*W");
  const int cin_g = static_cast<int>(cin / s.groups);
  const int cout_g = static_cast<int>(cout / s.groups);
  if (weight.rows() != static_cast<Eigen::Index>(s.kernel) * s.kernel * cin_g)
    throw std::invalid_argument("conv2d: weight rows mismatch");
  if (s.out_height() <= 0 || s.out_width() <= 0) throw std::invalid_argument("conv2d: empty output");

  Tape& t = x.tape();
  const bool pointwise = s.kernel == 1 && s.stride == 1 && s.pad == 0 && s.groups == 1;
  const Eigen::Index out_rows = static_cast<Eigen::Index>(s.out_height()) * s.out_width();
  Mat out(out_rows, cout);
  std::vector<Mat> cols;
  if (pointwise) {
    out.noalias() = x.value() * weight.value();
  } else {
    cols.reserve(s.groups);
    for (int g = 0; g < s.groups; ++g) {
      cols.push_back(im2col(x.value(), s, g, cin_g));
      out.middleCols(g * cout_g, cout_g).noalias() = cols.back() * weight.value().middleCols(g * cout_g, cout_g);
    }
  }
  if (bias.valid()) out.rowwise() += bias.value().row(0);

  const int ix = x.id(), iw = weight.id(), ib = bias.valid() ? bias.id() : -1;
  std::vector<int> parents{ix, iw};
  if (ib >= 0) parents.push_back(ib);
  return t.record(std::move(out), parents,
                  [ix, iw, ib, s, cin_g, cout_g, pointwise, cols = std::move(cols)](Tape& t, int self) {
                    const Mat& g = t.grad(self);
                    const Mat& w = t.value(iw);
                    if (ib >= 0 && t.needs_grad(ib)) t.grad(ib) += g.colwise().sum();
                    if (pointwise) {
                      if (t.needs_grad(iw)) t.grad(iw).noalias() += t.value(ix).transpose() * g;
                      if (t.needs_grad(ix)) t.grad(ix).noalias() += g * w.transpose();
                      return;
                    }
                    for (int grp = 0; grp < s.groups; ++grp) {
                      const auto gslice = g.middleCols(grp * cout_g, cout_g);
                      if (t.needs_grad(iw))
                        t.grad(iw).middleCols(grp * cout_g, cout_g).noalias() += cols[grp].transpose() * gslice;
                      if (t.needs_grad(ix)) {
                        Mat dcols = gslice * w.middleCols(grp * cout_g, cout_g).transpose();
                        col2im_add(dcols, s, grp, cin_g, t.grad(ix));
                      }
                    }
                  });
}

}  // namespace ssk::nn
