#include "ssk/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ssk {

namespace {

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

double entropy(double t) {
  double h = 0.0;
  if (t > 0.0) h -= t * std::log(t);
  if (t < 1.0) h -= (1.0 - t) * std::log(1.0 - t);
  return h;
}

Mat scalar(double v) { return Mat::Constant(1, 1, v); }

}  // namespace

Var l_ctr(Var weights, std::span<const double> mask, std::span<const std::uint8_t> fg, double eps) {
  const Mat& w = weights.value();
  const auto n = w.rows();
  if (w.cols() != 1 || static_cast<std::size_t>(n) != mask.size() || mask.size() != fg.size())
    throw std::invalid_argument("l_ctr: size mismatch");
  double total = 0.0;
  Mat grad = Mat::Zero(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double raw = w(i, 0);
    const double p = std::clamp(raw, eps, 1.0 - eps);
    const double a = fg[i] ? 1.0 : 0.0;
    total -= mask[i] * a * std::log(p) + (1.0 - a) * std::log(1.0 - p);
    if (raw > eps && raw < 1.0 - eps) grad(i, 0) = -(mask[i] * a / p - (1.0 - a) / (1.0 - p));
  }
  const double inv = n > 0 ? 1.0 / static_cast<double>(n) : 0.0;
  const int iw = weights.id();
  return weights.tape().record(scalar(total * inv), {iw}, [iw, grad, inv](Tape& t, int self) {
    t.grad(iw) += grad * (t.grad(self)(0, 0) * inv);
  });
}

Var l_vote(Var voted, std::span<const Vec3> centroids, std::span<const std::uint8_t> fg,
           std::span<const std::uint8_t> gate) {
  const Mat& v = voted.value();
  const auto n = v.rows();
  if (v.cols() != 3 || static_cast<std::size_t>(n) != centroids.size() || fg.size() != centroids.size() ||
      (!gate.empty() && gate.size() != fg.size()))
    throw std::invalid_argument("l_vote: size mismatch");
  double total = 0.0;
  int m_pos = 0;
  Mat grad = Mat::Zero(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!fg[i] || (!gate.empty() && !gate[i])) continue;
    ++m_pos;
    for (int a = 0; a < 3; ++a) {
      const double d = v(i, a) - centroids[i][a];
      total += std::abs(d);
      grad(i, a) = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
    }
  }
  const double inv = 1.0 / std::max(1, m_pos);
  const int iv = voted.id();
  return voted.tape().record(scalar(total * inv), {iv}, [iv, grad, inv](Tape& t, int self) {
    t.grad(iv) += grad * (t.grad(self)(0, 0) * inv);
  });
}

Var focal_loss(Var logits, std::span<const int> labels, double gamma, double alpha) {
  const Mat& x = logits.value();
  if (x.cols() != 1 || static_cast<std::size_t>(x.rows()) != labels.size())
    throw std::invalid_argument("focal_loss: size mismatch");
  double total = 0.0;
  Mat grad = Mat::Zero(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const int y = labels[i];
    if (y != 0 && y != 1) continue;
    const double z = x(i, 0);
    const double p = sigmoid(z);
    if (y == 1) {
      const double log_p = -softplus(-z);
      const double q = std::pow(1.0 - p, gamma);
      total -= alpha * q * log_p;
      grad(i, 0) = alpha * q * (gamma * p * log_p - (1.0 - p));
    } else {
      const double log_q = -softplus(z);
      const double pg = std::pow(p, gamma);
      total -= (1.0 - alpha) * pg * log_q;
      grad(i, 0) = (1.0 - alpha) * pg * (p - gamma * (1.0 - p) * log_q);
    }
  }
  const int il = logits.id();
  return logits.tape().record(scalar(total), {il}, [il, grad](Tape& t, int self) {
    t.grad(il) += grad * t.grad(self)(0, 0);
  });
}

Var smooth_l1(Var pred, const Mat& target, double delta) {
  const Mat& p = pred.value();
  if (p.rows() != target.rows() || p.cols() != target.cols()) throw std::invalid_argument("smooth_l1: shape mismatch");
  if (!(delta > 0.0)) throw std::invalid_argument("smooth_l1: delta must be positive");
  double total = 0.0;
  Mat grad(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double d = p.data()[i] - target.data()[i];
    const double ad = std::abs(d);
    if (ad < delta) {
      total += 0.5 * d * d / delta;
      grad.data()[i] = d / delta;
    } else {
      total += ad - 0.5 * delta;
      grad.data()[i] = d > 0 ? 1.0 : -1.0;
    }
  }
  const int ip = pred.id();
  return pred.tape().record(scalar(total), {ip}, [ip, grad](Tape& t, int self) {
    t.grad(ip) += grad * t.grad(self)(0, 0);
  });
}

double bce(double p, double t, double eps) {
  p = std::clamp(p, eps, 1.0 - eps);
  double v = 0.0;
  if (t > 0.0) v += t * std::log(t / p);
  if (t < 1.0) v += (1.0 - t) * std::log((1.0 - t) / (1.0 - p));
  return std::max(0.0, v);
}

Var bce_with_logits(Var logits, std::span<const double> targets) {
  const Mat& x = logits.value();
  if (x.cols() != 1 || static_cast<std::size_t>(x.rows()) != targets.size())
    throw std::invalid_argument("bce: size mismatch");
  double total = 0.0;
  Mat grad(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double z = x(i, 0), t = targets[i];
    total += std::max(0.0, softplus(z) - t * z - entropy(t));
    grad(i, 0) = sigmoid(z) - t;
  }
  const int il = logits.id();
  return logits.tape().record(scalar(total), {il}, [il, grad](Tape& t, int self) {
    t.grad(il) += grad * t.grad(self)(0, 0);
  });
}

Var l_rpn(const RpnOutput& out, const RpnTargets& targets, const LossConfig& cfg) {
  const double inv = 1.0 / std::max(1, targets.num_fg);
  Var cls = focal_loss(out.cls, targets.labels, cfg.focal_gamma, cfg.focal_alpha);
  std::vector<int> fg;
  for (std::size_t a = 0; a < targets.labels.size(); ++a)
    if (targets.labels[a] == 1) fg.push_back(static_cast<int>(a));
  if (fg.empty()) return nn::scale(cls, inv);
  Mat target(static_cast<Eigen::Index>(fg.size()), 7);
  for (std::size_t k = 0; k < fg.size(); ++k)
    for (int j = 0; j < 7; ++j) target(static_cast<Eigen::Index>(k), j) = targets.residuals[fg[k]][j];
  Var reg = smooth_l1(nn::gather_rows(out.reg, fg), target, cfg.smooth_l1_delta);
  return nn::scale(nn::add(cls, reg), inv);
}

Var l_head(const HeadOutput& out, const HeadTargets& targets, std::span<const int> rows, const LossConfig& cfg) {
  const double inv = 1.0 / std::max<std::size_t>(1, rows.size());
  std::vector<int> sel(rows.begin(), rows.end());
  std::vector<double> conf_t;
  std::vector<int> reg_rows;
  for (int r : sel) {
    conf_t.push_back(targets.conf[r]);
    if (targets.reg_mask[r]) reg_rows.push_back(r);
  }
  Var conf = bce_with_logits(nn::gather_rows(out.confidence, sel), conf_t);
  if (reg_rows.empty()) return nn::scale(conf, inv);
  Mat target(static_cast<Eigen::Index>(reg_rows.size()), 7);
  for (std::size_t k = 0; k < reg_rows.size(); ++k)
    for (int j = 0; j < 7; ++j) target(static_cast<Eigen::Index>(k), j) = targets.reg[reg_rows[k]][j];
  Var reg = smooth_l1(nn::gather_rows(out.refinement, reg_rows), target, cfg.smooth_l1_delta);
  return nn::scale(nn::add(conf, reg), inv);
}

LossBreakdown l_total(double rpn, double head, double vote_v, double vote_f, double ctr, const LossConfig& cfg) {
  LossBreakdown b;
  b.rpn = rpn;
  b.head = head;
  b.vote_v = vote_v;
  b.vote_f = vote_f;
  b.vote = vote_v + vote_f;
  b.ctr = ctr;
  b.total = rpn + head + cfg.alpha * b.vote + cfg.beta * ctr;
  return b;
}

Var l_total(Var rpn, Var head, Var vote_v, Var vote_f, Var ctr, const LossConfig& cfg) {
  return nn::weighted_sum({rpn, head, vote_v, vote_f, ctr}, {1.0, 1.0, cfg.alpha, cfg.alpha, cfg.beta});
}

}  // namespace ssk
