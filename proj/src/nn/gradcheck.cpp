#include "ssk/nn/gradcheck.hpp"

#include <cmath>

#include "ssk/nn/ops.hpp"

namespace ssk::nn {

namespace {

double evaluate(const TapeFn& fn, const std::vector<Mat>& inputs) {
  Tape t;
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(t.constant(m));
  return fn(t, vars).value().sum();
}

}  // namespace

GradCheckResult finite_difference_check(const TapeFn& fn, const std::vector<Mat>& inputs, double step) {
  Tape t;
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(t.leaf(m));
  const Var total = sum(fn(t, vars));
  t.backward(total);
  const double f0 = total.scalar();

  std::vector<Mat> analytic;
  double scale = 1.0;
  for (const auto& v : vars) {
    analytic.push_back(t.has_grad(v.id()) ? t.grad(v.id()) : Mat::Zero(v.rows(), v.cols()));
    if (analytic.back().size()) scale = std::max(scale, analytic.back().cwiseAbs().maxCoeff());
  }

  GradCheckResult result;
  std::vector<Mat> work = inputs;
  for (std::size_t k = 0; k < work.size(); ++k) {
    for (Eigen::Index i = 0; i < work[k].size(); ++i) {
      const double orig = work[k].data()[i];
      work[k].data()[i] = orig + step;
      const double fp = evaluate(fn, work);
      work[k].data()[i] = orig - step;
      const double fm = evaluate(fn, work);
      work[k].data()[i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[k].data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6 * scale});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
      if (std::abs(fp - 2.0 * f0 + fm) > 1e-6 * std::max(1.0, std::abs(f0))) result.discontinuity = true;
    }
  }
  return result;
}

}  // namespace ssk::nn
