#include "ssk/nn/layers.hpp"

#include <cmath>
#include <random>

namespace ssk::nn {

ParamStore::Init uniform_init(double bound) {
  return [bound](Mat& m, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  };
}

ParamStore::Init constant_init(double value) {
  return [value](Mat& m, std::uint64_t) { m.setConstant(value); };
}

Linear::Linear(ParamStore& store, const std::string& name, int in, int out, bool bias) : in_(in), out_(out) {
  weight_ = &store.get(name + ".weight", in, out, uniform_init(std::sqrt(6.0 / std::max(1, in))));
  if (bias) bias_ = &store.get(name + ".bias", 1, out, constant_init(0.0));
}

Var Linear::operator()(Context& ctx, Var x) const {
  return linear(x, ctx.tape.param(*weight_), bias_ ? ctx.tape.param(*bias_) : Var{});
}

ChannelNorm::ChannelNorm(ParamStore& store, const std::string& name, int channels) {
  gamma_ = &store.get(name + ".gamma", 1, channels, constant_init(1.0));
  beta_ = &store.get(name + ".beta", 1, channels, constant_init(0.0));
  mean_ = &store.get(name + ".running_mean", 1, channels, constant_init(0.0), false);
  var_ = &store.get(name + ".running_var", 1, channels, constant_init(1.0), false);
}

Var ChannelNorm::operator()(Context& ctx, Var x) const {
  return channel_norm(x, ctx.tape.param(*gamma_), ctx.tape.param(*beta_), *mean_, *var_, ctx.training);
}

Fcn::Fcn(ParamStore& store, const std::string& name, int in, int out)
    : linear_(store, name + ".fc", in, out, false), norm_(store, name + ".norm", out) {}

Var Fcn::operator()(Context& ctx, Var x) const { return relu(norm_(ctx, linear_(ctx, x))); }

Conv2d::Conv2d(ParamStore& store, const std::string& name, int in, int out, int kernel, int stride, int groups)
    : in_(in), out_(out), kernel_(kernel), stride_(stride), groups_(groups) {
  const int fan_in = kernel * kernel * (in / groups);
  weight_ = &store.get(name + ".weight", fan_in, out, uniform_init(std::sqrt(6.0 / std::max(1, fan_in))));
  bias_ = &store.get(name + ".bias", 1, out, constant_init(0.0));
}

Var Conv2d::operator()(Context& ctx, Var x, int height, int width) const {
  Conv2dShape s{height, width, kernel_, stride_, kernel_ / 2, groups_};
  return conv2d(x, s, ctx.tape.param(*weight_), ctx.tape.param(*bias_));
}

}  // namespace ssk::nn
