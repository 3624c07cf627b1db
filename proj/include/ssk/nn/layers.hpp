#pragma once

#include <string>

#include "ssk/nn/ops.hpp"

namespace ssk::nn {

/// Forward context shared by the layers of one scene pass.
struct Context {
  Tape& tape;
  ParamStore& params;
  bool training = false;
};

ParamStore::Init uniform_init(double bound);
ParamStore::Init constant_init(double value);

/// Fully connected layer; He-uniform weights, zero bias.
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, int in, int out, bool bias = true);
  Var operator()(Context& ctx, Var x) const;
  int in() const { return in_; }
  int out() const { return out_; }

 private:
  Parameter* weight_ = nullptr;
  Parameter* bias_ = nullptr;
  int in_ = 0, out_ = 0;
};

/// Per-channel affine normalization with running statistics.
class ChannelNorm {
 public:
  ChannelNorm() = default;
  ChannelNorm(ParamStore& store, const std::string& name, int channels);
  Var operator()(Context& ctx, Var x) const;

 private:
  Parameter* gamma_ = nullptr;
  Parameter* beta_ = nullptr;
  Parameter* mean_ = nullptr;
  Parameter* var_ = nullptr;
};

/// Linear -> ChannelNorm -> ReLU.
class Fcn {
 public:
  Fcn() = default;
  Fcn(ParamStore& store, const std::string& name, int in, int out);
  Var operator()(Context& ctx, Var x) const;
  int out() const { return linear_.out(); }

 private:
  Linear linear_;
  ChannelNorm norm_;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore& store, const std::string& name, int in, int out, int kernel, int stride, int groups = 1);
  /// Padding is kernel / 2.
  Var operator()(Context& ctx, Var x, int height, int width) const;
  int out_size(int size) const { return (size + 2 * (kernel_ / 2) - kernel_) / stride_ + 1; }
  int out() const { return out_; }

 private:
  Parameter* weight_ = nullptr;
  Parameter* bias_ = nullptr;
  int in_ = 0, out_ = 0, kernel_ = 3, stride_ = 1, groups_ = 1;
};

}  // namespace ssk::nn
