#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

namespace ssk::nn {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A named parameter tensor plus its Adam state. Non-trainable parameters
/// (normalization running statistics) are saved but never stepped.
struct Parameter {
  std::string name;
  Mat value;
  bool trainable = true;
  Mat adam_m;
  Mat adam_v;
};

class ParamStore {
 public:
  using Init = std::function<void(Mat&, std::uint64_t seed)>;

  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  /// Returns the parameter, creating and initializing it on first use. Shape
  /// mismatch against an existing entry is an error.
  Parameter& get(const std::string& name, int rows, int cols, const Init& init, bool trainable = true);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }

  /// Name-sorted iteration.
  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;

  std::uint64_t seed() const { return seed_; }
  std::int64_t step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; }

  /// Little-endian: magic, step, count, then per parameter: u32 name length,
  /// name bytes, u8 trainable, i64 rows, i64 cols, rows*cols f64 values.
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);
  std::vector<unsigned char> serialize() const;
  void deserialize(const std::vector<unsigned char>& bytes);

 private:
  std::map<std::string, std::unique_ptr<Parameter>> params_;
  std::uint64_t seed_;
  std::int64_t step_ = 0;
};

/// Stable 64-bit FNV-1a, used for per-parameter init seeds.
std::uint64_t fnv1a(const std::string& s, std::uint64_t basis = 1469598103934665603ull);

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Pending update of normalization running statistics, applied after the step.
struct StatUpdate {
  Parameter* running_mean;
  Parameter* running_var;
  Mat batch_mean;
  Mat batch_var;
};

/// Reverse-mode tape. Single-threaded; one tape per scene forward/backward.
class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value);
  /// Leaf that receives gradients (used by gradient checks).
  Var leaf(Mat value);
  /// Leaf bound to a parameter; repeated calls return the same node.
  Var param(Parameter& p);

  /// Records an op node; it needs a gradient iff any parent does.
  Var record(Mat value, std::initializer_list<int> parents, Backward backward);
  Var record(Mat value, const std::vector<int>& parents, Backward backward);

  const Mat& value(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  /// Gradient accumulator, zero-allocated on first access.
  Mat& grad(int id);
  bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates.
  void backward(Var root);

  /// Gradients of every parameter used on this tape, name-sorted.
  std::vector<std::pair<Parameter*, Mat>> param_grads() const;

  std::vector<StatUpdate>& stat_updates() { return stat_updates_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    Backward backward;
    bool needs_grad = false;
    Parameter* param = nullptr;
  };
  std::deque<Node> nodes_;  // deque: references stay valid while recording
  std::unordered_map<const Parameter*, int> param_nodes_;
  std::vector<StatUpdate> stat_updates_;
};

inline const Mat& Var::value() const { return tape_->value(id_); }

/// Blends recorded batch statistics into the running statistics, in order.
void apply_stat_updates(std::vector<StatUpdate>& updates, double momentum);

}  // namespace ssk::nn
