#include "ssk/nn/tape.hpp"

#include <algorithm>
#include <stdexcept>

namespace ssk::nn {

Var Tape::constant(Mat value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, nullptr});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Mat value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true, nullptr});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
  nodes_.push_back(Node{p.value, {}, {}, p.trainable, &p});
  const int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_.emplace(&p, id);
  return {this, id};
}

Var Tape::record(Mat value, std::initializer_list<int> parents, Backward backward) {
  return record(std::move(value), std::vector<int>(parents), std::move(backward));
}

Var Tape::record(Mat value, const std::vector<int>& parents, Backward backward) {
#ifndef NDEBUG
  if (!value.allFinite()) throw std::runtime_error("non-finite value recorded on tape");
#endif
  const bool needs = std::any_of(parents.begin(), parents.end(), [&](int p) { return nodes_[p].needs_grad; });
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : Backward{}, needs, nullptr});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Mat& Tape::grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.rows() != 1 || root.cols() != 1) throw std::invalid_argument("backward root must be 1x1");
  if (!nodes_[root.id()].needs_grad) return;
  grad(root.id())(0, 0) += 1.0;
  for (int id = root.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.backward && n.grad.size() != 0) n.backward(*this, id);
  }
}

std::vector<std::pair<Parameter*, Mat>> Tape::param_grads() const {
  std::vector<std::pair<Parameter*, Mat>> out;
  for (const auto& [p, id] : param_nodes_) {
    const Node& n = nodes_[id];
    if (!p->trainable) continue;
    out.emplace_back(const_cast<Parameter*>(p),
                     n.grad.size() ? n.grad : Mat::Zero(n.value.rows(), n.value.cols()));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first->name < b.first->name; });
  return out;
}

void apply_stat_updates(std::vector<StatUpdate>& updates, double momentum) {
  for (auto& u : updates) {
    u.running_mean->value = (1.0 - momentum) * u.running_mean->value + momentum * u.batch_mean;
    u.running_var->value = (1.0 - momentum) * u.running_var->value + momentum * u.batch_var;
  }
  updates.clear();
}

}  // namespace ssk::nn
