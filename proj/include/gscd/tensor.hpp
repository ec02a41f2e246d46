#pragma once

// Dense float64 tensor with reverse-mode automatic differentiation.
//
// Every op that sees an input requiring grad records a Node holding the
// op name, a monotone sequence number and a backward closure. Sequence
// numbers are assigned at creation, so sorting the reachable nodes by
// descending sequence number yields a valid reverse-topological tape.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gscd/errors.hpp"

namespace gscd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves
};

using GradSlots = std::vector<std::vector<double>*>;

struct Node {
  std::string op;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Adds d(loss)/d(input_i) into *slots[i]; slots[i] is null when input i
  // does not require grad.
  std::function<void(const std::vector<double>& grad_out, GradSlots& slots)> backward;
  bool consumed = false;
};

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording for the lifetime of the guard (evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct TapeEntry {
  std::string op;
  std::uint64_t seq;
  std::vector<std::uint64_t> input_seqs;  // 0 for leaves
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> data(shape_numel(shape), value);
    return from(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from(Shape{1}, {value}, requires_grad);
  }

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
    }
    if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    Tensor t(std::move(impl));
    t.set_requires_grad(requires_grad);
    return t;
  }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // Direct writes are for leaves only (parameters, buffers, inputs).
  std::span<double> mutable_data() {
    if (impl_->node) throw AutodiffError("cannot mutate the data of a recorded intermediate");
    return impl_->data;
  }
  std::vector<double> to_vector() const { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return impl_->node == nullptr; }

  Tensor& set_requires_grad(bool flag) {
    if (!is_leaf()) throw AutodiffError("requires_grad can only be set on leaves");
    impl_->requires_grad = flag;
    if (flag && impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0);
    return *this;
  }

  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad; }

  void zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  /// Same values, excluded from the tape.
  Tensor detach() const { return from(shape(), impl_->data, false); }

  /// Populates grad on every requires_grad leaf reachable from this scalar.
  void backward() const;

  /// Reverse-topological list of recorded ops reachable from this tensor.
  std::vector<TapeEntry> tape() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

inline void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("op '") + op + "' produced a non-finite value");
  }
}

using BackwardFn = std::function<void(const std::vector<double>&, GradSlots&)>;

/// Wraps freshly computed data as an op result and records it on the tape
/// when any input requires grad.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::vector<Tensor> inputs, BackwardFn backward) {
  check_finite(op, data);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any && grad_mode()) {
    auto node = std::make_shared<Node>();
    node->op = op;
    node->seq = next_seq();
    for (const auto& in : inputs) node->inputs.push_back(in.impl());
    node->backward = std::move(backward);
    impl->node = std::move(node);
    impl->requires_grad = true;
  }
  return Tensor(std::move(impl));
}

inline std::vector<Node*> collect_nodes(const TensorImpl* root) {
  std::vector<Node*> nodes;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack;
  if (root->node) stack.push_back(root->node.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    nodes.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->node) stack.push_back(in->node.get());
    }
  }
  std::sort(nodes.begin(), nodes.end(), [](Node* a, Node* b) { return a->seq > b->seq; });
  return nodes;
}

}  // namespace detail

inline void Tensor::backward() const {
  if (!defined()) throw AutodiffError("backward on an undefined tensor");
  if (numel() != 1) throw AutodiffError("backward needs a scalar loss, got shape " + shape_str(shape()));
  if (!requires_grad()) throw AutodiffError("backward on a detached graph (loss does not require grad)");
  if (is_leaf()) {
    impl_->grad[0] += 1.0;
    return;
  }
  auto* root = impl_->node.get();
  if (root->consumed) throw AutodiffError("backward already ran on this loss; rebuild the graph first");
  root->consumed = true;

  auto nodes = detail::collect_nodes(impl_.get());
  std::unordered_map<detail::Node*, std::vector<double>> node_grads;
  std::unordered_map<detail::TensorImpl*, std::vector<double>> leaf_grads;
  node_grads[root] = {1.0};

  for (detail::Node* n : nodes) {
    auto it = node_grads.find(n);
    if (it == node_grads.end()) continue;
    std::vector<double> grad_out = std::move(it->second);
    node_grads.erase(it);

    std::vector<std::vector<double>> buffers(n->inputs.size());
    detail::GradSlots slots(n->inputs.size(), nullptr);
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      if (n->inputs[i]->requires_grad) {
        buffers[i].assign(n->inputs[i]->data.size(), 0.0);
        slots[i] = &buffers[i];
      }
    }
    n->backward(grad_out, slots);
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      if (!slots[i]) continue;
      auto& in = n->inputs[i];
      auto& dst = in->node ? node_grads[in->node.get()] : leaf_grads[in.get()];
      if (dst.empty()) {
        dst = std::move(buffers[i]);
      } else {
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += buffers[i][k];
      }
    }
  }
  // Leaves are accumulated in node order; the map is only a staging area.
  for (auto& [leaf, g] : leaf_grads) {
    if (leaf->grad.size() != g.size()) leaf->grad.assign(g.size(), 0.0);
    for (std::size_t k = 0; k < g.size(); ++k) leaf->grad[k] += g[k];
  }
}

inline std::vector<TapeEntry> Tensor::tape() const {
  std::vector<TapeEntry> entries;
  for (auto* n : detail::collect_nodes(impl_.get())) {
    TapeEntry e{n->op, n->seq, {}};
    for (const auto& in : n->inputs) e.input_seqs.push_back(in->node ? in->node->seq : 0);
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace gscd
