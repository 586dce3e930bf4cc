#pragma once

// Dense real tensors with a define-by-run reverse-mode tape.
//
// A Tensor is a shared handle to a node holding a row-major payload (float32, or float64 in the checking build).
// While a Graph is alive on the current thread, every operation whose inputs
// require gradients is recorded on it; Graph::backward() then replays the
// record in reverse. Without an active Graph, operations only compute values.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "latchkit/arena.hpp"
#include "latchkit/error.hpp"

LATCHKIT_BEGIN_NAMESPACE

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Graph;

namespace detail {

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until a gradient flows in
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  int64_t id = -1;
  Graph* graph = nullptr;
  std::function<void()> backward;

  Buffer& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, real value);
  static Tensor from(Shape shape, std::vector<real> values);
  static Tensor scalar(real value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t dim(int axis) const;
  int64_t rank() const { return static_cast<int64_t>(shape().size()); }
  int64_t numel() const;

  std::span<const real> data() const;
  // Writable access to the payload. Only valid on leaves.
  std::span<real> mutable_data();
  std::vector<real> to_vector() const;
  real item() const;

  bool requires_grad() const;
  // Marks a leaf as a differentiation target. Returns *this for chaining.
  Tensor& set_requires_grad(bool flag = true);
  bool has_grad() const;
  std::span<const real> grad() const;
  std::span<real> mutable_grad();
  void zero_grad();

  // Copy of the value with no history and no gradient requirement.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Internal construction used by operations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Records operations performed on the current thread while alive. Graphs
// nest; the innermost one receives new records.
class Graph {
 public:
  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* current();

  // Back-propagates from a scalar output recorded on this graph. Leaf
  // gradients accumulate across calls; intermediate gradients are reset.
  void backward(const Tensor& output);

  size_t size() const { return nodes_.size(); }

  // Used by operations.
  void record(const std::shared_ptr<detail::Node>& node);

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  Graph* previous_ = nullptr;
};

// Suspends recording on this thread for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Graph* saved_;
};

// Central-difference check of d(f)/d(leaf). f must return a scalar. Returns
// max_i |analytic_i - numeric_i| / max(|analytic_i|, 1e-8).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& leaf,
                         double eps);

LATCHKIT_END_NAMESPACE
