#include "latchkit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

LATCHKIT_BEGIN_NAMESPACE

namespace arena {
namespace {
std::atomic<int64_t> g_live{0};
std::atomic<int64_t> g_peak{0};
}  // namespace

int64_t live_bytes() { return g_live.load(std::memory_order_relaxed); }
int64_t peak_bytes() { return g_peak.load(std::memory_order_relaxed); }
void reset_peak() { g_peak.store(g_live.load(std::memory_order_relaxed), std::memory_order_relaxed); }

void on_allocate(std::size_t bytes) {
  const int64_t now = g_live.fetch_add(static_cast<int64_t>(bytes), std::memory_order_relaxed) +
                      static_cast<int64_t>(bytes);
  int64_t peak = g_peak.load(std::memory_order_relaxed);
  while (now > peak && !g_peak.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
  }
}

void on_release(std::size_t bytes) {
  g_live.fetch_sub(static_cast<int64_t>(bytes), std::memory_order_relaxed);
}
}  // namespace arena

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Buffer& detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), real(0));
  return grad;
}

namespace {
thread_local Graph* t_current = nullptr;

std::shared_ptr<detail::Node> make_leaf(Shape shape) {
  auto node = std::make_shared<detail::Node>();
  const int64_t n = numel(shape);
  if (n < 0) throw ShapeError("negative dimension in " + to_string(shape));
  node->shape = std::move(shape);
  node->value.assign(static_cast<size_t>(n), real(0));
  return node;
}
}  // namespace

Tensor Tensor::zeros(Shape shape) { return Tensor(make_leaf(std::move(shape))); }

Tensor Tensor::full(Shape shape, real value) {
  auto node = make_leaf(std::move(shape));
  std::fill(node->value.begin(), node->value.end(), value);
  return Tensor(node);
}

Tensor Tensor::from(Shape shape, std::vector<real> values) {
  if (latchkit::numel(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("Tensor::from: shape " + to_string(shape) + " needs " +
                     std::to_string(latchkit::numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto node = make_leaf(std::move(shape));
  std::copy(values.begin(), values.end(), node->value.begin());
  return Tensor(node);
}

Tensor Tensor::scalar(real value) { return from({}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }

int64_t Tensor::dim(int axis) const {
  const int64_t r = rank();
  const int64_t a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
  return node_->shape[static_cast<size_t>(a)];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(node_->value.size()); }

std::span<const real> Tensor::data() const { return {node_->value.data(), node_->value.size()}; }

std::span<real> Tensor::mutable_data() {
  if (!node_->is_leaf) throw Error("mutable_data() on a non-leaf tensor produced by '" + std::string(node_->op) + "'");
  return {node_->value.data(), node_->value.size()};
}

std::vector<real> Tensor::to_vector() const { return {node_->value.begin(), node_->value.end()}; }

real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!node_->is_leaf) throw Error("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const real> Tensor::grad() const {
  if (node_->grad.empty()) throw Error("tensor has no gradient");
  return {node_->grad.data(), node_->grad.size()};
}

std::span<real> Tensor::mutable_grad() {
  auto& g = node_->grad_buffer();
  return {g.data(), g.size()};
}

void Tensor::zero_grad() { Buffer().swap(node_->grad); }

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(node);
}

Graph::Graph() : previous_(t_current) { t_current = this; }

Graph::~Graph() {
  t_current = previous_;
  // Break closures before releasing nodes so destruction is not recursive.
  for (auto& n : nodes_) n->backward = nullptr;
}

Graph* Graph::current() { return t_current; }

void Graph::record(const std::shared_ptr<detail::Node>& node) {
  node->graph = this;
  node->id = static_cast<int64_t>(nodes_.size());
  nodes_.push_back(node);
}

void Graph::backward(const Tensor& output) {
  if (!output.defined()) throw Error("backward on an undefined tensor");
  const auto& out = output.node();
  if (out->graph != this) {
    throw Error("backward before forward: output was not recorded on this graph (op '" +
                std::string(out->op) + "')");
  }
  if (out->value.size() != 1) {
    throw ShapeError("backward requires a scalar output, got " + to_string(out->shape));
  }
  for (auto& n : nodes_) Buffer().swap(n->grad);
  out->grad_buffer()[0] = real(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto& n = *it;
    if (n->grad.empty() || !n->backward) continue;
    n->backward();
    if (n != out) Buffer().swap(n->grad);
  }
}

NoGradGuard::NoGradGuard() : saved_(t_current) { t_current = nullptr; }
NoGradGuard::~NoGradGuard() { t_current = saved_; }

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& leaf_in,
                         double eps) {
  if (!(eps > 0)) throw Error("finite_diff_check: eps must be positive");
  Tensor leaf = leaf_in;
  const bool had = leaf.requires_grad();
  leaf.set_requires_grad(true);
  leaf.zero_grad();
  std::vector<real> analytic;
  {
    Graph g;
    Tensor out = f(leaf);
    g.backward(out);
    analytic.assign(leaf.grad().begin(), leaf.grad().end());
  }
  leaf.zero_grad();
  leaf.set_requires_grad(had);

  NoGradGuard no_grad;
  auto values = leaf.mutable_data();
  double worst = 0.0;
  for (size_t i = 0; i < values.size(); ++i) {
    const real x0 = values[i];
    const real xp = static_cast<real>(x0 + eps);
    const real xm = static_cast<real>(x0 - eps);
    values[i] = xp;
    const double fp = f(leaf).item();
    values[i] = xm;
    const double fm = f(leaf).item();
    values[i] = x0;
    const double numeric = (fp - fm) / (static_cast<double>(xp) - static_cast<double>(xm));
    const double a = analytic[i];
    const double rel = std::abs(a - numeric) / std::max(std::abs(a), 1e-8);
    worst = std::max(worst, rel);
  }
  return worst;
}

LATCHKIT_END_NAMESPACE
