#include "glsm/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace glsm {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

static void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
  for (auto e : shape)
    if (e == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
}

Tensor::Tensor(Shape shape) {
  validate_shape(shape);
  node_ = std::make_shared<detail::Node>();
  node_->value.assign(shape_numel(shape), 0.0);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != values.size())
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  detail::check_finite("tensor", values);
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->value.assign(values.begin(), values.end());
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

Tensor Tensor::full(Shape shape, double v) {
  std::vector<double> values(shape_numel(shape), v);
  return Tensor(std::move(shape), std::move(values));
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::grad_mut() { return node_->ensure_grad(); }
bool Tensor::has_grad() const { return node_->grad.size() == node_->value.size(); }
bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<detail::Node>();
  n->shape = node_->shape;
  n->value = node_->value;
  n->op = "detach";
  return Tensor(std::move(n));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->requires_grad = node_->requires_grad;
  return t;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::vector<detail::Node*> topological_order(const Tensor& loss) {
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.impl().get(), 0);
  seen.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("backward() requires a scalar loss");
  if (!loss.requires_grad()) return;
  auto order = topological_order(loss);
  for (auto* n : order)
    if (n->backward_fn) n->grad.assign(n->value.size(), 0.0);
  loss.impl()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

namespace detail {

void check_finite(const char* op, std::span<const double> values) {
  for (double v : values)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
}

Tensor make_result(const char* op, Shape shape, Buffer value,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn) {
  check_finite(op, value);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  if (g_grad_enabled)
    for (const auto& t : inputs)
      if (t.defined() && t.requires_grad()) needs = true;
  if (needs) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& t : inputs) n->inputs.push_back(t.impl());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

}  // namespace detail

}  // namespace glsm
