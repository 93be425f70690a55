#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace glsm {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when a forward value becomes NaN/Inf or a loss diverges.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 64-byte aligned storage so vectorised kernels see the same alignment on
// every run (Eigen's reductions peel differently for unaligned buffers).
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlign)));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t(kAlign)); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  // Operation name, kept for diagnostics.
  const char* op = "leaf";

  Buffer& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor handle with optional gradient tracking.
///
/// Copies share the underlying node; use `clone()` for a deep copy. Operations
/// record a backward closure when gradient mode is on and any input requires
/// gradients; `backward()` walks the recorded graph in reverse topological
/// order.
class Tensor {
 public:
  Tensor() = default;
  // Zero-filled.
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double v);
  static Tensor full(Shape shape, double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const { return node_->value.size(); }
  // First extent, and the product of the remaining extents.
  std::size_t rows() const { return node_->shape[0]; }
  std::size_t cols() const { return numel() / rows(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> values_mut() { return node_->value; }
  double item() const;
  double at(std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return values()[r * cols() + c]; }

  std::span<const double> grad() const;
  std::span<double> grad_mut();
  bool has_grad() const;
  bool requires_grad() const;
  void set_requires_grad(bool on);
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& impl() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

bool grad_enabled();

// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Reverse-mode pass from a scalar loss. Leaf gradients accumulate across
/// calls until `zero_grad()`; intermediate gradients are reset on each call.
void backward(const Tensor& loss);

// Nodes reachable from `loss` in topological order (inputs first).
std::vector<detail::Node*> topological_order(const Tensor& loss);

namespace detail {

// Builds an op result. Inputs and the closure are dropped when no gradient
// is needed. Throws NumericError on non-finite values.
Tensor make_result(const char* op, Shape shape, Buffer value,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn);

void check_finite(const char* op, std::span<const double> values);

}  // namespace detail

}  // namespace glsm
