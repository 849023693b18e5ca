#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace arcd {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
struct TensorNode;

template <typename T>
using BackwardFn = std::function<void(TensorNode<T>&)>;

/// Storage behind a Tensor handle. `seq` is the global creation order; the
/// backward pass replays nodes in strictly decreasing `seq`.
template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  BackwardFn<T> backward_fn;

  /// Gradient buffer, zero-filled on first use.
  std::vector<T>& grad_buffer();
};

/// Reference-counted handle to an n-dimensional row-major array with an
/// optional gradient. Copies share storage.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;
  int rank() const;
  std::int64_t numel() const;

  std::span<const T> data() const;
  /// Direct write access; reserved for leaves (parameters, optimizer,
  /// gradcheck perturbation). Mutating an interior node invalidates its record.
  std::span<T> mutable_data();
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// Same values, fresh node with no history.
  Tensor detach() const;

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Runs reverse-mode accumulation from a scalar loss. Gradients of leaves
/// accumulate additively; the record reachable from `loss` is consumed.
template <typename T>
void backward(const Tensor<T>& loss);

/// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace detail {

std::uint64_t next_sequence();

/// Wraps freshly computed values into a Tensor and, if any input requires
/// gradients and recording is enabled, attaches `fn` as its adjoint.
template <typename T>
Tensor<T> record(Shape shape, std::vector<T> data, std::initializer_list<const Tensor<T>*> inputs,
                 BackwardFn<T> fn);
template <typename T>
Tensor<T> record(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                 BackwardFn<T> fn);

/// True if `node` wants a gradient contribution.
template <typename T>
inline bool wants_grad(const std::shared_ptr<TensorNode<T>>& node) {
  return node && node->requires_grad;
}

}  // namespace detail

}  // namespace arcd
