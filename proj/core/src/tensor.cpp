#include "arcd/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

#include "arcd/error.hpp"

namespace arcd {

namespace {
thread_local bool t_grad_enabled = true;
std::atomic<std::uint64_t> g_sequence{0};
}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

namespace detail {

std::uint64_t next_sequence() { return g_sequence.fetch_add(1, std::memory_order_relaxed) + 1; }

template <typename T>
Tensor<T> record(Shape shape, std::vector<T> data, std::initializer_list<const Tensor<T>*> inputs,
                 BackwardFn<T> fn) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->seq = next_sequence();
  if (t_grad_enabled) {
    bool any = false;
    for (const auto* in : inputs) any = any || (in->defined() && in->requires_grad());
    if (any) {
      node->requires_grad = true;
      for (const auto* in : inputs) node->inputs.push_back(in->node());
      node->backward_fn = std::move(fn);
    }
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> record(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                 BackwardFn<T> fn) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->seq = next_sequence();
  if (t_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->inputs.push_back(in.node());
      node->backward_fn = std::move(fn);
    }
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

template <typename T>
std::vector<T>& TensorNode<T>::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), T{0});
  return grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill, bool requires_grad) {
  for (auto d : shape)
    if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
  node_ = std::make_shared<TensorNode<T>>();
  node_->data.assign(static_cast<std::size_t>(arcd::numel(shape)), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
  node_->seq = detail::next_sequence();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto d : shape)
    if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
  if (static_cast<std::int64_t>(data.size()) != arcd::numel(shape))
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                         to_string(shape));
  node_ = std::make_shared<TensorNode<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
  node_->seq = detail::next_sequence();
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return node_->shape;
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(r));
  return node_->shape[static_cast<std::size_t>(axis)];
}

template <typename T>
int Tensor<T>::rank() const {
  return static_cast<int>(node_->shape.size());
}

template <typename T>
std::int64_t Tensor<T>::numel() const {
  return static_cast<std::int64_t>(node_->data.size());
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  return node_->data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (node_->data.size() != 1)
    throw ContractError("item() requires a single-element tensor, got " + to_string(shape()));
  return node_->data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return node_->requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return !node_->grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return node_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  return node_->grad_buffer();
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->data, false);
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw ContractError("backward() on an undefined tensor");
  if (loss.numel() != 1)
    throw ContractError("backward() requires a scalar loss, got shape " + to_string(loss.shape()));
  auto root = loss.node();
  if (root->consumed) throw ContractError("computation record already consumed by a previous backward()");
  if (!root->requires_grad) throw ContractError("loss does not depend on any tensor requiring grad");

  // Collect the reachable interior nodes. Owning pointers: clearing a
  // node's inputs below must not free nodes still waiting in `order`.
  std::vector<std::shared_ptr<TensorNode<T>>> order;
  std::vector<std::shared_ptr<TensorNode<T>>> stack{root};
  std::unordered_set<const TensorNode<T>*> seen{root.get()};
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    if (!n->backward_fn) continue;
    for (auto& in : n->inputs)
      if (in && in->requires_grad && seen.insert(in.get()).second) stack.push_back(in);
    order.push_back(std::move(n));
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->seq > b->seq; });

  auto& g = root->grad_buffer();
  g[0] += T{1};
  for (auto& n : order) {
    n->grad_buffer();
    n->backward_fn(*n);
    n->backward_fn = nullptr;
    n->inputs.clear();
    n->consumed = true;
    if (n != root) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
    n.reset();
  }
  root->consumed = true;
}

template struct TensorNode<float>;
template struct TensorNode<double>;
template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);
template Tensor<float> detail::record<float>(Shape, std::vector<float>,
                                             std::initializer_list<const Tensor<float>*>,
                                             BackwardFn<float>);
template Tensor<double> detail::record<double>(Shape, std::vector<double>,
                                               std::initializer_list<const Tensor<double>*>,
                                               BackwardFn<double>);
template Tensor<float> detail::record<float>(Shape, std::vector<float>, const std::vector<Tensor<float>>&,
                                             BackwardFn<float>);
template Tensor<double> detail::record<double>(Shape, std::vector<double>,
                                               const std::vector<Tensor<double>>&, BackwardFn<double>);

}  // namespace arcd
