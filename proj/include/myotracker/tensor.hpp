#pragma once

// Dense tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle to an immutable node (shape + contiguous data).
// Operations record a backward closure onto the thread's active Tape when one
// is installed (see GradScope) and at least one input requires a gradient.
// Without an active tape, operations run in pure inference mode.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace myo {

using Index = std::int64_t;
using Shape = std::vector<Index>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until a gradient flows in
  bool requires_grad = false;

  std::vector<S>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), S(0));
    return grad;
  }
};

template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;
  Tensor(Shape shape, std::vector<S> values, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, S value, bool requires_grad = false);
  static Tensor scalar(S value) { return full({}, value); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  Index numel() const { return static_cast<Index>(node_->value.size()); }

  std::span<const S> data() const { return node_->value; }
  // Direct mutation is reserved for leaves (parameters, inputs under construction).
  std::span<S> mutable_data() { return node_->value; }
  S item() const;
  S at(std::initializer_list<Index> idx) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const S> grad() const { return node_->grad; }
  std::span<S> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  // New leaf sharing no history (values copied).
  Tensor detach() const;
  template <typename T>
  Tensor<T> cast() const;

  const std::shared_ptr<TensorNode<S>>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<TensorNode<S>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  std::shared_ptr<TensorNode<S>> node_;
};

// Ordered record of differentiable operations. Entries are appended in
// execution order, so the reverse order is a valid topological order for the
// backward sweep. A tape belongs to one thread.
template <typename S>
class Tape {
 public:
  void record(std::shared_ptr<TensorNode<S>> output, std::function<void()> backward_fn);

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse.
  // Leaf gradients accumulate into existing buffers; the tape is consumed
  // and a second call throws.
  void backward(const Tensor<S>& loss);

  std::size_t size() const { return entries_.size(); }
  std::size_t visited() const { return visited_; }
  bool consumed() const { return consumed_; }

  static Tape* active();

 private:
  struct Entry {
    std::shared_ptr<TensorNode<S>> output;
    std::function<void()> backward_fn;
  };
  std::vector<Entry> entries_;
  std::size_t visited_ = 0;
  bool consumed_ = false;
};

// Installs `tape` as the active tape for the current thread for its lifetime.
template <typename S>
class GradScope {
 public:
  explicit GradScope(Tape<S>& tape);
  ~GradScope();
  GradScope(const GradScope&) = delete;
  GradScope& operator=(const GradScope&) = delete;

 private:
  Tape<S>* previous_;
};

// Disables recording for the current thread for its lifetime.
template <typename S>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<S>* previous_;
};

namespace detail {

template <typename S>
Tape<S>*& active_tape();

template <typename S>
bool any_requires_grad(std::initializer_list<const Tensor<S>*> inputs) {
  for (const auto* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Creates the output tensor and, if recording is active and an input needs a
// gradient, registers the backward closure produced by make_backward(out_node).
template <typename S, typename MakeBackward>
Tensor<S> finish(Shape shape, std::vector<S> values,
                 std::initializer_list<const Tensor<S>*> inputs, MakeBackward&& make_backward) {
  auto node = std::make_shared<TensorNode<S>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  Tape<S>* tape = active_tape<S>();
  if (tape != nullptr && any_requires_grad<S>(inputs)) {
    node->requires_grad = true;
    tape->record(node, make_backward(node.get()));
  }
  return Tensor<S>::from_node(std::move(node));
}

// Gradient buffer of an input if it participates in differentiation.
template <typename S>
S* grad_of(const Tensor<S>& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  return t.node()->grad_buffer().data();
}

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;
extern template class GradScope<float>;
extern template class GradScope<double>;
extern template class NoGradScope<float>;
extern template class NoGradScope<double>;

}  // namespace myo
