#include "myotracker/tensor.hpp"

#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace myo {

namespace {

// Tensor buffers are large and short-lived. glibc serves such blocks with
// fresh mmap regions by default, so every op pays page faults on its output;
// keeping them on the heap lets freed buffers be reused.
[[maybe_unused]] const bool kAllocatorTuned = [] {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
  return true;
}();

}  // namespace

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename S>
Tensor<S>::Tensor(Shape shape, std::vector<S> values, bool requires_grad) {
  if (myo::numel(shape) != static_cast<Index>(values.size())) {
    throw ShapeError("tensor shape " + to_string(shape) + " holds " + std::to_string(myo::numel(shape)) +
                     " elements but " + std::to_string(values.size()) + " were given");
  }
  node_ = std::make_shared<TensorNode<S>>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename S>
Tensor<S> Tensor<S>::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, S(0), requires_grad);
}

template <typename S>
Tensor<S> Tensor<S>::full(const Shape& shape, S value, bool requires_grad) {
  return Tensor(shape, std::vector<S>(static_cast<std::size_t>(myo::numel(shape)), value), requires_grad);
}

template <typename S>
S Tensor<S>::item() const {
  if (node_->value.size() != 1) {
    throw ShapeError("item() needs a single-element tensor, got " + to_string(shape()));
  }
  return node_->value[0];
}

template <typename S>
S Tensor<S>::at(std::initializer_list<Index> idx) const {
  const Shape& s = shape();
  if (idx.size() != s.size()) throw ShapeError("index rank mismatch for " + to_string(s));
  Index flat = 0;
  std::size_t axis = 0;
  for (Index i : idx) {
    if (i < 0 || i >= s[axis]) throw std::out_of_range("index out of range for " + to_string(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->value[static_cast<std::size_t>(flat)];
}

template <typename S>
Tensor<S> Tensor<S>::detach() const {
  return Tensor(shape(), node_->value, false);
}

template <typename S>
template <typename T>
Tensor<T> Tensor<S>::cast() const {
  std::vector<T> out(node_->value.begin(), node_->value.end());
  return Tensor<T>(shape(), std::move(out), requires_grad());
}

template <typename S>
void Tape<S>::record(std::shared_ptr<TensorNode<S>> output, std::function<void()> backward_fn) {
  if (consumed_) throw std::logic_error("cannot record onto a consumed tape");
  entries_.push_back({std::move(output), std::move(backward_fn)});
}

template <typename S>
void Tape<S>::backward(const Tensor<S>& loss) {
  if (consumed_) throw std::logic_error("backward() already ran on this tape; create a new tape");
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar output, got shape " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  consumed_ = true;
  if (!loss.requires_grad()) return;
  loss.node()->grad_buffer()[0] += S(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output->grad.empty()) it->backward_fn();
    ++visited_;
    // Intermediate gradients are not needed once propagated.
    it->output->grad.clear();
    it->output->grad.shrink_to_fit();
  }
  // Keep the loss gradient visible to callers.
  loss.node()->grad_buffer()[0] = S(1);
  entries_.clear();
}

template <typename S>
Tape<S>* Tape<S>::active() {
  return detail::active_tape<S>();
}

namespace detail {
template <typename S>
Tape<S>*& active_tape() {
  thread_local Tape<S>* tape = nullptr;
  return tape;
}
template Tape<float>*& active_tape<float>();
template Tape<double>*& active_tape<double>();
}  // namespace detail

template <typename S>
GradScope<S>::GradScope(Tape<S>& tape) : previous_(detail::active_tape<S>()) {
  detail::active_tape<S>() = &tape;
}

template <typename S>
GradScope<S>::~GradScope() {
  detail::active_tape<S>() = previous_;
}

template <typename S>
NoGradScope<S>::NoGradScope() : previous_(detail::active_tape<S>()) {
  detail::active_tape<S>() = nullptr;
}

template <typename S>
NoGradScope<S>::~NoGradScope() {
  detail::active_tape<S>() = previous_;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<double> Tensor<float>::cast<double>() const;
template Tensor<float> Tensor<double>::cast<float>() const;
template Tensor<float> Tensor<float>::cast<float>() const;
template Tensor<double> Tensor<double>::cast<double>() const;
template class Tape<float>;
template class Tape<double>;
template class GradScope<float>;
template class GradScope<double>;
template class NoGradScope<float>;
template class NoGradScope<double>;

}  // namespace myo
