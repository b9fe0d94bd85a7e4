#include "mpjudge/tensor.hpp"

#include <sstream>

#include "mpjudge/errors.hpp"

namespace mpjudge {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<TensorNode<T>>()) {
  check_shape(shape);
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<TensorNode<T>>()) {
  check_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_string(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return node_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
  return *this;
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  if (!has_grad()) return std::vector<T>(numel(), T(0));
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_) node_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor copy(node_->shape, node_->data);
  copy.node_->requires_grad = node_->requires_grad;
  return copy;
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_string(this->shape()) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), node_->data);
}

template <typename T>
Tape<T>*& Tape<T>::active_slot() {
  static thread_local Tape<T>* slot = nullptr;
  return slot;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_slot();
}

template <typename T>
void backward(const Tensor<T>& loss, Tape<T>& tape) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss does not depend on any tensor that requires grad");
  }
  for (auto& entry : tape.entries()) entry.output->grad.clear();
  loss.node()->ensure_grad()[0] += T(1);

  const auto& entries = tape.entries();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
    if (it->output != loss.node()) it->output->grad.clear();
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template void backward<float>(const Tensor<float>&, Tape<float>&);
template void backward<double>(const Tensor<double>&, Tape<double>&);

}  // namespace mpjudge
