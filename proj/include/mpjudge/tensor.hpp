#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mpjudge {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  bool leaf = true;

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor handle.
///
/// Copies share storage, so a parameter held by a model and the same
/// parameter referenced by a recorded operation are one object. Use
/// clone() for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }
  T item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  // Gradient buffer; zeros when no backward pass has reached this tensor.
  std::vector<T> grad() const;
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad();

  Tensor clone() const;
  // Reinterpret extents; shares nothing with the source (values copied).
  Tensor reshaped(Shape shape) const;

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

template <typename T>
class TapeScope;

/// Ordered record of differentiable operations executed while the tape
/// was active. Entries are appended in execution order, which is a
/// topological order of the computation graph.
template <typename T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<TensorNode<T>>;
  struct Entry {
    NodePtr output;
    std::vector<NodePtr> inputs;
    std::function<void()> backward;
  };

  void record(Entry entry) { entries_.push_back(std::move(entry)); }
  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  // Tape that operations on the calling thread currently record onto.
  static Tape* active();

 private:
  friend class TapeScope<T>;
  static Tape*& active_slot();
  std::vector<Entry> entries_;
};

// Makes a tape active on this thread for the lifetime of the scope.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active_slot()) {
    Tape<T>::active_slot() = &tape;
  }
  ~TapeScope() { Tape<T>::active_slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Reverse pass from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate gradients are reset at the start of each call.
template <typename T>
void backward(const Tensor<T>& loss, Tape<T>& tape);

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace mpjudge
