#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace toan::ad {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

// Handle of a value recorded on a tape. The uid identifies the tape instance
// so a tensor can never be fed to a tape it was not produced by.
struct NodeRef {
  std::uint64_t tape_uid = 0;
  std::size_t id = 0;
};

template <typename T>
class Tape;

// Dense row-major array. The payload is shared and immutable, so copying a
// Tensor is cheap and tensors can be handed between threads freely.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor();
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value);
  static Tensor full(Shape shape, T value);
  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_->size(); }

  std::span<const T> values() const { return {data_->data(), data_->size()}; }
  const T* data() const { return data_->data(); }
  T operator[](std::size_t i) const { return (*data_)[i]; }
  T item() const;
  std::vector<T> to_vector() const { return *data_; }

  // True once the tensor is recorded on a tape (either as a watched leaf or
  // as the output of an op with a recorded input).
  bool requires_grad() const { return node_.has_value(); }
  const std::optional<NodeRef>& node() const { return node_; }

  // Same values, no tape participation.
  Tensor detach() const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_->begin(), data_->end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool same_values(const Tensor& other) const {
    return shape_ == other.shape_ && *data_ == *other.data_;
  }

 private:
  friend class Tape<T>;

  Shape shape_;
  std::shared_ptr<const std::vector<T>> data_;
  std::optional<NodeRef> node_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace toan::ad
