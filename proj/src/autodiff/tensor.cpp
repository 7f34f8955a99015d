#include "toan/autodiff/tensor.hpp"

#include <sstream>

#include "toan/error.hpp"

namespace toan::ad {

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor() : data_(std::make_shared<const std::vector<T>>(1, T(0))) {}

template <typename T>
Tensor<T>::Tensor(Shape shape)
    : shape_(std::move(shape)),
      data_(std::make_shared<const std::vector<T>>(element_count(shape_), T(0))) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
  for (std::size_t d : shape_) {
    if (d == 0) {
      throw Error(ErrorCode::kShapeMismatch,
                  "tensor dimensions must be positive, got " + shape_string(shape_));
    }
  }
  if (element_count(shape_) != values.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "shape " + shape_string(shape_) + " does not hold " +
                    std::to_string(values.size()) + " values");
  }
  data_ = std::make_shared<const std::vector<T>>(std::move(values));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  std::vector<T> values(element_count(shape), value);
  return Tensor(std::move(shape), std::move(values));
}

template <typename T>
T Tensor<T>::item() const {
  if (data_->size() != 1) {
    throw Error(ErrorCode::kShapeMismatch,
                "item() on tensor of shape " + shape_string(shape_));
  }
  return (*data_)[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  Tensor out = *this;
  out.node_.reset();
  return out;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace toan::ad
