#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "toan/autodiff/tensor.hpp"

namespace toan::ad {

// Gradients of a scalar loss with respect to every watched leaf of a tape.
template <typename T>
class GradientMap {
 public:
  void insert(std::size_t node_id, Tensor<T> grad) {
    grads_.insert_or_assign(node_id, std::move(grad));
  }
  bool contains(const Tensor<T>& leaf) const;
  // Throws kMissingGradient when `leaf` was not watched on the tape.
  const Tensor<T>& at(const Tensor<T>& leaf) const;
  const Tensor<T>& at(std::size_t node_id) const;
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<std::size_t, Tensor<T>> grads_;
};

// Records differentiable ops in execution order. Constructing a tape makes it
// the active tape of the calling thread until it is destroyed; tapes nest.
// A tape supports exactly one backward pass, after which it is cleared and
// any further use of tensors recorded on it raises kTapeReuse.
template <typename T>
class Tape {
 public:
  // grad_in[i] is null when input i is not recorded on the tape. Kernels
  // accumulate (+=) into the non-null buffers.
  using BackwardFn =
      std::function<void(std::span<const T> grad_out, std::span<T* const> grad_in)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers `value` as a differentiable leaf.
  Tensor<T> watch(const Tensor<T>& value);

  GradientMap<T> backward(const Tensor<T>& loss);

  std::size_t op_count() const { return op_count_; }
  std::size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  std::uint64_t uid() const { return uid_; }

  // Innermost live tape of this thread, or nullptr.
  static Tape* active();

  // Used by op kernels: attaches `output` to the tape owning the recorded
  // inputs. Returns `output` untouched when no input is recorded.
  static Tensor<T> record(Tensor<T> output,
                          std::initializer_list<const Tensor<T>*> inputs,
                          BackwardFn backward);
  static Tensor<T> record(Tensor<T> output,
                          const std::vector<const Tensor<T>*>& inputs,
                          BackwardFn backward);

 private:
  struct Node {
    std::size_t numel = 0;
    Shape shape;
    std::vector<std::optional<std::size_t>> inputs;
    BackwardFn backward;
    bool leaf = false;
  };

  static Tape* find(std::uint64_t uid);
  std::size_t add_node(Node node);

  std::uint64_t uid_;
  Tape* previous_;
  std::vector<Node> nodes_;
  std::size_t op_count_ = 0;
  bool consumed_ = false;
};

extern template class GradientMap<float>;
extern template class GradientMap<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace toan::ad
