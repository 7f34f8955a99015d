#include "toan/autodiff/tape.hpp"

#include <atomic>

#include "toan/error.hpp"

namespace toan::ad {
namespace {

std::atomic<std::uint64_t> next_tape_uid{1};

template <typename T>
thread_local Tape<T>* innermost_tape = nullptr;

}  // namespace

template <typename T>
bool GradientMap<T>::contains(const Tensor<T>& leaf) const {
  return leaf.node() && grads_.count(leaf.node()->id) > 0;
}

template <typename T>
const Tensor<T>& GradientMap<T>::at(const Tensor<T>& leaf) const {
  if (!leaf.node()) {
    throw Error(ErrorCode::kMissingGradient, "tensor was never watched on a tape");
  }
  return at(leaf.node()->id);
}

template <typename T>
const Tensor<T>& GradientMap<T>::at(std::size_t node_id) const {
  auto it = grads_.find(node_id);
  if (it == grads_.end()) {
    throw Error(ErrorCode::kMissingGradient,
                "no gradient for node " + std::to_string(node_id));
  }
  return it->second;
}

template <typename T>
Tape<T>::Tape() : uid_(next_tape_uid.fetch_add(1)), previous_(innermost_tape<T>) {
  innermost_tape<T> = this;
}

template <typename T>
Tape<T>::~Tape() {
  // Tapes are scoped objects; they are destroyed in reverse creation order.
  if (innermost_tape<T> == this) innermost_tape<T> = previous_;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return innermost_tape<T>;
}

template <typename T>
Tape<T>* Tape<T>::find(std::uint64_t uid) {
  for (Tape* t = innermost_tape<T>; t != nullptr; t = t->previous_) {
    if (t->uid_ == uid) return t;
  }
  return nullptr;
}

template <typename T>
std::size_t Tape<T>::add_node(Node node) {
  if (consumed_) {
    throw Error(ErrorCode::kTapeReuse, "tape already ran its backward pass");
  }
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

template <typename T>
Tensor<T> Tape<T>::watch(const Tensor<T>& value) {
  Node node;
  node.numel = value.size();
  node.shape = value.shape();
  node.leaf = true;
  Tensor<T> out = value.detach();
  out.node_ = NodeRef{uid_, add_node(std::move(node))};
  return out;
}

template <typename T>
Tensor<T> Tape<T>::record(Tensor<T> output,
                          std::initializer_list<const Tensor<T>*> inputs,
                          BackwardFn backward) {
  return record(std::move(output), std::vector<const Tensor<T>*>(inputs),
                std::move(backward));
}

template <typename T>
Tensor<T> Tape<T>::record(Tensor<T> output,
                          const std::vector<const Tensor<T>*>& inputs,
                          BackwardFn backward) {
  std::optional<std::uint64_t> uid;
  for (const Tensor<T>* in : inputs) {
    if (!in->node()) continue;
    if (uid && *uid != in->node()->tape_uid) {
      throw Error(ErrorCode::kTapeReuse, "op mixes tensors from different tapes");
    }
    uid = in->node()->tape_uid;
  }
  if (!uid) return output;

  Tape* tape = find(*uid);
  if (tape == nullptr || tape->consumed_) {
    throw Error(ErrorCode::kTapeReuse,
                "input belongs to a tape that is no longer recording");
  }
  Node node;
  node.numel = output.size();
  node.shape = output.shape();
  node.backward = std::move(backward);
  node.inputs.reserve(inputs.size());
  for (const Tensor<T>* in : inputs) {
    if (in->node()) {
      node.inputs.push_back(in->node()->id);
    } else {
      node.inputs.push_back(std::nullopt);
    }
  }
  output.node_ = NodeRef{tape->uid_, tape->add_node(std::move(node))};
  ++tape->op_count_;
  return output;
}

template <typename T>
GradientMap<T> Tape<T>::backward(const Tensor<T>& loss) {
  if (consumed_) {
    throw Error(ErrorCode::kTapeReuse, "backward already ran on this tape");
  }
  if (!loss.node() || loss.node()->tape_uid != uid_) {
    throw Error(ErrorCode::kTapeReuse, "loss was not produced by this tape");
  }
  if (loss.size() != 1) {
    throw Error(ErrorCode::kNonScalarLoss,
                "loss has shape " + shape_string(loss.shape()));
  }

  std::vector<std::vector<T>> grads(nodes_.size());
  const std::size_t root = loss.node()->id;
  grads[root].assign(1, T(1));

  std::vector<T*> input_ptrs;
  for (std::size_t id = root + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (node.leaf || grads[id].empty()) continue;
    input_ptrs.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      if (!node.inputs[i]) continue;
      std::vector<T>& g = grads[*node.inputs[i]];
      if (g.empty()) g.assign(nodes_[*node.inputs[i]].numel, T(0));
      input_ptrs[i] = g.data();
    }
    node.backward(std::span<const T>(grads[id]), std::span<T* const>(input_ptrs));
    // Only leaf gradients survive the pass.
    std::vector<T>().swap(grads[id]);
    node.backward = nullptr;
  }

  GradientMap<T> result;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (!nodes_[id].leaf) continue;
    std::vector<T> g = std::move(grads[id]);
    if (g.empty()) g.assign(nodes_[id].numel, T(0));
    result.insert(id, Tensor<T>(nodes_[id].shape, std::move(g)));
  }

  nodes_.clear();
  nodes_.shrink_to_fit();
  consumed_ = true;
  return result;
}

template class GradientMap<float>;
template class GradientMap<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace toan::ad
