#include "toan/comparator.hpp"

#include <string>

#include "toan/autodiff/ops.hpp"
#include "toan/error.hpp"

namespace toan {

bool ComparatorConfig::pools_after(int block) const {
  int s = spatial;
  for (int i = 0; i < block; ++i) {
    if (s >= 2) s /= 2;
  }
  return s >= 2;
}

int ComparatorConfig::pooled_size() const {
  int s = spatial;
  for (int i = 0; i < 2; ++i) {
    if (s >= 2) s /= 2;
  }
  return s;
}

template <typename T>
void init_comparator(ParameterStore<T>& store, const ComparatorConfig& config, Rng& rng) {
  if (config.in_channels < 1 || config.spatial < 1 || config.channels < 1 || config.hidden < 1) {
    throw Error(ErrorCode::kInvalidHyperparameter, "comparator sizes must be positive");
  }
  const auto ch = static_cast<std::size_t>(config.channels);
  init_conv_bn(store, "comparator.block1", static_cast<std::size_t>(config.in_channels), ch, 3,
               rng);
  init_conv_bn(store, "comparator.block2", ch, ch, 3, rng);
  init_linear(store, "comparator.fc1", static_cast<std::size_t>(config.flat_features()),
              static_cast<std::size_t>(config.hidden), rng);
  init_linear(store, "comparator.fc2", static_cast<std::size_t>(config.hidden), 1, rng);
}

template <typename T>
ad::Tensor<T> score(const ad::Tensor<T>& relation, LayerContext<T>& ctx,
                    const ComparatorConfig& config) {
  const auto s = static_cast<std::size_t>(config.spatial);
  if (relation.rank() != 4 || relation.dim(1) != static_cast<std::size_t>(config.in_channels) ||
      relation.dim(2) != s || relation.dim(3) != s) {
    throw Error(ErrorCode::kShapeMismatch,
                "comparator expects [B, " + std::to_string(config.in_channels) + ", " +
                    std::to_string(s) + ", " + std::to_string(s) + "], got " +
                    ad::shape_string(relation.shape()));
  }
  ad::Tensor<T> x = relation;
  for (int block = 0; block < 2; ++block) {
    x = conv_bn_act(ctx, "comparator.block" + std::to_string(block + 1), x, 1,
                    ad::Activation::kRelu);
    if (config.pools_after(block)) x = ad::max_pool2(x);
  }
  const std::size_t batch = x.dim(0);
  x = ad::reshape(x, {batch, x.size() / batch});
  x = ad::relu(linear(ctx, "comparator.fc1", x));
  x = ad::sigmoid(linear(ctx, "comparator.fc2", x));
  return ad::reshape(x, {batch});
}

template <typename T>
std::vector<int> predict(const ad::Tensor<T>& scores) {
  if (scores.rank() != 2) {
    throw Error(ErrorCode::kShapeMismatch, "scores must be [P, C]");
  }
  const std::size_t rows = scores.dim(0), cols = scores.dim(1);
  std::vector<int> out(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      if (scores[r * cols + c] > scores[r * cols + best]) best = c;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

template <typename T>
ad::Tensor<T> mse_loss(const ad::Tensor<T>& scores, const std::vector<int>& labels) {
  if (scores.rank() != 2 || labels.size() != scores.dim(0)) {
    throw Error(ErrorCode::kShapeMismatch,
                "mse_loss: scores " + ad::shape_string(scores.shape()) + " for " +
                    std::to_string(labels.size()) + " labels");
  }
  const std::size_t cols = scores.dim(1);
  std::vector<T> target(scores.size(), T(0));
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= cols) {
      throw Error(ErrorCode::kLabelOutOfRange,
                  "label " + std::to_string(labels[r]) + " outside [0, " +
                      std::to_string(cols) + ")");
    }
    target[r * cols + static_cast<std::size_t>(labels[r])] = T(1);
  }
  ad::Tensor<T> diff = ad::sub(scores, ad::Tensor<T>(scores.shape(), std::move(target)));
  return ad::mean(ad::hadamard(diff, diff));
}

#define TOAN_INSTANTIATE(T)                                                               \
  template void init_comparator(ParameterStore<T>&, const ComparatorConfig&, Rng&);       \
  template ad::Tensor<T> score(const ad::Tensor<T>&, LayerContext<T>&,                    \
                               const ComparatorConfig&);                                  \
  template std::vector<int> predict(const ad::Tensor<T>&);                                \
  template ad::Tensor<T> mse_loss(const ad::Tensor<T>&, const std::vector<int>&);

TOAN_INSTANTIATE(float)
TOAN_INSTANTIATE(double)

#undef TOAN_INSTANTIATE

}  // namespace toan
