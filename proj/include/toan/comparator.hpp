#pragma once

#include <vector>

#include "toan/autodiff/tensor.hpp"
#include "toan/parameters.hpp"

namespace toan {

// Two conv blocks (3x3 pad1 + BN + ReLU, each followed by a 2x2 max pool
// while the map is at least 2x2) and two fully connected layers, the second
// ending in a sigmoid.
struct ComparatorConfig {
  int in_channels = 1024;  // M, or 2c for the concatenation relation
  int spatial = 19;        // h = w of the relation map
  int channels = 64;
  int hidden = 8;

  bool pools_after(int block) const;  // block in {0, 1}
  int pooled_size() const;
  int flat_features() const { return channels * pooled_size() * pooled_size(); }
};

template <typename T>
void init_comparator(ParameterStore<T>& store, const ComparatorConfig& config, Rng& rng);

// relation [B, in_channels, spatial, spatial] -> scores [B], each in (0, 1).
template <typename T>
ad::Tensor<T> score(const ad::Tensor<T>& relation, LayerContext<T>& ctx,
                    const ComparatorConfig& config);

// Row-wise argmax of a [P, C] score matrix; the lowest index wins ties.
template <typename T>
std::vector<int> predict(const ad::Tensor<T>& scores);

// Mean over all P * C entries of (score - onehot(label))^2.
template <typename T>
ad::Tensor<T> mse_loss(const ad::Tensor<T>& scores, const std::vector<int>& labels);

}  // namespace toan
