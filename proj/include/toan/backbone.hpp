#pragma once

#include "toan/autodiff/tensor.hpp"
#include "toan/parameters.hpp"

namespace toan {

// ConvNet-64 embedding. Block schedule (padding, pooling):
//   block1 conv3x3 pad1 + BN + ReLU + maxpool2   (84 -> 42)
//   block2 conv3x3 pad1 + BN + ReLU + maxpool2   (42 -> 21)
//   block3 conv3x3 pad0 + BN + ReLU              (21 -> 19)
//   block4 conv3x3 pad1 + BN + ReLU              (19 -> 19)
struct BackboneConfig {
  int in_size = 84;
  int in_channels = 3;
  int channels = 64;

  // Spatial extent of the embedding; throws kInvalidHyperparameter when the
  // schedule cannot be applied to `in_size`.
  int out_size() const;
};

// Embedded image, c x h x w, with the c x (h*w) view used by attention and
// bilinear pooling.
template <typename T>
struct FeatureMap {
  ad::Tensor<T> values;  // [c, h, w]

  std::size_t channels() const { return values.dim(0); }
  std::size_t height() const { return values.dim(1); }
  std::size_t width() const { return values.dim(2); }
  ad::Tensor<T> flat() const;
};

template <typename T>
void init_backbone(ParameterStore<T>& store, const BackboneConfig& config, Rng& rng);

// images [B, in_channels, in_size, in_size] -> [B, channels, s, s].
template <typename T>
ad::Tensor<T> embed(const ad::Tensor<T>& images, LayerContext<T>& ctx,
                    const BackboneConfig& config);

}  // namespace toan
