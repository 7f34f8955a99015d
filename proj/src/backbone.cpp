#include "toan/backbone.hpp"

#include <string>

#include "toan/autodiff/ops.hpp"
#include "toan/error.hpp"

namespace toan {
namespace {

constexpr int kPads[4] = {1, 1, 0, 1};
constexpr bool kPools[4] = {true, true, false, false};

std::string block_name(int i) { return "backbone.block" + std::to_string(i + 1); }

}  // namespace

int BackboneConfig::out_size() const {
  int s = in_size;
  for (int i = 0; i < 4; ++i) {
    s = s + 2 * kPads[i] - 2;
    if (kPools[i]) s /= 2;
    if (s < 1) {
      throw Error(ErrorCode::kInvalidHyperparameter,
                  "input size " + std::to_string(in_size) + " too small for the backbone");
    }
  }
  return s;
}

template <typename T>
ad::Tensor<T> FeatureMap<T>::flat() const {
  return ad::reshape(values, {channels(), height() * width()});
}

template <typename T>
void init_backbone(ParameterStore<T>& store, const BackboneConfig& config, Rng& rng) {
  config.out_size();
  std::size_t in = static_cast<std::size_t>(config.in_channels);
  for (int i = 0; i < 4; ++i) {
    init_conv_bn(store, block_name(i), in, static_cast<std::size_t>(config.channels), 3, rng);
    in = static_cast<std::size_t>(config.channels);
  }
}

template <typename T>
ad::Tensor<T> embed(const ad::Tensor<T>& images, LayerContext<T>& ctx,
                    const BackboneConfig& config) {
  const auto size = static_cast<std::size_t>(config.in_size);
  if (images.rank() != 4 || images.dim(1) != static_cast<std::size_t>(config.in_channels) ||
      images.dim(2) != size || images.dim(3) != size) {
    throw Error(ErrorCode::kShapeMismatch,
                "backbone expects [B, " + std::to_string(config.in_channels) + ", " +
                    std::to_string(size) + ", " + std::to_string(size) + "], got " +
                    ad::shape_string(images.shape()));
  }
  ad::Tensor<T> x = images;
  for (int i = 0; i < 4; ++i) {
    x = conv_bn_act(ctx, block_name(i), x, kPads[i], ad::Activation::kRelu);
    if (kPools[i]) x = ad::max_pool2(x);
  }
  return x;
}

template struct FeatureMap<float>;
template struct FeatureMap<double>;
template void init_backbone(ParameterStore<float>&, const BackboneConfig&, Rng&);
template void init_backbone(ParameterStore<double>&, const BackboneConfig&, Rng&);
template ad::Tensor<float> embed(const ad::Tensor<float>&, LayerContext<float>&,
                                 const BackboneConfig&);
template ad::Tensor<double> embed(const ad::Tensor<double>&, LayerContext<double>&,
                                  const BackboneConfig&);

}  // namespace toan
