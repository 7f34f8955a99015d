#pragma once

#include <array>
#include <cstdint>

#include <json.hpp>

#include "toan/autodiff/tensor.hpp"
#include "toan/backbone.hpp"
#include "toan/comparator.hpp"
#include "toan/gpbp.hpp"
#include "toan/parameters.hpp"
#include "toan/tomm.hpp"

namespace toan {

// Full network: embedding -> (TOMM | class mean) -> (GPBP | concatenation)
// -> comparator. Input standardisation is part of the model so a checkpoint
// carries everything needed to score raw [0, 1] images.
struct ModelConfig {
  int image_size = 84;
  int in_channels = 3;
  int channels = 64;
  int head_channels = 64;
  int groups = 4;
  int bilinear_dim = 1024;
  int comparator_channels = 64;
  int comparator_hidden = 8;
  bool use_tomm = true;
  bool use_gpbp = true;
  std::array<double, 3> input_mean{0.0, 0.0, 0.0};
  std::array<double, 3> input_std{1.0, 1.0, 1.0};

  BackboneConfig backbone() const;
  TommConfig tomm() const;
  GpbpConfig gpbp() const;
  ComparatorConfig comparator() const;
  int feature_size() const { return backbone().out_size(); }
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

template <typename T>
ParameterStore<T> init_parameters(const ModelConfig& config, std::uint64_t seed);

// images [C*K + P, in_channels, s, s]: the support images class-major
// (index t * K + k) followed by the P queries. Returns scores [P, C].
template <typename T>
ad::Tensor<T> forward_scores(const ad::Tensor<T>& images, std::size_t way, std::size_t shot,
                             LayerContext<T>& ctx, const ModelConfig& config);

}  // namespace toan
