#include "toan/model.hpp"

#include "toan/autodiff/ops.hpp"
#include "toan/error.hpp"

namespace toan {

BackboneConfig ModelConfig::backbone() const { return {image_size, in_channels, channels}; }

TommConfig ModelConfig::tomm() const { return {channels, head_channels}; }

GpbpConfig ModelConfig::gpbp() const { return {channels, groups, bilinear_dim}; }

ComparatorConfig ModelConfig::comparator() const {
  ComparatorConfig c;
  c.in_channels = use_gpbp ? bilinear_dim : 2 * channels;
  c.spatial = feature_size();
  c.channels = comparator_channels;
  c.hidden = comparator_hidden;
  return c;
}

void ModelConfig::validate() const {
  if (in_channels < 1 || channels < 1 || comparator_channels < 1 || comparator_hidden < 1) {
    throw Error(ErrorCode::kInvalidHyperparameter, "model widths must be positive");
  }
  backbone().out_size();
  if (use_tomm) tomm().validate();
  if (use_gpbp) gpbp().validate();
  for (double s : input_std) {
    if (!(s > 0)) throw Error(ErrorCode::kInvalidHyperparameter, "input_std must be positive");
  }
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"image_size", c.image_size},
          {"in_channels", c.in_channels},
          {"channels", c.channels},
          {"head_channels", c.head_channels},
          {"groups", c.groups},
          {"bilinear_dim", c.bilinear_dim},
          {"comparator_channels", c.comparator_channels},
          {"comparator_hidden", c.comparator_hidden},
          {"use_tomm", c.use_tomm},
          {"use_gpbp", c.use_gpbp},
          {"input_mean", c.input_mean},
          {"input_std", c.input_std}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.image_size = j.value("image_size", c.image_size);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.channels = j.value("channels", c.channels);
    c.head_channels = j.value("head_channels", c.head_channels);
    c.groups = j.value("groups", c.groups);
    c.bilinear_dim = j.value("bilinear_dim", c.bilinear_dim);
    c.comparator_channels = j.value("comparator_channels", c.comparator_channels);
    c.comparator_hidden = j.value("comparator_hidden", c.comparator_hidden);
    c.use_tomm = j.value("use_tomm", c.use_tomm);
    c.use_gpbp = j.value("use_gpbp", c.use_gpbp);
    c.input_mean = j.value("input_mean", c.input_mean);
    c.input_std = j.value("input_std", c.input_std);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfigParseError, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

template <typename T>
ParameterStore<T> init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ParameterStore<T> store;
  init_backbone(store, config.backbone(), rng);
  if (config.use_tomm) init_tomm(store, config.tomm(), rng);
  if (config.use_gpbp) init_gpbp(store, config.gpbp(), rng);
  init_comparator(store, config.comparator(), rng);
  return store;
}

template <typename T>
ad::Tensor<T> forward_scores(const ad::Tensor<T>& images, std::size_t way, std::size_t shot,
                             LayerContext<T>& ctx, const ModelConfig& config) {
  const std::size_t n_support = way * shot;
  if (way == 0 || shot == 0) {
    throw Error(ErrorCode::kEmptySupportSet, "episode needs at least one class and one shot");
  }
  if (images.rank() != 4 || images.dim(0) <= n_support) {
    throw Error(ErrorCode::kShapeMismatch,
                "episode batch " + ad::shape_string(images.shape()) + " for " +
                    std::to_string(way) + "-way " + std::to_string(shot) + "-shot");
  }
  const std::size_t n_query = images.dim(0) - n_support;
  ad::Tensor<T> features = embed(images, ctx, config.backbone());
  ad::Tensor<T> support = ad::slice(features, 0, 0, n_support);
  ad::Tensor<T> queries = ad::slice(features, 0, n_support, images.dim(0));

  TommOutput<T> matched =
      config.use_tomm ? tomm_forward(support, way, shot, queries, ctx, config.tomm())
                      : unaligned_prototypes(support, way, shot, queries);

  std::vector<std::size_t> query_of_pair(n_query * way);
  for (std::size_t q = 0; q < n_query; ++q)
    for (std::size_t t = 0; t < way; ++t) query_of_pair[q * way + t] = q;
  const std::span<const std::size_t> pair_index(query_of_pair);

  ad::Tensor<T> relation =
      config.use_gpbp
          ? gpbp_relation(matched.prototypes, matched.queries, pair_index, ctx, config.gpbp())
          : ad::concat(std::vector<ad::Tensor<T>>{matched.prototypes,
                                                  ad::gather(matched.queries, pair_index)},
                       1);
  const auto s = static_cast<std::size_t>(config.feature_size());
  relation = ad::reshape(relation, {relation.dim(0), relation.dim(1), s, s});
  ad::Tensor<T> scores = score(relation, ctx, config.comparator());
  return ad::reshape(scores, {n_query, way});
}

template ParameterStore<float> init_parameters(const ModelConfig&, std::uint64_t);
template ParameterStore<double> init_parameters(const ModelConfig&, std::uint64_t);
template ad::Tensor<float> forward_scores(const ad::Tensor<float>&, std::size_t, std::size_t,
                                          LayerContext<float>&, const ModelConfig&);
template ad::Tensor<double> forward_scores(const ad::Tensor<double>&, std::size_t, std::size_t,
                                           LayerContext<double>&, const ModelConfig&);

}  // namespace toan
