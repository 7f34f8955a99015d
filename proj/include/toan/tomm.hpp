#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "toan/autodiff/tensor.hpp"
#include "toan/backbone.hpp"
#include "toan/parameters.hpp"

namespace toan {

// Target-oriented matching: every support feature map is re-expressed in the
// spatial layout of the query through cross attention, then the aligned maps
// of a class are averaged into its prototype.
//
// Cost: the logit matrix of one (support, query) pair takes (hw)^2 * c'
// multiply-adds, and so does applying the attention to a c = c' support map.
// Both are quadratic in the number of spatial positions.
struct TommConfig {
  int channels = 64;       // c
  int head_channels = 64;  // c', must not exceed c
  void validate() const;
};

// d_alpha / d_beta: separate 1x1 conv + BN + LeakyReLU heads, parameters under
// "tomm.alpha" and "tomm.beta".
template <typename T>
void init_tomm(ParameterStore<T>& store, const TommConfig& config, Rng& rng);

template <typename T>
struct HeadProjections {
  ad::Tensor<T> support;  // [S, c', hw]
  ad::Tensor<T> query;    // [Q, c', hw]
};

// support [S, c, h, w], query [Q, c, h, w]. In training mode each head
// normalises over everything it projects in this call.
template <typename T>
HeadProjections<T> project_heads(const ad::Tensor<T>& support, const ad::Tensor<T>& query,
                                 LayerContext<T>& ctx, const TommConfig& config);

// Single-pair form over FeatureMaps; outputs are [c', hw].
template <typename T>
std::pair<ad::Tensor<T>, ad::Tensor<T>> project_heads(const FeatureMap<T>& a,
                                                      const FeatureMap<T>& b,
                                                      LayerContext<T>& ctx,
                                                      const TommConfig& config);

template <typename T>
struct Alignment {
  ad::Tensor<T> aligned;    // [c, hw] or [pairs, c, hw]
  ad::Tensor<T> attention;  // [hw, hw] or [pairs, hw, hw]; rows = query positions
};

// attention = softmax_rows(proj_b^T proj_a / sqrt(c')); column i of the
// aligned map is the attention-weighted mix of all support columns.
template <typename T>
Alignment<T> align(const ad::Tensor<T>& support, const ad::Tensor<T>& proj_support,
                   const ad::Tensor<T>& proj_query);

// Batched align. Pair p uses support[support_index[p]] and
// proj_query[query_index[p]]; proj_support is indexed like support.
template <typename T>
Alignment<T> align_pairs(const ad::Tensor<T>& support, const ad::Tensor<T>& proj_support,
                         const ad::Tensor<T>& proj_query,
                         std::span<const std::size_t> support_index,
                         std::span<const std::size_t> query_index);

template <typename T>
struct Prototype {
  int class_id = 0;
  ad::Tensor<T> values;  // [c, hw]
};

// Mean of the K aligned support maps of one class.
template <typename T>
Prototype<T> build_prototype(const std::vector<ad::Tensor<T>>& aligned, int class_id);

template <typename T>
struct TommOutput {
  ad::Tensor<T> prototypes;  // [Q * C, c, hw]; row q * C + t is class t for query q
  ad::Tensor<T> queries;     // [Q, c, hw], the query features unchanged
};

// support [C * K, c, h, w] ordered class-major (index t * K + k);
// queries [Q, c, h, w].
template <typename T>
TommOutput<T> tomm_forward(const ad::Tensor<T>& support, std::size_t classes, std::size_t shot,
                           const ad::Tensor<T>& queries, LayerContext<T>& ctx,
                           const TommConfig& config);

// Prototypes without alignment: per-class mean of the raw support maps,
// repeated for every query. Same layout as TommOutput.
template <typename T>
TommOutput<T> unaligned_prototypes(const ad::Tensor<T>& support, std::size_t classes,
                                   std::size_t shot, const ad::Tensor<T>& queries);

// Multiply-adds spent on the logit matrix of one pair.
std::uint64_t align_logit_macs(std::size_t positions, std::size_t head_channels);

}  // namespace toan
