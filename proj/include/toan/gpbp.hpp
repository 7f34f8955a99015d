#pragma once

#include <span>
#include <utility>
#include <vector>

#include "toan/autodiff/tensor.hpp"
#include "toan/parameters.hpp"

namespace toan {

// Group pair-wise bilinear pooling. Channels are split into N contiguous
// groups; every group k owns M/N rank-one projections W_kp = U_kp V_kp^T and
// produces z_p = (U_kp^T a_k) ⊙ (V_kp^T b_k) at every spatial position.
struct GpbpConfig {
  int channels = 64;        // c
  int groups = 4;           // N
  int bilinear_dim = 1024;  // M
  // Throws kIndivisibleGroups unless N | c and N | M.
  void validate() const;
  std::size_t group_channels() const { return static_cast<std::size_t>(channels / groups); }
  std::size_t group_dim() const { return static_cast<std::size_t>(bilinear_dim / groups); }
};

template <typename T>
struct GroupedFeature {
  std::vector<ad::Tensor<T>> groups;  // N tensors [c/N, hw]
  ad::Tensor<T> concatenate() const;
};

template <typename T>
GroupedFeature<T> group_channels(const ad::Tensor<T>& feature, int groups);

// Position i holds (a^i)^T w b^i. Plain loops; this is the reference form the
// factorised path is checked against and is never used in training.
template <typename T>
ad::Tensor<T> bilinear_full(const ad::Tensor<T>& a, const ad::Tensor<T>& b,
                            const ad::Tensor<T>& w);

// Z_k = (U_k^T a_k) ⊙ (V_k^T b_k): a_k, b_k [c/N, hw]; u, v [c/N, M/N];
// result [M/N, hw].
template <typename T>
ad::Tensor<T> bilinear_lowrank(const ad::Tensor<T>& a, const ad::Tensor<T>& b,
                               const ad::Tensor<T>& u, const ad::Tensor<T>& v);

template <typename T>
struct LowRankProjection {
  std::vector<ad::Tensor<T>> u;  // per group [c/N, M/N]; column p is U_kp
  std::vector<ad::Tensor<T>> v;
};

template <typename T>
struct BilinearRelation {
  ad::Tensor<T> values;  // [M, hw] = [Z_1; ...; Z_N]
  std::vector<std::pair<std::size_t, std::size_t>> group_slices;  // row ranges of Z_k
};

// Factorised bilinear relation of one (prototype, query) pair, exactly the
// grouped low-rank form with no normalisation.
template <typename T>
BilinearRelation<T> gpbp_forward(const ad::Tensor<T>& prototype, const ad::Tensor<T>& query,
                                 const LowRankProjection<T>& projections, int groups,
                                 int bilinear_dim);

// Projection tensors "gpbp.u.weight" / "gpbp.v.weight" of shape [N, c/N, M/N]
// plus batch norms "gpbp.u.bn" / "gpbp.v.bn" over the M projected channels.
template <typename T>
void init_gpbp(ParameterStore<T>& store, const GpbpConfig& config, Rng& rng);

// Projections held by a store, split per group.
template <typename T>
LowRankProjection<T> projections_from(const LayerContext<T>& ctx, const GpbpConfig& config);

// Training-path relation for a batch of pairs. Each side goes through the
// grouped 1x1 projection, BN and ReLU before the Hadamard product.
// prototypes [B, c, hw]; queries [Q, c, hw]; pair b uses query query_index[b].
// Returns [B, M, hw].
template <typename T>
ad::Tensor<T> gpbp_relation(const ad::Tensor<T>& prototypes, const ad::Tensor<T>& queries,
                            std::span<const std::size_t> query_index, LayerContext<T>& ctx,
                            const GpbpConfig& config);

}  // namespace toan
