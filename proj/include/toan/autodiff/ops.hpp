#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "toan/autodiff/tape.hpp"
#include "toan/autodiff/tensor.hpp"

namespace toan::ad {

enum class Mode { kTrain, kEval };

enum class Activation { kRelu, kLeakyRelu, kSigmoid };

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Running statistics of one batch-norm layer. Updated in place by
// batch_norm() in training mode.
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

// Multiply-add counter bumped by matmul, bmm and conv2d on this thread.
std::uint64_t mac_count();
void reset_mac_count();

// ---- linear algebra -------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Batched product of rank-3 tensors [B, m, k] x [B, k, n]. A batch extent of
// 1 broadcasts; rank-2 operands are treated as a single broadcast matrix.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a = false,
              bool transpose_b = false);

// bmm where output batch i multiplies a[a_index[i]] by b[b_index[i]]. Avoids
// materialising tiled operands for all-pairs products.
template <typename T>
Tensor<T> bmm_gather(const Tensor<T>& a, std::span<const std::size_t> a_index,
                     const Tensor<T>& b, std::span<const std::size_t> b_index,
                     bool transpose_a = false, bool transpose_b = false);

// ---- elementwise ----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

// x has rank >= 2 with channels on axis 1; bias has one entry per channel.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);
template <typename T>
Tensor<T> relu(const Tensor<T>& x) { return activation(x, Activation::kRelu); }
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x) { return activation(x, Activation::kLeakyRelu); }
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) { return activation(x, Activation::kSigmoid); }

// ---- neural-network primitives -------------------------------------------

// input [B, Ci, H, W] (or [Ci, H, W]), kernels [Co, Ci, KH, KW], zero padding.
// `bias` may be null.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels,
                 const Tensor<T>* bias, int stride, int pad);

// input [B, C, ...]: per-channel normalisation over the batch and all
// trailing axes.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma,
                     const Tensor<T>& beta, BatchNormState<T>& state, Mode mode);

// 2x2 window, stride 2, over the last two axes of a rank-3 or rank-4 input.
template <typename T>
Tensor<T> max_pool2(const Tensor<T>& input);

// Softmax over the last axis, with the row maximum subtracted first.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& m);

// ---- shape manipulation ---------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin,
                std::size_t end);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
// Rows of axis 0 picked (with repetition allowed) by `indices`.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::span<const std::size_t> indices);

// ---- reductions -----------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
// Reduces `axis` away.
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis);

}  // namespace toan::ad
