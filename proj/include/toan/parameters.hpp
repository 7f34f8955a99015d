#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "toan/autodiff/ops.hpp"
#include "toan/autodiff/tape.hpp"
#include "toan/autodiff/tensor.hpp"

namespace toan {

using Rng = std::mt19937_64;

template <typename T>
struct AdamSlot {
  std::vector<T> m;
  std::vector<T> v;
};

// Named learnable tensors of all three sub-networks, the running statistics
// of every batch-norm layer, and the optimiser state. Names are unique and a
// parameter keeps its shape for the lifetime of the store.
template <typename T>
class ParameterStore {
 public:
  void add(const std::string& name, ad::Tensor<T> value);
  void add_batch_norm(const std::string& name, std::size_t channels);

  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  const ad::Tensor<T>& get(const std::string& name) const;
  // Replaces the values; the shape must not change.
  void set(const std::string& name, ad::Tensor<T> value);

  const std::map<std::string, ad::Tensor<T>>& parameters() const { return params_; }
  std::map<std::string, ad::BatchNormState<T>>& batch_norms() { return bn_; }
  const std::map<std::string, ad::BatchNormState<T>>& batch_norms() const { return bn_; }
  ad::BatchNormState<T>& batch_norm(const std::string& name);

  std::map<std::string, AdamSlot<T>>& adam() { return adam_; }
  const std::map<std::string, AdamSlot<T>>& adam() const { return adam_; }
  std::uint64_t adam_step() const { return adam_step_; }
  void set_adam_step(std::uint64_t step) { adam_step_ = step; }

  std::size_t parameter_count() const;

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& [name, t] : params_) out.add(name, t.template cast<U>());
    for (const auto& [name, s] : bn_) {
      auto& dst = out.batch_norms()[name];
      dst.running_mean.assign(s.running_mean.begin(), s.running_mean.end());
      dst.running_var.assign(s.running_var.begin(), s.running_var.end());
    }
    for (const auto& [name, slot] : adam_) {
      auto& dst = out.adam()[name];
      dst.m.assign(slot.m.begin(), slot.m.end());
      dst.v.assign(slot.v.begin(), slot.v.end());
    }
    out.set_adam_step(adam_step_);
    return out;
  }

  // Exact equality of parameters, running statistics and optimiser state.
  bool identical(const ParameterStore& other) const;

 private:
  std::map<std::string, ad::Tensor<T>> params_;
  std::map<std::string, ad::BatchNormState<T>> bn_;
  std::map<std::string, AdamSlot<T>> adam_;
  std::uint64_t adam_step_ = 0;
};

// What a forward pass sees: every parameter (watched on `tape` when one is
// given), the batch-norm states, and the train/eval mode.
template <typename T>
class LayerContext {
 public:
  LayerContext(ParameterStore<T>& store, ad::Mode mode, ad::Tape<T>* tape = nullptr);

  const ad::Tensor<T>& param(const std::string& name) const;
  ad::BatchNormState<T>& batch_norm(const std::string& name) { return store_->batch_norm(name); }
  ad::Mode mode() const { return mode_; }
  ParameterStore<T>& store() { return *store_; }

  // Maps tape gradients back onto parameter names.
  std::map<std::string, ad::Tensor<T>> named_gradients(const ad::GradientMap<T>& grads) const;

 private:
  ParameterStore<T>* store_;
  ad::Mode mode_;
  std::map<std::string, ad::Tensor<T>> bound_;
};

// He-uniform initialisation: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
template <typename T>
ad::Tensor<T> he_uniform(ad::Shape shape, std::size_t fan_in, Rng& rng);

// conv -> batch norm -> activation, parameters under `prefix`. A conv bias
// ahead of batch norm is cancelled by the mean subtraction, hence off by default.
template <typename T>
ad::Tensor<T> conv_bn_act(LayerContext<T>& ctx, const std::string& prefix, const ad::Tensor<T>& x,
                          int pad, ad::Activation act, bool with_bias = false);

template <typename T>
void init_conv_bn(ParameterStore<T>& store, const std::string& prefix, std::size_t in_channels,
                  std::size_t out_channels, std::size_t kernel, Rng& rng, bool with_bias = false);

// x [B, in] -> [B, out].
template <typename T>
ad::Tensor<T> linear(LayerContext<T>& ctx, const std::string& prefix, const ad::Tensor<T>& x);

template <typename T>
void init_linear(ParameterStore<T>& store, const std::string& prefix, std::size_t in,
                 std::size_t out, Rng& rng);

}  // namespace toan
