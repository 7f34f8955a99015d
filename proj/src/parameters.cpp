#include "toan/parameters.hpp"

#include <cmath>

#include "toan/error.hpp"

namespace toan {

template <typename T>
void ParameterStore<T>::add(const std::string& name, ad::Tensor<T> value) {
  if (params_.count(name)) {
    throw Error(ErrorCode::kConfigMismatch, "duplicate parameter '" + name + "'");
  }
  params_.emplace(name, value.detach());
}

template <typename T>
void ParameterStore<T>::add_batch_norm(const std::string& name, std::size_t channels) {
  add(name + ".gamma", ad::Tensor<T>::ones({channels}));
  add(name + ".beta", ad::Tensor<T>::zeros({channels}));
  bn_.insert_or_assign(name, ad::BatchNormState<T>(channels));
}

template <typename T>
const ad::Tensor<T>& ParameterStore<T>::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw Error(ErrorCode::kConfigMismatch, "unknown parameter '" + name + "'");
  }
  return it->second;
}

template <typename T>
void ParameterStore<T>::set(const std::string& name, ad::Tensor<T> value) {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw Error(ErrorCode::kConfigMismatch, "unknown parameter '" + name + "'");
  }
  if (it->second.shape() != value.shape()) {
    throw Error(ErrorCode::kShapeMismatch,
                "parameter '" + name + "' is " + ad::shape_string(it->second.shape()) +
                    ", got " + ad::shape_string(value.shape()));
  }
  it->second = value.detach();
}

template <typename T>
ad::BatchNormState<T>& ParameterStore<T>::batch_norm(const std::string& name) {
  auto it = bn_.find(name);
  if (it == bn_.end()) {
    throw Error(ErrorCode::kConfigMismatch, "unknown batch-norm layer '" + name + "'");
  }
  return it->second;
}

template <typename T>
std::size_t ParameterStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.size();
  return n;
}

template <typename T>
bool ParameterStore<T>::identical(const ParameterStore& other) const {
  if (params_.size() != other.params_.size() || bn_.size() != other.bn_.size() ||
      adam_.size() != other.adam_.size() || adam_step_ != other.adam_step_) {
    return false;
  }
  for (const auto& [name, t] : params_) {
    auto it = other.params_.find(name);
    if (it == other.params_.end() || !t.same_values(it->second)) return false;
  }
  for (const auto& [name, s] : bn_) {
    auto it = other.bn_.find(name);
    if (it == other.bn_.end() || s.running_mean != it->second.running_mean ||
        s.running_var != it->second.running_var) {
      return false;
    }
  }
  for (const auto& [name, slot] : adam_) {
    auto it = other.adam_.find(name);
    if (it == other.adam_.end() || slot.m != it->second.m || slot.v != it->second.v) {
      return false;
    }
  }
  return true;
}

template <typename T>
LayerContext<T>::LayerContext(ParameterStore<T>& store, ad::Mode mode, ad::Tape<T>* tape)
    : store_(&store), mode_(mode) {
  for (const auto& [name, value] : store.parameters()) {
    bound_.emplace(name, tape ? tape->watch(value) : value);
  }
}

template <typename T>
const ad::Tensor<T>& LayerContext<T>::param(const std::string& name) const {
  auto it = bound_.find(name);
  if (it == bound_.end()) {
    throw Error(ErrorCode::kConfigMismatch, "unknown parameter '" + name + "'");
  }
  return it->second;
}

template <typename T>
std::map<std::string, ad::Tensor<T>> LayerContext<T>::named_gradients(
    const ad::GradientMap<T>& grads) const {
  std::map<std::string, ad::Tensor<T>> out;
  for (const auto& [name, bound] : bound_) {
    if (grads.contains(bound)) out.emplace(name, grads.at(bound));
  }
  return out;
}

template <typename T>
ad::Tensor<T> he_uniform(ad::Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> values(ad::element_count(shape));
  for (T& v : values) v = static_cast<T>(dist(rng));
  return ad::Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
ad::Tensor<T> conv_bn_act(LayerContext<T>& ctx, const std::string& prefix, const ad::Tensor<T>& x,
                          int pad, ad::Activation act, bool with_bias) {
  const ad::Tensor<T>& w = ctx.param(prefix + ".conv.weight");
  const ad::Tensor<T>* b = with_bias ? &ctx.param(prefix + ".conv.bias") : nullptr;
  ad::Tensor<T> y = ad::conv2d(x, w, b, 1, pad);
  y = ad::batch_norm(y, ctx.param(prefix + ".bn.gamma"), ctx.param(prefix + ".bn.beta"),
                     ctx.batch_norm(prefix + ".bn"), ctx.mode());
  return ad::activation(y, act);
}

template <typename T>
void init_conv_bn(ParameterStore<T>& store, const std::string& prefix, std::size_t in_channels,
                  std::size_t out_channels, std::size_t kernel, Rng& rng, bool with_bias) {
  store.add(prefix + ".conv.weight",
            he_uniform<T>({out_channels, in_channels, kernel, kernel},
                          in_channels * kernel * kernel, rng));
  if (with_bias) store.add(prefix + ".conv.bias", ad::Tensor<T>::zeros({out_channels}));
  store.add_batch_norm(prefix + ".bn", out_channels);
}

template <typename T>
ad::Tensor<T> linear(LayerContext<T>& ctx, const std::string& prefix, const ad::Tensor<T>& x) {
  ad::Tensor<T> y = ad::matmul(x, ctx.param(prefix + ".weight"));
  return ad::add_channel_bias(y, ctx.param(prefix + ".bias"));
}

template <typename T>
void init_linear(ParameterStore<T>& store, const std::string& prefix, std::size_t in,
                 std::size_t out, Rng& rng) {
  store.add(prefix + ".weight", he_uniform<T>({in, out}, in, rng));
  store.add(prefix + ".bias", ad::Tensor<T>::zeros({out}));
}

#define TOAN_INSTANTIATE(T)                                                                 \
  template class ParameterStore<T>;                                                         \
  template class LayerContext<T>;                                                           \
  template ad::Tensor<T> he_uniform<T>(ad::Shape, std::size_t, Rng&);                       \
  template ad::Tensor<T> conv_bn_act(LayerContext<T>&, const std::string&,                  \
                                     const ad::Tensor<T>&, int, ad::Activation, bool);      \
  template void init_conv_bn(ParameterStore<T>&, const std::string&, std::size_t,           \
                             std::size_t, std::size_t, Rng&, bool);                         \
  template ad::Tensor<T> linear(LayerContext<T>&, const std::string&, const ad::Tensor<T>&); \
  template void init_linear(ParameterStore<T>&, const std::string&, std::size_t,            \
                            std::size_t, Rng&);

TOAN_INSTANTIATE(float)
TOAN_INSTANTIATE(double)

#undef TOAN_INSTANTIATE

}  // namespace toan
