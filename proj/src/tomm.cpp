#include "toan/tomm.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "toan/autodiff/ops.hpp"
#include "toan/error.hpp"

namespace toan {

void TommConfig::validate() const {
  if (channels < 1 || head_channels < 1 || head_channels > channels) {
    throw Error(ErrorCode::kInvalidHyperparameter,
                "head channels must lie in [1, c]; got c'=" + std::to_string(head_channels) +
                    " for c=" + std::to_string(channels));
  }
}

template <typename T>
void init_tomm(ParameterStore<T>& store, const TommConfig& config, Rng& rng) {
  config.validate();
  const auto c = static_cast<std::size_t>(config.channels);
  const auto cp = static_cast<std::size_t>(config.head_channels);
  init_conv_bn(store, "tomm.alpha", c, cp, 1, rng);
  init_conv_bn(store, "tomm.beta", c, cp, 1, rng);
}

namespace {

template <typename T>
ad::Tensor<T> run_head(const std::string& prefix, const ad::Tensor<T>& x, LayerContext<T>& ctx) {
  ad::Tensor<T> y = conv_bn_act(ctx, prefix, x, 0, ad::Activation::kLeakyRelu);
  return ad::reshape(y, {y.dim(0), y.dim(1), y.dim(2) * y.dim(3)});
}

}  // namespace

template <typename T>
HeadProjections<T> project_heads(const ad::Tensor<T>& support, const ad::Tensor<T>& query,
                                 LayerContext<T>& ctx, const TommConfig& config) {
  const auto c = static_cast<std::size_t>(config.channels);
  if (support.rank() != 4 || query.rank() != 4 || support.dim(1) != c || query.dim(1) != c ||
      support.dim(2) != query.dim(2) || support.dim(3) != query.dim(3)) {
    throw Error(ErrorCode::kShapeMismatch,
                "project_heads: support " + ad::shape_string(support.shape()) + ", query " +
                    ad::shape_string(query.shape()));
  }
  return {run_head("tomm.alpha", support, ctx), run_head("tomm.beta", query, ctx)};
}

template <typename T>
std::pair<ad::Tensor<T>, ad::Tensor<T>> project_heads(const FeatureMap<T>& a,
                                                      const FeatureMap<T>& b,
                                                      LayerContext<T>& ctx,
                                                      const TommConfig& config) {
  auto as_batch = [](const FeatureMap<T>& f) {
    return ad::reshape(f.values, {1, f.channels(), f.height(), f.width()});
  };
  HeadProjections<T> p = project_heads(as_batch(a), as_batch(b), ctx, config);
  auto drop_batch = [](const ad::Tensor<T>& t) {
    return ad::reshape(t, {t.dim(1), t.dim(2)});
  };
  return {drop_batch(p.support), drop_batch(p.query)};
}

template <typename T>
Alignment<T> align_pairs(const ad::Tensor<T>& support, const ad::Tensor<T>& proj_support,
                         const ad::Tensor<T>& proj_query,
                         std::span<const std::size_t> support_index,
                         std::span<const std::size_t> query_index) {
  if (support.rank() != 3 || proj_support.rank() != 3 || proj_query.rank() != 3 ||
      support.dim(0) != proj_support.dim(0) || support.dim(2) != proj_support.dim(2) ||
      proj_support.dim(1) != proj_query.dim(1) || proj_support.dim(2) != proj_query.dim(2)) {
    throw Error(ErrorCode::kShapeMismatch,
                "align: support " + ad::shape_string(support.shape()) + ", projections " +
                    ad::shape_string(proj_support.shape()) + " / " +
                    ad::shape_string(proj_query.shape()));
  }
  const std::size_t pairs = support_index.size();
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(proj_support.dim(1)));
  // logits[p](i, j) = <proj_query[:, i], proj_support[:, j]> / sqrt(c')
  ad::Tensor<T> logits =
      ad::bmm_gather(proj_query, query_index, proj_support, support_index, true, false);
  ad::Tensor<T> attention = ad::softmax_rows(ad::scale(logits, inv_sqrt));
  std::vector<std::size_t> own(pairs);
  std::iota(own.begin(), own.end(), std::size_t{0});
  // aligned[p] = support[p] * attention[p]^T
  ad::Tensor<T> aligned = ad::bmm_gather(support, support_index, attention,
                                         std::span<const std::size_t>(own), false, true);
  return {aligned, attention};
}

template <typename T>
Alignment<T> align(const ad::Tensor<T>& support, const ad::Tensor<T>& proj_support,
                   const ad::Tensor<T>& proj_query) {
  if (support.rank() != 2 || proj_support.rank() != 2 || proj_query.rank() != 2) {
    throw Error(ErrorCode::kShapeMismatch, "align expects [c, hw] matrices");
  }
  auto lift = [](const ad::Tensor<T>& t) { return ad::reshape(t, {1, t.dim(0), t.dim(1)}); };
  const std::size_t zero[1] = {0};
  Alignment<T> out = align_pairs(lift(support), lift(proj_support), lift(proj_query),
                                 std::span<const std::size_t>(zero),
                                 std::span<const std::size_t>(zero));
  return {ad::reshape(out.aligned, {support.dim(0), support.dim(1)}),
          ad::reshape(out.attention, {support.dim(1), support.dim(1)})};
}

template <typename T>
Prototype<T> build_prototype(const std::vector<ad::Tensor<T>>& aligned, int class_id) {
  if (aligned.empty()) {
    throw Error(ErrorCode::kEmptySupportSet,
                "class " + std::to_string(class_id) + " has no support features");
  }
  ad::Tensor<T> total = aligned.front();
  for (std::size_t i = 1; i < aligned.size(); ++i) total = ad::add(total, aligned[i]);
  if (aligned.size() > 1) total = ad::scale(total, T(1) / static_cast<T>(aligned.size()));
  return {class_id, total};
}

namespace {

template <typename T>
void check_episode_shapes(const ad::Tensor<T>& support, std::size_t classes, std::size_t shot,
                          const ad::Tensor<T>& queries) {
  if (classes == 0 || shot == 0) {
    throw Error(ErrorCode::kEmptySupportSet, "episode needs at least one class and one shot");
  }
  if (support.rank() != 4 || queries.rank() != 4 || support.dim(0) != classes * shot ||
      queries.dim(0) == 0 || support.dim(1) != queries.dim(1) ||
      support.dim(2) != queries.dim(2) || support.dim(3) != queries.dim(3)) {
    throw Error(ErrorCode::kShapeMismatch,
                "support " + ad::shape_string(support.shape()) + " for " +
                    std::to_string(classes) + "x" + std::to_string(shot) + ", queries " +
                    ad::shape_string(queries.shape()));
  }
}

template <typename T>
ad::Tensor<T> flatten_maps(const ad::Tensor<T>& maps) {
  return ad::reshape(maps, {maps.dim(0), maps.dim(1), maps.dim(2) * maps.dim(3)});
}

}  // namespace

template <typename T>
TommOutput<T> tomm_forward(const ad::Tensor<T>& support, std::size_t classes, std::size_t shot,
                           const ad::Tensor<T>& queries, LayerContext<T>& ctx,
                           const TommConfig& config) {
  check_episode_shapes(support, classes, shot, queries);
  HeadProjections<T> proj = project_heads(support, queries, ctx, config);
  const std::size_t s_count = support.dim(0), q_count = queries.dim(0);
  const std::size_t c = support.dim(1), hw = support.dim(2) * support.dim(3);
  std::vector<std::size_t> si(q_count * s_count), qi(q_count * s_count);
  for (std::size_t q = 0; q < q_count; ++q)
    for (std::size_t s = 0; s < s_count; ++s) {
      si[q * s_count + s] = s;
      qi[q * s_count + s] = q;
    }
  Alignment<T> a = align_pairs(flatten_maps(support), proj.support, proj.query,
                               std::span<const std::size_t>(si),
                               std::span<const std::size_t>(qi));
  ad::Tensor<T> grouped = ad::reshape(a.aligned, {q_count * classes, shot, c * hw});
  ad::Tensor<T> protos = shot == 1 ? grouped : ad::mean_axis(grouped, 1);
  return {ad::reshape(protos, {q_count * classes, c, hw}), flatten_maps(queries)};
}

template <typename T>
TommOutput<T> unaligned_prototypes(const ad::Tensor<T>& support, std::size_t classes,
                                   std::size_t shot, const ad::Tensor<T>& queries) {
  check_episode_shapes(support, classes, shot, queries);
  const std::size_t q_count = queries.dim(0);
  const std::size_t c = support.dim(1), hw = support.dim(2) * support.dim(3);
  ad::Tensor<T> grouped = ad::reshape(support, {classes, shot, c * hw});
  ad::Tensor<T> means = shot == 1 ? ad::reshape(grouped, {classes, c * hw})
                                  : ad::mean_axis(grouped, 1);
  std::vector<std::size_t> rows(q_count * classes);
  for (std::size_t q = 0; q < q_count; ++q)
    for (std::size_t t = 0; t < classes; ++t) rows[q * classes + t] = t;
  ad::Tensor<T> tiled = ad::gather(means, std::span<const std::size_t>(rows));
  return {ad::reshape(tiled, {q_count * classes, c, hw}), flatten_maps(queries)};
}

std::uint64_t align_logit_macs(std::size_t positions, std::size_t head_channels) {
  return static_cast<std::uint64_t>(positions) * positions * head_channels;
}

#define TOAN_INSTANTIATE(T)                                                                   \
  template void init_tomm(ParameterStore<T>&, const TommConfig&, Rng&);                       \
  template HeadProjections<T> project_heads(const ad::Tensor<T>&, const ad::Tensor<T>&,       \
                                            LayerContext<T>&, const TommConfig&);             \
  template std::pair<ad::Tensor<T>, ad::Tensor<T>> project_heads(                             \
      const FeatureMap<T>&, const FeatureMap<T>&, LayerContext<T>&, const TommConfig&);       \
  template Alignment<T> align(const ad::Tensor<T>&, const ad::Tensor<T>&,                     \
                              const ad::Tensor<T>&);                                          \
  template Alignment<T> align_pairs(const ad::Tensor<T>&, const ad::Tensor<T>&,               \
                                    const ad::Tensor<T>&, std::span<const std::size_t>,       \
                                    std::span<const std::size_t>);                            \
  template Prototype<T> build_prototype(const std::vector<ad::Tensor<T>>&, int);              \
  template TommOutput<T> tomm_forward(const ad::Tensor<T>&, std::size_t, std::size_t,         \
                                      const ad::Tensor<T>&, LayerContext<T>&,                 \
                                      const TommConfig&);                                     \
  template TommOutput<T> unaligned_prototypes(const ad::Tensor<T>&, std::size_t, std::size_t, \
                                              const ad::Tensor<T>&);

TOAN_INSTANTIATE(float)
TOAN_INSTANTIATE(double)

#undef TOAN_INSTANTIATE

}  // namespace toan
