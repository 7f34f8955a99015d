#include "toan/gpbp.hpp"

#include <string>

#include "toan/autodiff/ops.hpp"
#include "toan/error.hpp"

namespace toan {

void GpbpConfig::validate() const {
  if (groups < 1 || channels < 1 || bilinear_dim < 1 || channels % groups != 0 ||
      bilinear_dim % groups != 0) {
    throw Error(ErrorCode::kIndivisibleGroups,
                "N=" + std::to_string(groups) + " must divide c=" + std::to_string(channels) +
                    " and M=" + std::to_string(bilinear_dim));
  }
}

template <typename T>
ad::Tensor<T> GroupedFeature<T>::concatenate() const {
  return ad::concat(groups, 0);
}

template <typename T>
GroupedFeature<T> group_channels(const ad::Tensor<T>& feature, int groups) {
  if (feature.rank() != 2) {
    throw Error(ErrorCode::kShapeMismatch,
                "group_channels expects [c, hw], got " + ad::shape_string(feature.shape()));
  }
  const std::size_t c = feature.dim(0);
  if (groups < 1 || c % static_cast<std::size_t>(groups) != 0) {
    throw Error(ErrorCode::kIndivisibleGroups,
                std::to_string(groups) + " groups do not divide " + std::to_string(c) +
                    " channels");
  }
  const std::size_t width = c / static_cast<std::size_t>(groups);
  GroupedFeature<T> out;
  for (std::size_t k = 0; k < static_cast<std::size_t>(groups); ++k) {
    out.groups.push_back(ad::slice(feature, 0, k * width, (k + 1) * width));
  }
  return out;
}

template <typename T>
ad::Tensor<T> bilinear_full(const ad::Tensor<T>& a, const ad::Tensor<T>& b,
                            const ad::Tensor<T>& w) {
  if (a.rank() != 2 || a.shape() != b.shape() || w.rank() != 2 || w.dim(0) != a.dim(0) ||
      w.dim(1) != a.dim(0)) {
    throw Error(ErrorCode::kShapeMismatch,
                "bilinear_full: a " + ad::shape_string(a.shape()) + ", b " +
                    ad::shape_string(b.shape()) + ", w " + ad::shape_string(w.shape()));
  }
  const std::size_t d = a.dim(0), hw = a.dim(1);
  std::vector<T> z(hw, T(0));
  for (std::size_t i = 0; i < hw; ++i) {
    T acc = 0;
    for (std::size_t r = 0; r < d; ++r) {
      T wb = 0;
      for (std::size_t s = 0; s < d; ++s) wb += w[r * d + s] * b[s * hw + i];
      acc += a[r * hw + i] * wb;
    }
    z[i] = acc;
  }
  return ad::Tensor<T>({1, hw}, std::move(z));
}

template <typename T>
ad::Tensor<T> bilinear_lowrank(const ad::Tensor<T>& a, const ad::Tensor<T>& b,
                               const ad::Tensor<T>& u, const ad::Tensor<T>& v) {
  if (a.rank() != 2 || a.shape() != b.shape() || u.rank() != 2 || u.shape() != v.shape() ||
      u.dim(0) != a.dim(0)) {
    throw Error(ErrorCode::kShapeMismatch,
                "bilinear_lowrank: a " + ad::shape_string(a.shape()) + ", u " +
                    ad::shape_string(u.shape()) + ", v " + ad::shape_string(v.shape()));
  }
  const std::size_t rank = u.dim(1), hw = a.dim(1);
  ad::Tensor<T> ua = ad::reshape(ad::bmm(u, a, true, false), {rank, hw});
  ad::Tensor<T> vb = ad::reshape(ad::bmm(v, b, true, false), {rank, hw});
  return ad::hadamard(ua, vb);
}

template <typename T>
BilinearRelation<T> gpbp_forward(const ad::Tensor<T>& prototype, const ad::Tensor<T>& query,
                                 const LowRankProjection<T>& projections, int groups,
                                 int bilinear_dim) {
  if (prototype.rank() != 2 || prototype.shape() != query.shape()) {
    throw Error(ErrorCode::kShapeMismatch,
                "gpbp_forward: prototype " + ad::shape_string(prototype.shape()) + ", query " +
                    ad::shape_string(query.shape()));
  }
  GpbpConfig config{static_cast<int>(prototype.dim(0)), groups, bilinear_dim};
  config.validate();
  const auto n = static_cast<std::size_t>(groups);
  if (projections.u.size() != n || projections.v.size() != n) {
    throw Error(ErrorCode::kShapeMismatch, "expected one projection pair per group");
  }
  for (std::size_t k = 0; k < n; ++k) {
    const ad::Shape want{config.group_channels(), config.group_dim()};
    if (projections.u[k].shape() != want || projections.v[k].shape() != want) {
      throw Error(ErrorCode::kShapeMismatch,
                  "group " + std::to_string(k) + " projection must be " +
                      ad::shape_string(want));
    }
  }
  GroupedFeature<T> a = group_channels(prototype, groups);
  GroupedFeature<T> b = group_channels(query, groups);
  BilinearRelation<T> out;
  std::vector<ad::Tensor<T>> parts;
  for (std::size_t k = 0; k < n; ++k) {
    parts.push_back(bilinear_lowrank(a.groups[k], b.groups[k], projections.u[k],
                                     projections.v[k]));
    out.group_slices.emplace_back(k * config.group_dim(), (k + 1) * config.group_dim());
  }
  out.values = n == 1 ? parts.front() : ad::concat(parts, 0);
  return out;
}

template <typename T>
void init_gpbp(ParameterStore<T>& store, const GpbpConfig& config, Rng& rng) {
  config.validate();
  const auto n = static_cast<std::size_t>(config.groups);
  for (const char* side : {"gpbp.u", "gpbp.v"}) {
    const std::string prefix = side;
    store.add(prefix + ".weight",
              he_uniform<T>({n, config.group_channels(), config.group_dim()},
                            config.group_channels(), rng));
    store.add_batch_norm(prefix + ".bn", static_cast<std::size_t>(config.bilinear_dim));
  }
}

template <typename T>
LowRankProjection<T> projections_from(const LayerContext<T>& ctx, const GpbpConfig& config) {
  LowRankProjection<T> out;
  const auto n = static_cast<std::size_t>(config.groups);
  for (std::size_t k = 0; k < n; ++k) {
    for (auto [name, dst] : {std::pair{"gpbp.u.weight", &out.u}, {"gpbp.v.weight", &out.v}}) {
      ad::Tensor<T> slab = ad::slice(ctx.param(name), 0, k, k + 1);
      dst->push_back(ad::reshape(slab, {config.group_channels(), config.group_dim()}));
    }
  }
  return out;
}

namespace {

// Grouped 1x1 projection: x [B, c, hw] -> [B, M, hw] with block-diagonal
// weights [N, c/N, M/N].
template <typename T>
ad::Tensor<T> grouped_projection(const ad::Tensor<T>& x, const ad::Tensor<T>& weight,
                                 const GpbpConfig& config) {
  const std::size_t batch = x.dim(0), hw = x.dim(2);
  const auto n = static_cast<std::size_t>(config.groups);
  ad::Tensor<T> xr = ad::reshape(x, {batch * n, config.group_channels(), hw});
  std::vector<std::size_t> wi(batch * n), xi(batch * n);
  for (std::size_t i = 0; i < batch * n; ++i) {
    wi[i] = i % n;
    xi[i] = i;
  }
  ad::Tensor<T> y = ad::bmm_gather(weight, std::span<const std::size_t>(wi), xr,
                                   std::span<const std::size_t>(xi), true, false);
  return ad::reshape(y, {batch, static_cast<std::size_t>(config.bilinear_dim), hw});
}

template <typename T>
ad::Tensor<T> pbp_side(const std::string& prefix, const ad::Tensor<T>& x, LayerContext<T>& ctx,
                       const GpbpConfig& config) {
  ad::Tensor<T> y = grouped_projection(x, ctx.param(prefix + ".weight"), config);
  y = ad::batch_norm(y, ctx.param(prefix + ".bn.gamma"), ctx.param(prefix + ".bn.beta"),
                     ctx.batch_norm(prefix + ".bn"), ctx.mode());
  return ad::relu(y);
}

}  // namespace

template <typename T>
ad::Tensor<T> gpbp_relation(const ad::Tensor<T>& prototypes, const ad::Tensor<T>& queries,
                            std::span<const std::size_t> query_index, LayerContext<T>& ctx,
                            const GpbpConfig& config) {
  config.validate();
  const auto c = static_cast<std::size_t>(config.channels);
  if (prototypes.rank() != 3 || queries.rank() != 3 || prototypes.dim(1) != c ||
      queries.dim(1) != c || prototypes.dim(2) != queries.dim(2) ||
      query_index.size() != prototypes.dim(0)) {
    throw Error(ErrorCode::kShapeMismatch,
                "gpbp_relation: prototypes " + ad::shape_string(prototypes.shape()) +
                    ", queries " + ad::shape_string(queries.shape()));
  }
  ad::Tensor<T> up = pbp_side("gpbp.u", prototypes, ctx, config);
  ad::Tensor<T> vq = ad::gather(pbp_side("gpbp.v", queries, ctx, config), query_index);
  return ad::hadamard(up, vq);
}

#define TOAN_INSTANTIATE(T)                                                                 \
  template struct GroupedFeature<T>;                                                        \
  template GroupedFeature<T> group_channels(const ad::Tensor<T>&, int);                     \
  template ad::Tensor<T> bilinear_full(const ad::Tensor<T>&, const ad::Tensor<T>&,          \
                                       const ad::Tensor<T>&);                               \
  template ad::Tensor<T> bilinear_lowrank(const ad::Tensor<T>&, const ad::Tensor<T>&,       \
                                          const ad::Tensor<T>&, const ad::Tensor<T>&);      \
  template BilinearRelation<T> gpbp_forward(const ad::Tensor<T>&, const ad::Tensor<T>&,     \
                                            const LowRankProjection<T>&, int, int);         \
  template void init_gpbp(ParameterStore<T>&, const GpbpConfig&, Rng&);                     \
  template LowRankProjection<T> projections_from(const LayerContext<T>&, const GpbpConfig&); \
  template ad::Tensor<T> gpbp_relation(const ad::Tensor<T>&, const ad::Tensor<T>&,          \
                                       std::span<const std::size_t>, LayerContext<T>&,      \
                                       const GpbpConfig&);

TOAN_INSTANTIATE(float)
TOAN_INSTANTIATE(double)

#undef TOAN_INSTANTIATE

}  // namespace toan
