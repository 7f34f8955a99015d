#include "toan/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "toan/autodiff/ops.hpp"
#include "toan/autodiff/tape.hpp"
#include "toan/comparator.hpp"
#include "toan/error.hpp"
#include "toan/gpbp.hpp"
#include "toan/tomm.hpp"

namespace toan {

namespace {

template <typename T>
ad::Tensor<T> random_tensor(ad::Shape shape, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<T> v(ad::element_count(shape));
  for (T& x : v) x = static_cast<T>(normal(rng));
  return ad::Tensor<T>(std::move(shape), std::move(v));
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << std::scientific << v;
  return s.str();
}

}  // namespace

GradCheckOptions::GradCheckOptions() {
  model.image_size = 16;
  model.channels = 8;
  model.head_channels = 8;
  model.groups = 2;
  model.bilinear_dim = 16;
  model.comparator_channels = 8;
  model.comparator_hidden = 8;
}

SuiteResult verify_gradcheck(const GradCheckOptions& o) {
  SuiteResult r{"gradcheck", false, 0, 0, o.tolerance, ""};
  ParameterStore<double> store = init_parameters<double>(o.model, o.seed);
  Rng rng(o.seed + 1);
  const auto s = static_cast<std::size_t>(o.model.image_size);
  const auto n_images = static_cast<std::size_t>(o.way * (o.shot + o.queries));
  const ad::Tensor<double> images = random_tensor<double>({n_images, 3, s, s}, rng);
  std::vector<int> labels;
  for (int t = 0; t < o.way; ++t)
    for (int q = 0; q < o.queries; ++q) labels.push_back(t);
  const auto way = static_cast<std::size_t>(o.way), shot = static_cast<std::size_t>(o.shot);

  auto loss_at = [&](ParameterStore<double>& st) {
    LayerContext<double> ctx(st, ad::Mode::kTrain);
    return mse_loss(forward_scores(images, way, shot, ctx, o.model), labels).item();
  };

  std::map<std::string, ad::Tensor<double>> analytic;
  {
    ad::Tape<double> tape;
    LayerContext<double> ctx(store, ad::Mode::kTrain, &tape);
    const auto loss = mse_loss(forward_scores(images, way, shot, ctx, o.model), labels);
    analytic = ctx.named_gradients(tape.backward(loss));
  }

  std::string worst_name;
  const std::map<std::string, ad::Tensor<double>> params = store.parameters();
  for (const auto& [name, p] : params) {
    const ad::Tensor<double>& g = analytic.at(name);
    std::vector<double> values = p.to_vector();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + o.step;
      store.set(name, ad::Tensor<double>(p.shape(), values));
      const double up = loss_at(store);
      values[i] = saved - o.step;
      store.set(name, ad::Tensor<double>(p.shape(), values));
      const double down = loss_at(store);
      values[i] = saved;
      const double fd = (up - down) / (2 * o.step);
      const double err =
          std::abs(g[i] - fd) / std::max({std::abs(g[i]), std::abs(fd), o.floor});
      if (err > r.worst) {
        r.worst = err;
        worst_name = name + "[" + std::to_string(i) + "]";
      }
      ++r.cases;
    }
    store.set(name, p);
  }
  r.passed = r.worst < o.tolerance;
  r.detail = std::to_string(r.cases) + " entries of " + std::to_string(params.size()) +
             " tensors, max rel err " + fmt(r.worst) +
             (worst_name.empty() ? "" : " at " + worst_name);
  return r;
}

namespace {

template <typename T>
SuiteResult lowrank_impl(int instances, std::uint64_t seed, double tol) {
  SuiteResult r{"lowrank", false, 0, 0, tol, ""};
  Rng rng(seed);
  std::uniform_int_distribution<int> group_pick(0, 2), dim(1, 8), rank_pick(1, 8), hw_pick(1, 30);
  for (int it = 0; it < instances; ++it) {
    const int groups = 1 << group_pick(rng);
    const auto d = static_cast<std::size_t>(dim(rng));
    const auto rank = static_cast<std::size_t>(rank_pick(rng));
    const auto hw = static_cast<std::size_t>(hw_pick(rng));
    const auto n = static_cast<std::size_t>(groups);
    const ad::Tensor<T> a = random_tensor<T>({n * d, hw}, rng);
    const ad::Tensor<T> b = random_tensor<T>({n * d, hw}, rng);
    LowRankProjection<T> proj;
    for (std::size_t k = 0; k < n; ++k) {
      proj.u.push_back(random_tensor<T>({d, rank}, rng));
      proj.v.push_back(random_tensor<T>({d, rank}, rng));
    }
    const BilinearRelation<T> z =
        gpbp_forward(a, b, proj, groups, static_cast<int>(n * rank));
    const GroupedFeature<T> ga = group_channels(a, groups), gb = group_channels(b, groups);
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t p = 0; p < rank; ++p) {
        std::vector<T> w(d * d);
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t j = 0; j < d; ++j)
            w[i * d + j] = proj.u[k][i * rank + p] * proj.v[k][j * rank + p];
        const ad::Tensor<T> full = bilinear_full(ga.groups[k], gb.groups[k],
                                                 ad::Tensor<T>({d, d}, std::move(w)));
        const std::size_t row = k * rank + p;
        for (std::size_t i = 0; i < hw; ++i) {
          const double want = full[i];
          const double got = z.values[row * hw + i];
          r.worst = std::max(r.worst, std::abs(got - want) / std::max(1.0, std::abs(want)));
        }
      }
    }
    ++r.cases;
  }
  r.passed = r.worst <= tol;
  r.detail = std::to_string(r.cases) + " instances, max scaled err " + fmt(r.worst);
  return r;
}

template <typename T>
SuiteResult softmax_impl(int instances, std::uint64_t seed, double tol) {
  SuiteResult r{"softmax", false, 0, 0, tol, ""};
  Rng rng(seed);
  std::uniform_int_distribution<int> c_pick(1, 8), head_pick(1, 16), hw_pick(2, 64);
  std::uniform_real_distribution<double> scale_pick(0.1, 3.0);
  double min_entry = 1.0;
  bool hw1_exact = true;
  int hw1_cases = 0;
  for (int it = 0; it < instances; ++it) {
    const auto c = static_cast<std::size_t>(c_pick(rng));
    const auto head = static_cast<std::size_t>(head_pick(rng));
    const std::size_t hw = it % 10 == 0 ? 1 : static_cast<std::size_t>(hw_pick(rng));
    const double scale = scale_pick(rng);
    const ad::Tensor<T> support = random_tensor<T>({c, hw}, rng);
    const ad::Tensor<T> pa = random_tensor<T>({head, hw}, rng, scale);
    const ad::Tensor<T> pb = random_tensor<T>({head, hw}, rng, scale);
    const Alignment<T> out = align(support, pa, pb);
    for (std::size_t i = 0; i < hw; ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < hw; ++j) {
        const double v = out.attention[i * hw + j];
        min_entry = std::min(min_entry, v);
        sum += v;
      }
      r.worst = std::max(r.worst, std::abs(sum - 1.0));
    }
    if (hw == 1) {
      ++hw1_cases;
      hw1_exact = hw1_exact && out.aligned.same_values(support);
    }
    ++r.cases;
  }
  r.passed = r.worst <= tol && min_entry >= 0 && hw1_exact;
  r.detail = std::to_string(r.cases) + " instances, max |row sum - 1| " + fmt(r.worst) +
             ", min entry " + fmt(min_entry) + ", hw=1 exact " +
             (hw1_exact ? "yes" : "no") + " (" + std::to_string(hw1_cases) + ")";
  return r;
}

template <typename T>
SuiteResult permutation_impl(int permutations, const std::vector<std::size_t>& positions,
                             std::uint64_t seed, double tol) {
  SuiteResult r{"permutation", false, 0, 0, tol, ""};
  Rng rng(seed);
  constexpr double kLogitGap = 50.0;
  constexpr std::size_t kChannels = 8;
  for (std::size_t hw : positions) {
    // one-hot head features: logit(i, j) = kLogitGap * [j == pi(i)]
    const double alpha = std::sqrt(kLogitGap * std::sqrt(static_cast<double>(hw)));
    std::vector<T> pa(hw * hw, T(0));
    for (std::size_t j = 0; j < hw; ++j) pa[j * hw + j] = static_cast<T>(alpha);
    const ad::Tensor<T> proj_support({hw, hw}, pa);
    for (int it = 0; it < permutations; ++it) {
      std::vector<std::size_t> pi(hw);
      std::iota(pi.begin(), pi.end(), std::size_t{0});
      std::shuffle(pi.begin(), pi.end(), rng);
      std::vector<T> pb(hw * hw, T(0));
      for (std::size_t i = 0; i < hw; ++i) pb[pi[i] * hw + i] = static_cast<T>(alpha);
      const ad::Tensor<T> support = random_tensor<T>({kChannels, hw}, rng);
      const Alignment<T> out = align(support, proj_support, ad::Tensor<T>({hw, hw}, pb));
      for (std::size_t ch = 0; ch < kChannels; ++ch) {
        for (std::size_t i = 0; i < hw; ++i) {
          const double err = std::abs(static_cast<double>(out.aligned[ch * hw + i]) -
                                      static_cast<double>(support[ch * hw + pi[i]]));
          r.worst = std::max(r.worst, err);
        }
      }
      ++r.cases;
    }
  }
  r.passed = r.worst <= tol;
  r.detail = std::to_string(r.cases) + " permutations, max column err " + fmt(r.worst);
  return r;
}

}  // namespace

SuiteResult verify_lowrank(bool f64, int instances, std::uint64_t seed) {
  return f64 ? lowrank_impl<double>(instances, seed, 1e-10)
             : lowrank_impl<float>(instances, seed, 1e-5);
}

SuiteResult verify_softmax(bool f64, int instances, std::uint64_t seed) {
  return f64 ? softmax_impl<double>(instances, seed, 1e-6)
             : softmax_impl<float>(instances, seed, 1e-6);
}

SuiteResult verify_permutation(bool f64, int permutations,
                               const std::vector<std::size_t>& positions, std::uint64_t seed) {
  return f64 ? permutation_impl<double>(permutations, positions, seed, 1e-6)
             : permutation_impl<float>(permutations, positions, seed, 1e-6);
}

ComplexityMeasurement measure_align_cost(std::size_t h, std::size_t w, std::size_t channels,
                                         std::size_t head_channels) {
  ComplexityMeasurement m;
  m.base_positions = h * w;
  Rng rng(51);
  auto run = [&](std::size_t positions, std::uint64_t& macs, double& ms) {
    const auto support = random_tensor<float>({channels, positions}, rng);
    const auto pa = random_tensor<float>({head_channels, positions}, rng);
    const auto pb = random_tensor<float>({head_channels, positions}, rng);
    ad::reset_mac_count();
    const auto start = std::chrono::steady_clock::now();
    // logit stage of align(): proj_query^T proj_support
    ad::Tensor<float> logits = ad::bmm(pb, pa, true, false);
    ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
             .count();
    macs = ad::mac_count();
    (void)logits;
    const std::uint64_t before = ad::mac_count();
    align(support, pa, pb);
    if (ad::mac_count() - before < macs) {
      throw Error(ErrorCode::kShapeMismatch, "align spent fewer multiply-adds than its logits");
    }
  };
  run(h * w, m.base_macs, m.base_ms);
  run(4 * h * w, m.doubled_macs, m.doubled_ms);
  return m;
}

SuiteResult verify_complexity(std::size_t h, std::size_t w) {
  const ComplexityMeasurement m = measure_align_cost(h, w, 64, 64);
  SuiteResult r{"complexity", false, 1, std::abs(m.ratio() / 16.0 - 1.0), 0.2, ""};
  r.passed = r.worst <= r.tolerance;
  std::ostringstream d;
  d.precision(4);
  d << "logit MACs " << m.base_macs << " at hw=" << m.base_positions << ", " << m.doubled_macs
    << " at hw=" << 4 * m.base_positions << ", ratio " << m.ratio() << " (wall " << m.base_ms
    << " ms -> " << m.doubled_ms << " ms)";
  r.detail = d.str();
  return r;
}

std::vector<std::string> verify_suite_names() {
  return {"gradcheck", "lowrank", "softmax", "permutation", "complexity"};
}

std::vector<SuiteResult> run_verify(const std::vector<std::string>& suites, bool f64) {
  std::vector<std::string> names;
  for (const auto& s : suites) {
    if (s == "all") {
      for (const auto& n : verify_suite_names()) names.push_back(n);
    } else {
      names.push_back(s);
    }
  }
  std::vector<SuiteResult> out;
  for (const auto& name : names) {
    if (name == "gradcheck") {
      out.push_back(verify_gradcheck());
    } else if (name == "lowrank") {
      out.push_back(verify_lowrank(f64));
    } else if (name == "softmax") {
      out.push_back(verify_softmax(f64));
    } else if (name == "permutation") {
      out.push_back(verify_permutation(f64));
    } else if (name == "complexity") {
      out.push_back(verify_complexity());
    } else {
      throw Error(ErrorCode::kConfigParseError, "unknown verify suite '" + name + "'");
    }
  }
  return out;
}

}  // namespace toan
