#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "toan/error.hpp"
#include "toan/trainer.hpp"

namespace toan {
namespace {

using ad::Tensor;

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected toan::Error";
  return ErrorCode::kIoError;
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ParameterStore<double> store;
  store.add("w", Tensor<double>({2}, {1.0, -2.0}));
  adam_step(store, {{"w", Tensor<double>::zeros({2})}}, AdamConfig{});
  EXPECT_EQ(store.get("w").to_vector(), (std::vector<double>{1.0, -2.0}));
  EXPECT_EQ(store.adam_step(), 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParameterStore<double> store;
  store.add("w", Tensor<double>({3}, {0.0, 0.0, 0.0}));
  adam_step(store, {{"w", Tensor<double>({3}, {3.0, -0.01, 100.0})}}, AdamConfig{});
  for (double v : {store.get("w")[0], -store.get("w")[1], store.get("w")[2]})
    EXPECT_NEAR(v, -0.001, 1e-6 * 0.001 + 1e-9);
}

TEST(Adam, TracksReferenceTraceOnQuadratic) {
  // f(x) = x^2, independent re-implementation of the update rule
  ParameterStore<double> store;
  store.add("x", Tensor<double>::scalar(1.5));
  const AdamConfig cfg{0.1, 0.9, 0.999, 1e-8};
  double x = 1.5, m = 0, v = 0;
  for (int t = 1; t <= 10; ++t) {
    const double g = 2 * x;
    m = cfg.beta1 * m + (1 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
    const double mhat = m / (1 - std::pow(cfg.beta1, t)), vhat = v / (1 - std::pow(cfg.beta2, t));
    x -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    adam_step(store, {{"x", Tensor<double>::scalar(2 * store.get("x").item())}}, cfg);
    EXPECT_NEAR(store.get("x").item(), x, 1e-12) << "step " << t;
  }
}

TEST(Adam, MissingOrMisshapenGradientIsRejected) {
  ParameterStore<double> store;
  store.add("a", Tensor<double>::zeros({2}));
  store.add("b", Tensor<double>::zeros({2}));
  EXPECT_EQ(code_of([&] { adam_step(store, {{"a", Tensor<double>::zeros({2})}}, AdamConfig{}); }),
            ErrorCode::kMissingGradient);
  EXPECT_EQ(code_of([&] {
              adam_step(store, {{"a", Tensor<double>::zeros({2})}, {"b", Tensor<double>::zeros({3})}},
                        AdamConfig{});
            }),
            ErrorCode::kShapeMismatch);
}

struct SmokeData {
  Dataset train, val, target;
};

const SmokeData& smoke_data() {
  static const SmokeData data = [] {
    SyntheticSpec s;
    s.num_classes = 10;
    s.samples_per_class = 12;
    s.image_size = 16;
    s.patch_size = 6;
    s.pose_jitter = 0;
    s.epsilon = 1.0;
    s.noise_sigma = 0.02;
    const auto splits = split_dataset(generate_synthetic(s), 3, 5, 2, 3);
    return SmokeData{splits.aux_train, splits.aux_val, splits.target};
  }();
  return data;
}

TrainConfig smoke_config(int episodes) {
  TrainConfig c;
  c.model = test::tiny_model(16);
  c.way = 2;
  c.shot = 1;
  c.queries = 3;
  c.total_episodes = episodes;
  c.validation_every = 0;
  c.log_every = 50;
  c.moving_average_window = 50;
  return c;
}

TEST(Train, ZeroLearningRateKeepsInitialWeights) {
  TrainConfig c = smoke_config(5);
  c.adam.lr = 0;
  const auto r = train(smoke_data().train, smoke_data().val, c);
  const auto init = init_parameters<float>(r.config.model, c.seed);
  for (const auto& [name, t] : init.parameters())
    EXPECT_EQ(r.final_store.get(name).to_vector(), t.to_vector()) << name;
}

TEST(Train, IsDeterministic) {
  TrainConfig c = smoke_config(20);
  c.validation_every = 10;
  c.validation_episodes = 5;
  const auto a = train(smoke_data().train, smoke_data().val, c);
  const auto b = train(smoke_data().train, smoke_data().val, c);
  EXPECT_TRUE(a.final_store.identical(b.final_store));
  EXPECT_TRUE(a.best_store.identical(b.best_store));
  EXPECT_EQ(a.episode_loss, b.episode_loss);
  ASSERT_EQ(a.log.size(), 2u);
  EXPECT_TRUE(a.log[0].val_accuracy.has_value());
}

TEST(Train, NonFiniteInputIsDivergence) {
  const Dataset& ds = smoke_data().train;
  auto images = std::make_shared<std::vector<std::vector<float>>>(*ds.storage());
  for (auto& img : *images) img[0] = std::numeric_limits<float>::quiet_NaN();
  const Dataset bad(ds.image_size(), ds.classes(), images, SplitTag::kAuxTrain);
  EXPECT_EQ(code_of([&] { train(bad, smoke_data().val, smoke_config(2)); }),
            ErrorCode::kDivergenceDetected);
}

TEST(Train, ImageSizeMismatchIsConfigMismatch) {
  TrainConfig c = smoke_config(1);
  c.model.image_size = 32;
  EXPECT_EQ(code_of([&] { train(smoke_data().train, smoke_data().val, c); }),
            ErrorCode::kConfigMismatch);
}

TEST(Train, InvalidConfigIsRejected) {
  TrainConfig c = smoke_config(1);
  c.way = 1;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::kInvalidHyperparameter);
  c = smoke_config(1);
  c.adam.lr = -1;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::kInvalidHyperparameter);
}

TEST(Train, SmokeRunFitsSeparableTwoWayTask) {
  const auto r = train(smoke_data().train, smoke_data().val, smoke_config(200));
  ASSERT_EQ(r.episode_accuracy.size(), 200u);
  const double acc =
      std::accumulate(r.episode_accuracy.begin(), r.episode_accuracy.end(), 0.0) / 200;
  EXPECT_GT(acc, 0.9);
}

TEST(Train, MovingAverageLossFallsOnSeparableData) {
  TrainConfig c = smoke_config(2000);
  c.moving_average_window = 500;
  c.log_every = 500;
  const auto r = train(smoke_data().train, smoke_data().val, c);
  const double first = std::accumulate(r.episode_loss.begin(), r.episode_loss.begin() + 500, 0.0) / 500;
  ASSERT_EQ(r.log.size(), 4u);
  EXPECT_NEAR(r.log.front().moving_avg_loss, first, 1e-9);
  EXPECT_LT(r.log.back().moving_avg_loss, first);
}

TEST(Train, LogCsvHasHeaderAndRows) {
  const auto r = train(smoke_data().train, smoke_data().val, smoke_config(100));
  const std::string csv = log_csv(r.log);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "episode,loss,moving_avg_loss,val_accuracy,wall_ms");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST(Train, ConfigJsonRoundTrips) {
  TrainConfig c = smoke_config(123);
  c.adam.lr = 0.0005;
  c.model.use_tomm = false;
  EXPECT_EQ(to_json(train_config_from_json(to_json(c))), to_json(c));
}

TEST(Evaluate, SingleEpisodeHasZeroInterval) {
  const auto store = init_parameters<float>(smoke_config(1).model, 1);
  const auto r = evaluate(smoke_data().target, store, smoke_config(1).model, EvalSettings{1, 2, 1, 3, 1, 1});
  EXPECT_EQ(r.n, 1);
  EXPECT_EQ(r.ci95, 0.0);
}

TEST(Evaluate, IntervalUsesSampleDeviation) {
  const auto model = smoke_config(1).model;
  const auto store = init_parameters<float>(model, 1);
  const auto r = evaluate(smoke_data().target, store, model, EvalSettings{30, 3, 1, 2, 4, 1});
  ASSERT_EQ(r.per_episode.size(), 30u);
  const double mean = std::accumulate(r.per_episode.begin(), r.per_episode.end(), 0.0) / 30;
  double ss = 0;
  for (double a : r.per_episode) ss += (a - mean) * (a - mean);
  EXPECT_NEAR(r.mean_acc, mean, 1e-12);
  EXPECT_NEAR(r.ci95, 1.96 * std::sqrt(ss / 29) / std::sqrt(30.0), 1e-12);
}

TEST(Evaluate, ThreadCountDoesNotChangeReport) {
  const auto model = smoke_config(1).model;
  const auto store = init_parameters<float>(model, 2);
  const auto one = evaluate(smoke_data().target, store, model, EvalSettings{12, 2, 1, 3, 4, 1});
  const auto four = evaluate(smoke_data().target, store, model, EvalSettings{12, 2, 1, 3, 4, 4});
  EXPECT_EQ(one.per_episode, four.per_episode);
}

TEST(Evaluate, IncompatibleStoreIsCheckpointMismatch) {
  auto model = smoke_config(1).model;
  const auto store = init_parameters<float>(model, 1);
  model.use_gpbp = false;
  EXPECT_EQ(code_of([&] { check_compatible(store, model); }), ErrorCode::kCheckpointMismatch);
}

TEST(Ablate, GridProducesFourLabelledRows) {
  TrainConfig c = smoke_config(3);
  const auto rows = ablate(smoke_data().train, smoke_data().val, smoke_data().target, c,
                           EvalSettings{2, 2, 1, 2, 1, 1}, AblationPlan{true, {1, 2}, {}});
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0].label, "+TOMM +GPBP");
  std::set<std::string> labels;
  for (const auto& r : rows) labels.insert(r.label);
  EXPECT_EQ(labels.size(), 6u);
  EXPECT_NE(ablation_table(rows).find("-TOMM -GPBP"), std::string::npos);
}

}  // namespace
}  // namespace toan
