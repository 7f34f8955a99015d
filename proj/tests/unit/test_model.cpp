#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "toan/error.hpp"
#include "toan/model.hpp"

namespace toan {
namespace {

TEST(Model, FiveWayOneShotScoresEveryQueryAgainstEveryClass) {
  ModelConfig m = test::tiny_model(32);
  auto store = init_parameters<float>(m, 1);
  LayerContext<float> ctx(store, ad::Mode::kEval);
  std::mt19937_64 rng(2);
  const auto images = test::random_tensor<float>({5 + 75, 3, 32, 32}, rng, 0, 1);
  const auto scores = forward_scores(images, 5, 1, ctx, m);
  EXPECT_EQ(scores.shape(), (ad::Shape{75, 5}));
}

TEST(Model, AllVariantsRun) {
  std::mt19937_64 rng(3);
  const auto images = test::random_tensor<double>({2 * 2 + 3, 3, 16, 16}, rng, 0, 1);
  for (bool tomm : {false, true})
    for (bool gpbp : {false, true}) {
      ModelConfig m = test::tiny_model();
      m.use_tomm = tomm;
      m.use_gpbp = gpbp;
      auto store = init_parameters<double>(m, 4);
      LayerContext<double> ctx(store, ad::Mode::kTrain);
      const auto s = forward_scores(images, 2, 2, ctx, m);
      EXPECT_EQ(s.shape(), (ad::Shape{3, 2}));
      EXPECT_EQ(store.contains("tomm.alpha.conv.weight"), tomm);
      EXPECT_EQ(store.contains("gpbp.u.weight"), gpbp);
    }
}

TEST(Model, EvalModeIsIdempotent) {
  ModelConfig m = test::tiny_model();
  auto store = init_parameters<double>(m, 5);
  const auto before = store;
  std::mt19937_64 rng(6);
  const auto images = test::random_tensor<double>({2 + 2, 3, 16, 16}, rng, 0, 1);
  LayerContext<double> ctx(store, ad::Mode::kEval);
  const auto a = forward_scores(images, 2, 1, ctx, m);
  const auto b = forward_scores(images, 2, 1, ctx, m);
  EXPECT_EQ(a.to_vector(), b.to_vector());
  EXPECT_TRUE(store.identical(before));
}

TEST(Model, InitialisationIsSeeded) {
  ModelConfig m = test::tiny_model();
  EXPECT_TRUE(init_parameters<float>(m, 9).identical(init_parameters<float>(m, 9)));
  EXPECT_FALSE(init_parameters<float>(m, 9).identical(init_parameters<float>(m, 10)));
}

TEST(Model, ConfigJsonRoundTrips) {
  ModelConfig m = test::tiny_model();
  m.use_gpbp = false;
  m.input_mean = {0.1, 0.2, 0.3};
  const auto back = model_config_from_json(to_json(m));
  EXPECT_EQ(to_json(back), to_json(m));
}

TEST(Model, InvalidConfigsAreRejected) {
  ModelConfig m = test::tiny_model();
  m.groups = 3;
  try {
    m.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIndivisibleGroups);
  }
}

TEST(Model, WrongImageCountIsShapeMismatch) {
  ModelConfig m = test::tiny_model();
  auto store = init_parameters<double>(m, 1);
  LayerContext<double> ctx(store, ad::Mode::kEval);
  try {
    forward_scores(ad::Tensor<double>::ones({2, 3, 16, 16}), 2, 1, ctx, m);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
}

}  // namespace
}  // namespace toan
