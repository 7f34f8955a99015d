#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "toan/backbone.hpp"
#include "toan/error.hpp"

namespace toan {
namespace {

TEST(Backbone, OutSizeFollowsBlockSchedule) {
  EXPECT_EQ(BackboneConfig{}.out_size(), 19);
  BackboneConfig small;
  small.in_size = 32;
  EXPECT_EQ(small.out_size(), 6);
  small.in_size = 16;
  EXPECT_EQ(small.out_size(), 2);
}

TEST(Backbone, TooSmallInputIsRejected) {
  BackboneConfig c;
  c.in_size = 8;
  try {
    c.out_size();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidHyperparameter);
  }
}

TEST(Backbone, EmbedsFullSizeImageTo64x19x19) {
  BackboneConfig c;
  ParameterStore<float> store;
  Rng rng(1);
  init_backbone(store, c, rng);
  LayerContext<float> ctx(store, ad::Mode::kEval);
  std::mt19937_64 data(2);
  const auto images = test::random_tensor<float>({2, 3, 84, 84}, data, 0, 1);
  const auto emb = embed(images, ctx, c);
  EXPECT_EQ(emb.shape(), (ad::Shape{2, 64, 19, 19}));
  FeatureMap<float> fm{ad::slice(emb, 0, 0, 1)};
  fm.values = ad::reshape(fm.values, {64, 19, 19});
  EXPECT_EQ(fm.flat().shape(), (ad::Shape{64, 361}));
}

TEST(Backbone, EvalOutputIsIndependentOfBatchComposition) {
  BackboneConfig c;
  c.in_size = 16;
  c.channels = 8;
  ParameterStore<double> store;
  Rng rng(3);
  init_backbone(store, c, rng);
  LayerContext<double> ctx(store, ad::Mode::kEval);
  std::mt19937_64 data(4);
  const auto batch = test::random_tensor({3, 3, 16, 16}, data, 0, 1);
  const auto all = embed(batch, ctx, c);
  const auto one = embed(ad::slice(batch, 0, 1, 2), ctx, c);
  const auto mid = ad::slice(all, 0, 1, 2);
  for (std::size_t i = 0; i < one.size(); ++i) EXPECT_NEAR(one[i], mid[i], 1e-12);
}

TEST(Backbone, WrongInputShapeIsShapeMismatch) {
  BackboneConfig c;
  c.in_size = 16;
  c.channels = 8;
  ParameterStore<double> store;
  Rng rng(5);
  init_backbone(store, c, rng);
  LayerContext<double> ctx(store, ad::Mode::kEval);
  try {
    embed(ad::Tensor<double>::ones({1, 3, 20, 20}), ctx, c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
}

}  // namespace
}  // namespace toan
