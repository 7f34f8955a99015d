#include <fstream>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "toan/checkpoint.hpp"
#include "toan/error.hpp"
#include "toan/trainer.hpp"

namespace toan {
namespace {

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

ParameterStore<float> trained_like_store() {
  auto store = init_parameters<float>(test::tiny_model(), 3);
  std::map<std::string, ad::Tensor<float>> grads;
  for (const auto& [name, t] : store.parameters()) grads[name] = ad::Tensor<float>::full(t.shape(), 0.5f);
  adam_step(store, grads, AdamConfig{});
  adam_step(store, grads, AdamConfig{});
  for (auto& [name, bn] : store.batch_norms()) bn.running_mean[0] = 0.25f;
  return store;
}

TEST(Checkpoint, RoundTripPreservesEverything) {
  const auto store = trained_like_store();
  const nlohmann::json config{{"model", to_json(test::tiny_model())}, {"note", "x"}};
  const auto path = test::scratch_dir("ck") / "a.ckpt";
  save_checkpoint(path, store, config);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_TRUE(back.store.identical(store));
  EXPECT_EQ(back.store.adam_step(), 2u);
  EXPECT_EQ(back.config, config);
  EXPECT_EQ(serialize_checkpoint(back.store, back.config), serialize_checkpoint(store, config));
}

TEST(Checkpoint, HeaderLayout) {
  const std::string bytes = serialize_checkpoint(trained_like_store(), nlohmann::json::object());
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(bytes.substr(0, 4), "TOAN");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), kCheckpointVersion);
  EXPECT_EQ(bytes.substr(bytes.size() - 2), "{}");
}

TEST(Checkpoint, CorruptInputsAreRejected) {
  const std::string good = serialize_checkpoint(trained_like_store(), {{"k", 1}});
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_EQ(code_of([&] { deserialize_checkpoint(bad_magic); }), ErrorCode::kCheckpointMismatch);
  std::string bad_version = good;
  bad_version[4] = 9;
  EXPECT_EQ(code_of([&] { deserialize_checkpoint(bad_version); }), ErrorCode::kCheckpointMismatch);
  for (std::size_t cut : {std::size_t(3), std::size_t(11), good.size() / 2, good.size() - 1})
    EXPECT_EQ(code_of([&] { deserialize_checkpoint(good.substr(0, cut)); }),
              ErrorCode::kCheckpointMismatch)
        << "cut " << cut;
  EXPECT_EQ(code_of([&] { deserialize_checkpoint(good + "x"); }), ErrorCode::kCheckpointMismatch);
}

TEST(Checkpoint, MissingFileIsIoError) {
  EXPECT_EQ(code_of([] { load_checkpoint("/nonexistent/dir/x.ckpt"); }), ErrorCode::kIoError);
}

TEST(Checkpoint, EvaluationIsPreservedThroughDisk) {
  SyntheticSpec s;
  s.num_classes = 4;
  s.samples_per_class = 6;
  s.image_size = 16;
  s.patch_size = 6;
  s.pose_jitter = 1;
  const Dataset ds = generate_synthetic(s);
  const auto model = test::tiny_model();
  const auto store = init_parameters<float>(model, 4);
  const auto path = test::scratch_dir("ckeval") / "m.ckpt";
  save_checkpoint(path, store, {{"model", to_json(model)}});
  const EvalSettings settings{6, 3, 1, 2, 9, 1};
  const auto direct = evaluate(ds, store, model, settings);
  const auto loaded = evaluate_checkpoint(ds, path, settings);
  EXPECT_EQ(direct.per_episode, loaded.per_episode);
  EXPECT_EQ(direct.mean_acc, loaded.mean_acc);
}

}  // namespace
}  // namespace toan
