#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "toan/episodes.hpp"
#include "toan/model.hpp"
#include "toan/parameters.hpp"

namespace toan {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam over every parameter of `store`. Every parameter must
// have a gradient (kMissingGradient otherwise). The shared step counter is
// advanced once per call.
template <typename T>
void adam_step(ParameterStore<T>& store, const std::map<std::string, ad::Tensor<T>>& grads,
               const AdamConfig& adam);

struct TrainConfig {
  int way = 5;
  int shot = 1;
  int queries = 15;
  int total_episodes = 20000;
  AdamConfig adam;
  std::uint64_t seed = 1;
  ModelConfig model;
  int validation_every = 2000;  // 0 disables validation
  int validation_episodes = 300;
  int log_every = 100;
  int moving_average_window = 500;
  std::filesystem::path checkpoint_path;  // best checkpoint; empty = not written
  std::filesystem::path log_path;         // CSV; empty = not written

  // way >= 2, shot >= 1, queries >= 1, lr >= 0.
  void validate() const;
  std::size_t episode_images() const {
    return static_cast<std::size_t>(way) * static_cast<std::size_t>(shot + queries);
  }
};

// Flat keys, the same names the CLI flags use.
nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct LogRow {
  int episode = 0;  // episodes completed
  double loss = 0;
  double moving_avg_loss = 0;
  std::optional<double> val_accuracy;
  double wall_ms = 0;
};

struct TrainResult {
  ParameterStore<float> final_store;
  ParameterStore<float> best_store;  // highest validation accuracy; final if never validated
  int best_episode = 0;
  double best_val_accuracy = -1;
  std::vector<LogRow> log;
  std::vector<double> episode_loss;
  std::vector<double> episode_accuracy;  // training-episode top-1 accuracy
  TrainConfig config;                      // with input statistics filled in
};

using ProgressFn = std::function<void(const LogRow&)>;

// Sequential episodic training. The model's input standardisation is taken
// from ds_train. Throws kDivergenceDetected when the loss or a gradient goes
// non-finite.
TrainResult train(const Dataset& ds_train, const Dataset& ds_val, const TrainConfig& config,
                  const ProgressFn& progress = {});

std::string log_csv(const std::vector<LogRow>& log);

struct EvalSettings {
  int episodes = 1000;
  int way = 5;
  int shot = 1;
  int queries = 15;
  std::uint64_t seed = 1;
  int threads = 1;
};

struct EvalReport {
  int n = 0;
  double mean_acc = 0;
  double ci95 = 0;  // 1.96 * sample stdev / sqrt(n); 0 when n == 1
  std::vector<double> per_episode;
  nlohmann::json config;
  double wall_ms = 0;
};

nlohmann::json to_json(const EvalReport& report, bool with_episodes = true);

// Eval-mode scoring of independent episodes. Each episode has its own RNG
// stream, so the report does not depend on the thread count.
EvalReport evaluate(const Dataset& ds, const ParameterStore<float>& store, const ModelConfig& model,
                    const EvalSettings& settings);

// Checks that `store` holds exactly the parameters `model` defines, with the
// same shapes. Throws kCheckpointMismatch.
void check_compatible(const ParameterStore<float>& store, const ModelConfig& model);

EvalReport evaluate_checkpoint(const Dataset& ds, const std::filesystem::path& checkpoint,
                               const EvalSettings& settings);

// Trainer configuration embedded in a checkpoint trailer.
nlohmann::json checkpoint_config(const TrainConfig& config);

struct AblationRow {
  std::string label;
  TrainConfig config;
  EvalReport report;
};

struct AblationPlan {
  bool grid = true;                  // {+-TOMM} x {+-GPBP}
  std::vector<int> group_sweep;      // N values, full model, fixed M
  std::vector<int> bilinear_sweep;   // M values, full model, fixed N
};

std::vector<AblationRow> ablate(const Dataset& ds_train, const Dataset& ds_val,
                                const Dataset& ds_target, const TrainConfig& base,
                                const EvalSettings& eval, const AblationPlan& plan,
                                const ProgressFn& progress = {});

std::string ablation_table(const std::vector<AblationRow>& rows);

}  // namespace toan
