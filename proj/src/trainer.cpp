#include "toan/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <deque>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "toan/autodiff/tape.hpp"
#include "toan/checkpoint.hpp"
#include "toan/comparator.hpp"
#include "toan/error.hpp"

namespace toan {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

// Validation and evaluation streams must not collide with the training stream.
constexpr std::uint64_t kValidationStream = 0x5641'4C49'4441'5445ULL;

double episode_accuracy(const ad::Tensor<float>& scores, const std::vector<int>& labels) {
  const std::vector<int> pred = predict(scores);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

}  // namespace

template <typename T>
void adam_step(ParameterStore<T>& store, const std::map<std::string, ad::Tensor<T>>& grads,
               const AdamConfig& adam) {
  for (const auto& [name, p] : store.parameters()) {
    auto it = grads.find(name);
    if (it == grads.end()) {
      throw Error(ErrorCode::kMissingGradient, "no gradient for parameter '" + name + "'");
    }
    if (it->second.shape() != p.shape()) {
      throw Error(ErrorCode::kShapeMismatch, "gradient of '" + name + "' has shape " +
                                                 ad::shape_string(it->second.shape()));
    }
  }
  const std::uint64_t step = store.adam_step() + 1;
  const double c1 = 1.0 - std::pow(adam.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(adam.beta2, static_cast<double>(step));
  const T b1 = static_cast<T>(adam.beta1), b2 = static_cast<T>(adam.beta2);
  const T lr_t = static_cast<T>(adam.lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(adam.eps);
  std::vector<std::pair<std::string, ad::Tensor<T>>> updated;
  for (const auto& [name, p] : store.parameters()) {
    const auto g = grads.at(name).values();
    AdamSlot<T>& slot = store.adam()[name];
    if (slot.m.size() != p.size()) {
      slot.m.assign(p.size(), T(0));
      slot.v.assign(p.size(), T(0));
    }
    std::vector<T> next(p.values().begin(), p.values().end());
    for (std::size_t i = 0; i < next.size(); ++i) {
      slot.m[i] = b1 * slot.m[i] + (1 - b1) * g[i];
      slot.v[i] = b2 * slot.v[i] + (1 - b2) * g[i] * g[i];
      next[i] -= lr_t * slot.m[i] / (std::sqrt(slot.v[i] * inv_c2) + eps);
    }
    updated.emplace_back(name, ad::Tensor<T>(p.shape(), std::move(next)));
  }
  for (auto& [name, t] : updated) store.set(name, std::move(t));
  store.set_adam_step(step);
}

template void adam_step(ParameterStore<float>&, const std::map<std::string, ad::Tensor<float>>&,
                        const AdamConfig&);
template void adam_step(ParameterStore<double>&, const std::map<std::string, ad::Tensor<double>>&,
                        const AdamConfig&);

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw Error(ErrorCode::kInvalidHyperparameter, what);
  };
  if (way < 2) fail("way must be >= 2");
  if (shot < 1) fail("shot must be >= 1");
  if (queries < 1) fail("queries must be >= 1");
  if (total_episodes < 0) fail("total_episodes must be >= 0");
  if (!(adam.lr >= 0) || !std::isfinite(adam.lr)) fail("lr must be finite and >= 0");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1)) {
    fail("Adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0)) fail("Adam eps must be > 0");
  if (validation_every < 0 || validation_episodes < 0) fail("validation settings must be >= 0");
  if (log_every < 1 || moving_average_window < 1) fail("log_every and window must be >= 1");
  model.validate();
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = to_json(c.model);
  j["way"] = c.way;
  j["shot"] = c.shot;
  j["queries"] = c.queries;
  j["episodes"] = c.total_episodes;
  j["lr"] = c.adam.lr;
  j["beta1"] = c.adam.beta1;
  j["beta2"] = c.adam.beta2;
  j["adam_eps"] = c.adam.eps;
  j["seed"] = c.seed;
  j["validation_every"] = c.validation_every;
  j["validation_episodes"] = c.validation_episodes;
  j["log_every"] = c.log_every;
  j["moving_average_window"] = c.moving_average_window;
  j["checkpoint"] = c.checkpoint_path.string();
  j["log"] = c.log_path.string();
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  try {
    nlohmann::json model = to_json(c.model);
    for (auto it = model.begin(); it != model.end(); ++it) {
      if (j.contains(it.key())) it.value() = j.at(it.key());
    }
    c.model = model_config_from_json(model);
    c.way = j.value("way", c.way);
    c.shot = j.value("shot", c.shot);
    c.queries = j.value("queries", c.queries);
    c.total_episodes = j.value("episodes", c.total_episodes);
    c.adam.lr = j.value("lr", c.adam.lr);
    c.adam.beta1 = j.value("beta1", c.adam.beta1);
    c.adam.beta2 = j.value("beta2", c.adam.beta2);
    c.adam.eps = j.value("adam_eps", c.adam.eps);
    c.seed = j.value("seed", c.seed);
    c.validation_every = j.value("validation_every", c.validation_every);
    c.validation_episodes = j.value("validation_episodes", c.validation_episodes);
    c.log_every = j.value("log_every", c.log_every);
    c.moving_average_window = j.value("moving_average_window", c.moving_average_window);
    c.checkpoint_path = j.value("checkpoint", c.checkpoint_path.string());
    c.log_path = j.value("log", c.log_path.string());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfigParseError, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json checkpoint_config(const TrainConfig& config) {
  return {{"model", to_json(config.model)}, {"train", to_json(config)}};
}

TrainResult train(const Dataset& ds_train, const Dataset& ds_val, const TrainConfig& config_in,
                  const ProgressFn& progress) {
  TrainConfig config = config_in;
  config.model.input_mean = ds_train.stats().mean;
  config.model.input_std = ds_train.stats().std;
  config.validate();
  if (ds_train.image_size() != config.model.image_size) {
    throw Error(ErrorCode::kConfigMismatch,
                "dataset images are " + std::to_string(ds_train.image_size()) +
                    " px, model expects " + std::to_string(config.model.image_size));
  }
  const bool validating = config.validation_every > 0 && config.validation_episodes > 0 &&
                          ds_val.class_count() > 0;
  EvalSettings val_settings;
  if (validating) {
    val_settings.episodes = config.validation_episodes;
    val_settings.way = std::min<int>(config.way, static_cast<int>(ds_val.class_count()));
    val_settings.shot = config.shot;
    val_settings.queries = config.queries;
    val_settings.seed = config.seed ^ kValidationStream;
    if (val_settings.way < 2) {
      throw Error(ErrorCode::kInsufficientClasses, "validation split needs >= 2 classes");
    }
  }

  TrainResult result;
  result.config = config;
  ParameterStore<float> store = init_parameters<float>(config.model, config.seed);
  result.best_store = store;
  std::deque<double> window;
  double window_sum = 0;
  const auto start = Clock::now();

  for (int i = 0; i < config.total_episodes; ++i) {
    const Episode ep = sample_episode(ds_train, config.way, config.shot, config.queries,
                                      episode_seed(config.seed, static_cast<std::uint64_t>(i)));
    const ad::Tensor<float> images =
        episode_images<float>(ds_train, ep, config.model.input_mean, config.model.input_std);
    double loss_value = 0;
    try {
      ad::Tape<float> tape;
      LayerContext<float> ctx(store, ad::Mode::kTrain, &tape);
      const ad::Tensor<float> scores =
          forward_scores(images, static_cast<std::size_t>(ep.way),
                         static_cast<std::size_t>(ep.shot), ctx, config.model);
      const ad::Tensor<float> loss = mse_loss(scores, ep.query_labels);
      loss_value = loss.item();
      result.episode_accuracy.push_back(episode_accuracy(scores.detach(), ep.query_labels));
      const auto grads = ctx.named_gradients(tape.backward(loss));
      for (const auto& [name, g] : grads) {
        for (float v : g.values()) {
          if (!std::isfinite(v)) {
            throw Error(ErrorCode::kNonFiniteResult, "gradient of '" + name + "'");
          }
        }
      }
      adam_step(store, grads, config.adam);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNonFiniteResult) throw;
      throw Error(ErrorCode::kDivergenceDetected,
                  "training diverged at episode " + std::to_string(i + 1) + " (" + e.what() +
                      ")");
    }
    result.episode_loss.push_back(loss_value);
    window.push_back(loss_value);
    window_sum += loss_value;
    if (window.size() > static_cast<std::size_t>(config.moving_average_window)) {
      window_sum -= window.front();
      window.pop_front();
    }

    const int done = i + 1;
    const bool validate_now = validating && done % config.validation_every == 0;
    if (done % config.log_every == 0 || validate_now || done == config.total_episodes) {
      LogRow row;
      row.episode = done;
      row.loss = loss_value;
      row.moving_avg_loss = window_sum / static_cast<double>(window.size());
      if (validate_now) {
        const EvalReport val = evaluate(ds_val, store, config.model, val_settings);
        row.val_accuracy = val.mean_acc;
        if (val.mean_acc > result.best_val_accuracy) {
          result.best_val_accuracy = val.mean_acc;
          result.best_episode = done;
          result.best_store = store;
        }
      }
      row.wall_ms = ms_since(start);
      result.log.push_back(row);
      if (progress) progress(row);
    }
  }
  if (result.best_val_accuracy < 0) {
    result.best_store = store;
    result.best_episode = config.total_episodes;
  }
  result.final_store = std::move(store);
  if (!config.checkpoint_path.empty()) {
    save_checkpoint(config.checkpoint_path, result.best_store, checkpoint_config(config));
  }
  if (!config.log_path.empty()) {
    std::ofstream out(config.log_path, std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIoError, "cannot write " + config.log_path.string());
    out << log_csv(result.log);
  }
  return result;
}

std::string log_csv(const std::vector<LogRow>& log) {
  std::ostringstream out;
  out.precision(9);
  out << "episode,loss,moving_avg_loss,val_accuracy,wall_ms\n";
  for (const auto& row : log) {
    out << row.episode << ',' << row.loss << ',' << row.moving_avg_loss << ',';
    if (row.val_accuracy) out << *row.val_accuracy;
    out << ',' << static_cast<long long>(std::llround(row.wall_ms)) << '\n';
  }
  return out.str();
}

nlohmann::json to_json(const EvalReport& r, bool with_episodes) {
  nlohmann::json j{{"n", r.n},
                   {"mean_acc", r.mean_acc},
                   {"ci95", r.ci95},
                   {"config", r.config},
                   {"wall_ms", r.wall_ms}};
  if (with_episodes) j["per_episode"] = r.per_episode;
  return j;
}

EvalReport evaluate(const Dataset& ds, const ParameterStore<float>& store, const ModelConfig& model,
                    const EvalSettings& s) {
  if (s.episodes < 1) throw Error(ErrorCode::kInvalidHyperparameter, "episodes must be >= 1");
  if (ds.image_size() != model.image_size) {
    throw Error(ErrorCode::kConfigMismatch,
                "dataset images are " + std::to_string(ds.image_size()) +
                    " px, model expects " + std::to_string(model.image_size));
  }
  const auto start = Clock::now();
  EvalReport report;
  report.n = s.episodes;
  report.per_episode.assign(static_cast<std::size_t>(s.episodes), 0.0);
  report.config = {{"episodes", s.episodes}, {"way", s.way},   {"shot", s.shot},
                   {"queries", s.queries},   {"seed", s.seed}, {"model", to_json(model)}};

  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&]() {
    ParameterStore<float> local = store;  // eval-mode layers still take a mutable store
    try {
      for (int i = next++; i < s.episodes; i = next++) {
        const Episode ep = sample_episode(ds, s.way, s.shot, s.queries,
                                          episode_seed(s.seed, static_cast<std::uint64_t>(i)));
        const ad::Tensor<float> images =
            episode_images<float>(ds, ep, model.input_mean, model.input_std);
        LayerContext<float> ctx(local, ad::Mode::kEval);
        const ad::Tensor<float> scores =
            forward_scores(images, static_cast<std::size_t>(ep.way),
                           static_cast<std::size_t>(ep.shot), ctx, model);
        report.per_episode[static_cast<std::size_t>(i)] = episode_accuracy(scores, ep.query_labels);
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(failure_mutex);
      if (!failure) failure = std::current_exception();
      next = s.episodes;
    }
  };
  const int threads = std::clamp(s.threads, 1, s.episodes);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);

  double sum = 0;
  for (double a : report.per_episode) sum += a;
  report.mean_acc = sum / report.n;
  if (report.n > 1) {
    double sq = 0;
    for (double a : report.per_episode) sq += (a - report.mean_acc) * (a - report.mean_acc);
    const double stdev = std::sqrt(sq / (report.n - 1));
    report.ci95 = 1.96 * stdev / std::sqrt(static_cast<double>(report.n));
  }
  report.wall_ms = ms_since(start);
  return report;
}

void check_compatible(const ParameterStore<float>& store, const ModelConfig& model) {
  const ParameterStore<float> expected = init_parameters<float>(model, 0);
  for (const auto& [name, t] : expected.parameters()) {
    if (!store.contains(name)) {
      throw Error(ErrorCode::kCheckpointMismatch, "checkpoint lacks parameter '" + name + "'");
    }
    if (store.get(name).shape() != t.shape()) {
      throw Error(ErrorCode::kCheckpointMismatch,
                  "parameter '" + name + "' is " + ad::shape_string(store.get(name).shape()) +
                      ", model expects " + ad::shape_string(t.shape()));
    }
  }
  if (store.parameters().size() != expected.parameters().size()) {
    throw Error(ErrorCode::kCheckpointMismatch, "checkpoint has parameters the model lacks");
  }
  for (const auto& [name, bn] : expected.batch_norms()) {
    auto it = store.batch_norms().find(name);
    if (it == store.batch_norms().end() || it->second.running_mean.size() != bn.running_mean.size()) {
      throw Error(ErrorCode::kCheckpointMismatch, "batch-norm state '" + name + "' mismatched");
    }
  }
}

EvalReport evaluate_checkpoint(const Dataset& ds, const std::filesystem::path& checkpoint,
                               const EvalSettings& settings) {
  Checkpoint ck = load_checkpoint(checkpoint);
  if (!ck.config.contains("model")) {
    throw Error(ErrorCode::kCheckpointMismatch, "checkpoint trailer has no model config");
  }
  ModelConfig model;
  try {
    model = model_config_from_json(ck.config.at("model"));
  } catch (const Error& e) {
    throw Error(ErrorCode::kCheckpointMismatch, e.what());
  }
  check_compatible(ck.store, model);
  return evaluate(ds, ck.store, model, settings);
}

std::vector<AblationRow> ablate(const Dataset& ds_train, const Dataset& ds_val,
                                const Dataset& ds_target, const TrainConfig& base,
                                const EvalSettings& eval, const AblationPlan& plan,
                                const ProgressFn& progress) {
  std::vector<AblationRow> rows;
  auto run = [&](const std::string& label, TrainConfig config) {
    config.checkpoint_path.clear();
    config.log_path.clear();
    TrainResult trained = train(ds_train, ds_val, config, progress);
    AblationRow row{label, trained.config,
                    evaluate(ds_target, trained.best_store, trained.config.model, eval)};
    rows.push_back(std::move(row));
  };
  if (plan.grid) {
    for (bool tomm : {true, false}) {
      for (bool gpbp : {true, false}) {
        TrainConfig c = base;
        c.model.use_tomm = tomm;
        c.model.use_gpbp = gpbp;
        run(std::string(tomm ? "+TOMM" : "-TOMM") + (gpbp ? " +GPBP" : " -GPBP"), c);
      }
    }
  }
  for (int n : plan.group_sweep) {
    TrainConfig c = base;
    c.model.use_tomm = c.model.use_gpbp = true;
    c.model.groups = n;
    run("N=" + std::to_string(n), c);
  }
  for (int m : plan.bilinear_sweep) {
    TrainConfig c = base;
    c.model.use_tomm = c.model.use_gpbp = true;
    c.model.bilinear_dim = m;
    run("M=" + std::to_string(m), c);
  }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "variant        mean_acc   ci95     n\n";
  for (const auto& r : rows) {
    char line[128];
    std::snprintf(line, sizeof(line), "%-14s %7.2f%%  %6.2f%%  %d\n", r.label.c_str(),
                  100.0 * r.report.mean_acc, 100.0 * r.report.ci95, r.report.n);
    out << line;
  }
  return out.str();
}

}  // namespace toan
