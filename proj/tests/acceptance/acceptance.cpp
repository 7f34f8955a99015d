// Acceptance runner: `toan_acceptance --criterion N --work-dir DIR` prints one
// PASS/FAIL line for criterion N and exits non-zero on failure. Tolerances and
// budgets are pinned below.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "toan/checkpoint.hpp"
#include "toan/cli.hpp"
#include "toan/episodes.hpp"
#include "toan/error.hpp"
#include "toan/model.hpp"
#include "toan/trainer.hpp"
#include "toan/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace toan;

namespace {

// ---- pinned tolerances and budgets ---------------------------------------

constexpr double kGradTol = 1e-4;
constexpr double kGradBudgetS = 300;
constexpr double kLowRankTol64 = 1e-10;
constexpr double kLowRankTol32 = 1e-5;
constexpr double kLowRankBudgetS = 60;
constexpr double kSoftmaxTol = 1e-6;
constexpr double kPermutationTol = 1e-6;
constexpr double kChance = 0.20;
constexpr double kChanceTol = 0.03;
constexpr double kLearnTarget = 0.85;
constexpr double kLearnTol = 0.05;
constexpr double kLearnBudgetH = 6;  // per training run
constexpr double kComplexityRatio = 16;
constexpr double kComplexityTol = 0.20;
constexpr int kEvalEpisodes = 1000;

// ---- desk profile shared by criteria 5 to 7 ----------------------------

SyntheticSpec desk_spec() {
  SyntheticSpec s;
  s.num_classes = 30;  // 5 target + 20 auxiliary training + 5 auxiliary validation
  s.samples_per_class = 60;
  s.image_size = 32;
  s.part_count = 4;
  s.patch_size = 12;
  s.epsilon = 0.5;
  s.pose_jitter = 3;
  s.noise_sigma = 0.05;
  s.seed = 7;
  return s;
}

constexpr int kTargetClasses = 5, kTrainClasses = 20, kValClasses = 5;
constexpr std::uint64_t kSplitSeed = 7;

ModelConfig desk_model() {
  ModelConfig m;
  m.image_size = 32;
  m.channels = 16;
  m.head_channels = 16;
  m.groups = 4;
  m.bilinear_dim = 64;
  m.comparator_channels = 16;
  m.comparator_hidden = 8;
  return m;
}

TrainConfig desk_train(bool tomm, bool gpbp) {
  TrainConfig c;
  c.way = 5;
  c.shot = 5;
  c.queries = 5;
  c.total_episodes = 20000;
  c.seed = 1;
  c.model = desk_model();
  c.model.use_tomm = tomm;
  c.model.use_gpbp = gpbp;
  c.validation_every = 2000;
  c.validation_episodes = 300;
  c.log_every = 500;
  return c;
}

EvalSettings desk_eval(int shot) { return EvalSettings{kEvalEpisodes, 5, shot, 15, 1, 1}; }

const DatasetSplits& desk_splits() {
  static const DatasetSplits splits = split_dataset(generate_synthetic(desk_spec()), kTargetClasses,
                                                    kTrainClasses, kValClasses, kSplitSeed);
  return splits;
}

// ---- reporting -----------------------------------------------------------

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), f, a, b, c, d);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome from_suite(const SuiteResult& r) {
  return {r.passed, r.name + ": " + r.detail};
}

// ---- trained desk models, cached in the work dir ---------------------------

struct TrainedVariant {
  std::string label;
  EvalReport report;
  double train_seconds = 0;
  int best_episode = 0;
  double best_val = 0;
};

json report_json(const EvalReport& r) {
  json j = to_json(r, true);
  j["per_episode"] = r.per_episode;
  return j;
}

EvalReport report_from(const json& j) {
  EvalReport r;
  r.n = j.at("n");
  r.mean_acc = j.at("mean_acc");
  r.ci95 = j.at("ci95");
  r.per_episode = j.at("per_episode").get<std::vector<double>>();
  r.config = j.at("config");
  return r;
}

// Trains (or reuses a finished run with the identical configuration) and
// evaluates on the target split with 1000 episodes.
TrainedVariant trained_variant(const fs::path& work, const std::string& name, bool tomm, bool gpbp) {
  const TrainConfig config = desk_train(tomm, gpbp);
  const EvalSettings eval = desk_eval(config.shot);
  const json key{{"data", to_json(desk_spec())},
                 {"split", {kTargetClasses, kTrainClasses, kValClasses, kSplitSeed}},
                 {"train", to_json(config)},
                 {"eval", {eval.episodes, eval.way, eval.shot, eval.queries, eval.seed}},
                 {"build", build_id()}};
  const fs::path dir = work / "desk";
  fs::create_directories(dir);
  const fs::path cache = dir / (name + ".json");
  TrainedVariant v;
  v.label = name;
  if (fs::exists(cache)) {
    std::ifstream in(cache);
    const json j = json::parse(in, nullptr, false);
    if (!j.is_discarded() && j.value("key", json()) == key) {
      std::cout << "reusing " << cache.string() << "\n";
      v.report = report_from(j.at("report"));
      v.train_seconds = j.at("train_seconds");
      v.best_episode = j.at("best_episode");
      v.best_val = j.at("best_val");
      return v;
    }
  }
  const auto& splits = desk_splits();
  TrainConfig run = config;
  run.checkpoint_path = dir / (name + ".ckpt");
  run.log_path = dir / (name + ".csv");
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult result = train(splits.aux_train, splits.aux_val, run, [&](const LogRow& row) {
    if (row.val_accuracy) {
      std::cout << name << " episode " << row.episode << " loss " << row.moving_avg_loss
                << " val_acc " << *row.val_accuracy << std::endl;
    }
  });
  v.train_seconds = seconds_since(t0);
  v.best_episode = result.best_episode;
  v.best_val = result.best_val_accuracy;
  v.report = evaluate_checkpoint(splits.target, run.checkpoint_path, eval);
  std::ofstream out(cache);
  out << json{{"key", key},
              {"report", report_json(v.report)},
              {"train_seconds", v.train_seconds},
              {"best_episode", v.best_episode},
              {"best_val", v.best_val}}
             .dump(2);
  return v;
}

std::string describe(const TrainedVariant& v) {
  return v.label + fmt(" %.2f%% +- %.2f%%", 100 * v.report.mean_acc, 100 * v.report.ci95);
}

// ---- criteria ------------------------------------------------------------

Outcome criterion_1(const fs::path&) {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckOptions opt;
  opt.tolerance = kGradTol;
  const SuiteResult r = verify_gradcheck(opt);
  const double s = seconds_since(t0);
  Outcome o = from_suite(r);
  o.passed = o.passed && s < kGradBudgetS;
  o.detail += fmt("; %.1f s (budget %.0f s)", s, kGradBudgetS);
  return o;
}

Outcome criterion_2(const fs::path&) {
  const auto t0 = std::chrono::steady_clock::now();
  const SuiteResult r64 = verify_lowrank(true, 1000);
  const SuiteResult r32 = verify_lowrank(false, 1000);
  const double s = seconds_since(t0);
  const bool ok = r64.passed && r64.worst <= kLowRankTol64 && r32.passed &&
                  r32.worst <= kLowRankTol32 && s < kLowRankBudgetS;
  return {ok, fmt("64-bit worst %.3g (tol %.0e), 32-bit worst %.3g (tol %.0e)", r64.worst,
                  kLowRankTol64, r32.worst, kLowRankTol32) +
                  fmt("; %.1f s (budget %.0f s)", s, kLowRankBudgetS)};
}

Outcome criterion_3(const fs::path&) {
  const SuiteResult r64 = verify_softmax(true, 1000);
  const SuiteResult r32 = verify_softmax(false, 1000);
  const bool ok = r64.passed && r32.passed && r64.worst <= kSoftmaxTol && r32.worst <= kSoftmaxTol;
  return {ok, "64-bit " + r64.detail + "; 32-bit " + r32.detail};
}

Outcome criterion_4(const fs::path&) {
  const SuiteResult r64 = verify_permutation(true, 100);
  const SuiteResult r32 = verify_permutation(false, 100);
  const bool ok =
      r64.passed && r32.passed && r64.worst <= kPermutationTol && r32.worst <= kPermutationTol;
  return {ok, "64-bit " + r64.detail + "; 32-bit " + r32.detail};
}

Outcome criterion_5(const fs::path&) {
  const auto& splits = desk_splits();
  ModelConfig model = desk_model();
  model.input_mean = splits.aux_train.stats().mean;
  model.input_std = splits.aux_train.stats().std;
  const auto store = init_parameters<float>(model, 1);
  const EvalReport r = evaluate(splits.target, store, model, desk_eval(1));
  const bool ok = std::abs(r.mean_acc - kChance) <= kChanceTol;
  return {ok, fmt("untrained 5-way 1-shot %.2f%% +- %.2f%% over %.0f episodes (expect 20 +- 3)",
                  100 * r.mean_acc, 100 * r.ci95, r.n)};
}

Outcome criterion_6(const fs::path& work) {
  const TrainedVariant full = trained_variant(work, "full", true, true);
  const double floor = kLearnTarget - kLearnTol;
  const bool ok = full.report.mean_acc >= floor && full.train_seconds < kLearnBudgetH * 3600;
  return {ok, "5-way 5-shot target " + describe(full) +
                  fmt(" (need >= %.0f%%); trained in %.1f min, best val %.2f%% at episode %.0f",
                      100 * floor, full.train_seconds / 60, 100 * full.best_val, full.best_episode)};
}

Outcome criterion_7(const fs::path& work) {
  const TrainedVariant full = trained_variant(work, "full", true, true);
  const TrainedVariant no_tomm = trained_variant(work, "no_tomm", false, true);
  const TrainedVariant no_gpbp = trained_variant(work, "no_gpbp", true, false);
  auto separated = [&](const TrainedVariant& base) {
    const double gap = full.report.mean_acc - base.report.mean_acc;
    return gap > 0 && gap > full.report.ci95 + base.report.ci95;
  };
  const bool tomm_ok = separated(no_tomm), gpbp_ok = separated(no_gpbp);
  return {tomm_ok && gpbp_ok, describe(full) + " vs " + describe(no_tomm) +
                                  (tomm_ok ? " [separated]" : " [not separated]") + "; vs " +
                                  describe(no_gpbp) + (gpbp_ok ? " [separated]" : " [not separated]")};
}

Outcome criterion_8(const fs::path&) {
  std::ostringstream detail;
  bool ok = true;

  ModelConfig m;  // 84 px, c = 64, N = 4, M = 1024
  auto store = init_parameters<float>(m, 1);
  LayerContext<float> ctx(store, ad::Mode::kEval);
  const auto image = ad::Tensor<float>::full({1, 3, 84, 84}, 0.5f);
  const auto emb = embed(image, ctx, m.backbone());
  ok &= emb.shape() == ad::Shape{1, 64, 19, 19};
  detail << "embedding " << ad::shape_string(emb.shape());

  const auto flat = ad::reshape(emb, {1, 64, 361});
  const std::vector<std::size_t> qi{0};
  const auto z = gpbp_relation(flat, flat, std::span<const std::size_t>(qi), ctx, m.gpbp());
  ok &= z.shape() == ad::Shape{1, 1024, 361};
  detail << ", Z " << ad::shape_string(z.shape());

  const SyntheticSpec spec{};  // default generator: 20 classes x 60 samples
  const Dataset ds = generate_synthetic(spec);
  const Episode ep = sample_episode(ds, 5, 1, 15, 1);
  const auto images = episode_images<float>(ds, ep, {0, 0, 0}, {1, 1, 1});
  ok &= ep.image_count() == 80 && images.dim(0) == 80;
  detail << ", 5-way 1-shot episode " << images.dim(0) << " images";

  // full-scale forward on the support set plus one query
  const auto one_query = ad::slice(images, 0, 0, 6);
  const auto scores = forward_scores(one_query, 5, 1, ctx, m);
  ok &= scores.shape() == ad::Shape{1, 5};
  detail << ", scores " << ad::shape_string(scores.shape());
  return {ok, detail.str()};
}

Outcome criterion_9(const fs::path& work) {
  SyntheticSpec spec;
  spec.num_classes = 10;
  spec.samples_per_class = 12;
  spec.image_size = 16;
  spec.patch_size = 6;
  spec.pose_jitter = 1;
  const DatasetSplits s = split_dataset(generate_synthetic(spec), 3, 5, 2, 3);
  TrainConfig c;
  c.way = 3;
  c.shot = 1;
  c.queries = 4;
  c.total_episodes = 60;
  c.validation_every = 20;
  c.validation_episodes = 10;
  c.log_every = 20;
  c.model.image_size = 16;
  c.model.channels = 8;
  c.model.head_channels = 8;
  c.model.groups = 2;
  c.model.bilinear_dim = 16;
  c.model.comparator_channels = 8;
  const EvalSettings eval{200, 3, 1, 4, 5, 1};

  const auto a = train(s.aux_train, s.aux_val, c);
  const auto b = train(s.aux_train, s.aux_val, c);
  const std::string ca = serialize_checkpoint(a.best_store, checkpoint_config(a.config));
  const std::string cb = serialize_checkpoint(b.best_store, checkpoint_config(b.config));
  const bool same_ckpt = ca == cb && a.final_store.identical(b.final_store);

  const EvalReport ra = evaluate(s.target, a.best_store, a.config.model, eval);
  const EvalReport rb = evaluate(s.target, b.best_store, b.config.model, eval);
  // wall_ms is the only field allowed to differ
  const bool same_report = ra.n == rb.n && ra.per_episode == rb.per_episode &&
                           ra.mean_acc == rb.mean_acc && ra.ci95 == rb.ci95 &&
                           ra.config == rb.config;

  const fs::path path = work / "determinism.ckpt";
  fs::create_directories(work);
  save_checkpoint(path, a.best_store, checkpoint_config(a.config));
  const EvalReport rl = evaluate_checkpoint(s.target, path, eval);
  const bool round_trip = rl.per_episode == ra.per_episode && rl.mean_acc == ra.mean_acc &&
                          rl.ci95 == ra.ci95;

  return {same_ckpt && same_report && round_trip,
          std::string("checkpoints ") + (same_ckpt ? "bit-identical" : "DIFFER") + " (" +
              std::to_string(ca.size()) + " bytes), reports " +
              (same_report ? "identical" : "DIFFER") + ", save/load evaluation " +
              (round_trip ? "identical" : "DIFFERS")};
}

Outcome criterion_10(const fs::path&) {
  const ComplexityMeasurement m = measure_align_cost(19, 19, 64, 64);
  const double ratio = m.ratio();
  const bool ok = std::abs(ratio / kComplexityRatio - 1) <= kComplexityTol;
  return {ok, fmt("logit MACs %.0f at 19x19, %.0f at 38x38, ratio %.3f (expect 16 +- 20%%)",
                  static_cast<double>(m.base_macs), static_cast<double>(m.doubled_macs), ratio) +
                  fmt("; wall %.2f ms -> %.2f ms", m.base_ms, m.doubled_ms)};
}

const std::map<int, std::pair<const char*, std::function<Outcome(const fs::path&)>>>& criteria() {
  static const std::map<int, std::pair<const char*, std::function<Outcome(const fs::path&)>>> all{
      {1, {"gradient integrity", criterion_1}},
      {2, {"low-rank bilinear identity", criterion_2}},
      {3, {"attention stochasticity", criterion_3}},
      {4, {"permutation recovery", criterion_4}},
      {5, {"chance-level sanity", criterion_5}},
      {6, {"learnability", criterion_6}},
      {7, {"ablation direction", criterion_7}},
      {8, {"shape contracts", criterion_8}},
      {9, {"determinism", criterion_9}},
      {10, {"complexity contract", criterion_10}},
  };
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  int criterion = 0;
  std::string work = "acceptance_work";
  app.add_option("--criterion", criterion, "criterion number, 0 = all")->check(CLI::Range(0, 10));
  app.add_option("--work-dir", work, "scratch directory for trained models and data");
  CLI11_PARSE(app, argc, argv);

  bool all_passed = true;
  for (const auto& [n, entry] : criteria()) {
    if (criterion != 0 && n != criterion) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = entry.second(fs::path(work));
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::cout << "criterion " << n << " (" << entry.first << "): " << (o.passed ? "PASS" : "FAIL")
              << " - " << o.detail << fmt(" [%.1f s]", seconds_since(t0)) << std::endl;
    all_passed &= o.passed;
  }
  return all_passed ? 0 : 1;
}
