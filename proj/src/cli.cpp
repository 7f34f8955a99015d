#include "toan/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "toan/checkpoint.hpp"
#include "toan/episodes.hpp"
#include "toan/error.hpp"
#include "toan/trainer.hpp"
#include "toan/verify.hpp"

#ifndef TOAN_BUILD_ID
#define TOAN_BUILD_ID "unknown"
#endif

namespace toan {

const char* build_id() { return TOAN_BUILD_ID; }

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfigParseError, path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::kIoError, "short write to " + path.string());
}

// Turns a flat JSON config (or the "config" block of a manifest) into flag
// tokens. `true` becomes a bare flag, `false` drops it.
std::vector<std::string> config_tokens(const json& j, const std::string& command) {
  const json* flat = &j;
  if (j.contains("command") && j.contains("config")) {
    if (j.at("command") != command) {
      throw Error(ErrorCode::kConfigParseError,
                  "manifest is for '" + j.at("command").get<std::string>() + "', not '" +
                      command + "'");
    }
    flat = &j.at("config");
  }
  if (!flat->is_object()) throw Error(ErrorCode::kConfigParseError, "config must be a JSON object");
  std::vector<std::string> tokens;
  auto scalar = [](const json& v) {
    return v.is_string() ? v.get<std::string>() : v.dump();
  };
  for (auto it = flat->begin(); it != flat->end(); ++it) {
    const std::string flag = "--" + it.key();
    const json& v = it.value();
    if (v.is_boolean()) {
      if (v.get<bool>()) tokens.push_back(flag);
    } else if (v.is_array()) {
      if (v.empty()) continue;
      tokens.push_back(flag);
      for (const auto& e : v) tokens.push_back(scalar(e));
    } else if (v.is_null()) {
      continue;
    } else {
      tokens.push_back(flag);
      tokens.push_back(scalar(v));
    }
  }
  return tokens;
}

std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  if (args.empty()) return args;
  std::vector<std::string> rest;
  std::vector<std::string> from_file;
  for (std::size_t i = 1; i < args.size(); ++i) {
    std::string path;
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw Error(ErrorCode::kConfigParseError, "--config needs a path");
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
      continue;
    }
    auto tokens = config_tokens(read_json_file(path), args[0]);
    from_file.insert(from_file.end(), tokens.begin(), tokens.end());
  }
  std::vector<std::string> out{args[0]};
  out.insert(out.end(), from_file.begin(), from_file.end());
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

// Registers options while remembering how to echo each resolved value into
// the run manifest.
class Flags {
 public:
  explicit Flags(CLI::App* app) : app_(app) {}

  template <typename V>
  CLI::Option* add(const std::string& name, V& var, const std::string& help) {
    CLI::Option* o = app_->add_option("--" + name, var, help)
                         ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)
                         ->capture_default_str();
    dump_.push_back([name, &var](json& j) { j[name] = var; });
    return o;
  }

  template <typename V>
  CLI::Option* add_list(const std::string& name, std::vector<V>& var, const std::string& help) {
    CLI::Option* o = app_->add_option("--" + name, var, help)
                         ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)
                         ->delimiter(',');
    dump_.push_back([name, &var](json& j) { j[name] = var; });
    return o;
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& help) {
    CLI::Option* o = app_->add_flag("--" + name, var, help);
    dump_.push_back([name, &var](json& j) { j[name] = var; });
    return o;
  }

  json resolved() const {
    json j = json::object();
    for (const auto& d : dump_) d(j);
    return j;
  }

 private:
  CLI::App* app_;
  std::vector<std::function<void(json&)>> dump_;
};

std::uint64_t default_seed() {
  if (const char* env = std::getenv("TOAN_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw Error(ErrorCode::kConfigParseError, std::string("TOAN_SEED is not an integer: ") + env);
    }
  }
  return 1;
}

struct CommonOptions {
  std::uint64_t seed = 1;
  int threads = 1;
  std::string manifest;
};

struct SplitOptions {
  int target_classes = 5;
  int train_classes = 12;
  int val_classes = 3;
  std::uint64_t split_seed = 7;
};

void add_split(Flags& f, SplitOptions& s) {
  f.add("target-classes", s.target_classes, "classes held out as the target split");
  f.add("train-classes", s.train_classes, "auxiliary training classes");
  f.add("val-classes", s.val_classes, "auxiliary validation classes");
  f.add("split-seed", s.split_seed, "seed of the class partition");
}

struct ModelOptions {
  int image_size = 84;
  int channels = 64;
  int head_channels = 64;
  int groups = 4;
  int bilinear_dim = 1024;
  int comparator_channels = 64;
  int comparator_hidden = 8;
  bool no_tomm = false;
  bool no_gpbp = false;
};

void add_model(Flags& f, ModelOptions& m) {
  f.add("image-size", m.image_size, "input side length in pixels");
  f.add("channels", m.channels, "embedding channels c");
  f.add("head-channels", m.head_channels, "TOMM head channels c'");
  f.add("groups", m.groups, "GPBP groups N");
  f.add("bilinear-dim", m.bilinear_dim, "GPBP output channels M");
  f.add("comparator-channels", m.comparator_channels, "comparator conv channels");
  f.add("comparator-hidden", m.comparator_hidden, "comparator hidden units");
  f.flag("no-tomm", m.no_tomm, "class-mean prototypes instead of TOMM");
  f.flag("no-gpbp", m.no_gpbp, "channel concatenation instead of GPBP");
}

ModelConfig model_from(const ModelOptions& m) {
  ModelConfig c;
  c.image_size = m.image_size;
  c.channels = m.channels;
  c.head_channels = m.head_channels;
  c.groups = m.groups;
  c.bilinear_dim = m.bilinear_dim;
  c.comparator_channels = m.comparator_channels;
  c.comparator_hidden = m.comparator_hidden;
  c.use_tomm = !m.no_tomm;
  c.use_gpbp = !m.no_gpbp;
  return c;
}

struct EpisodeOptions {
  int way = 5;
  int shot = 1;
  int queries = 15;
};

void add_episode(Flags& f, EpisodeOptions& e) {
  f.add("way", e.way, "classes per episode");
  f.add("shot", e.shot, "support images per class");
  f.add("queries", e.queries, "query images per class");
}

struct TrainOptions {
  std::string data;
  int episodes = 20000;
  double lr = 0.001;
  int validate_every = 2000;
  int val_episodes = 300;
  int log_every = 100;
  std::string checkpoint = "toan.ckpt";
  std::string log = "train_log.csv";
};

void add_train(Flags& f, TrainOptions& t) {
  f.add("episodes", t.episodes, "training episodes");
  f.add("lr", t.lr, "Adam learning rate");
  f.add("validate-every", t.validate_every, "validation cadence in episodes (0 = off)");
  f.add("val-episodes", t.val_episodes, "episodes per validation pass");
  f.add("log-every", t.log_every, "loss logging cadence in episodes");
}

DatasetSplits load_splits(const std::string& data, int image_size, const SplitOptions& s) {
  if (data.empty()) throw Error(ErrorCode::kConfigParseError, "--data is required");
  const Dataset ds = load_image_folder(data, image_size);
  return split_dataset(ds, s.target_classes, s.train_classes, s.val_classes, s.split_seed);
}

TrainConfig train_config(const EpisodeOptions& e, const TrainOptions& t, const ModelOptions& m,
                         std::uint64_t seed) {
  TrainConfig c;
  c.way = e.way;
  c.shot = e.shot;
  c.queries = e.queries;
  c.total_episodes = t.episodes;
  c.adam.lr = t.lr;
  c.seed = seed;
  c.model = model_from(m);
  c.validation_every = t.validate_every;
  c.validation_episodes = t.val_episodes;
  c.log_every = t.log_every;
  c.validate();
  return c;
}

const Dataset& pick_split(const DatasetSplits& s, const std::string& name) {
  if (name == "target") return s.target;
  if (name == "train") return s.aux_train;
  if (name == "val") return s.aux_val;
  throw Error(ErrorCode::kConfigParseError, "--split must be target, train or val");
}

std::string report_line(const EvalReport& r, int way, int shot) {
  char line[160];
  std::snprintf(line, sizeof(line), "%d-way %d-shot: %.2f%% +- %.2f%% over %d episodes",
                way, shot, 100.0 * r.mean_acc, 100.0 * r.ci95, r.n);
  return line;
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  const std::string started = utc_now();
  std::vector<std::string> args;
  try {
    args = expand_config(raw_args);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  CLI::App app{"TOAN few-shot fine-grained classifier"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(build_id()));

  CommonOptions common;
  common.seed = 1;
  std::string config_path;  // consumed by expand_config; registered so --help lists it
  auto add_common = [&](Flags& f, CLI::App* sub) {
    f.add("seed", common.seed, "base seed (default: $TOAN_SEED or 1)");
    f.add("threads", common.threads, "evaluation worker threads; 1 is bit-reproducible");
    sub->add_option("--manifest", common.manifest, "run manifest path");
    sub->add_option("--config", config_path, "JSON config or manifest; flags override it");
  };

  // gen-data
  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset folder");
  Flags gen_flags(gen);
  SyntheticSpec spec;
  std::string gen_out;
  gen_flags.add("classes", spec.num_classes, "number of classes");
  gen_flags.add("per-class", spec.samples_per_class, "samples per class");
  gen_flags.add("image-size", spec.image_size, "image side length");
  gen_flags.add("parts", spec.part_count, "parts per object");
  gen_flags.add("patch", spec.patch_size, "part patch side length");
  gen_flags.add("epsilon", spec.epsilon, "inter-class micro-pattern amplitude");
  gen_flags.add("jitter", spec.pose_jitter, "pose jitter in pixels (0 = fixed layout)");
  gen_flags.add("noise", spec.noise_sigma, "Gaussian noise sigma");
  gen_flags.add("out", gen_out, "output folder")->required();
  add_common(gen_flags, gen);

  // train
  CLI::App* tr = app.add_subcommand("train", "episodic meta-training");
  Flags tr_flags(tr);
  TrainOptions train_opts;
  EpisodeOptions train_ep;
  ModelOptions train_model;
  SplitOptions train_split;
  tr_flags.add("data", train_opts.data, "dataset folder")->required();
  add_episode(tr_flags, train_ep);
  add_train(tr_flags, train_opts);
  add_model(tr_flags, train_model);
  add_split(tr_flags, train_split);
  tr_flags.add("checkpoint", train_opts.checkpoint, "best checkpoint output");
  tr_flags.add("log", train_opts.log, "training log CSV output");
  add_common(tr_flags, tr);

  // eval
  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  Flags ev_flags(ev);
  std::string eval_data, eval_ckpt, eval_report = "eval_report.json", eval_split = "target";
  int eval_episodes = 1000;
  EpisodeOptions eval_ep;
  SplitOptions eval_splits;
  ev_flags.add("data", eval_data, "dataset folder")->required();
  ev_flags.add("checkpoint", eval_ckpt, "checkpoint to evaluate")->required();
  ev_flags.add("episodes", eval_episodes, "evaluation episodes");
  ev_flags.add("split", eval_split, "target | train | val");
  ev_flags.add("report", eval_report, "JSON report output");
  add_episode(ev_flags, eval_ep);
  add_split(ev_flags, eval_splits);
  add_common(ev_flags, ev);

  // ablate
  CLI::App* ab = app.add_subcommand("ablate", "train and evaluate the ablation grid");
  Flags ab_flags(ab);
  TrainOptions ab_train;
  EpisodeOptions ab_ep;
  ModelOptions ab_model;
  SplitOptions ab_split;
  int ab_eval_episodes = 1000;
  std::vector<int> group_sweep, bilinear_sweep;
  bool no_grid = false;
  std::string ab_report = "ablation.json";
  ab_flags.add("data", ab_train.data, "dataset folder")->required();
  add_episode(ab_flags, ab_ep);
  add_train(ab_flags, ab_train);
  add_model(ab_flags, ab_model);
  add_split(ab_flags, ab_split);
  ab_flags.add("eval-episodes", ab_eval_episodes, "evaluation episodes per variant");
  ab_flags.add_list("group-sweep", group_sweep, "N values for a group sweep");
  ab_flags.add_list("bilinear-sweep", bilinear_sweep, "M values for a bilinear sweep");
  ab_flags.flag("no-grid", no_grid, "skip the +-TOMM x +-GPBP grid");
  ab_flags.add("report", ab_report, "JSON report output");
  add_common(ab_flags, ab);

  // verify
  CLI::App* vf = app.add_subcommand("verify", "run the oracle suites");
  Flags vf_flags(vf);
  std::vector<std::string> suites;
  bool f64 = false;
  std::string vf_report;
  vf_flags.add_list("suite", suites, "gradcheck | lowrank | softmax | permutation | complexity");
  vf_flags.flag("f64", f64, "64-bit checks and tolerances");
  vf_flags.add("report", vf_report, "optional JSON report output");
  add_common(vf_flags, vf);

  try {
    common.seed = default_seed();
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  json manifest{{"build_id", build_id()}, {"started", started}, {"argv", raw_args}};
  json artifacts = json::object();
  std::string manifest_path = common.manifest;
  int status = kExitOk;
  try {
    if (*gen) {
      manifest["command"] = "gen-data";
      manifest["config"] = gen_flags.resolved();
      spec.seed = common.seed;
      spec.validate();
      if (spec.epsilon == 0) err << "warning: classes indistinguishable (epsilon = 0)\n";
      const Dataset ds = generate_synthetic(spec);
      save_image_folder(ds, gen_out);
      const fs::path spec_path = fs::path(gen_out) / "spec.json";
      write_text(spec_path, to_json(spec).dump(2) + "\n");
      artifacts["dataset"] = gen_out;
      artifacts["spec"] = spec_path.string();
      manifest["seeds"] = {{"dataset", spec.seed}};
      if (manifest_path.empty()) manifest_path = (fs::path(gen_out) / "manifest.json").string();
      out << "wrote " << ds.sample_count() << " images in " << ds.class_count() << " classes to "
          << gen_out << "\n";
    } else if (*tr) {
      manifest["command"] = "train";
      manifest["config"] = tr_flags.resolved();
      TrainConfig config = train_config(train_ep, train_opts, train_model, common.seed);
      config.checkpoint_path = train_opts.checkpoint;
      config.log_path = train_opts.log;
      manifest["episode_images"] = config.episode_images();
      manifest["variant"] = std::string(config.model.use_tomm ? "+TOMM" : "-TOMM") +
                            (config.model.use_gpbp ? " +GPBP" : " -GPBP (concatenation)");
      manifest["seeds"] = {{"train", config.seed}, {"split", train_split.split_seed}};
      const DatasetSplits splits =
          load_splits(train_opts.data, config.model.image_size, train_split);
      const TrainResult result = train(splits.aux_train, splits.aux_val, config,
                                       [&](const LogRow& row) {
        if (row.val_accuracy || row.episode % 1000 == 0) {
          out << "episode " << row.episode << " loss " << row.moving_avg_loss;
          if (row.val_accuracy) out << " val_acc " << *row.val_accuracy;
          out << "\n";
        }
      });
      manifest["best_episode"] = result.best_episode;
      manifest["best_val_accuracy"] = result.best_val_accuracy;
      artifacts["checkpoint"] = config.checkpoint_path.string();
      artifacts["log"] = config.log_path.string();
      if (manifest_path.empty()) manifest_path = config.checkpoint_path.string() + ".manifest.json";
      out << "saved " << config.checkpoint_path.string() << " (best episode "
          << result.best_episode << ")\n";
    } else if (*ev) {
      manifest["command"] = "eval";
      manifest["config"] = ev_flags.resolved();
      const Checkpoint ck = load_checkpoint(eval_ckpt);
      const int image_size = ck.config.at("model").value("image_size", 84);
      const DatasetSplits splits = load_splits(eval_data, image_size, eval_splits);
      EvalSettings s{eval_episodes, eval_ep.way, eval_ep.shot, eval_ep.queries, common.seed,
                     common.threads};
      const EvalReport report = evaluate_checkpoint(pick_split(splits, eval_split), eval_ckpt, s);
      json j = to_json(report);
      j["per_episode"] = report.per_episode;
      write_text(eval_report, j.dump(2) + "\n");
      artifacts["report"] = eval_report;
      manifest["seeds"] = {{"eval", common.seed}, {"split", eval_splits.split_seed}};
      if (manifest_path.empty()) manifest_path = eval_report + ".manifest.json";
      out << report_line(report, eval_ep.way, eval_ep.shot) << "\n";
    } else if (*ab) {
      manifest["command"] = "ablate";
      manifest["config"] = ab_flags.resolved();
      const TrainConfig base = train_config(ab_ep, ab_train, ab_model, common.seed);
      const DatasetSplits splits = load_splits(ab_train.data, base.model.image_size, ab_split);
      EvalSettings s{ab_eval_episodes, ab_ep.way, ab_ep.shot, ab_ep.queries, common.seed,
                     common.threads};
      AblationPlan plan{!no_grid, group_sweep, bilinear_sweep};
      const auto rows = ablate(splits.aux_train, splits.aux_val, splits.target, base, s, plan);
      json j = json::array();
      for (const auto& r : rows) {
        json row = to_json(r.report, false);
        row["label"] = r.label;
        j.push_back(row);
      }
      write_text(ab_report, j.dump(2) + "\n");
      artifacts["report"] = ab_report;
      manifest["seeds"] = {{"train", base.seed}, {"eval", common.seed},
                           {"split", ab_split.split_seed}};
      if (manifest_path.empty()) manifest_path = ab_report + ".manifest.json";
      out << ablation_table(rows);
    } else if (*vf) {
      manifest["command"] = "verify";
      manifest["config"] = vf_flags.resolved();
      if (suites.empty()) suites.push_back("all");
      const auto results = run_verify(suites, f64);
      json j = json::array();
      for (const auto& r : results) {
        out << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
        j.push_back({{"suite", r.name},
                     {"passed", r.passed},
                     {"cases", r.cases},
                     {"worst", r.worst},
                     {"tolerance", r.tolerance},
                     {"detail", r.detail}});
        if (!r.passed) status = kExitVerify;
      }
      if (!vf_report.empty()) {
        write_text(vf_report, j.dump(2) + "\n");
        artifacts["report"] = vf_report;
      }
      manifest["results"] = j;
      if (manifest_path.empty()) manifest_path = "verify.manifest.json";
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    switch (e.code()) {
      case ErrorCode::kDivergenceDetected:
      case ErrorCode::kNonFiniteResult:
        status = kExitNumeric;
        break;
      default:
        status = kExitUsage;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    status = kExitUsage;
  }

  manifest["artifacts"] = artifacts;
  manifest["finished"] = utc_now();
  manifest["exit_code"] = status;
  if (!manifest_path.empty()) {
    try {
      write_text(manifest_path, manifest.dump(2) + "\n");
    } catch (const Error& e) {
      err << "error: " << e.what() << "\n";
      if (status == kExitOk) status = kExitUsage;
    }
  }
  return status;
}

}  // namespace toan
