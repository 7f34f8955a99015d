#include "toan/episodes.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "toan/error.hpp"
#include "toan/image_io.hpp"

namespace toan {

namespace fs = std::filesystem;

const char* to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::kAll: return "all";
    case SplitTag::kAuxTrain: return "aux_train";
    case SplitTag::kAuxVal: return "aux_val";
    case SplitTag::kTarget: return "target";
  }
  return "unknown";
}

ChannelStats measure_stats(const std::vector<std::vector<float>>& images,
                           const std::vector<ClassRecord>& classes, int image_size) {
  ChannelStats stats;
  const auto plane = static_cast<std::size_t>(image_size) * static_cast<std::size_t>(image_size);
  std::array<double, 3> sum{}, sq{};
  double count = 0;
  for (const auto& cls : classes) {
    for (std::size_t ref : cls.samples) {
      const auto& img = images.at(ref);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t i = 0; i < plane; ++i) {
          const double v = img[ch * plane + i];
          sum[ch] += v;
          sq[ch] += v * v;
        }
      }
      count += static_cast<double>(plane);
    }
  }
  if (count == 0) return stats;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    stats.mean[ch] = sum[ch] / count;
    const double var = std::max(0.0, sq[ch] / count - stats.mean[ch] * stats.mean[ch]);
    stats.std[ch] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return stats;
}

Dataset::Dataset(int image_size, std::vector<ClassRecord> classes,
                 std::shared_ptr<const std::vector<std::vector<float>>> images, SplitTag split)
    : image_size_(image_size), classes_(std::move(classes)), images_(std::move(images)),
      split_(split) {
  for (const auto& cls : classes_) {
    if (cls.samples.empty()) {
      throw Error(ErrorCode::kEmptyClassFolder, "class '" + cls.name + "' has no samples");
    }
  }
  stats_ = measure_stats(*images_, classes_, image_size_);
}

std::size_t Dataset::sample_count() const {
  std::size_t n = 0;
  for (const auto& cls : classes_) n += cls.samples.size();
  return n;
}

Dataset Dataset::subset(std::vector<ClassRecord> classes, SplitTag split) const {
  return Dataset(image_size_, std::move(classes), images_, split);
}

std::uint64_t episode_seed(std::uint64_t base_seed, std::uint64_t index) {
  // splitmix64 finaliser
  std::uint64_t z = (base_seed ^ index) + 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Episode sample_episode(const Dataset& ds, int way, int shot, int queries, std::uint64_t seed) {
  if (way < 1 || shot < 1 || queries < 1) {
    throw Error(ErrorCode::kInvalidHyperparameter,
                "episode needs way, shot and queries >= 1");
  }
  if (ds.class_count() < static_cast<std::size_t>(way)) {
    throw Error(ErrorCode::kInsufficientClasses,
                std::to_string(way) + "-way episode from " + std::to_string(ds.class_count()) +
                    " classes");
  }
  const auto need = static_cast<std::size_t>(shot + queries);
  for (const auto& cls : ds.classes()) {
    if (cls.samples.size() < need) {
      throw Error(ErrorCode::kInsufficientSamples,
                  "class '" + cls.name + "' has " + std::to_string(cls.samples.size()) +
                      " samples, episode needs " + std::to_string(need));
    }
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(ds.class_count());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.queries_per_class = queries;
  for (int t = 0; t < way; ++t) {
    const ClassRecord& cls = ds.classes()[order[static_cast<std::size_t>(t)]];
    ep.class_map.push_back(cls.class_id);
    std::vector<std::size_t> picks(cls.samples);
    // partial Fisher-Yates: the first `need` entries are a uniform draw
    for (std::size_t i = 0; i < need; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, picks.size() - 1);
      std::swap(picks[i], picks[pick(rng)]);
    }
    for (int k = 0; k < shot; ++k) ep.support.push_back(picks[static_cast<std::size_t>(k)]);
    for (int q = 0; q < queries; ++q) {
      ep.query.push_back(picks[static_cast<std::size_t>(shot + q)]);
      ep.query_labels.push_back(t);
    }
  }
  return ep;
}

template <typename T>
ad::Tensor<T> episode_images(const Dataset& ds, const Episode& ep,
                             const std::array<double, 3>& mean, const std::array<double, 3>& std) {
  const auto s = static_cast<std::size_t>(ds.image_size());
  const std::size_t plane = s * s, per_image = 3 * plane;
  std::vector<T> values(ep.image_count() * per_image);
  std::size_t slot = 0;
  auto put = [&](std::size_t ref) {
    const auto& img = ds.image(ref);
    T* dst = values.data() + slot * per_image;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double m = mean[ch], inv = 1.0 / std[ch];
      for (std::size_t i = 0; i < plane; ++i) {
        dst[ch * plane + i] = static_cast<T>((img[ch * plane + i] - m) * inv);
      }
    }
    ++slot;
  };
  for (std::size_t ref : ep.support) put(ref);
  for (std::size_t ref : ep.query) put(ref);
  return ad::Tensor<T>({ep.image_count(), 3, s, s}, std::move(values));
}

template ad::Tensor<float> episode_images(const Dataset&, const Episode&,
                                          const std::array<double, 3>&,
                                          const std::array<double, 3>&);
template ad::Tensor<double> episode_images(const Dataset&, const Episode&,
                                           const std::array<double, 3>&,
                                           const std::array<double, 3>&);

DatasetSplits split_dataset(const Dataset& ds, int target_classes, int aux_train_classes,
                            int aux_val_classes, std::uint64_t seed) {
  if (target_classes < 0 || aux_train_classes < 0 || aux_val_classes < 0 ||
      static_cast<std::size_t>(target_classes) + static_cast<std::size_t>(aux_train_classes) +
              static_cast<std::size_t>(aux_val_classes) >
          ds.class_count()) {
    throw Error(ErrorCode::kSplitOverflow,
                "split " + std::to_string(target_classes) + "/" +
                    std::to_string(aux_train_classes) + "/" + std::to_string(aux_val_classes) +
                    " exceeds " + std::to_string(ds.class_count()) + " classes");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(ds.class_count());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  auto take = [&](int count) {
    std::vector<ClassRecord> out;
    for (int i = 0; i < count; ++i) out.push_back(ds.classes()[order[cursor++]]);
    std::sort(out.begin(), out.end(),
              [](const ClassRecord& a, const ClassRecord& b) { return a.class_id < b.class_id; });
    return out;
  };
  auto make = [&](int count, SplitTag tag) {
    std::vector<ClassRecord> classes = take(count);
    if (classes.empty()) {
      Dataset empty;
      return empty;
    }
    return ds.subset(std::move(classes), tag);
  };
  DatasetSplits splits;
  splits.target = make(target_classes, SplitTag::kTarget);
  splits.aux_train = make(aux_train_classes, SplitTag::kAuxTrain);
  splits.aux_val = make(aux_val_classes, SplitTag::kAuxVal);
  return splits;
}

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kInvalidSpec, what); };
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (samples_per_class < 1) fail("samples_per_class must be >= 1");
  if (image_size < 8) fail("image_size must be >= 8");
  if (part_count < 1) fail("part_count must be >= 1");
  if (patch_size < 4) fail("patch_size must be >= 4");
  if (pose_jitter < 0) fail("pose_jitter must be >= 0");
  if (!(epsilon >= 0) || !std::isfinite(epsilon)) fail("epsilon must be finite and >= 0");
  if (!(noise_sigma >= 0) || !std::isfinite(noise_sigma)) fail("noise_sigma must be >= 0");
  const int grid = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(part_count))));
  if (grid * patch_size + 2 * pose_jitter > image_size) {
    fail("a " + std::to_string(grid) + "x" + std::to_string(grid) + " grid of " +
         std::to_string(patch_size) + " px patches with jitter " + std::to_string(pose_jitter) +
         " does not fit in " + std::to_string(image_size) + " px");
  }
}

nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"num_classes", s.num_classes},   {"samples_per_class", s.samples_per_class},
          {"image_size", s.image_size},     {"part_count", s.part_count},
          {"patch_size", s.patch_size},     {"epsilon", s.epsilon},
          {"pose_jitter", s.pose_jitter},   {"noise_sigma", s.noise_sigma},
          {"seed", s.seed}};
}

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  try {
    s.num_classes = j.value("num_classes", s.num_classes);
    s.samples_per_class = j.value("samples_per_class", s.samples_per_class);
    s.image_size = j.value("image_size", s.image_size);
    s.part_count = j.value("part_count", s.part_count);
    s.patch_size = j.value("patch_size", s.patch_size);
    s.epsilon = j.value("epsilon", s.epsilon);
    s.pose_jitter = j.value("pose_jitter", s.pose_jitter);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfigParseError, std::string("synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

namespace {

constexpr int kPatternBlocks = 4;        // micro-pattern is a 4x4 grid of sign blocks
constexpr double kPatternScale = 0.25;   // intensity swing per unit epsilon

struct PartLook {
  std::array<double, 3> base;
  std::vector<double> texture;  // [patch * patch], shared by every class
};

float quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::round(c * 255.0) / 255.0);
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const int s = spec.image_size, p = spec.patch_size;
  const int grid = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(spec.part_count))));
  const auto plane = static_cast<std::size_t>(s) * static_cast<std::size_t>(s);
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const std::array<double, 3> background{0.45, 0.5, 0.55};
  const std::array<double, 3> body{0.6, 0.45, 0.3};
  std::vector<PartLook> parts(static_cast<std::size_t>(spec.part_count));
  for (auto& part : parts) {
    for (double& c : part.base) c = 0.2 + 0.6 * unit(rng);
    part.texture.resize(static_cast<std::size_t>(p * p));
    const double fx = 1.0 + 2.0 * unit(rng), fy = 1.0 + 2.0 * unit(rng), ph = 6.283 * unit(rng);
    for (int y = 0; y < p; ++y)
      for (int x = 0; x < p; ++x)
        part.texture[static_cast<std::size_t>(y * p + x)] =
            0.08 * std::sin(6.283 * (fx * x + fy * y) / p + ph);
  }

  // Class-specific micro-pattern: per part, per channel, a sign per block.
  const std::size_t pattern_len = static_cast<std::size_t>(3 * kPatternBlocks * kPatternBlocks);
  std::vector<std::vector<std::vector<double>>> patterns(
      static_cast<std::size_t>(spec.num_classes));
  for (auto& cls : patterns) {
    cls.resize(parts.size());
    for (auto& pat : cls) {
      pat.resize(pattern_len);
      for (double& v : pat) v = unit(rng) < 0.5 ? -1.0 : 1.0;
    }
  }

  // Slot origins of the part grid, centred in the image.
  const int span = grid * p;
  const int origin = (s - span) / 2;
  std::vector<std::pair<int, int>> slots;
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) slots.emplace_back(origin + gy * p, origin + gx * p);

  const double cx = (s - 1) / 2.0, cy = (s - 1) / 2.0;
  const double rx = std::min(s / 2.0 - 1.0, span / 2.0 + p * 0.5 + spec.pose_jitter);
  const double ry = std::min(s / 2.0 - 1.0, span / 2.0 + p * 0.25 + spec.pose_jitter);
  std::vector<double> canvas_template(3 * plane);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double dx = (x - cx) / rx, dy = (y - cy) / ry;
      const bool inside = dx * dx + dy * dy <= 1.0;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        canvas_template[ch * plane + static_cast<std::size_t>(y * s + x)] =
            inside ? body[ch] : background[ch];
      }
    }
  }

  auto images = std::make_shared<std::vector<std::vector<float>>>();
  images->reserve(static_cast<std::size_t>(spec.num_classes * spec.samples_per_class));
  std::vector<ClassRecord> classes;
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_int_distribution<int> shift(-spec.pose_jitter, spec.pose_jitter);
  const double amplitude = spec.epsilon * kPatternScale;

  for (int c = 0; c < spec.num_classes; ++c) {
    ClassRecord record;
    record.class_id = c;
    char name[32];
    std::snprintf(name, sizeof(name), "class_%03d", c);
    record.name = name;
    for (int n = 0; n < spec.samples_per_class; ++n) {
      std::vector<double> canvas(canvas_template);
      std::vector<std::size_t> slot_of(parts.size());
      std::iota(slot_of.begin(), slot_of.end(), 0);
      if (spec.pose_jitter > 0) std::shuffle(slot_of.begin(), slot_of.end(), rng);
      for (std::size_t k = 0; k < parts.size(); ++k) {
        int oy = slots[slot_of[k]].first, ox = slots[slot_of[k]].second;
        if (spec.pose_jitter > 0) {
          oy += shift(rng);
          ox += shift(rng);
        }
        const auto& look = parts[k];
        const auto& pat = patterns[static_cast<std::size_t>(c)][k];
        for (int y = 0; y < p; ++y) {
          const int by = y * kPatternBlocks / p;
          for (int x = 0; x < p; ++x) {
            const int bx = x * kPatternBlocks / p;
            const auto pix = static_cast<std::size_t>((oy + y) * s + (ox + x));
            const double tex = look.texture[static_cast<std::size_t>(y * p + x)];
            for (std::size_t ch = 0; ch < 3; ++ch) {
              const double sign =
                  pat[ch * kPatternBlocks * kPatternBlocks +
                      static_cast<std::size_t>(by * kPatternBlocks + bx)];
              canvas[ch * plane + pix] = look.base[ch] + tex + amplitude * sign;
            }
          }
        }
      }
      std::vector<float> img(3 * plane);
      for (std::size_t i = 0; i < img.size(); ++i) {
        const double v = spec.noise_sigma > 0 ? canvas[i] + spec.noise_sigma * noise(rng)
                                              : canvas[i];
        img[i] = quantize(v);
      }
      record.samples.push_back(images->size());
      images->push_back(std::move(img));
    }
    classes.push_back(std::move(record));
  }
  return Dataset(s, std::move(classes), std::move(images), SplitTag::kAll);
}

namespace {

bool is_image_file(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return ext == ".png" || ext == ".ppm";
}

}  // namespace

Dataset load_image_folder(const fs::path& root, int image_size) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) {
    throw Error(ErrorCode::kIoError, "not a directory: " + root.string());
  }
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  if (class_dirs.empty()) {
    throw Error(ErrorCode::kEmptyClassFolder, "no class folders under " + root.string());
  }
  std::sort(class_dirs.begin(), class_dirs.end(),
            [](const fs::path& a, const fs::path& b) {
              return a.filename().string() < b.filename().string();
            });
  auto images = std::make_shared<std::vector<std::vector<float>>>();
  std::vector<ClassRecord> classes;
  for (const auto& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
    }
    if (files.empty()) {
      throw Error(ErrorCode::kEmptyClassFolder, "no PNG/PPM images in " + dir.string());
    }
    std::sort(files.begin(), files.end());
    ClassRecord record;
    record.class_id = static_cast<int>(classes.size());
    record.name = dir.filename().string();
    for (const auto& file : files) {
      record.samples.push_back(images->size());
      images->push_back(to_planar(read_image(file), image_size));
    }
    classes.push_back(std::move(record));
  }
  return Dataset(image_size, std::move(classes), std::move(images), SplitTag::kAll);
}

void save_image_folder(const Dataset& ds, const fs::path& root) {
  std::error_code ec;
  for (const auto& cls : ds.classes()) {
    const fs::path dir = root / cls.name;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorCode::kIoError, "cannot create " + dir.string() + ": " + ec.message());
    for (std::size_t n = 0; n < cls.samples.size(); ++n) {
      char file[32];
      std::snprintf(file, sizeof(file), "%04zu.png", n);
      write_png(dir / file, from_planar(ds.image(cls.samples[n]), ds.image_size()));
    }
  }
}

}  // namespace toan
