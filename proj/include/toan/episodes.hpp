#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "toan/autodiff/tensor.hpp"

namespace toan {

enum class SplitTag { kAll, kAuxTrain, kAuxVal, kTarget };

const char* to_string(SplitTag tag);

struct ChannelStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};
};

struct ClassRecord {
  int class_id = 0;
  std::string name;
  std::vector<std::size_t> samples;  // indices into Dataset::image
};

// Immutable once built. Splits of a dataset share its image storage.
class Dataset {
 public:
  Dataset() = default;
  Dataset(int image_size, std::vector<ClassRecord> classes,
          std::shared_ptr<const std::vector<std::vector<float>>> images, SplitTag split);

  int image_size() const { return image_size_; }
  const std::vector<ClassRecord>& classes() const { return classes_; }
  std::size_t class_count() const { return classes_.size(); }
  std::size_t sample_count() const;
  // Planar [3, size, size] values in [0, 1].
  const std::vector<float>& image(std::size_t ref) const { return (*images_).at(ref); }
  SplitTag split() const { return split_; }
  const ChannelStats& stats() const { return stats_; }
  const std::shared_ptr<const std::vector<std::vector<float>>>& storage() const { return images_; }

  // Same storage restricted to `classes`, with freshly measured stats.
  Dataset subset(std::vector<ClassRecord> classes, SplitTag split) const;

 private:
  int image_size_ = 0;
  std::vector<ClassRecord> classes_;
  std::shared_ptr<const std::vector<std::vector<float>>> images_;
  SplitTag split_ = SplitTag::kAll;
  ChannelStats stats_;
};

// One C-way K-shot task. Support refs are class-major (index t * K + k);
// query refs are grouped by class too, with labels in query_labels.
struct Episode {
  int way = 0;
  int shot = 0;
  int queries_per_class = 0;
  std::vector<std::size_t> support;
  std::vector<std::size_t> query;
  std::vector<int> query_labels;  // episode-local class index
  std::vector<int> class_map;     // episode-local index -> dataset class_id

  std::size_t image_count() const { return support.size() + query.size(); }
};

// Stream seed for episode `index` of a run seeded with `base_seed`.
std::uint64_t episode_seed(std::uint64_t base_seed, std::uint64_t index);

Episode sample_episode(const Dataset& ds, int way, int shot, int queries, std::uint64_t seed);

// Stacks the support then the query images into [n, 3, s, s], standardised
// with `mean` / `std`.
template <typename T>
ad::Tensor<T> episode_images(const Dataset& ds, const Episode& ep,
                             const std::array<double, 3>& mean, const std::array<double, 3>& std);

struct DatasetSplits {
  Dataset target;
  Dataset aux_train;
  Dataset aux_val;
};

DatasetSplits split_dataset(const Dataset& ds, int target_classes, int aux_train_classes,
                            int aux_val_classes, std::uint64_t seed);

// Desk-scale stand-in for fine-grained data. All classes share one body
// silhouette and the same base look of every part; a class differs only by a
// micro-pattern of amplitude `epsilon` on its part patches. Each sample
// shuffles which slot each part occupies and shifts it by up to
// `pose_jitter` pixels (no shuffling at jitter 0), then adds Gaussian noise.
struct SyntheticSpec {
  int num_classes = 20;
  int samples_per_class = 60;
  int image_size = 84;
  int part_count = 4;
  int patch_size = 20;
  double epsilon = 0.5;
  int pose_jitter = 4;
  double noise_sigma = 0.05;
  std::uint64_t seed = 7;

  void validate() const;
};

nlohmann::json to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);

Dataset generate_synthetic(const SyntheticSpec& spec);

// root/<class_name>/<image>.{png,ppm}; classes and files in lexicographic
// order. Images are resized to image_size x image_size.
Dataset load_image_folder(const std::filesystem::path& root, int image_size = 84);

// Writes root/<class_name>/<index>.png for every sample.
void save_image_folder(const Dataset& ds, const std::filesystem::path& root);

ChannelStats measure_stats(const std::vector<std::vector<float>>& images,
                           const std::vector<ClassRecord>& classes, int image_size);

}  // namespace toan
