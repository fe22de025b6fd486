#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mimi/tensor.hpp"

namespace mimi {

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// A set of equally sized square images stored contiguously as [n, c, s, s].
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::string name, std::size_t channels, std::size_t side,
          std::vector<float> pixels, std::vector<int> labels = {});

  const std::string& name() const { return name_; }
  std::size_t size() const { return count_; }
  std::size_t channels() const { return channels_; }
  std::size_t side() const { return side_; }
  std::size_t image_numel() const { return channels_ * side_ * side_; }
  bool has_labels() const { return !labels_.empty(); }
  std::size_t num_classes() const;

  std::span<const float> image(std::size_t i) const;
  Tensor image_tensor(std::size_t i) const;
  int label(std::size_t i) const { return labels_.at(i); }
  std::span<const float> pixels() const { return pixels_; }
  std::span<const int> labels() const { return labels_; }
  /// Per-channel statistics over every pixel of every image.
  const ChannelStats& stats() const { return stats_; }

 private:
  std::string name_;
  std::size_t count_ = 0, channels_ = 0, side_ = 0;
  std::vector<float> pixels_;
  std::vector<int> labels_;
  ChannelStats stats_;
};

ChannelStats compute_stats(std::span<const float> pixels, std::size_t channels,
                           std::size_t side);

/// (x - mean) / std per channel using the dataset's own statistics.
Dataset normalize(const Dataset& dataset);

enum class DataFormat { idx, raw_tensor, synthetic };

DataFormat parse_format(std::string_view name);

/// For synthetic, `source` is the spec string itself.
Dataset load_dataset(const std::string& source, DataFormat format);

/// IDX images (magic 0x00000803 [n,s,s] or 0x00000804 [n,c,s,s], u8) scaled
/// to [0,1], with optional IDX labels (0x00000801).
Dataset load_idx(const std::filesystem::path& images,
                 const std::optional<std::filesystem::path>& labels = std::nullopt);
void save_idx(const std::filesystem::path& images, const Dataset& dataset,
              const std::optional<std::filesystem::path>& labels = std::nullopt);

/// Checkpoint container with "images" [n,c,s,s] and optional "labels" [n].
Dataset load_raw(const std::filesystem::path& path);
void save_raw(const std::filesystem::path& path, const Dataset& dataset);

/// Parsed form of "family,key=value,...".
struct SyntheticSpec {
  enum class Family { blobs, stripes, mixed };
  Family family = Family::blobs;
  std::size_t n = 1000;
  std::size_t side = 32;
  std::size_t classes = 10;
  std::size_t channels = 1;
  std::uint64_t seed = 0;

  static SyntheticSpec parse(std::string_view text);
  std::string str() const;
};

/// Class-conditional textures with per-image random placement and phase.
/// Image i depends only on (seed, i), never on n.
Dataset synth_generate(std::string_view spec);
Dataset synth_generate(const SyntheticSpec& spec);

/// Mean pixel value of the stripes family (identical for every pixel).
inline constexpr double kStripesMean = 0.5;

struct SplitSpec {
  std::size_t shadow_train = 256;
  std::size_t shadow_test = 256;
  std::size_t target_train = 256;
  std::size_t target_test = 256;
  std::uint64_t seed = 0;

  std::size_t total() const { return shadow_train + shadow_test + target_train + target_test; }
};

struct SplitIndices {
  std::vector<std::size_t> shadow_train, shadow_test, target_train, target_test;
  /// Indices left over after the four sets, in permutation order.
  std::vector<std::size_t> rest;
};

class InsufficientDataError : public std::invalid_argument {
 public:
  InsufficientDataError(std::size_t required, std::size_t available);
  std::size_t required() const { return required_; }
  std::size_t available() const { return available_; }

 private:
  std::size_t required_, available_;
};

/// Seeded permutation of [0, dataset_size) cut into the four sets in order.
SplitIndices split(std::size_t dataset_size, const SplitSpec& spec);
inline SplitIndices split(const Dataset& dataset, const SplitSpec& spec) {
  return split(dataset.size(), spec);
}

}  // namespace mimi
