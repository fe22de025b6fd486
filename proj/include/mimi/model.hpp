#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mimi/checkpoint.hpp"
#include "mimi/tensor.hpp"

namespace mimi {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Geometry and capacity of one masked autoencoder.
///
/// decoder_dim, decoder_heads and mlp_ratio size the lightweight decoder and
/// the feed-forward sublayers; decoder input is adapted from embed_dim to
/// decoder_dim by a linear layer.
struct ModelConfig {
  std::size_t image_side = 32;
  std::size_t channels = 1;
  std::size_t patch_side = 8;
  std::size_t embed_dim = 64;
  std::size_t encoder_layers = 4;
  std::size_t decoder_layers = 4;
  std::size_t heads = 4;
  double mask_ratio = 0.75;
  double dropout_rate = 0.0;
  std::size_t decoder_dim = 32;
  std::size_t decoder_heads = 4;
  std::size_t mlp_ratio = 2;
  LossNorm loss_norm = LossNorm::per_pixel;

  std::size_t grid_side() const { return image_side / patch_side; }
  std::size_t n_patches() const { return grid_side() * grid_side(); }
  std::size_t patch_dim() const { return channels * patch_side * patch_side; }
  std::size_t n_masked() const;
  std::size_t n_visible() const { return n_patches() - n_masked(); }

  /// Throws ConfigError naming the violated constraint.
  void validate() const;

  std::map<std::string, std::string> to_kv() const;
  static ModelConfig from_kv(const std::map<std::string, std::string>& kv);

  bool operator==(const ModelConfig&) const = default;
};

/// Number of masked patches for a ratio: round(ratio * n_patches).
std::size_t masked_count(std::size_t n_patches, double mask_ratio);

struct MaskPlan {
  std::size_t n_patches = 0;
  std::vector<std::size_t> masked;  // sorted, distinct
  std::uint64_t seed = 0;

  std::vector<std::size_t> visible() const;
  bool is_masked(std::size_t patch) const;
  bool operator==(const MaskPlan&) const = default;
};

/// Uniform subset of round(ratio * n) indices drawn without replacement.
MaskPlan sample_mask(std::size_t n_patches, double mask_ratio, std::uint64_t seed);
/// Plan that hides nothing; encoders accept it for full-image features.
MaskPlan empty_mask(std::size_t n_patches);

/// [C, S, S] image -> [n_patches, C*P*P], patches in raster order; each row is
/// channel-major then row-major within the patch.
Tensor patchify(const Tensor& image, std::size_t patch_side);
Tensor unpatchify(const Tensor& patches, std::size_t channels, std::size_t side);
/// Flat-buffer variants used on dataset storage.
void patchify_into(std::span<const float> image, std::size_t channels,
                   std::size_t side, std::size_t patch_side, std::span<float> out);

struct ForwardOptions {
  double dropout_rate = 0.0;
  std::uint64_t dropout_seed = 0;
};

/// Pre-norm transformer block; parameters live in the owning module.
struct Block {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(const ModelConfig& config, std::uint64_t init_seed);
  Encoder(const Encoder& other);
  Encoder& operator=(const Encoder& other);
  Encoder(Encoder&&) noexcept = default;
  Encoder& operator=(Encoder&&) noexcept = default;

  /// patches [B, T, patch_dim] at integer grid positions [B, T] -> [B, T, D].
  /// When layer_means is given, it receives each block's output mean-pooled
  /// over tokens ([B, D] per block).
  Tensor forward(const Tensor& patches, const Tensor& positions,
                 const ForwardOptions& options = {},
                 std::vector<Tensor>* layer_means = nullptr) const;

  const ModelConfig& config() const { return config_; }
  std::size_t width() const { return config_.embed_dim; }
  NamedTensors parameters() const;
  void set_requires_grad(bool value);

 private:
  template <typename F>
  void for_each_param(F&& fn);

  ModelConfig config_;
  Tensor patch_w_, patch_b_, pos_;
  std::vector<Block> blocks_;
  Tensor norm_g_, norm_b_;
};

class Decoder {
 public:
  Decoder() = default;
  Decoder(const ModelConfig& config, std::uint64_t init_seed);
  Decoder(const Decoder& other);
  Decoder& operator=(const Decoder& other);
  Decoder(Decoder&&) noexcept = default;
  Decoder& operator=(Decoder&&) noexcept = default;

  /// visible [B, n_visible, encoder_width] -> [B, n_patches, patch_dim].
  /// Masked slots are filled with the shared mask token before decoding.
  Tensor forward(const Tensor& visible, std::span<const MaskPlan> plans) const;

  const ModelConfig& config() const { return config_; }
  std::size_t input_width() const { return config_.embed_dim; }
  NamedTensors parameters() const;
  void set_requires_grad(bool value);

 private:
  template <typename F>
  void for_each_param(F&& fn);

  ModelConfig config_;
  Tensor adapt_w_, adapt_b_, mask_token_, pos_;
  std::vector<Block> blocks_;
  Tensor norm_g_, norm_b_, head_w_, head_b_;
};

/// An encoder with the decoder it is reconstructed through.
struct ModelPair {
  ModelConfig config;
  Encoder encoder;
  Decoder decoder;

  static ModelPair create(const ModelConfig& config, std::uint64_t init_seed);
  NamedTensors parameters() const;
};

/// Patches [n_patches, patch_dim] -> embeddings of the visible rows
/// [n_visible, embed_dim].
Tensor encode(const Encoder& encoder, const Tensor& patches, const MaskPlan& plan,
              const ForwardOptions& options = {});
/// Visible embeddings [n_visible, embed_dim] -> [n_patches, patch_dim].
Tensor decode(const Decoder& decoder, const Tensor& visible, const MaskPlan& plan);

/// Batched forms. patches is [B, n_patches, patch_dim]; one plan per row.
Tensor encode_batch(const Encoder& encoder, const Tensor& patches,
                    std::span<const MaskPlan> plans,
                    const ForwardOptions& options = {},
                    std::vector<Tensor>* layer_means = nullptr);
Tensor decode_batch(const Decoder& decoder, const Tensor& visible,
                    std::span<const MaskPlan> plans);

struct Reconstruction {
  Tensor patches;  // [n_patches, patch_dim]
  MaskPlan plan;
};

/// patchify -> sample_mask(seed) -> encode -> decode.
Reconstruction reconstruct(const ModelPair& model, const Tensor& image, std::uint64_t seed);

/// [n_patches] tensor with 1 at masked slots (or everywhere for full scope).
Tensor mask_tensor(const MaskPlan& plan);

/// FNV-1a over parameter names, shapes and raw bytes.
std::uint64_t checksum(const NamedTensors& params);

// Model checkpoints: a key=value text header (ModelConfig plus extra
// entries such as train_seed) terminated by an empty line, followed by the
// MIMT tensor container.
void save_model(const std::filesystem::path& path, const ModelPair& model,
                const std::map<std::string, std::string>& extra = {});
struct LoadedModel {
  ModelPair model;
  std::map<std::string, std::string> header;
};
LoadedModel load_model(const std::filesystem::path& path);

/// Copies values of `source` into same-named parameters of `target`.
void assign_parameters(const NamedTensors& target, const NamedTensors& source,
                       std::string_view prefix = {});

}  // namespace mimi
