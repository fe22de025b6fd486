#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mimi/data.hpp"
#include "mimi/model.hpp"

namespace mimi {

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  /// Encoder dropout while training; 0 falls back to the model's own rate.
  double dropout_rate = 0.0;
  std::uint64_t seed = 0;
  bool freeze_encoder = false;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  /// Throws ConfigError. Fine-tuning passes allow_empty to accept zero
  /// epochs and a zero learning rate.
  void validate(bool allow_empty = false) const;

  std::map<std::string, std::string> to_kv() const;
  static TrainConfig from_kv(const std::map<std::string, std::string>& kv);
};

struct TrainLog {
  std::vector<double> mean_loss;
  std::vector<double> seconds;

  std::size_t epochs() const { return mean_loss.size(); }
  /// "epoch,mean_loss,seconds", epochs numbered from 1.
  void write_csv(std::ostream& out) const;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t epoch, std::size_t batch);
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_, batch_;
};

class FrozenViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<float>> m, v;
};

/// One Adam step with decoupled weight decay:
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
void adam_step(std::span<Tensor> params, std::span<const std::vector<float>> grads,
               AdamState& state, const TrainConfig& config);

/// Rescales grads in place so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_global_norm(std::span<std::vector<float>> grads, double max_norm);

struct TrainHooks {
  /// Epoch counts (1-based) after which on_snapshot is called.
  std::vector<std::size_t> snapshot_epochs;
  std::function<void(std::size_t epoch, const ModelPair&)> on_snapshot;
  std::ostream* progress = nullptr;
};

struct PretrainResult {
  ModelPair model;
  TrainLog log;
};

/// Fresh model trained on dataset[indices] with one new mask per image per
/// epoch. The returned config carries the dropout rate actually used.
PretrainResult pretrain(const ModelConfig& model_config, const TrainConfig& config,
                        const Dataset& dataset, std::span<const std::size_t> indices,
                        const TrainHooks& hooks = {});

struct FinetuneResult {
  Decoder decoder;
  TrainLog log;
};

/// Trains a copy of `decoder` behind a frozen copy of `encoder`. Throws
/// FrozenViolation if any encoder value changes.
FinetuneResult finetune_decoder(const Encoder& encoder, const Decoder& decoder,
                                const Dataset& dataset, std::span<const std::size_t> indices,
                                const TrainConfig& config);

/// Mean masked reconstruction loss with mask seed mix_seed(seed, index).
double reconstruction_loss(const Encoder& encoder, const Decoder& decoder,
                           const Dataset& dataset, std::span<const std::size_t> indices,
                           std::uint64_t seed, LossNorm norm = LossNorm::per_pixel);

/// Stacks dataset images into a [B, n_patches, patch_dim] tensor.
Tensor batch_patches(const Dataset& dataset, std::span<const std::size_t> indices,
                     std::size_t patch_side);

}  // namespace mimi
