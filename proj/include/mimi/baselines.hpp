#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mimi/attack.hpp"

namespace mimi {

using FeatureRows = std::vector<std::vector<float>>;

struct ClassifierConfig {
  std::size_t hidden = 32;
  std::size_t epochs = 150;
  std::size_t batch_size = 64;
  double learning_rate = 3e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

/// input_dim -> hidden -> 2 feed-forward network with GELU, trained with
/// cross-entropy on standardized features. Label 1 means member.
class BinaryAttackClassifier {
 public:
  BinaryAttackClassifier(std::size_t input_dim, const ClassifierConfig& config);

  void fit(const FeatureRows& x, const std::vector<int>& labels);
  /// (P(nonmember), P(member)) per row.
  std::vector<std::array<double, 2>> predict_proba(const FeatureRows& x) const;

  std::size_t input_dim() const { return input_dim_; }
  const TrainLog& log() const { return log_; }

 private:
  Tensor forward(const Tensor& x) const;
  Tensor standardize(const FeatureRows& x) const;

  std::size_t input_dim_;
  ClassifierConfig config_;
  Tensor w1_, b1_, w2_, b2_;
  std::vector<double> mean_, scale_;
  TrainLog log_;
};

/// Mean-pooled final embeddings of full (unmasked) images, [N][embed_dim].
FeatureRows pooled_embeddings(const Encoder& encoder, const Dataset& dataset,
                              std::span<const std::size_t> indices);

/// Pooled final embedding followed by each block's pooled activations,
/// length embed_dim * (encoder_layers + 1).
FeatureRows encoder_features(const Encoder& encoder, const Dataset& dataset,
                             std::span<const std::size_t> indices);

/// Shannon entropy (nats) of softmax(embedding).
double embedding_entropy(std::span<const float> embedding);

/// Mean pairwise Euclidean distance between pooled embeddings of k masked
/// views; view v uses mask seed mix_seed(seed, v), or `seed` for every view
/// when same_seed is set.
double embedding_instability(const Encoder& encoder, const Tensor& image, std::size_t k,
                             std::uint64_t seed, bool same_seed = false);

struct BaselineOptions {
  ClassifierConfig classifier;
  /// Labeled images for the downstream heads of Baseline-A.
  std::vector<std::size_t> downstream;
  std::size_t downstream_epochs = 100;
  std::size_t k = 10;
  bool shuffle_labels = false;
  std::uint64_t seed = 0;
};

AttackReport baseline_a(const AttackInputs& in, const BaselineOptions& options);
AttackReport baseline_b(const AttackInputs& in, const BaselineOptions& options);
AttackReport baseline_c(const AttackInputs& in, const BaselineOptions& options);
AttackReport baseline_d(const AttackInputs& in, const BaselineOptions& options);

/// Dispatch by method name: "A", "B", "C" or "D".
AttackReport run_baseline(const std::string& method, const AttackInputs& in,
                          const BaselineOptions& options);

}  // namespace mimi
