#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mimi/data.hpp"
#include "mimi/model.hpp"
#include "mimi/trainer.hpp"

namespace mimi {

enum class ScoreScope { masked_only, full_image };

ScoreScope parse_scope(std::string_view name);
std::string scope_name(ScoreScope scope);

struct ScoreOptions {
  std::size_t n_draws = 4;
  ScoreScope scope = ScoreScope::masked_only;
};

/// Mean squared reconstruction error over n_draws masks; draw d uses mask
/// seed mix_seed(seed, d).
double membership_score(const Encoder& encoder, const Decoder& decoder, const Tensor& image,
                        std::size_t n_draws, std::uint64_t seed,
                        ScoreScope scope = ScoreScope::masked_only);

/// membership_score for every listed image with seed mix_seed(seed, index),
/// evaluated in batches.
std::vector<double> score_samples(const Encoder& encoder, const Decoder& decoder,
                                  const Dataset& dataset, std::span<const std::size_t> indices,
                                  const ScoreOptions& options, std::uint64_t seed);

enum class Split { shadow, target };
std::string split_name(Split split);

struct ScoreRecord {
  std::size_t sample_id = 0;
  double score = 0.0;
  bool is_member = false;
  Split split = Split::target;
};

/// Members first, then non-members, each scored as in score_samples.
std::vector<ScoreRecord> score_records(const Encoder& encoder, const Decoder& decoder,
                                       const Dataset& dataset,
                                       std::span<const std::size_t> members,
                                       std::span<const std::size_t> nonmembers,
                                       const ScoreOptions& options, std::uint64_t seed,
                                       Split split);

/// Member iff score < value.
struct Threshold {
  double value = 0.0;
  double objective = 0.5;
};

/// Cut maximizing balanced accuracy over -inf, midpoints of adjacent
/// distinct scores and +inf; ties go to the smallest cut.
Threshold search_threshold(std::span<const double> member_scores,
                           std::span<const double> nonmember_scores);
Threshold search_threshold(std::span<const ScoreRecord> records);

/// Balanced accuracy of a cut, from integer counts.
double balanced_accuracy(std::span<const double> member_scores,
                         std::span<const double> nonmember_scores, double threshold);

enum class Verdict { member, nonmember };

inline Verdict infer(double score, const Threshold& threshold) {
  return score < threshold.value ? Verdict::member : Verdict::nonmember;
}

/// Fraction of correct verdicts. Writes a warning to `warn` when member and
/// non-member counts differ by more than 1%.
double evaluate_asr(std::span<const Verdict> verdicts, const std::vector<bool>& is_member,
                    std::ostream* warn = nullptr);

struct SummaryStats {
  std::size_t count = 0;
  double mean = 0.0, stddev = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0;
};

/// Population standard deviation; quartiles by linear interpolation.
SummaryStats summarize(std::vector<double> values);

struct AttackReport {
  std::string method = "ours";
  Threshold threshold;
  double asr = 0.5;
  SummaryStats member_stats, nonmember_stats;
  std::vector<ScoreRecord> records;  // evaluation set
  std::vector<Verdict> verdicts;     // parallel to records
  std::vector<ScoreRecord> calibration;
};

/// Applies the threshold to records, filling verdicts, ASR and summaries.
AttackReport make_report(std::string method, const Threshold& threshold,
                         std::vector<ScoreRecord> records, std::ostream* warn = nullptr);

/// Target encoder (frozen copy) with the shadow decoder fine-tuned behind it.
ModelPair simulate_target(const Encoder& target_encoder, const Decoder& shadow_decoder,
                          const Dataset& shadow_data, std::span<const std::size_t> shadow_train,
                          const TrainConfig& config);

struct AttackInputs {
  const ModelPair* target = nullptr;  // only the encoder is used
  const ModelPair* shadow = nullptr;
  const Dataset* target_data = nullptr;
  const Dataset* shadow_data = nullptr;
  std::span<const std::size_t> shadow_train, shadow_test, target_train, target_test;
};

struct AttackOptions {
  ScoreOptions score;
  TrainConfig finetune;
  std::uint64_t seed = 0;
};

/// Threshold from shadow scores, then verdicts on target scores through the
/// simulated pipeline.
AttackReport run_attack(const AttackInputs& in, const AttackOptions& options,
                        std::ostream* warn = nullptr);

void write_scores_csv(std::ostream& out, std::span<const ScoreRecord> records);

}  // namespace mimi
