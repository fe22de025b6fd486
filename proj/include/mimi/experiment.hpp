#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mimi/attack.hpp"
#include "mimi/baselines.hpp"
#include "mimi/report.hpp"

namespace mimi {

/// Values for the ablation axes; an empty list means the axis is absent.
struct GridAxes {
  std::vector<double> mask_ratio;
  std::vector<double> epoch_fraction;
  std::vector<std::size_t> shadow_decoder_layers;
  std::vector<std::string> shadow_data;
  std::vector<double> shadow_mask_ratio;
  std::vector<double> target_dropout;
  std::vector<double> target_weight_decay;

  /// Present axes in canonical order with their values as config text.
  std::vector<std::pair<std::string, std::vector<std::string>>> present() const;
  bool empty() const { return present().empty(); }
};

/// Everything one experiment needs, read from flat dotted key=value text.
///
/// Component seeds are derive_seed(seed, name) for the names "split",
/// "target.train", "shadow.train", "attack" and "baseline". The shadow model
/// starts from the target model and applies its own overrides; the shadow
/// training run inherits the target's schedule but never its defenses.
struct ExperimentConfig {
  std::uint64_t seed = 0;

  std::string data_spec = "blobs,n=1280,side=32,classes=10";
  std::string data_path;
  std::string labels_path;
  DataFormat data_format = DataFormat::synthetic;
  bool normalize = true;
  /// Synthetic spec (or file, with data.format) for the shadow side; empty
  /// means the shadow sets come from the target dataset.
  std::string shadow_data_spec;

  SplitSpec split;
  /// Explicit index lists replace the seeded split when set.
  std::optional<SplitIndices> explicit_split;

  ModelConfig target_model;
  std::map<std::string, std::string> shadow_model_overrides;
  TrainConfig target_train;
  /// Evaluate the target from its checkpoint at round(fraction * epochs)
  /// instead of the final weights.
  std::optional<double> checkpoint_fraction;
  /// Fractions whose checkpoints are kept from the same training run.
  std::vector<double> snapshot_fractions;
  std::map<std::string, std::string> shadow_train_overrides;
  TrainConfig finetune;
  /// Fine-tune epochs when finetune.epochs is unset: 60% of target epochs.
  std::optional<std::size_t> finetune_epochs;

  ScoreOptions attack;
  std::vector<std::string> baselines;
  BaselineOptions baseline;
  std::size_t downstream_count = 256;

  GridAxes grid;
  std::string output_dir;
  bool save_models = true;

  ModelConfig shadow_model() const;
  TrainConfig target_train_config() const;
  TrainConfig shadow_train_config() const;
  TrainConfig finetune_config() const;
  /// Epoch whose weights the attack sees: the checkpoint or the final epoch.
  std::size_t target_eval_epoch() const;
  SplitSpec split_spec() const;
  AttackOptions attack_options() const;
  BaselineOptions baseline_options(std::vector<std::size_t> downstream) const;

  /// Throws ConfigError naming the offending key.
  void validate() const;
  /// Canonical key=value text; parse_config(to_text()) reproduces the config.
  std::string to_text() const;
  /// Hex digest of to_text().
  std::string fingerprint() const;
};

/// Applies one setting; unknown keys and bad values throw ConfigError.
void apply_setting(ExperimentConfig& config, const std::string& key, const std::string& value);
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every key apply_setting accepts, with a placeholder for families.
std::vector<std::string> config_keys();

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what);
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Trained models keyed by everything that determines their bytes, so grid
/// cells and repeated runs share training inside one process.
class ModelCache {
 public:
  std::shared_ptr<const PretrainResult> find(const std::string& key) const;
  void store(const std::string& key, std::shared_ptr<const PretrainResult> model);
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  std::map<std::string, std::shared_ptr<const PretrainResult>> entries_;
};

/// Cache key of a pretraining run on dataset[indices].
std::string pretrain_key(const ModelConfig& model, const TrainConfig& train,
                         const std::string& data_id, std::span<const std::size_t> indices);

/// pretrain() through the cache. Every epoch in extra_snapshots is stored
/// too, under the key of a run that stops at that epoch.
std::shared_ptr<const PretrainResult> pretrain_cached(
    const ModelConfig& model, const TrainConfig& train, const Dataset& dataset,
    const std::string& data_id, std::span<const std::size_t> indices, ModelCache* cache,
    std::span<const std::size_t> extra_snapshots = {}, std::ostream* progress = nullptr);

struct RunContext {
  ModelCache* cache = nullptr;
  std::ostream* log = nullptr;
  /// Directory that receives run directories; empty disables persistence.
  std::filesystem::path output_root;
};

struct PipelineResult {
  AttackReport report;
  std::vector<AttackReport> baselines;
  std::filesystem::path run_dir;
};

/// load -> split -> pretrain target -> pretrain shadow -> calibrate ->
/// simulate -> score -> report, then any configured baselines. A failure
/// raises StageError after the artifacts produced so far are written.
PipelineResult run_pipeline(const ExperimentConfig& config, const RunContext& context = {});

/// report.txt: key=value lines followed by a [reports] CSV block.
std::string pipeline_report_text(const ExperimentConfig& config, const PipelineResult& result);

struct GridCell {
  std::vector<std::pair<std::string, std::string>> axes;
  bool ok = false;
  PipelineResult result;
  std::string stage, error;
};

struct GridResult {
  std::vector<std::string> axis_names;
  /// Sorted by axis values (numerically where both values are numbers).
  std::vector<GridCell> cells;
  std::filesystem::path run_dir;

  std::size_t failures() const;
  /// Axis columns, then asr, threshold, objective, member_mean, nonmember_mean;
  /// one row per successful cell.
  Table aggregate() const;
};

/// The base config with one axis value applied.
void apply_axis(ExperimentConfig& config, const std::string& axis, const std::string& value);

/// Cartesian product of the configured axes around a shared base config.
GridResult run_grid(const ExperimentConfig& config, const RunContext& context = {});

/// The configured directory, else $MIMI_OUTPUT_ROOT, else "runs".
std::filesystem::path resolve_output_root(const ExperimentConfig& config);

/// Fresh directory root/<prefix>-<fingerprint>, with -2, -3, ... appended
/// when taken.
std::filesystem::path make_run_dir(const std::filesystem::path& root, const std::string& prefix,
                                   const std::string& fingerprint);

}  // namespace mimi
