#include "mimi/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "mimi/format.hpp"
#include "mimi/rng.hpp"

namespace mimi {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Grid axes

namespace {

template <typename T>
std::vector<std::string> as_text(const std::vector<T>& values) {
  std::vector<std::string> out;
  for (const auto& v : values) {
    if constexpr (std::is_same_v<T, double>) {
      out.push_back(format_double(v));
    } else if constexpr (std::is_same_v<T, std::string>) {
      out.push_back(v);
    } else {
      out.push_back(std::to_string(v));
    }
  }
  return out;
}

std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::string join_indices(std::span<const std::size_t> xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(xs[i]);
  }
  return out;
}

}  // namespace

std::vector<std::pair<std::string, std::vector<std::string>>> GridAxes::present() const {
  std::vector<std::pair<std::string, std::vector<std::string>>> out;
  auto add = [&](const char* name, std::vector<std::string> values) {
    if (!values.empty()) out.emplace_back(name, std::move(values));
  };
  add("mask_ratio", as_text(mask_ratio));
  add("epoch_fraction", as_text(epoch_fraction));
  add("shadow_decoder_layers", as_text(shadow_decoder_layers));
  add("shadow_data", as_text(shadow_data));
  add("shadow_mask_ratio", as_text(shadow_mask_ratio));
  add("target_dropout", as_text(target_dropout));
  add("target_weight_decay", as_text(target_weight_decay));
  return out;
}

// ---------------------------------------------------------------------------
// Derived settings

ModelConfig ExperimentConfig::shadow_model() const {
  auto kv = target_model.to_kv();
  kv["dropout_rate"] = "0";
  for (const auto& [k, v] : shadow_model_overrides) kv[k] = v;
  return ModelConfig::from_kv(kv);
}

TrainConfig ExperimentConfig::target_train_config() const {
  TrainConfig c = target_train;
  c.seed = derive_seed(seed, "target.train");
  return c;
}

TrainConfig ExperimentConfig::shadow_train_config() const {
  TrainConfig base = target_train;
  base.weight_decay = 0.0;
  base.dropout_rate = 0.0;
  auto kv = base.to_kv();
  for (const auto& [k, v] : shadow_train_overrides) kv[k] = v;
  TrainConfig c = TrainConfig::from_kv(kv);
  c.seed = derive_seed(seed, "shadow.train");
  return c;
}

TrainConfig ExperimentConfig::finetune_config() const {
  TrainConfig c = finetune;
  c.epochs = finetune_epochs ? *finetune_epochs
                             : static_cast<std::size_t>(std::llround(0.6 * double(target_train.epochs)));
  return c;
}

std::size_t ExperimentConfig::target_eval_epoch() const {
  if (!checkpoint_fraction) return target_train.epochs;
  const auto e = static_cast<std::size_t>(std::llround(*checkpoint_fraction * double(target_train.epochs)));
  return std::clamp<std::size_t>(e, 1, target_train.epochs);
}

SplitSpec ExperimentConfig::split_spec() const {
  SplitSpec s = split;
  s.seed = derive_seed(seed, "split");
  return s;
}

AttackOptions ExperimentConfig::attack_options() const {
  AttackOptions o;
  o.score = attack;
  o.finetune = finetune_config();
  o.seed = derive_seed(seed, "attack");
  return o;
}

BaselineOptions ExperimentConfig::baseline_options(std::vector<std::size_t> downstream) const {
  BaselineOptions o = baseline;
  o.downstream = std::move(downstream);
  o.seed = derive_seed(seed, "baseline");
  o.classifier.seed = derive_seed(seed, "baseline.classifier");
  return o;
}

// ---------------------------------------------------------------------------
// Parsing

namespace {

const std::vector<std::string> kSplitSets{"shadow_train", "shadow_test", "target_train",
                                          "target_test"};

std::vector<std::size_t>& split_set(SplitIndices& s, const std::string& name) {
  if (name == "shadow_train") return s.shadow_train;
  if (name == "shadow_test") return s.shadow_test;
  if (name == "target_train") return s.target_train;
  return s.target_test;
}

std::size_t& split_count(SplitSpec& s, const std::string& name) {
  if (name == "shadow_train") return s.shadow_train;
  if (name == "shadow_test") return s.shadow_test;
  if (name == "target_train") return s.target_train;
  return s.target_test;
}

bool starts_with(const std::string& s, std::string_view prefix) {
  return s.compare(0, prefix.size(), prefix) == 0;
}

std::vector<double> parse_reals(const std::string& v, const std::string& key) {
  std::vector<double> out;
  for (const auto& part : split_list(v)) out.push_back(parse_double(part, key));
  return out;
}

std::vector<std::size_t> parse_counts(const std::string& v, const std::string& key) {
  std::vector<std::size_t> out;
  for (const auto& part : split_list(v)) out.push_back(parse_u64(part, key));
  return out;
}

bool is_model_key(const std::string& k) {
  const auto kv = ModelConfig{}.to_kv();
  return kv.count(k) > 0;
}

bool is_train_key(const std::string& k) {
  return k != "seed" && TrainConfig{}.to_kv().count(k) > 0;
}

void set_model_key(ModelConfig& m, const std::string& k, const std::string& v) {
  auto kv = m.to_kv();
  kv[k] = v;
  m = ModelConfig::from_kv(kv);
}

void set_train_key(TrainConfig& t, const std::string& k, const std::string& v) {
  auto kv = t.to_kv();
  kv[k] = v;
  t = TrainConfig::from_kv(kv);
}

void apply_setting_unchecked(ExperimentConfig& c, const std::string& key, const std::string& v) {
  if (key == "seed") {
    c.seed = parse_u64(v, key);
  } else if (key == "data.spec") {
    c.data_spec = v;
  } else if (key == "data.path") {
    c.data_path = v;
  } else if (key == "data.labels") {
    c.labels_path = v;
  } else if (key == "data.format") {
    c.data_format = parse_format(v);
  } else if (key == "data.normalize") {
    c.normalize = parse_bool(v, key);
  } else if (key == "shadow_data.spec") {
    c.shadow_data_spec = v;
  } else if (starts_with(key, "split.indices.")) {
    const std::string set = key.substr(14);
    if (std::find(kSplitSets.begin(), kSplitSets.end(), set) == kSplitSets.end()) {
      throw ConfigError("unknown config key '" + key + "'");
    }
    if (!c.explicit_split) c.explicit_split.emplace();
    split_set(*c.explicit_split, set) = parse_counts(v, key);
  } else if (starts_with(key, "split.") &&
             std::find(kSplitSets.begin(), kSplitSets.end(), key.substr(6)) != kSplitSets.end()) {
    split_count(c.split, key.substr(6)) = parse_u64(v, key);
  } else if (starts_with(key, "target.model.") && is_model_key(key.substr(13))) {
    set_model_key(c.target_model, key.substr(13), v);
  } else if (starts_with(key, "shadow.model.") && is_model_key(key.substr(13))) {
    ModelConfig probe;
    set_model_key(probe, key.substr(13), v);
    c.shadow_model_overrides[key.substr(13)] = probe.to_kv().at(key.substr(13));
  } else if (key == "target.train.checkpoint_fraction") {
    c.checkpoint_fraction = parse_double(v, key);
  } else if (key == "target.train.snapshot_fractions") {
    c.snapshot_fractions = parse_reals(v, key);
  } else if (starts_with(key, "target.train.") && is_train_key(key.substr(13))) {
    set_train_key(c.target_train, key.substr(13), v);
  } else if (starts_with(key, "shadow.train.") && is_train_key(key.substr(13))) {
    TrainConfig probe;
    set_train_key(probe, key.substr(13), v);
    c.shadow_train_overrides[key.substr(13)] = probe.to_kv().at(key.substr(13));
  } else if (key == "finetune.epochs") {
    c.finetune_epochs = parse_u64(v, key);
  } else if (starts_with(key, "finetune.") && is_train_key(key.substr(9))) {
    set_train_key(c.finetune, key.substr(9), v);
  } else if (key == "attack.n_draws") {
    c.attack.n_draws = parse_u64(v, key);
  } else if (key == "attack.scope") {
    c.attack.scope = parse_scope(v);
  } else if (key == "baseline.methods") {
    c.baselines = split_list(v);
  } else if (key == "baseline.k") {
    c.baseline.k = parse_u64(v, key);
  } else if (key == "baseline.downstream_count") {
    c.downstream_count = parse_u64(v, key);
  } else if (key == "baseline.downstream_epochs") {
    c.baseline.downstream_epochs = parse_u64(v, key);
  } else if (key == "baseline.classifier_epochs") {
    c.baseline.classifier.epochs = parse_u64(v, key);
  } else if (key == "baseline.classifier_hidden") {
    c.baseline.classifier.hidden = parse_u64(v, key);
  } else if (key == "baseline.classifier_lr") {
    c.baseline.classifier.learning_rate = parse_double(v, key);
  } else if (key == "baseline.shuffle_labels") {
    c.baseline.shuffle_labels = parse_bool(v, key);
  } else if (key == "grid.mask_ratio") {
    c.grid.mask_ratio = parse_reals(v, key);
  } else if (key == "grid.epoch_fraction") {
    c.grid.epoch_fraction = parse_reals(v, key);
  } else if (key == "grid.shadow_decoder_layers") {
    c.grid.shadow_decoder_layers = parse_counts(v, key);
  } else if (key == "grid.shadow_data") {
    c.grid.shadow_data = split_list(v, ';');
  } else if (key == "grid.shadow_mask_ratio") {
    c.grid.shadow_mask_ratio = parse_reals(v, key);
  } else if (key == "grid.target_dropout") {
    c.grid.target_dropout = parse_reals(v, key);
  } else if (key == "grid.target_weight_decay") {
    c.grid.target_weight_decay = parse_reals(v, key);
  } else if (key == "output.dir") {
    c.output_dir = v;
  } else if (key == "output.save_models") {
    c.save_models = parse_bool(v, key);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

}  // namespace

void apply_setting(ExperimentConfig& config, const std::string& key, const std::string& value) {
  if (starts_with(key, "grid.") && trim(value).empty()) {
    throw ConfigError("config key '" + key + "': a grid axis needs at least one value");
  }
  try {
    apply_setting_unchecked(config, key, std::string(trim(value)));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  std::map<std::string, std::string> kv;
  try {
    kv = parse_kv_text(text);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto& [k, v] : kv) apply_setting(c, k, v);
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys{"seed",        "data.spec",       "data.path",
                                "data.labels", "data.format",     "data.normalize",
                                "shadow_data.spec"};
  for (const auto& s : kSplitSets) keys.push_back("split." + s);
  for (const auto& s : kSplitSets) keys.push_back("split.indices." + s);
  for (const auto& [k, v] : ModelConfig{}.to_kv()) keys.push_back("target.model." + k);
  for (const auto& [k, v] : ModelConfig{}.to_kv()) keys.push_back("shadow.model." + k);
  for (const char* scope : {"target.train.", "shadow.train.", "finetune."}) {
    for (const auto& [k, v] : TrainConfig{}.to_kv()) {
      if (k != "seed") keys.push_back(scope + k);
    }
  }
  keys.insert(keys.end(),
              {"target.train.checkpoint_fraction", "target.train.snapshot_fractions",
               "attack.n_draws", "attack.scope", "baseline.methods", "baseline.k",
               "baseline.downstream_count", "baseline.downstream_epochs",
               "baseline.classifier_epochs", "baseline.classifier_hidden",
               "baseline.classifier_lr", "baseline.shuffle_labels", "grid.mask_ratio",
               "grid.epoch_fraction", "grid.shadow_decoder_layers", "grid.shadow_data",
               "grid.shadow_mask_ratio", "grid.target_dropout", "grid.target_weight_decay",
               "output.dir", "output.save_models"});
  return keys;
}

// ---------------------------------------------------------------------------
// Validation and canonical text

void ExperimentConfig::validate() const {
  target_model.validate();
  shadow_model().validate();
  target_train.validate();
  shadow_train_config().validate();
  finetune_config().validate(true);
  if (attack.n_draws == 0) throw ConfigError("attack.n_draws must be at least 1");
  if (data_format == DataFormat::synthetic ? data_spec.empty() : data_path.empty()) {
    throw ConfigError(data_format == DataFormat::synthetic ? "data.spec is empty"
                                                           : "data.path is empty");
  }
  if (checkpoint_fraction && !(*checkpoint_fraction > 0.0 && *checkpoint_fraction <= 1.0)) {
    throw ConfigError("target.train.checkpoint_fraction must lie in (0, 1]");
  }
  for (double f : snapshot_fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("target.train.snapshot_fractions must lie in (0, 1]");
  }
  for (const auto& m : baselines) {
    if (m != "A" && m != "B" && m != "C" && m != "D") {
      throw ConfigError("baseline.methods: unknown method '" + m + "' (expected A, B, C or D)");
    }
  }
  if (explicit_split) {
    std::set<std::size_t> target_side, shadow_side;
    for (const auto& name : kSplitSets) {
      const auto& set = split_set(const_cast<SplitIndices&>(*explicit_split), name);
      if (set.empty()) throw ConfigError("split.indices." + name + " is missing or empty");
      auto& side = (name[0] == 't' || shadow_data_spec.empty()) ? target_side : shadow_side;
      for (std::size_t i : set) {
        if (!side.insert(i).second) {
          throw ConfigError("split.indices." + name + ": index " + std::to_string(i) +
                            " appears in more than one set");
        }
      }
    }
  } else {
    for (const auto& name : kSplitSets) {
      if (split_count(const_cast<SplitSpec&>(split), name) == 0) {
        throw ConfigError("split." + name + " must be positive");
      }
    }
  }
  for (const auto& [name, values] : grid.present()) {
    if (values.empty()) throw ConfigError("grid." + name + " is empty");
  }
  for (double f : grid.epoch_fraction) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("grid.epoch_fraction values must lie in (0, 1]");
  }
  for (double r : grid.mask_ratio) {
    ModelConfig m = target_model;
    m.mask_ratio = r;
    m.validate();
  }
  for (double r : grid.shadow_mask_ratio) {
    ModelConfig m = shadow_model();
    m.mask_ratio = r;
    m.validate();
  }
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream out;
  out << "seed=" << seed << '\n';
  out << "data.spec=" << data_spec << '\n';
  out << "data.path=" << data_path << '\n';
  out << "data.labels=" << labels_path << '\n';
  out << "data.format="
      << (data_format == DataFormat::idx ? "idx"
          : data_format == DataFormat::raw_tensor ? "raw" : "synthetic")
      << '\n';
  out << "data.normalize=" << (normalize ? "true" : "false") << '\n';
  out << "shadow_data.spec=" << shadow_data_spec << '\n';
  for (const auto& name : kSplitSets) {
    out << "split." << name << '=' << split_count(const_cast<SplitSpec&>(split), name) << '\n';
  }
  if (explicit_split) {
    for (const auto& name : kSplitSets) {
      out << "split.indices." << name << '='
          << join_indices(split_set(const_cast<SplitIndices&>(*explicit_split), name)) << '\n';
    }
  }
  for (const auto& [k, v] : target_model.to_kv()) out << "target.model." << k << '=' << v << '\n';
  for (const auto& [k, v] : shadow_model_overrides) out << "shadow.model." << k << '=' << v << '\n';
  for (const auto& [k, v] : target_train.to_kv()) {
    if (k != "seed") out << "target.train." << k << '=' << v << '\n';
  }
  if (checkpoint_fraction) {
    out << "target.train.checkpoint_fraction=" << format_double(*checkpoint_fraction) << '\n';
  }
  if (!snapshot_fractions.empty()) {
    out << "target.train.snapshot_fractions=" << join(as_text(snapshot_fractions), ',') << '\n';
  }
  for (const auto& [k, v] : shadow_train_overrides) out << "shadow.train." << k << '=' << v << '\n';
  for (const auto& [k, v] : finetune.to_kv()) {
    if (k != "seed" && k != "epochs") out << "finetune." << k << '=' << v << '\n';
  }
  if (finetune_epochs) out << "finetune.epochs=" << *finetune_epochs << '\n';
  out << "attack.n_draws=" << attack.n_draws << '\n';
  out << "attack.scope=" << scope_name(attack.scope) << '\n';
  out << "baseline.methods=" << join(baselines, ',') << '\n';
  out << "baseline.k=" << baseline.k << '\n';
  out << "baseline.downstream_count=" << downstream_count << '\n';
  out << "baseline.downstream_epochs=" << baseline.downstream_epochs << '\n';
  out << "baseline.classifier_epochs=" << baseline.classifier.epochs << '\n';
  out << "baseline.classifier_hidden=" << baseline.classifier.hidden << '\n';
  out << "baseline.classifier_lr=" << format_double(baseline.classifier.learning_rate) << '\n';
  out << "baseline.shuffle_labels=" << (baseline.shuffle_labels ? "true" : "false") << '\n';
  for (const auto& [name, values] : grid.present()) {
    out << "grid." << name << '=' << join(values, name == "shadow_data" ? ';' : ',') << '\n';
  }
  out << "output.dir=" << output_dir << '\n';
  out << "output.save_models=" << (save_models ? "true" : "false") << '\n';
  return out.str();
}

std::string ExperimentConfig::fingerprint() const {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << splitmix64(fnv1a(to_text()));
  return out.str();
}

// ---------------------------------------------------------------------------
// Model cache

StageError::StageError(std::string stage, const std::string& what)
    : std::runtime_error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}

std::shared_ptr<const PretrainResult> ModelCache::find(const std::string& key) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : it->second;
}

void ModelCache::store(const std::string& key, std::shared_ptr<const PretrainResult> model) {
  entries_[key] = std::move(model);
}

std::string pretrain_key(const ModelConfig& model, const TrainConfig& train,
                         const std::string& data_id, std::span<const std::size_t> indices) {
  std::ostringstream out;
  for (const auto& [k, v] : model.to_kv()) out << "model." << k << '=' << v << ';';
  for (const auto& [k, v] : train.to_kv()) out << "train." << k << '=' << v << ';';
  out << "data=" << data_id << ";indices=" << std::hex << fnv1a(join_indices(indices));
  return out.str();
}

std::shared_ptr<const PretrainResult> pretrain_cached(const ModelConfig& model,
                                                      const TrainConfig& train,
                                                      const Dataset& dataset,
                                                      const std::string& data_id,
                                                      std::span<const std::size_t> indices,
                                                      ModelCache* cache,
                                                      std::span<const std::size_t> extra_snapshots,
                                                      std::ostream* progress) {
  const std::string key = pretrain_key(model, train, data_id, indices);
  std::vector<std::size_t> snaps;
  for (std::size_t e : extra_snapshots) {
    if (e >= 1 && e < train.epochs) snaps.push_back(e);
  }
  std::sort(snaps.begin(), snaps.end());
  snaps.erase(std::unique(snaps.begin(), snaps.end()), snaps.end());
  auto snap_key = [&](std::size_t e) {
    TrainConfig t = train;
    t.epochs = e;
    return pretrain_key(model, t, data_id, indices);
  };
  if (cache) {
    auto hit = cache->find(key);
    const bool all = std::all_of(snaps.begin(), snaps.end(),
                                 [&](std::size_t e) { return cache->find(snap_key(e)) != nullptr; });
    if (hit && all) return hit;
  }
  std::vector<std::pair<std::size_t, ModelPair>> captured;
  TrainHooks hooks;
  hooks.snapshot_epochs = snaps;
  hooks.on_snapshot = [&](std::size_t epoch, const ModelPair& pair) {
    captured.emplace_back(epoch, pair);
  };
  hooks.progress = progress;
  auto result = std::make_shared<PretrainResult>(pretrain(model, train, dataset, indices, hooks));
  if (cache) {
    for (auto& [epoch, pair] : captured) {
      TrainLog log;
      log.mean_loss.assign(result->log.mean_loss.begin(), result->log.mean_loss.begin() + long(epoch));
      log.seconds.assign(result->log.seconds.begin(), result->log.seconds.begin() + long(epoch));
      cache->store(snap_key(epoch),
                   std::make_shared<PretrainResult>(PretrainResult{std::move(pair), std::move(log)}));
    }
    cache->store(key, result);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Pipeline

fs::path resolve_output_root(const ExperimentConfig& config) {
  if (!config.output_dir.empty()) return config.output_dir;
  if (const char* env = std::getenv("MIMI_OUTPUT_ROOT"); env && *env) return env;
  return "runs";
}

fs::path make_run_dir(const fs::path& root, const std::string& prefix,
                      const std::string& fingerprint) {
  fs::create_directories(root);
  const std::string base = prefix + "-" + fingerprint;
  fs::path dir = root / base;
  for (int n = 2; fs::exists(dir); ++n) dir = root / (base + "-" + std::to_string(n));
  fs::create_directory(dir);
  return dir;
}

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

/// Dataset from a shadow spec: "idx:<path>", "raw:<path>", a bare family
/// name (the target spec with its family replaced) or a full synthetic spec.
std::pair<Dataset, std::string> load_shadow_data(const ExperimentConfig& c) {
  const std::string& s = c.shadow_data_spec;
  if (starts_with(s, "idx:")) return {load_idx(s.substr(4)), s};
  if (starts_with(s, "raw:")) return {load_raw(s.substr(4)), s};
  std::string spec = s;
  if (s.find(',') == std::string::npos && s.find('=') == std::string::npos) {
    SyntheticSpec base = SyntheticSpec::parse(c.data_spec);
    SyntheticSpec mine = SyntheticSpec::parse(s);
    mine.n = base.n;
    mine.side = base.side;
    mine.classes = base.classes;
    mine.channels = base.channels;
    mine.seed = base.seed;
    spec = mine.str();
  }
  return {synth_generate(spec), "synthetic:" + spec};
}

std::pair<Dataset, std::string> load_target_data(const ExperimentConfig& c) {
  switch (c.data_format) {
    case DataFormat::synthetic: {
      const std::string spec = SyntheticSpec::parse(c.data_spec).str();
      return {synth_generate(spec), "synthetic:" + spec};
    }
    case DataFormat::idx:
      return {c.labels_path.empty() ? load_idx(c.data_path)
                                    : load_idx(c.data_path, fs::path(c.labels_path)),
              "idx:" + c.data_path + ":" + c.labels_path};
    case DataFormat::raw_tensor:
      return {load_raw(c.data_path), "raw:" + c.data_path};
  }
  throw ConfigError("unknown data format");
}

SplitIndices explicit_indices(const SplitIndices& given, std::size_t dataset_size) {
  SplitIndices s = given;
  std::vector<bool> used(dataset_size, false);
  for (const auto* set : {&s.shadow_train, &s.shadow_test, &s.target_train, &s.target_test}) {
    for (std::size_t i : *set) {
      if (i >= dataset_size) {
        throw std::out_of_range("split index " + std::to_string(i) + " outside dataset of " +
                                std::to_string(dataset_size));
      }
      used[i] = true;
    }
  }
  for (std::size_t i = 0; i < dataset_size; ++i) {
    if (!used[i]) s.rest.push_back(i);
  }
  return s;
}

class Stages {
 public:
  Stages(fs::path dir, std::ostream* log) : dir_(std::move(dir)), log_(log) {}

  template <typename F>
  auto run(const std::string& name, F&& body) -> decltype(body()) {
    if (log_) *log_ << "[" << name << "]\n" << std::flush;
    try {
      return body();
    } catch (const std::exception& e) {
      if (!dir_.empty()) {
        try {
          write_file(dir_ / "error.txt", "stage=" + name + "\nmessage=" + e.what() + "\n");
        } catch (...) {
        }
      }
      throw StageError(name, e.what());
    }
  }

  void write(const std::string& file, const std::string& text) const {
    if (!dir_.empty()) write_file(dir_ / file, text);
  }
  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  std::ostream* log_;
};

std::string scores_csv(std::span<const ScoreRecord> records) {
  std::ostringstream out;
  write_scores_csv(out, records);
  return out.str();
}

std::string log_csv(const TrainLog& log) {
  std::ostringstream out;
  log.write_csv(out);
  return out.str();
}

std::vector<std::size_t> checkpoint_epochs(const ExperimentConfig& c) {
  std::vector<std::size_t> out;
  ExperimentConfig probe = c;
  for (double f : c.snapshot_fractions) {
    probe.checkpoint_fraction = f;
    out.push_back(probe.target_eval_epoch());
  }
  if (c.checkpoint_fraction) out.push_back(c.target_eval_epoch());
  return out;
}

}  // namespace

std::string pipeline_report_text(const ExperimentConfig& config, const PipelineResult& result) {
  std::ostringstream out;
  const AttackReport& r = result.report;
  out << "fingerprint=" << config.fingerprint() << '\n';
  out << "seed=" << config.seed << '\n';
  out << "method=" << r.method << '\n';
  out << "scope=" << scope_name(config.attack.scope) << '\n';
  out << "n_draws=" << config.attack.n_draws << '\n';
  out << "target_epochs=" << config.target_eval_epoch() << '\n';
  if (config.checkpoint_fraction) {
    out << "note=target weights are the epoch-" << config.target_eval_epoch()
        << " checkpoint of one " << config.target_train.epochs
        << "-epoch training run, not a separate shorter run\n";
  }
  out << "threshold=" << format_double(r.threshold.value) << '\n';
  out << "objective=" << format_double(r.threshold.objective) << '\n';
  out << "asr=" << format_double(r.asr) << '\n';
  auto stats = [&](const char* prefix, const SummaryStats& s) {
    out << prefix << ".count=" << s.count << '\n';
    out << prefix << ".mean=" << format_double(s.mean) << '\n';
    out << prefix << ".std=" << format_double(s.stddev) << '\n';
    out << prefix << ".q1=" << format_double(s.q1) << '\n';
    out << prefix << ".median=" << format_double(s.median) << '\n';
    out << prefix << ".q3=" << format_double(s.q3) << '\n';
  };
  stats("member", r.member_stats);
  stats("nonmember", r.nonmember_stats);
  std::vector<ReportEntry> entries{{"target", r}};
  for (const auto& b : result.baselines) entries.push_back({"target", b});
  out << "\n[reports]\n" << emit_report(entries, ReportFormat::csv);
  return out.str();
}

PipelineResult run_pipeline(const ExperimentConfig& config, const RunContext& context) {
  config.validate();
  PipelineResult result;
  if (!context.output_root.empty()) {
    result.run_dir = make_run_dir(context.output_root, "run", config.fingerprint());
  }
  Stages stages(result.run_dir, context.log);
  stages.write("config.txt", config.to_text());

  auto [target_data, target_id, shadow_data, shadow_id] = stages.run("load", [&] {
    auto [td, tid] = load_target_data(config);
    if (config.normalize) td = normalize(td);
    Dataset sd;
    std::string sid;
    if (!config.shadow_data_spec.empty()) {
      std::tie(sd, sid) = load_shadow_data(config);
      if (config.normalize) sd = normalize(sd);
    }
    if (config.normalize) {
      tid += ":normalized";
      if (!sid.empty()) sid += ":normalized";
    }
    return std::tuple{std::move(td), tid, std::move(sd), sid};
  });
  const bool same_data = config.shadow_data_spec.empty();
  const Dataset& sdata = same_data ? target_data : shadow_data;
  const std::string& sdata_id = same_data ? target_id : shadow_id;

  const auto [tsplit, ssplit] = stages.run("split", [&] {
    SplitIndices t = config.explicit_split ? explicit_indices(*config.explicit_split, target_data.size())
                                           : split(target_data, config.split_spec());
    SplitIndices s = t;
    if (!same_data && !config.explicit_split) s = split(sdata, config.split_spec());
    std::ostringstream out;
    out << "shadow_train=" << join_indices(s.shadow_train) << '\n'
        << "shadow_test=" << join_indices(s.shadow_test) << '\n'
        << "target_train=" << join_indices(t.target_train) << '\n'
        << "target_test=" << join_indices(t.target_test) << '\n';
    stages.write("split.txt", out.str());
    return std::pair{t, s};
  });

  const TrainConfig target_cfg = config.target_train_config();
  const auto target = stages.run("pretrain-target", [&] {
    auto full = pretrain_cached(config.target_model, target_cfg, target_data, target_id,
                                tsplit.target_train, context.cache, checkpoint_epochs(config),
                                nullptr);
    std::shared_ptr<const PretrainResult> chosen = full;
    const std::size_t eval_epoch = config.target_eval_epoch();
    if (eval_epoch != target_cfg.epochs) {
      TrainConfig t = target_cfg;
      t.epochs = eval_epoch;
      // Without a cache the snapshot was not kept; train the short run directly.
      chosen = context.cache ? context.cache->find(pretrain_key(config.target_model, t, target_id,
                                                                tsplit.target_train))
                             : nullptr;
      if (!chosen) {
        chosen = pretrain_cached(config.target_model, t, target_data, target_id,
                                 tsplit.target_train, context.cache);
      }
    }
    stages.write("target_train_log.csv", log_csv(chosen->log));
    if (config.save_models && !stages.dir().empty()) {
      save_model(stages.dir() / "target.model", chosen->model);
    }
    return chosen;
  });

  const auto shadow = stages.run("pretrain-shadow", [&] {
    auto s = pretrain_cached(config.shadow_model(), config.shadow_train_config(), sdata, sdata_id,
                             ssplit.shadow_train, context.cache);
    stages.write("shadow_train_log.csv", log_csv(s->log));
    if (config.save_models && !stages.dir().empty()) {
      save_model(stages.dir() / "shadow.model", s->model);
    }
    return s;
  });

  const AttackOptions options = config.attack_options();
  const std::uint64_t score_seed = derive_seed(options.seed, "attack.score");
  auto [calibration, threshold] = stages.run("calibrate", [&] {
    auto records = score_records(shadow->model.encoder, shadow->model.decoder, sdata,
                                 ssplit.shadow_train, ssplit.shadow_test, options.score,
                                 score_seed, Split::shadow);
    const Threshold t = search_threshold(records);
    stages.write("shadow_scores.csv", scores_csv(records));
    return std::pair{std::move(records), t};
  });

  const ModelPair simulated = stages.run("simulate", [&] {
    TrainConfig ft = options.finetune;
    ft.seed = derive_seed(options.seed, "attack.finetune");
    ModelPair sim = simulate_target(target->model.encoder, shadow->model.decoder, sdata,
                                    ssplit.shadow_train, ft);
    if (config.save_models && !stages.dir().empty()) {
      save_model(stages.dir() / "simulated.model", sim);
    }
    return sim;
  });

  auto records = stages.run("score", [&] {
    auto r = score_records(simulated.encoder, simulated.decoder, target_data, tsplit.target_train,
                           tsplit.target_test, options.score, score_seed, Split::target);
    stages.write("target_scores.csv", scores_csv(r));
    return r;
  });

  stages.run("report", [&] {
    std::ostringstream warn;
    result.report = make_report("ours", threshold, std::move(records), &warn);
    result.report.calibration = std::move(calibration);
    if (context.log && !warn.str().empty()) *context.log << warn.str();
    stages.write("report.txt", pipeline_report_text(config, result));
    return 0;
  });

  if (!config.baselines.empty()) {
    AttackInputs in;
    in.target = &target->model;
    in.shadow = &shadow->model;
    in.target_data = &target_data;
    in.shadow_data = &sdata;
    in.shadow_train = ssplit.shadow_train;
    in.shadow_test = ssplit.shadow_test;
    in.target_train = tsplit.target_train;
    in.target_test = tsplit.target_test;
    const std::size_t n_down = std::min(config.downstream_count, tsplit.rest.size());
    const BaselineOptions bopts = config.baseline_options(
        std::vector<std::size_t>(tsplit.rest.begin(), tsplit.rest.begin() + long(n_down)));
    for (const auto& method : config.baselines) {
      stages.run("baseline-" + method, [&] {
        AttackReport b = run_baseline(method, in, bopts);
        stages.write("baseline_" + method + "_scores.csv", scores_csv(b.records));
        result.baselines.push_back(std::move(b));
        return 0;
      });
    }
    stages.write("report.txt", pipeline_report_text(config, result));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Grid

void apply_axis(ExperimentConfig& c, const std::string& axis, const std::string& value) {
  if (axis == "mask_ratio") {
    apply_setting(c, "target.model.mask_ratio", value);
  } else if (axis == "epoch_fraction") {
    apply_setting(c, "target.train.checkpoint_fraction", value);
  } else if (axis == "shadow_decoder_layers") {
    apply_setting(c, "shadow.model.decoder_layers", value);
  } else if (axis == "shadow_data") {
    c.shadow_data_spec = value;
  } else if (axis == "shadow_mask_ratio") {
    apply_setting(c, "shadow.model.mask_ratio", value);
  } else if (axis == "target_dropout") {
    apply_setting(c, "target.train.dropout_rate", value);
  } else if (axis == "target_weight_decay") {
    apply_setting(c, "target.train.weight_decay", value);
  } else {
    throw ConfigError("unknown grid axis '" + axis + "'");
  }
}

std::size_t GridResult::failures() const {
  return std::size_t(std::count_if(cells.begin(), cells.end(), [](const GridCell& c) { return !c.ok; }));
}

Table GridResult::aggregate() const {
  Table t;
  t.columns = axis_names;
  for (const char* col : {"asr", "threshold", "objective", "member_mean", "nonmember_mean"}) {
    t.columns.push_back(col);
  }
  for (const auto& cell : cells) {
    if (!cell.ok) continue;
    std::vector<std::string> row;
    for (const auto& [name, value] : cell.axes) row.push_back(value);
    const AttackReport& r = cell.result.report;
    for (double v : {r.asr, r.threshold.value, r.threshold.objective, r.member_stats.mean,
                     r.nonmember_stats.mean}) {
      row.push_back(format_double(v));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

namespace {

bool axis_less(const std::string& a, const std::string& b) {
  double x = 0, y = 0;
  char* end_a = nullptr;
  char* end_b = nullptr;
  x = std::strtod(a.c_str(), &end_a);
  y = std::strtod(b.c_str(), &end_b);
  if (!a.empty() && !b.empty() && *end_a == '\0' && *end_b == '\0') return x < y;
  return a < b;
}

}  // namespace

GridResult run_grid(const ExperimentConfig& config, const RunContext& context) {
  config.validate();
  const auto axes = config.grid.present();
  if (axes.empty()) throw ConfigError("grid: no axes configured");

  ExperimentConfig base = config;
  base.grid = GridAxes{};
  base.snapshot_fractions = config.grid.epoch_fraction;
  ModelCache local_cache;
  RunContext cell_context = context;
  if (!cell_context.cache) cell_context.cache = &local_cache;

  GridResult result;
  for (const auto& [name, values] : axes) result.axis_names.push_back(name);
  if (!context.output_root.empty()) {
    result.run_dir = make_run_dir(context.output_root, "grid", config.fingerprint());
    write_file(result.run_dir / "config.txt", config.to_text());
    cell_context.output_root = result.run_dir / "cells";
  }

  std::vector<std::vector<std::pair<std::string, std::string>>> combos{{}};
  for (const auto& [name, values] : axes) {
    std::vector<std::vector<std::pair<std::string, std::string>>> next;
    for (const auto& prefix : combos) {
      for (const auto& v : values) {
        auto c = prefix;
        c.emplace_back(name, v);
        next.push_back(std::move(c));
      }
    }
    combos = std::move(next);
  }
  std::stable_sort(combos.begin(), combos.end(), [](const auto& a, const auto& b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (axis_less(a[i].second, b[i].second)) return true;
      if (axis_less(b[i].second, a[i].second)) return false;
    }
    return false;
  });

  std::vector<ReportEntry> entries;
  for (const auto& combo : combos) {
    GridCell cell;
    cell.axes = combo;
    std::string label;
    for (const auto& [name, value] : combo) label += (label.empty() ? "" : ";") + name + "=" + value;
    if (context.log) *context.log << "cell " << label << '\n';
    try {
      ExperimentConfig cfg = base;
      for (const auto& [name, value] : combo) apply_axis(cfg, name, value);
      cell.result = run_pipeline(cfg, cell_context);
      cell.ok = true;
      entries.push_back({label, cell.result.report});
    } catch (const StageError& e) {
      cell.stage = e.stage();
      cell.error = e.what();
    } catch (const std::exception& e) {
      cell.stage = "config";
      cell.error = e.what();
    }
    if (!cell.ok && context.log) *context.log << "  failed: " << cell.error << '\n';
    result.cells.push_back(std::move(cell));
  }

  if (!result.run_dir.empty()) {
    write_file(result.run_dir / "aggregate.csv", result.aggregate().render(ReportFormat::csv));
    Table failures;
    failures.columns = result.axis_names;
    failures.columns.push_back("stage");
    failures.columns.push_back("message");
    for (const auto& cell : result.cells) {
      if (cell.ok) continue;
      std::vector<std::string> row;
      for (const auto& [n, v] : cell.axes) row.push_back(v);
      row.push_back(cell.stage);
      std::string msg = cell.error;
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      row.push_back(msg);
      failures.rows.push_back(std::move(row));
    }
    write_file(result.run_dir / "failures.csv", failures.render(ReportFormat::csv));
    std::ostringstream report;
    report << "fingerprint=" << config.fingerprint() << '\n';
    report << "cells=" << result.cells.size() << '\n';
    report << "failures=" << result.failures() << '\n';
    if (!config.grid.epoch_fraction.empty()) {
      report << "note=epoch_fraction cells read checkpoints of a single target training run "
                "instead of retraining for each epoch count\n";
    }
    report << "\n[reports]\n" << emit_report(entries, ReportFormat::csv);
    write_file(result.run_dir / "report.txt", report.str());
  }
  return result;
}

}  // namespace mimi
