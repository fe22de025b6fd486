#include "mimi/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

#include "mimi/format.hpp"
#include "mimi/rng.hpp"

namespace mimi {

void TrainConfig::validate(bool allow_empty) const {
  auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
  if (epochs == 0 && !allow_empty) fail("epochs must be at least 1");
  if (batch_size == 0) fail("batch_size must be at least 1");
  if (!std::isfinite(learning_rate) || learning_rate < 0.0 ||
      (learning_rate == 0.0 && !allow_empty)) {
    fail("learning_rate must be positive");
  }
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must lie in [0,1)");
  if (!(clip_norm >= 0.0)) fail("clip_norm must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    fail("adam betas must lie in [0,1)");
  }
}

std::map<std::string, std::string> TrainConfig::to_kv() const {
  return {{"epochs", std::to_string(epochs)},
          {"batch_size", std::to_string(batch_size)},
          {"learning_rate", format_double(learning_rate)},
          {"weight_decay", format_double(weight_decay)},
          {"dropout_rate", format_double(dropout_rate)},
          {"seed", std::to_string(seed)},
          {"freeze_encoder", freeze_encoder ? "true" : "false"},
          {"clip_norm", format_double(clip_norm)},
          {"beta1", format_double(beta1)},
          {"beta2", format_double(beta2)},
          {"adam_eps", format_double(adam_eps)}};
}

TrainConfig TrainConfig::from_kv(const std::map<std::string, std::string>& kv) {
  TrainConfig c;
  for (const auto& [key, value] : kv) {
    const std::string ctx = "train key '" + key + "'";
    if (key == "epochs") {
      c.epochs = parse_u64(value, ctx);
    } else if (key == "batch_size") {
      c.batch_size = parse_u64(value, ctx);
    } else if (key == "learning_rate") {
      c.learning_rate = parse_double(value, ctx);
    } else if (key == "weight_decay") {
      c.weight_decay = parse_double(value, ctx);
    } else if (key == "dropout_rate") {
      c.dropout_rate = parse_double(value, ctx);
    } else if (key == "seed") {
      c.seed = parse_u64(value, ctx);
    } else if (key == "freeze_encoder") {
      c.freeze_encoder = parse_bool(value, ctx);
    } else if (key == "clip_norm") {
      c.clip_norm = parse_double(value, ctx);
    } else if (key == "beta1") {
      c.beta1 = parse_double(value, ctx);
    } else if (key == "beta2") {
      c.beta2 = parse_double(value, ctx);
    } else if (key == "adam_eps") {
      c.adam_eps = parse_double(value, ctx);
    } else {
      throw ConfigError("train config: unknown key '" + key + "'");
    }
  }
  return c;
}

void TrainLog::write_csv(std::ostream& out) const {
  out << "epoch,mean_loss,seconds\n";
  for (std::size_t i = 0; i < mean_loss.size(); ++i) {
    out << i + 1 << ',' << format_double(mean_loss[i]) << ',' << format_double(seconds[i]) << '\n';
  }
}

TrainingError::TrainingError(const std::string& what, std::size_t epoch, std::size_t batch)
    : std::runtime_error("training aborted at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(batch) + ": " + what),
      epoch_(epoch),
      batch_(batch) {}

void adam_step(std::span<Tensor> params, std::span<const std::vector<float>> grads,
               AdamState& state, const TrainConfig& config) {
  if (params.size() != grads.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0f);
      state.v.emplace_back(p.numel(), 0.0f);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].numel() || state.m[i].size() != params[i].numel()) {
      throw ShapeError("adam_step: parameter " + std::to_string(i) + " has " +
                       std::to_string(params[i].numel()) + " values but gradient has " +
                       std::to_string(grads[i].size()));
    }
  }
  ++state.step;
  const double b1 = config.beta1, b2 = config.beta2, lr = config.learning_rate;
  const double c1 = 1.0 - std::pow(b1, double(state.step));
  const double c2 = 1.0 - std::pow(b2, double(state.step));
  const double decay = lr * config.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = static_cast<float>(b1 * m[k] + (1.0 - b1) * g[k]);
      v[k] = static_cast<float>(b2 * v[k] + (1.0 - b2) * double(g[k]) * g[k]);
      const double step = (m[k] / c1) / (std::sqrt(v[k] / c2) + config.adam_eps);
      p[k] = static_cast<float>(double(p[k]) - lr * step - decay * p[k]);
    }
  }
}

double clip_global_norm(std::span<std::vector<float>> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (float v : g) sq += double(v) * v;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads) {
      for (auto& v : g) v = static_cast<float>(v * f);
    }
  }
  return norm;
}

Tensor batch_patches(const Dataset& dataset, std::span<const std::size_t> indices,
                     std::size_t patch_side) {
  const std::size_t side = dataset.side(), c = dataset.channels();
  if (side % patch_side != 0) {
    throw ShapeError("batch_patches: side " + std::to_string(side) +
                     " not divisible by patch " + std::to_string(patch_side));
  }
  const std::size_t g = side / patch_side;
  const std::size_t n = g * g, pd = c * patch_side * patch_side;
  std::vector<float> out(indices.size() * n * pd);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    patchify_into(dataset.image(indices[b]), c, side, patch_side,
                  std::span<float>(out).subspan(b * n * pd, n * pd));
  }
  return Tensor::from_data({indices.size(), n, pd}, std::move(out));
}

namespace {

void check_geometry(const ModelConfig& c, const Dataset& d) {
  if (d.channels() != c.channels || d.side() != c.image_side) {
    throw ShapeError("dataset images are " + std::to_string(d.channels()) + "x" +
                     std::to_string(d.side()) + "x" + std::to_string(d.side()) +
                     " but the model expects " + std::to_string(c.channels) + "x" +
                     std::to_string(c.image_side) + "x" + std::to_string(c.image_side));
  }
}

Tensor batch_mask(std::span<const MaskPlan> plans) {
  const std::size_t n = plans[0].n_patches;
  std::vector<float> m(plans.size() * n, 0.0f);
  for (std::size_t b = 0; b < plans.size(); ++b) {
    for (auto p : plans[b].masked) m[b * n + p] = 1.0f;
  }
  return Tensor::from_data({plans.size(), n}, std::move(m));
}

struct LoopSpec {
  const Encoder* encoder;
  const Decoder* decoder;
  NamedTensors trainable;
  double dropout_rate;
  LossNorm norm;
};

TrainLog train_loop(const LoopSpec& spec, const Dataset& dataset,
                    std::span<const std::size_t> indices, const TrainConfig& config,
                    const TrainHooks& hooks, const std::function<void(std::size_t)>& snapshot) {
  const ModelConfig& mc = spec.decoder->config();
  const Tensor all = batch_patches(dataset, indices, mc.patch_side);
  const std::size_t n = mc.n_patches(), pd = mc.patch_dim();

  std::vector<Tensor> params;
  for (const auto& [name, t] : spec.trainable) params.push_back(t);
  AdamState state;
  std::vector<std::vector<float>> grads(params.size());

  const std::uint64_t mask_seed = derive_seed(config.seed, "train.mask");
  const std::uint64_t order_seed = derive_seed(config.seed, "train.order");
  const std::uint64_t drop_seed = derive_seed(config.seed, "train.dropout");

  std::vector<std::size_t> order(indices.size());
  TrainLog log;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(order_seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t batch_no = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += config.batch_size, ++batch_no) {
      const std::size_t hi = std::min(order.size(), lo + config.batch_size);
      const std::size_t bsz = hi - lo;
      std::vector<float> buf(bsz * n * pd);
      std::vector<MaskPlan> plans;
      plans.reserve(bsz);
      for (std::size_t b = 0; b < bsz; ++b) {
        const std::size_t row = order[lo + b];
        std::copy_n(all.data().begin() + row * n * pd, n * pd, buf.begin() + b * n * pd);
        plans.push_back(sample_mask(n, mc.mask_ratio, mix_seed(mask_seed, epoch, indices[row])));
      }
      const Tensor target = Tensor::from_data({bsz, n, pd}, std::move(buf));
      float value = 0.0f;
      try {
        for (auto& p : params) p.zero_grad();
        const ForwardOptions fo{spec.dropout_rate, mix_seed(drop_seed, epoch, batch_no)};
        const Tensor latent = encode_batch(*spec.encoder, target, plans, fo);
        const Tensor pred = decode_batch(*spec.decoder, latent, plans);
        const Tensor loss = masked_mse(pred, target, batch_mask(plans), spec.norm);
        value = loss.item();
        if (!std::isfinite(value)) throw NonFiniteError("loss is not finite");
        backward(loss);
      } catch (const NonFiniteError& e) {
        throw TrainingError(e.what(), epoch + 1, batch_no + 1);
      }
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].has_grad()) {
          grads[i].assign(params[i].grad().begin(), params[i].grad().end());
        } else {
          grads[i].assign(params[i].numel(), 0.0f);
        }
      }
      if (!std::isfinite(clip_global_norm(grads, config.clip_norm))) {
        throw TrainingError("gradient norm is not finite", epoch + 1, batch_no + 1);
      }
      adam_step(params, grads, state, config);
      loss_sum += double(value) * double(bsz);
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.mean_loss.push_back(loss_sum / double(indices.size()));
    log.seconds.push_back(secs);
    if (hooks.progress) {
      *hooks.progress << "epoch " << epoch + 1 << "/" << config.epochs
                      << " loss=" << format_double(log.mean_loss.back()) << '\n';
    }
    if (snapshot && std::find(hooks.snapshot_epochs.begin(), hooks.snapshot_epochs.end(),
                              epoch + 1) != hooks.snapshot_epochs.end()) {
      snapshot(epoch + 1);
    }
  }
  for (auto& p : params) p.zero_grad();
  return log;
}

}  // namespace

PretrainResult pretrain(const ModelConfig& model_config, const TrainConfig& config,
                        const Dataset& dataset, std::span<const std::size_t> indices,
                        const TrainHooks& hooks) {
  config.validate();
  model_config.validate();
  if (indices.empty()) throw std::invalid_argument("pretrain: no training images");
  check_geometry(model_config, dataset);

  ModelConfig effective = model_config;
  if (config.dropout_rate > 0.0) effective.dropout_rate = config.dropout_rate;
  PretrainResult result{ModelPair::create(effective, config.seed), {}};
  ModelPair& m = result.model;
  m.encoder.set_requires_grad(!config.freeze_encoder);
  m.decoder.set_requires_grad(true);

  LoopSpec spec{&m.encoder, &m.decoder, {}, effective.dropout_rate, effective.loss_norm};
  if (!config.freeze_encoder) spec.trainable = m.encoder.parameters();
  for (auto& p : m.decoder.parameters()) spec.trainable.push_back(std::move(p));

  const std::uint64_t frozen_sum = config.freeze_encoder ? checksum(m.encoder.parameters()) : 0;
  std::function<void(std::size_t)> snap;
  if (hooks.on_snapshot) snap = [&](std::size_t e) { hooks.on_snapshot(e, m); };
  result.log = train_loop(spec, dataset, indices, config, hooks, snap);
  if (config.freeze_encoder && checksum(m.encoder.parameters()) != frozen_sum) {
    throw FrozenViolation("pretrain: frozen encoder parameters changed");
  }
  m.encoder.set_requires_grad(false);
  m.decoder.set_requires_grad(false);
  return result;
}

FinetuneResult finetune_decoder(const Encoder& encoder, const Decoder& decoder,
                                const Dataset& dataset, std::span<const std::size_t> indices,
                                const TrainConfig& config) {
  config.validate(true);
  if (decoder.input_width() != encoder.width()) {
    throw ShapeError("finetune_decoder: decoder expects width " +
                     std::to_string(decoder.input_width()) + " but encoder emits " +
                     std::to_string(encoder.width()));
  }
  const ModelConfig& ec = encoder.config();
  const ModelConfig& dc = decoder.config();
  if (ec.n_patches() != dc.n_patches() || ec.patch_dim() != dc.patch_dim()) {
    throw ShapeError("finetune_decoder: encoder and decoder disagree on patch geometry");
  }
  check_geometry(dc, dataset);

  Encoder frozen = encoder;
  frozen.set_requires_grad(false);
  const std::uint64_t before = checksum(frozen.parameters());
  FinetuneResult result{decoder, {}};
  if (config.epochs == 0 || indices.empty()) return result;

  result.decoder.set_requires_grad(true);
  LoopSpec spec{&frozen, &result.decoder, result.decoder.parameters(), 0.0, dc.loss_norm};
  result.log = train_loop(spec, dataset, indices, config, {}, {});
  result.decoder.set_requires_grad(false);
  if (checksum(frozen.parameters()) != before || checksum(encoder.parameters()) != before) {
    throw FrozenViolation("finetune_decoder: encoder parameters changed");
  }
  return result;
}

double reconstruction_loss(const Encoder& encoder, const Decoder& decoder,
                           const Dataset& dataset, std::span<const std::size_t> indices,
                           std::uint64_t seed, LossNorm norm) {
  const ModelConfig& c = decoder.config();
  check_geometry(c, dataset);
  double acc = 0.0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t lo = 0; lo < indices.size(); lo += kChunk) {
    const auto chunk = indices.subspan(lo, std::min(kChunk, indices.size() - lo));
    const Tensor target = batch_patches(dataset, chunk, c.patch_side);
    std::vector<MaskPlan> plans;
    for (auto idx : chunk) plans.push_back(sample_mask(c.n_patches(), c.mask_ratio, mix_seed(seed, idx)));
    const Tensor pred = decode_batch(decoder, encode_batch(encoder, target, plans), plans);
    acc += double(masked_mse(pred, target, batch_mask(plans), norm).item()) * double(chunk.size());
  }
  return indices.empty() ? 0.0 : acc / double(indices.size());
}

}  // namespace mimi
