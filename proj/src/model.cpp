#include "mimi/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "mimi/format.hpp"
#include "mimi/rng.hpp"

namespace mimi {

// ---------------------------------------------------------------------------
// Configuration

std::size_t masked_count(std::size_t n_patches, double mask_ratio) {
  return static_cast<std::size_t>(std::llround(mask_ratio * double(n_patches)));
}

std::size_t ModelConfig::n_masked() const { return masked_count(n_patches(), mask_ratio); }

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (patch_side == 0 || image_side == 0 || channels == 0) fail("sizes must be positive");
  if (image_side % patch_side != 0) {
    fail("image_side " + std::to_string(image_side) + " is not divisible by patch_side " +
         std::to_string(patch_side));
  }
  if (n_patches() < 2) fail("need at least 2 patches");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) fail("mask_ratio must lie in (0,1)");
  const auto k = n_masked();
  if (k < 1 || k > n_patches() - 1) {
    fail("mask_ratio " + format_double(mask_ratio) + " masks " + std::to_string(k) +
         " of " + std::to_string(n_patches()) + " patches");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must lie in [0,1)");
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
    fail("embed_dim must be a positive multiple of heads");
  }
  if (decoder_dim == 0 || decoder_heads == 0 || decoder_dim % decoder_heads != 0) {
    fail("decoder_dim must be a positive multiple of decoder_heads");
  }
  if (mlp_ratio == 0) fail("mlp_ratio must be positive");
}

std::map<std::string, std::string> ModelConfig::to_kv() const {
  return {
      {"image_side", std::to_string(image_side)},
      {"channels", std::to_string(channels)},
      {"patch_side", std::to_string(patch_side)},
      {"embed_dim", std::to_string(embed_dim)},
      {"encoder_layers", std::to_string(encoder_layers)},
      {"decoder_layers", std::to_string(decoder_layers)},
      {"heads", std::to_string(heads)},
      {"mask_ratio", format_double(mask_ratio)},
      {"dropout_rate", format_double(dropout_rate)},
      {"decoder_dim", std::to_string(decoder_dim)},
      {"decoder_heads", std::to_string(decoder_heads)},
      {"mlp_ratio", std::to_string(mlp_ratio)},
      {"loss_norm", loss_norm == LossNorm::per_pixel ? "per_pixel" : "per_patch"},
  };
}

ModelConfig ModelConfig::from_kv(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  auto get = [&](const char* key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  auto size = [&](const char* key, std::size_t& field) {
    if (auto* v = get(key)) field = parse_u64(*v, key);
  };
  auto real = [&](const char* key, double& field) {
    if (auto* v = get(key)) field = parse_double(*v, key);
  };
  size("image_side", c.image_side);
  size("channels", c.channels);
  size("patch_side", c.patch_side);
  size("embed_dim", c.embed_dim);
  size("encoder_layers", c.encoder_layers);
  size("decoder_layers", c.decoder_layers);
  size("heads", c.heads);
  real("mask_ratio", c.mask_ratio);
  real("dropout_rate", c.dropout_rate);
  size("decoder_dim", c.decoder_dim);
  size("decoder_heads", c.decoder_heads);
  size("mlp_ratio", c.mlp_ratio);
  if (auto* v = get("loss_norm")) {
    if (*v == "per_pixel") {
      c.loss_norm = LossNorm::per_pixel;
    } else if (*v == "per_patch") {
      c.loss_norm = LossNorm::per_patch;
    } else {
      throw ConfigError("loss_norm must be per_pixel or per_patch, got '" + *v + "'");
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Masks and patches

std::vector<std::size_t> MaskPlan::visible() const {
  std::vector<std::size_t> out;
  out.reserve(n_patches - masked.size());
  std::size_t j = 0;
  for (std::size_t p = 0; p < n_patches; ++p) {
    if (j < masked.size() && masked[j] == p) {
      ++j;
    } else {
      out.push_back(p);
    }
  }
  return out;
}

bool MaskPlan::is_masked(std::size_t patch) const {
  return std::binary_search(masked.begin(), masked.end(), patch);
}

MaskPlan sample_mask(std::size_t n_patches, double mask_ratio, std::uint64_t seed) {
  const std::size_t k = masked_count(n_patches, mask_ratio);
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0) || k == 0 || k >= n_patches) {
    throw ConfigError("sample_mask: ratio " + format_double(mask_ratio) + " masks " +
                      std::to_string(k) + " of " + std::to_string(n_patches) +
                      " patches; need between 1 and n-1");
  }
  std::vector<std::size_t> order(n_patches);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // partial Fisher-Yates: the first k slots become a uniform k-subset
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n_patches - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  MaskPlan plan{n_patches, std::vector<std::size_t>(order.begin(), order.begin() + k), seed};
  std::sort(plan.masked.begin(), plan.masked.end());
  return plan;
}

MaskPlan empty_mask(std::size_t n_patches) { return MaskPlan{n_patches, {}, 0}; }

void patchify_into(std::span<const float> image, std::size_t channels, std::size_t side,
                   std::size_t patch_side, std::span<float> out) {
  const std::size_t g = side / patch_side;
  const std::size_t pd = channels * patch_side * patch_side;
  for (std::size_t gy = 0; gy < g; ++gy) {
    for (std::size_t gx = 0; gx < g; ++gx) {
      float* row = out.data() + (gy * g + gx) * pd;
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < patch_side; ++y) {
          const float* src =
              image.data() + (c * side + gy * patch_side + y) * side + gx * patch_side;
          std::copy_n(src, patch_side, row + (c * patch_side + y) * patch_side);
        }
      }
    }
  }
}

Tensor patchify(const Tensor& image, std::size_t patch_side) {
  if (image.rank() != 3 || image.dim(1) != image.dim(2)) {
    throw ShapeError("patchify: expected a square [C,S,S] image, got " +
                     shape_str(image.shape()));
  }
  const std::size_t c = image.dim(0), s = image.dim(1);
  if (patch_side == 0 || s % patch_side != 0) {
    throw ShapeError("patchify: side " + std::to_string(s) +
                     " is not divisible by patch_side " + std::to_string(patch_side));
  }
  const std::size_t n = (s / patch_side) * (s / patch_side);
  std::vector<float> out(image.numel());
  patchify_into(image.data(), c, s, patch_side, out);
  return Tensor::from_data({n, c * patch_side * patch_side}, std::move(out));
}

Tensor unpatchify(const Tensor& patches, std::size_t channels, std::size_t side) {
  if (patches.rank() != 2) throw ShapeError("unpatchify: expected [n, patch_dim]");
  const std::size_t n = patches.dim(0), pd = patches.dim(1);
  const auto p = static_cast<std::size_t>(std::lround(std::sqrt(double(pd / channels))));
  if (channels * p * p != pd || p == 0 || side % p != 0 || (side / p) * (side / p) != n) {
    throw ShapeError("unpatchify: " + shape_str(patches.shape()) + " does not tile a " +
                     std::to_string(channels) + "x" + std::to_string(side) + "x" +
                     std::to_string(side) + " image");
  }
  const std::size_t g = side / p;
  std::vector<float> out(channels * side * side);
  const auto in = patches.data();
  for (std::size_t gy = 0; gy < g; ++gy) {
    for (std::size_t gx = 0; gx < g; ++gx) {
      const float* row = in.data() + (gy * g + gx) * pd;
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < p; ++y) {
          std::copy_n(row + (c * p + y) * p, p,
                      out.data() + (c * side + gy * p + y) * side + gx * p);
        }
      }
    }
  }
  return Tensor::from_data({channels, side, side}, std::move(out));
}

Tensor mask_tensor(const MaskPlan& plan) {
  std::vector<float> m(plan.n_patches, 0.0f);
  for (auto i : plan.masked) m[i] = 1.0f;
  return Tensor::from_data({plan.n_patches}, std::move(m));
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

Tensor xavier(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / double(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  std::vector<float> w(fan_in * fan_out);
  for (auto& v : w) v = static_cast<float>(dist(rng));
  return Tensor::from_data({fan_in, fan_out}, std::move(w), true);
}

Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<float> w(shape_numel(shape));
  for (auto& v : w) v = static_cast<float>(dist(rng));
  return Tensor::from_data(std::move(shape), std::move(w), true);
}

Tensor constant(std::size_t n, float value) { return Tensor::full({n}, value, true); }

Block make_block(std::size_t d, std::size_t mlp, std::mt19937_64& rng) {
  Block b;
  b.ln1_g = constant(d, 1.0f);
  b.ln1_b = constant(d, 0.0f);
  b.wq = xavier(d, d, rng);
  b.bq = constant(d, 0.0f);
  b.wk = xavier(d, d, rng);
  b.bk = constant(d, 0.0f);
  b.wv = xavier(d, d, rng);
  b.bv = constant(d, 0.0f);
  b.wo = xavier(d, d, rng);
  b.bo = constant(d, 0.0f);
  b.ln2_g = constant(d, 1.0f);
  b.ln2_b = constant(d, 0.0f);
  b.w1 = xavier(d, d * mlp, rng);
  b.b1 = constant(d * mlp, 0.0f);
  b.w2 = xavier(d * mlp, d, rng);
  b.b2 = constant(d, 0.0f);
  return b;
}

template <typename F>
void visit_block(Block& b, const std::string& prefix, F&& fn) {
  fn(prefix + "ln1.gamma", b.ln1_g);
  fn(prefix + "ln1.beta", b.ln1_b);
  fn(prefix + "attn.q.weight", b.wq);
  fn(prefix + "attn.q.bias", b.bq);
  fn(prefix + "attn.k.weight", b.wk);
  fn(prefix + "attn.k.bias", b.bk);
  fn(prefix + "attn.v.weight", b.wv);
  fn(prefix + "attn.v.bias", b.bv);
  fn(prefix + "attn.out.weight", b.wo);
  fn(prefix + "attn.out.bias", b.bo);
  fn(prefix + "ln2.gamma", b.ln2_g);
  fn(prefix + "ln2.beta", b.ln2_b);
  fn(prefix + "mlp.fc1.weight", b.w1);
  fn(prefix + "mlp.fc1.bias", b.b1);
  fn(prefix + "mlp.fc2.weight", b.w2);
  fn(prefix + "mlp.fc2.bias", b.b2);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), b);
}

Tensor attention(const Tensor& h, const Block& b, std::size_t heads) {
  const Tensor q = linear(h, b.wq, b.bq);
  const Tensor k = linear(h, b.wk, b.bk);
  const Tensor v = linear(h, b.wv, b.bv);
  const std::size_t width = h.dim(-1);
  const std::size_t dh = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(double(dh));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t i = 0; i < heads; ++i) {
    const Tensor qh = heads == 1 ? q : slice(q, -1, i * dh, dh);
    const Tensor kh = heads == 1 ? k : slice(k, -1, i * dh, dh);
    const Tensor vh = heads == 1 ? v : slice(v, -1, i * dh, dh);
    const Tensor weights = softmax(scale(matmul(qh, kh, true), inv_sqrt));
    outs.push_back(matmul(weights, vh));
  }
  const Tensor merged = heads == 1 ? outs[0] : concat<float>(outs, -1);
  return linear(merged, b.wo, b.bo);
}

Tensor block_forward(const Tensor& x, const Block& b, std::size_t heads,
                     const ForwardOptions& opt, std::uint64_t layer) {
  Tensor a = attention(layernorm(x, b.ln1_g, b.ln1_b), b, heads);
  if (opt.dropout_rate > 0.0) a = dropout(a, opt.dropout_rate, mix_seed(opt.dropout_seed, layer, 0));
  const Tensor x1 = add(x, a);
  Tensor f = linear(gelu(linear(layernorm(x1, b.ln2_g, b.ln2_b), b.w1, b.b1)), b.w2, b.b2);
  if (opt.dropout_rate > 0.0) f = dropout(f, opt.dropout_rate, mix_seed(opt.dropout_seed, layer, 1));
  return add(x1, f);
}

/// [B, T, D] -> [B, D] mean over tokens, outside the graph.
Tensor mean_pool(const Tensor& x) {
  const std::size_t batch = x.dim(0), tokens = x.dim(1), d = x.dim(2);
  std::vector<float> out(batch * d);
  const auto in = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < d; ++c) {
      double acc = 0.0;
      for (std::size_t t = 0; t < tokens; ++t) acc += in[(b * tokens + t) * d + c];
      out[b * d + c] = static_cast<float>(acc / double(tokens));
    }
  }
  return Tensor::from_data({batch, d}, std::move(out));
}

Tensor index_tensor(Shape shape, const std::vector<std::size_t>& idx) {
  std::vector<float> v(idx.begin(), idx.end());
  return Tensor::from_data(std::move(shape), std::move(v));
}

}  // namespace

// ---------------------------------------------------------------------------
// Encoder

Encoder::Encoder(const ModelConfig& config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(init_seed);
  const std::size_t d = config_.embed_dim;
  patch_w_ = xavier(config_.patch_dim(), d, rng);
  patch_b_ = constant(d, 0.0f);
  pos_ = normal({config_.n_patches(), d}, 0.02, rng);
  for (std::size_t i = 0; i < config_.encoder_layers; ++i) {
    blocks_.push_back(make_block(d, config_.mlp_ratio, rng));
  }
  norm_g_ = constant(d, 1.0f);
  norm_b_ = constant(d, 0.0f);
}

Encoder::Encoder(const Encoder& other) { *this = other; }

Encoder& Encoder::operator=(const Encoder& other) {
  if (this == &other) return *this;
  config_ = other.config_;
  patch_w_ = other.patch_w_;
  patch_b_ = other.patch_b_;
  pos_ = other.pos_;
  blocks_ = other.blocks_;
  norm_g_ = other.norm_g_;
  norm_b_ = other.norm_b_;
  for_each_param([](const std::string&, Tensor& t) {
    if (t.defined()) t = t.clone();
  });
  return *this;
}

template <typename F>
void Encoder::for_each_param(F&& fn) {
  fn("encoder.patch.weight", patch_w_);
  fn("encoder.patch.bias", patch_b_);
  fn("encoder.pos", pos_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    visit_block(blocks_[i], "encoder.blocks." + std::to_string(i) + ".", fn);
  }
  fn("encoder.norm.gamma", norm_g_);
  fn("encoder.norm.beta", norm_b_);
}

NamedTensors Encoder::parameters() const {
  NamedTensors out;
  const_cast<Encoder*>(this)->for_each_param(
      [&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
  return out;
}

void Encoder::set_requires_grad(bool value) {
  for_each_param([&](const std::string&, Tensor& t) { t.set_requires_grad(value); });
}

Tensor Encoder::forward(const Tensor& patches, const Tensor& positions,
                        const ForwardOptions& options,
                        std::vector<Tensor>* layer_means) const {
  if (patches.rank() != 3 || patches.dim(2) != config_.patch_dim()) {
    throw ShapeError("encoder: expected [B, T, " + std::to_string(config_.patch_dim()) +
                     "] patches, got " + shape_str(patches.shape()));
  }
  if (positions.shape() != Shape{patches.dim(0), patches.dim(1)}) {
    throw ShapeError("encoder: positions " + shape_str(positions.shape()) +
                     " do not match patches " + shape_str(patches.shape()));
  }
  Tensor x = add(linear(patches, patch_w_, patch_b_), embed_lookup(pos_, positions));
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    x = block_forward(x, blocks_[i], config_.heads, options, i);
    if (layer_means) layer_means->push_back(mean_pool(x));
  }
  return layernorm(x, norm_g_, norm_b_);
}

// ---------------------------------------------------------------------------
// Decoder

Decoder::Decoder(const ModelConfig& config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(init_seed);
  const std::size_t dd = config_.decoder_dim;
  adapt_w_ = xavier(config_.embed_dim, dd, rng);
  adapt_b_ = constant(dd, 0.0f);
  mask_token_ = normal({1, dd}, 0.02, rng);
  pos_ = normal({config_.n_patches(), dd}, 0.02, rng);
  for (std::size_t i = 0; i < config_.decoder_layers; ++i) {
    blocks_.push_back(make_block(dd, config_.mlp_ratio, rng));
  }
  norm_g_ = constant(dd, 1.0f);
  norm_b_ = constant(dd, 0.0f);
  head_w_ = normal({dd, config_.patch_dim()}, 0.02, rng);
  head_b_ = constant(config_.patch_dim(), 0.0f);
}

Decoder::Decoder(const Decoder& other) { *this = other; }

Decoder& Decoder::operator=(const Decoder& other) {
  if (this == &other) return *this;
  config_ = other.config_;
  adapt_w_ = other.adapt_w_;
  adapt_b_ = other.adapt_b_;
  mask_token_ = other.mask_token_;
  pos_ = other.pos_;
  blocks_ = other.blocks_;
  norm_g_ = other.norm_g_;
  norm_b_ = other.norm_b_;
  head_w_ = other.head_w_;
  head_b_ = other.head_b_;
  for_each_param([](const std::string&, Tensor& t) {
    if (t.defined()) t = t.clone();
  });
  return *this;
}

template <typename F>
void Decoder::for_each_param(F&& fn) {
  fn("decoder.adapter.weight", adapt_w_);
  fn("decoder.adapter.bias", adapt_b_);
  fn("decoder.mask_token", mask_token_);
  fn("decoder.pos", pos_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    visit_block(blocks_[i], "decoder.blocks." + std::to_string(i) + ".", fn);
  }
  fn("decoder.norm.gamma", norm_g_);
  fn("decoder.norm.beta", norm_b_);
  fn("decoder.head.weight", head_w_);
  fn("decoder.head.bias", head_b_);
}

NamedTensors Decoder::parameters() const {
  NamedTensors out;
  const_cast<Decoder*>(this)->for_each_param(
      [&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
  return out;
}

void Decoder::set_requires_grad(bool value) {
  for_each_param([&](const std::string&, Tensor& t) { t.set_requires_grad(value); });
}

Tensor Decoder::forward(const Tensor& visible, std::span<const MaskPlan> plans) const {
  const std::size_t n = config_.n_patches();
  if (visible.rank() != 3 || visible.dim(2) != config_.embed_dim) {
    throw ShapeError("decoder: expected [B, n_visible, " +
                     std::to_string(config_.embed_dim) + "] embeddings, got " +
                     shape_str(visible.shape()));
  }
  const std::size_t batch = visible.dim(0), nv = visible.dim(1);
  if (plans.size() != batch) {
    throw ShapeError("decoder: " + std::to_string(plans.size()) + " plans for batch of " +
                     std::to_string(batch));
  }
  for (const auto& p : plans) {
    if (p.n_patches != n || p.n_patches - p.masked.size() != nv) {
      throw ShapeError("decoder: plan with " + std::to_string(p.masked.size()) + " of " +
                       std::to_string(p.n_patches) + " patches masked does not match " +
                       std::to_string(nv) + " visible embeddings on a " +
                       std::to_string(n) + "-patch grid");
    }
  }
  const std::size_t nm = n - nv;
  const std::size_t dd = config_.decoder_dim;

  Tensor tokens = reshape(linear(visible, adapt_w_, adapt_b_), {batch * nv, dd});
  if (nm > 0) {
    const Tensor fill = embed_lookup(mask_token_, Tensor::zeros({batch * nm}));
    const std::array<Tensor, 2> parts{tokens, fill};
    tokens = concat<float>(parts, 0);
  }
  // Row order: all visible rows (sample-major), then all mask rows.
  std::vector<std::size_t> order(batch * n), positions(batch * n);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t vi = 0, mi = 0;
    for (std::size_t p = 0; p < n; ++p) {
      positions[b * n + p] = p;
      if (plans[b].is_masked(p)) {
        order[b * n + p] = batch * nv + b * nm + mi++;
      } else {
        order[b * n + p] = b * nv + vi++;
      }
    }
  }
  Tensor x = reshape(embed_lookup(tokens, index_tensor({batch * n}, order)), {batch, n, dd});
  x = add(x, embed_lookup(pos_, index_tensor({batch, n}, positions)));
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    x = block_forward(x, blocks_[i], config_.decoder_heads, {}, i);
  }
  if (!blocks_.empty()) x = layernorm(x, norm_g_, norm_b_);
  return linear(x, head_w_, head_b_);
}

// ---------------------------------------------------------------------------
// Pair, encode/decode

ModelPair ModelPair::create(const ModelConfig& config, std::uint64_t init_seed) {
  config.validate();
  return ModelPair{config, Encoder(config, derive_seed(init_seed, "encoder.init")),
                   Decoder(config, derive_seed(init_seed, "decoder.init"))};
}

NamedTensors ModelPair::parameters() const {
  NamedTensors out = encoder.parameters();
  for (auto& p : decoder.parameters()) out.push_back(std::move(p));
  return out;
}

Tensor encode_batch(const Encoder& encoder, const Tensor& patches,
                    std::span<const MaskPlan> plans, const ForwardOptions& options,
                    std::vector<Tensor>* layer_means) {
  if (patches.rank() != 3 || plans.size() != patches.dim(0)) {
    throw ShapeError("encode: expected [B, n_patches, patch_dim] with one plan per row, got " +
                     shape_str(patches.shape()) + " and " + std::to_string(plans.size()) +
                     " plans");
  }
  const std::size_t batch = patches.dim(0), n = patches.dim(1), pd = patches.dim(2);
  const std::size_t nv = plans[0].n_patches - plans[0].masked.size();
  std::vector<std::size_t> rows, positions;
  rows.reserve(batch * nv);
  positions.reserve(batch * nv);
  for (std::size_t b = 0; b < batch; ++b) {
    if (plans[b].n_patches != n) {
      throw ShapeError("encode: plan covers " + std::to_string(plans[b].n_patches) +
                       " patches but the image has " + std::to_string(n));
    }
    const auto vis = plans[b].visible();
    if (vis.size() != nv) throw ShapeError("encode: plans in a batch must mask equally many patches");
    for (auto p : vis) {
      rows.push_back(b * n + p);
      positions.push_back(p);
    }
  }
  const Tensor flat = reshape(patches, {batch * n, pd});
  const Tensor vis = embed_lookup(flat, index_tensor({batch, nv}, rows));
  return encoder.forward(vis, index_tensor({batch, nv}, positions), options, layer_means);
}

Tensor decode_batch(const Decoder& decoder, const Tensor& visible,
                    std::span<const MaskPlan> plans) {
  return decoder.forward(visible, plans);
}

Tensor encode(const Encoder& encoder, const Tensor& patches, const MaskPlan& plan,
              const ForwardOptions& options) {
  if (patches.rank() != 2 || patches.dim(0) != plan.n_patches) {
    throw ShapeError("encode: patches " + shape_str(patches.shape()) +
                     " do not match a plan over " + std::to_string(plan.n_patches) +
                     " patches");
  }
  const Tensor batched = reshape(patches, {1, patches.dim(0), patches.dim(1)});
  const Tensor out = encode_batch(encoder, batched, std::span(&plan, 1), options);
  return reshape(out, {out.dim(1), out.dim(2)});
}

Tensor decode(const Decoder& decoder, const Tensor& visible, const MaskPlan& plan) {
  if (visible.rank() != 2) {
    throw ShapeError("decode: expected [n_visible, width], got " + shape_str(visible.shape()));
  }
  const Tensor batched = reshape(visible, {1, visible.dim(0), visible.dim(1)});
  const Tensor out = decoder.forward(batched, std::span(&plan, 1));
  return reshape(out, {out.dim(1), out.dim(2)});
}

Reconstruction reconstruct(const ModelPair& model, const Tensor& image, std::uint64_t seed) {
  const auto& c = model.config;
  if (image.shape() != Shape{c.channels, c.image_side, c.image_side}) {
    throw ShapeError("reconstruct: image " + shape_str(image.shape()) +
                     " does not match model geometry [" + std::to_string(c.channels) + "," +
                     std::to_string(c.image_side) + "," + std::to_string(c.image_side) + "]");
  }
  const Tensor patches = patchify(image, c.patch_side);
  MaskPlan plan = sample_mask(c.n_patches(), c.mask_ratio, seed);
  const Tensor latent = encode(model.encoder, patches, plan);
  return {decode(model.decoder, latent, plan), std::move(plan)};
}

// ---------------------------------------------------------------------------
// Persistence

std::uint64_t checksum(const NamedTensors& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : params) {
    feed(name.data(), name.size());
    for (auto d : t.shape()) feed(&d, sizeof d);
    feed(t.data().data(), t.data().size_bytes());
  }
  return h;
}

void assign_parameters(const NamedTensors& target, const NamedTensors& source,
                       std::string_view prefix) {
  for (const auto& [name, t] : target) {
    if (!prefix.empty() && name.rfind(prefix, 0) != 0) continue;
    const Tensor* src = find_tensor(source, name);
    if (!src) throw FormatError("checkpoint: missing parameter '" + name + "'", 0);
    if (src->shape() != t.shape()) {
      throw FormatError("checkpoint: parameter '" + name + "' has shape " +
                            shape_str(src->shape()) + ", model expects " +
                            shape_str(t.shape()),
                        0);
    }
    Tensor dst = t;
    std::copy(src->data().begin(), src->data().end(), dst.mutable_data().begin());
  }
}

void save_model(const std::filesystem::path& path, const ModelPair& model,
                const std::map<std::string, std::string>& extra) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_model: cannot open " + path.string());
  out << "# mimi model checkpoint\n";
  for (const auto& [k, v] : model.config.to_kv()) out << k << '=' << v << '\n';
  for (const auto& [k, v] : extra) out << k << '=' << v << '\n';
  out << '\n';
  write_tensors(out, model.parameters());
}

LoadedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_model: cannot open " + path.string());
  std::string header, line;
  std::uint64_t offset = 0;
  bool terminated = false;
  while (std::getline(in, line)) {
    offset += line.size() + 1;
    if (line.empty()) {
      terminated = true;
      break;
    }
    header += line;
    header += '\n';
  }
  if (!terminated) throw FormatError("model checkpoint: unterminated header", offset);
  LoadedModel loaded;
  loaded.header = parse_kv_text(header);
  const ModelConfig config = ModelConfig::from_kv(loaded.header);
  loaded.model = ModelPair::create(config, 0);
  NamedTensors tensors;
  try {
    tensors = read_tensors(in);
  } catch (const FormatError& e) {
    throw FormatError(std::string("model checkpoint: ") + e.what(), offset + e.offset());
  }
  assign_parameters(loaded.model.parameters(), tensors);
  return loaded;
}

}  // namespace mimi
