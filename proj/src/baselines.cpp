#include "mimi/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mimi/rng.hpp"

namespace mimi {

namespace {

Tensor xavier_param(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / double(fan_in + fan_out));
  std::uniform_real_distribution<float> u(float(-a), float(a));
  std::vector<float> v(fan_in * fan_out);
  for (auto& x : v) x = u(rng);
  return Tensor::from_data({fan_in, fan_out}, std::move(v), true);
}

Tensor labels_tensor(std::span<const int> labels) {
  std::vector<float> v(labels.begin(), labels.end());
  return Tensor::from_data({labels.size()}, std::move(v));
}

/// Minibatch Adam over cross-entropy of forward(x_rows) against labels.
template <typename Forward>
TrainLog fit_cross_entropy(std::vector<Tensor> params, const Tensor& x,
                           const std::vector<int>& labels, std::size_t epochs,
                           std::size_t batch_size, double lr, double weight_decay,
                           std::uint64_t seed, Forward&& forward) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  TrainConfig opt;
  opt.learning_rate = lr;
  opt.weight_decay = weight_decay;
  AdamState state;
  std::vector<std::vector<float>> grads(params.size());
  std::vector<std::size_t> order(n);
  TrainLog log;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t lo = 0; lo < n; lo += batch_size) {
      const std::size_t hi = std::min(n, lo + batch_size);
      std::vector<float> xb((hi - lo) * d);
      std::vector<int> yb(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) {
        std::copy_n(x.data().begin() + order[i] * d, d, xb.begin() + (i - lo) * d);
        yb[i - lo] = labels[order[i]];
      }
      for (auto& p : params) p.zero_grad();
      const Tensor loss =
          cross_entropy(forward(Tensor::from_data({hi - lo, d}, std::move(xb))), labels_tensor(yb));
      backward(loss);
      for (std::size_t i = 0; i < params.size(); ++i) {
        grads[i].assign(params[i].grad().begin(), params[i].grad().end());
      }
      clip_global_norm(grads, 1.0);
      adam_step(params, grads, state, opt);
      total += double(loss.item()) * double(hi - lo);
    }
    log.mean_loss.push_back(total / double(n));
    log.seconds.push_back(0.0);
  }
  for (auto& p : params) p.set_requires_grad(false);
  return log;
}

std::vector<std::array<double, 2>> softmax_rows2(const Tensor& logits) {
  std::vector<std::array<double, 2>> out(logits.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double a = logits.data()[2 * i], b = logits.data()[2 * i + 1];
    const double m = std::max(a, b);
    const double ea = std::exp(a - m), eb = std::exp(b - m);
    out[i] = {ea / (ea + eb), eb / (ea + eb)};
  }
  return out;
}

Tensor rows_tensor(const FeatureRows& rows) {
  if (rows.empty()) throw std::invalid_argument("feature matrix is empty");
  const std::size_t d = rows[0].size();
  std::vector<float> flat;
  flat.reserve(rows.size() * d);
  for (const auto& r : rows) {
    if (r.size() != d) throw ShapeError("feature rows have unequal lengths");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return Tensor::from_data({rows.size(), d}, std::move(flat));
}

}  // namespace

// ---------------------------------------------------------------------------
// Attack classifier

BinaryAttackClassifier::BinaryAttackClassifier(std::size_t input_dim,
                                               const ClassifierConfig& config)
    : input_dim_(input_dim), config_(config) {
  if (input_dim == 0 || config.hidden == 0) {
    throw std::invalid_argument("attack classifier needs positive input and hidden sizes");
  }
  std::mt19937_64 rng(derive_seed(config.seed, "classifier.init"));
  w1_ = xavier_param(input_dim, config.hidden, rng);
  b1_ = Tensor::zeros({config.hidden}, true);
  w2_ = xavier_param(config.hidden, 2, rng);
  b2_ = Tensor::zeros({2}, true);
  mean_.assign(input_dim, 0.0);
  scale_.assign(input_dim, 1.0);
}

Tensor BinaryAttackClassifier::forward(const Tensor& x) const {
  return add(matmul(gelu(add(matmul(x, w1_), b1_)), w2_), b2_);
}

Tensor BinaryAttackClassifier::standardize(const FeatureRows& x) const {
  std::vector<float> flat;
  flat.reserve(x.size() * input_dim_);
  for (const auto& row : x) {
    if (row.size() != input_dim_) {
      throw ShapeError("attack classifier expects " + std::to_string(input_dim_) +
                       " features, got " + std::to_string(row.size()));
    }
    for (std::size_t j = 0; j < input_dim_; ++j) {
      flat.push_back(static_cast<float>((row[j] - mean_[j]) / scale_[j]));
    }
  }
  return Tensor::from_data({x.size(), input_dim_}, std::move(flat));
}

void BinaryAttackClassifier::fit(const FeatureRows& x, const std::vector<int>& labels) {
  if (x.size() != labels.size() || x.empty()) {
    throw std::invalid_argument("attack classifier: need one label per feature row");
  }
  for (std::size_t j = 0; j < input_dim_; ++j) {
    double m = 0.0, v = 0.0;
    for (const auto& row : x) m += row.at(j);
    m /= double(x.size());
    for (const auto& row : x) v += (row[j] - m) * (row[j] - m);
    const double sd = std::sqrt(v / double(x.size()));
    mean_[j] = m;
    scale_[j] = sd > 1e-8 ? sd : 1.0;
  }
  const Tensor xs = standardize(x);
  for (Tensor* p : {&w1_, &b1_, &w2_, &b2_}) p->set_requires_grad(true);
  log_ = fit_cross_entropy({w1_, b1_, w2_, b2_}, xs, labels, config_.epochs, config_.batch_size,
                           config_.learning_rate, config_.weight_decay,
                           derive_seed(config_.seed, "classifier.order"),
                           [this](const Tensor& xb) { return forward(xb); });
}

std::vector<std::array<double, 2>> BinaryAttackClassifier::predict_proba(
    const FeatureRows& x) const {
  if (x.empty()) return {};
  return softmax_rows2(forward(standardize(x)));
}

// ---------------------------------------------------------------------------
// Encoder features

namespace {

FeatureRows pool_rows(const Tensor& pooled) {
  const std::size_t n = pooled.dim(0), d = pooled.dim(1);
  FeatureRows out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].assign(pooled.data().begin() + i * d, pooled.data().begin() + (i + 1) * d);
  }
  return out;
}

Tensor mean_tokens(const Tensor& x) {
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  std::vector<float> out(b * d);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < t; ++k) acc += x.data()[(i * t + k) * d + c];
      out[i * d + c] = static_cast<float>(acc / double(t));
    }
  }
  return Tensor::from_data({b, d}, std::move(out));
}

template <typename Fn>
void for_chunks(std::span<const std::size_t> indices, Fn&& fn) {
  constexpr std::size_t kChunk = 64;
  for (std::size_t lo = 0; lo < indices.size(); lo += kChunk) {
    fn(indices.subspan(lo, std::min(kChunk, indices.size() - lo)));
  }
}

}  // namespace

FeatureRows pooled_embeddings(const Encoder& encoder, const Dataset& dataset,
                              std::span<const std::size_t> indices) {
  const ModelConfig& c = encoder.config();
  FeatureRows out;
  for_chunks(indices, [&](std::span<const std::size_t> part) {
    const Tensor patches = batch_patches(dataset, part, c.patch_side);
    const std::vector<MaskPlan> plans(part.size(), empty_mask(c.n_patches()));
    auto rows = pool_rows(mean_tokens(encode_batch(encoder, patches, plans)));
    for (auto& r : rows) out.push_back(std::move(r));
  });
  return out;
}

FeatureRows encoder_features(const Encoder& encoder, const Dataset& dataset,
                             std::span<const std::size_t> indices) {
  const ModelConfig& c = encoder.config();
  FeatureRows out;
  for_chunks(indices, [&](std::span<const std::size_t> part) {
    const Tensor patches = batch_patches(dataset, part, c.patch_side);
    const std::vector<MaskPlan> plans(part.size(), empty_mask(c.n_patches()));
    std::vector<Tensor> layers;
    const auto final_rows = pool_rows(mean_tokens(encode_batch(encoder, patches, plans, {}, &layers)));
    for (std::size_t i = 0; i < part.size(); ++i) {
      std::vector<float> row = final_rows[i];
      for (const auto& l : layers) {
        const std::size_t d = l.dim(1);
        row.insert(row.end(), l.data().begin() + i * d, l.data().begin() + (i + 1) * d);
      }
      out.push_back(std::move(row));
    }
  });
  return out;
}

double embedding_entropy(std::span<const float> embedding) {
  if (embedding.empty()) throw std::invalid_argument("embedding_entropy: empty embedding");
  const double m = *std::max_element(embedding.begin(), embedding.end());
  double z = 0.0;
  for (float v : embedding) z += std::exp(double(v) - m);
  double h = 0.0;
  for (float v : embedding) {
    const double p = std::exp(double(v) - m) / z;
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::clamp(h, 0.0, std::log(double(embedding.size())));
}

double embedding_instability(const Encoder& encoder, const Tensor& image, std::size_t k,
                             std::uint64_t seed, bool same_seed) {
  if (k < 2) throw std::invalid_argument("embedding_instability: k must be at least 2");
  const ModelConfig& c = encoder.config();
  const std::size_t n = c.n_patches(), pd = c.patch_dim();
  std::vector<float> one(n * pd);
  patchify_into(image.data(), c.channels, c.image_side, c.patch_side, one);
  std::vector<float> buf;
  buf.reserve(k * n * pd);
  std::vector<MaskPlan> plans;
  for (std::size_t v = 0; v < k; ++v) {
    buf.insert(buf.end(), one.begin(), one.end());
    plans.push_back(sample_mask(n, c.mask_ratio, same_seed ? seed : mix_seed(seed, v)));
  }
  const Tensor pooled =
      mean_tokens(encode_batch(encoder, Tensor::from_data({k, n, pd}, std::move(buf)), plans));
  const std::size_t d = pooled.dim(1);
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = a + 1; b < k; ++b) {
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double e = double(pooled.data()[a * d + j]) - double(pooled.data()[b * d + j]);
        sq += e * e;
      }
      total += std::sqrt(sq);
      ++pairs;
    }
  }
  return total / double(pairs);
}

// ---------------------------------------------------------------------------
// Baselines

namespace {

void require_inputs(const AttackInputs& in) {
  if (!in.target || !in.shadow || !in.target_data || !in.shadow_data) {
    throw std::invalid_argument("baseline: missing model or dataset");
  }
}

std::vector<ScoreRecord> records_from(std::span<const std::size_t> members,
                                      std::span<const std::size_t> nonmembers,
                                      const std::vector<double>& scores, Split split) {
  std::vector<ScoreRecord> out;
  for (std::size_t i = 0; i < members.size(); ++i) out.push_back({members[i], scores[i], true, split});
  for (std::size_t i = 0; i < nonmembers.size(); ++i) {
    out.push_back({nonmembers[i], scores[members.size() + i], false, split});
  }
  return out;
}

std::vector<std::size_t> joined(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  std::vector<std::size_t> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

/// Classifier baselines share this shape: features per set, classifier on the
/// shadow features, score 1 - P(member), fixed cut at 0.5.
AttackReport classifier_attack(const std::string& method, const AttackInputs& in,
                               const BaselineOptions& options, const FeatureRows& shadow_x,
                               const FeatureRows& target_x) {
  if (shadow_x.empty() || target_x.empty()) throw std::invalid_argument(method + ": empty feature set");
  if (shadow_x[0].size() != target_x[0].size()) {
    throw ShapeError("baseline " + method + ": shadow features have length " +
                     std::to_string(shadow_x[0].size()) + " but target features have " +
                     std::to_string(target_x[0].size()));
  }
  std::vector<int> labels;
  for (std::size_t i = 0; i < in.shadow_train.size(); ++i) labels.push_back(1);
  for (std::size_t i = 0; i < in.shadow_test.size(); ++i) labels.push_back(0);
  if (options.shuffle_labels) {
    std::mt19937_64 rng(derive_seed(options.seed, "baseline.shuffle"));
    std::shuffle(labels.begin(), labels.end(), rng);
  }
  ClassifierConfig cc = options.classifier;
  cc.seed = derive_seed(options.seed, "baseline." + method + ".classifier");
  BinaryAttackClassifier clf(shadow_x[0].size(), cc);
  clf.fit(shadow_x, labels);

  auto to_scores = [](const std::vector<std::array<double, 2>>& p) {
    std::vector<double> s;
    for (const auto& row : p) s.push_back(1.0 - row[1]);
    return s;
  };
  const auto shadow_scores = to_scores(clf.predict_proba(shadow_x));
  std::vector<double> sm(shadow_scores.begin(), shadow_scores.begin() + in.shadow_train.size());
  std::vector<double> sn(shadow_scores.begin() + in.shadow_train.size(), shadow_scores.end());
  const Threshold t{0.5, balanced_accuracy(sm, sn, 0.5)};

  auto records = records_from(in.target_train, in.target_test,
                              to_scores(clf.predict_proba(target_x)), Split::target);
  AttackReport r = make_report(method, t, std::move(records));
  r.calibration = records_from(in.shadow_train, in.shadow_test, shadow_scores, Split::shadow);
  return r;
}

/// Linear softmax head on pooled embeddings; returns posteriors per row.
std::vector<std::vector<double>> downstream_posteriors(const Encoder& encoder, const Dataset& data,
                                                       std::span<const std::size_t> train,
                                                       std::span<const std::size_t> query,
                                                       std::size_t classes,
                                                       const BaselineOptions& options,
                                                       std::uint64_t seed) {
  const FeatureRows xtr = pooled_embeddings(encoder, data, train);
  std::vector<int> ytr;
  for (auto i : train) ytr.push_back(data.label(i));
  const std::size_t d = xtr.at(0).size();
  std::mt19937_64 rng(seed);
  Tensor w = xavier_param(d, classes, rng);
  Tensor b = Tensor::zeros({classes}, true);
  fit_cross_entropy({w, b}, rows_tensor(xtr), ytr, options.downstream_epochs, 64, 1e-2, 0.0,
                    mix_seed(seed, 1), [&](const Tensor& x) { return add(matmul(x, w), b); });
  const Tensor logits = add(matmul(rows_tensor(pooled_embeddings(encoder, data, query)), w), b);
  std::vector<std::vector<double>> out(query.size());
  for (std::size_t i = 0; i < query.size(); ++i) {
    const auto row = logits.data().subspan(i * classes, classes);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (float v : row) z += std::exp(double(v) - m);
    for (float v : row) out[i].push_back(std::exp(double(v) - m) / z);
  }
  return out;
}

FeatureRows sorted_posteriors(std::vector<std::vector<double>> p) {
  FeatureRows out;
  for (auto& row : p) {
    std::sort(row.begin(), row.end(), std::greater<>());
    out.emplace_back(row.begin(), row.end());
  }
  return out;
}

AttackReport threshold_attack(const std::string& method, const AttackInputs& in,
                              const std::vector<double>& shadow_scores,
                              const std::vector<double>& target_scores) {
  const std::span<const double> s(shadow_scores);
  const Threshold t = search_threshold(s.first(in.shadow_train.size()),
                                       s.subspan(in.shadow_train.size()));
  AttackReport r = make_report(
      method, t, records_from(in.target_train, in.target_test, target_scores, Split::target));
  r.calibration = records_from(in.shadow_train, in.shadow_test, shadow_scores, Split::shadow);
  return r;
}

}  // namespace

AttackReport baseline_a(const AttackInputs& in, const BaselineOptions& options) {
  require_inputs(in);
  const Dataset& data = *in.target_data;
  if (!data.has_labels() || !in.shadow_data->has_labels()) {
    throw std::invalid_argument("baseline A: downstream classification needs labeled data");
  }
  if (options.downstream.empty()) {
    throw std::invalid_argument("baseline A: no downstream training images");
  }
  const std::size_t classes = std::max(data.num_classes(), in.shadow_data->num_classes());
  const auto shadow_q = joined(in.shadow_train, in.shadow_test);
  const auto target_q = joined(in.target_train, in.target_test);
  const auto shadow_x = sorted_posteriors(downstream_posteriors(
      in.shadow->encoder, *in.shadow_data, options.downstream, shadow_q, classes, options,
      derive_seed(options.seed, "baseline.A.shadow_head")));
  const auto target_x = sorted_posteriors(downstream_posteriors(
      in.target->encoder, data, options.downstream, target_q, classes, options,
      derive_seed(options.seed, "baseline.A.target_head")));
  return classifier_attack("A", in, options, shadow_x, target_x);
}

AttackReport baseline_b(const AttackInputs& in, const BaselineOptions& options) {
  require_inputs(in);
  if (in.shadow->config.encoder_layers != in.target->config.encoder_layers) {
    throw ShapeError("baseline B: shadow encoder has " +
                     std::to_string(in.shadow->config.encoder_layers) +
                     " layers but the target has " +
                     std::to_string(in.target->config.encoder_layers));
  }
  const auto shadow_x =
      encoder_features(in.shadow->encoder, *in.shadow_data, joined(in.shadow_train, in.shadow_test));
  const auto target_x =
      encoder_features(in.target->encoder, *in.target_data, joined(in.target_train, in.target_test));
  return classifier_attack("B", in, options, shadow_x, target_x);
}

AttackReport baseline_c(const AttackInputs& in, const BaselineOptions& options) {
  require_inputs(in);
  (void)options;
  auto entropies = [](const FeatureRows& rows) {
    std::vector<double> s;
    for (const auto& r : rows) s.push_back(embedding_entropy(r));
    return s;
  };
  const auto shadow = entropies(
      pooled_embeddings(in.shadow->encoder, *in.shadow_data, joined(in.shadow_train, in.shadow_test)));
  const auto target = entropies(
      pooled_embeddings(in.target->encoder, *in.target_data, joined(in.target_train, in.target_test)));
  return threshold_attack("C", in, shadow, target);
}

AttackReport baseline_d(const AttackInputs& in, const BaselineOptions& options) {
  require_inputs(in);
  if (options.k < 2) throw std::invalid_argument("baseline D: k must be at least 2");
  const std::uint64_t seed = derive_seed(options.seed, "baseline.D");
  auto scores = [&](const Encoder& enc, const Dataset& data, const std::vector<std::size_t>& idx) {
    std::vector<double> s;
    for (auto i : idx) s.push_back(embedding_instability(enc, data.image_tensor(i), options.k, mix_seed(seed, i)));
    return s;
  };
  const auto shadow = scores(in.shadow->encoder, *in.shadow_data, joined(in.shadow_train, in.shadow_test));
  const auto target = scores(in.target->encoder, *in.target_data, joined(in.target_train, in.target_test));
  return threshold_attack("D", in, shadow, target);
}

AttackReport run_baseline(const std::string& method, const AttackInputs& in,
                          const BaselineOptions& options) {
  if (method == "A") return baseline_a(in, options);
  if (method == "B") return baseline_b(in, options);
  if (method == "C") return baseline_c(in, options);
  if (method == "D") return baseline_d(in, options);
  throw std::invalid_argument("unknown baseline '" + method + "' (expected A, B, C or D)");
}

}  // namespace mimi
