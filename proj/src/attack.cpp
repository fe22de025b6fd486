#include "mimi/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "mimi/format.hpp"
#include "mimi/rng.hpp"

namespace mimi {

ScoreScope parse_scope(std::string_view name) {
  if (name == "masked" || name == "masked-only" || name == "masked_only") {
    return ScoreScope::masked_only;
  }
  if (name == "full" || name == "full-image" || name == "full_image") return ScoreScope::full_image;
  throw std::invalid_argument("unknown score scope '" + std::string(name) +
                              "' (expected masked-only or full-image)");
}

std::string scope_name(ScoreScope scope) {
  return scope == ScoreScope::masked_only ? "masked-only" : "full-image";
}

std::string split_name(Split split) { return split == Split::shadow ? "shadow" : "target"; }

namespace {

/// patches: per-image flat [n, pd] rows; seeds: per-image base seeds.
std::vector<double> score_chunk(const Encoder& encoder, const Decoder& decoder,
                                std::span<const float> patches, std::span<const std::uint64_t> seeds,
                                std::size_t n_draws, ScoreScope scope) {
  const ModelConfig& c = decoder.config();
  const std::size_t n = c.n_patches(), pd = c.patch_dim();
  const std::size_t images = seeds.size(), rows = images * n_draws;
  std::vector<float> buf(rows * n * pd);
  std::vector<MaskPlan> plans;
  plans.reserve(rows);
  for (std::size_t i = 0; i < images; ++i) {
    for (std::size_t d = 0; d < n_draws; ++d) {
      std::copy_n(patches.begin() + i * n * pd, n * pd, buf.begin() + (i * n_draws + d) * n * pd);
      plans.push_back(sample_mask(n, c.mask_ratio, mix_seed(seeds[i], d)));
    }
  }
  const Tensor target = Tensor::from_data({rows, n, pd}, std::move(buf));
  const Tensor pred = decode_batch(decoder, encode_batch(encoder, target, plans), plans);
  const auto p = pred.data();
  const auto t = target.data();
  std::vector<double> out(images, 0.0);
  for (std::size_t i = 0; i < images; ++i) {
    double total = 0.0;
    for (std::size_t d = 0; d < n_draws; ++d) {
      const std::size_t r = i * n_draws + d;
      double acc = 0.0;
      std::size_t count = 0;
      for (std::size_t k = 0; k < n; ++k) {
        if (scope == ScoreScope::masked_only && !plans[r].is_masked(k)) continue;
        const std::size_t base = (r * n + k) * pd;
        for (std::size_t j = 0; j < pd; ++j) {
          const double e = double(p[base + j]) - double(t[base + j]);
          acc += e * e;
        }
        count += pd;
      }
      total += acc / double(count);
    }
    out[i] = total / double(n_draws);
  }
  return out;
}

void check_scoring(const Encoder& encoder, const Decoder& decoder, std::size_t n_draws) {
  if (n_draws == 0) throw std::invalid_argument("membership_score: n_draws must be at least 1");
  if (encoder.width() != decoder.input_width()) {
    throw ShapeError("membership_score: encoder width " + std::to_string(encoder.width()) +
                     " does not match decoder input " + std::to_string(decoder.input_width()));
  }
}

}  // namespace

double membership_score(const Encoder& encoder, const Decoder& decoder, const Tensor& image,
                        std::size_t n_draws, std::uint64_t seed, ScoreScope scope) {
  check_scoring(encoder, decoder, n_draws);
  const ModelConfig& c = decoder.config();
  if (image.shape() != Shape{c.channels, c.image_side, c.image_side}) {
    throw ShapeError("membership_score: image " + shape_str(image.shape()) +
                     " does not match model geometry");
  }
  std::vector<float> patches(c.n_patches() * c.patch_dim());
  patchify_into(image.data(), c.channels, c.image_side, c.patch_side, patches);
  const std::uint64_t seeds[1] = {seed};
  return score_chunk(encoder, decoder, patches, seeds, n_draws, scope)[0];
}

std::vector<double> score_samples(const Encoder& encoder, const Decoder& decoder,
                                  const Dataset& dataset, std::span<const std::size_t> indices,
                                  const ScoreOptions& options, std::uint64_t seed) {
  check_scoring(encoder, decoder, options.n_draws);
  const ModelConfig& c = decoder.config();
  const std::size_t chunk = std::max<std::size_t>(1, 256 / options.n_draws);
  std::vector<double> out;
  out.reserve(indices.size());
  for (std::size_t lo = 0; lo < indices.size(); lo += chunk) {
    const auto part = indices.subspan(lo, std::min(chunk, indices.size() - lo));
    const Tensor patches = batch_patches(dataset, part, c.patch_side);
    std::vector<std::uint64_t> seeds;
    for (auto idx : part) seeds.push_back(mix_seed(seed, idx));
    const auto scores = score_chunk(encoder, decoder, patches.data(), seeds, options.n_draws,
                                    options.scope);
    out.insert(out.end(), scores.begin(), scores.end());
  }
  return out;
}

namespace {

void require_nonempty(std::size_t m, std::size_t n) {
  if (m == 0 || n == 0) {
    throw std::invalid_argument("search_threshold: need at least one member and one non-member score");
  }
}

}  // namespace

double balanced_accuracy(std::span<const double> member_scores,
                         std::span<const double> nonmember_scores, double threshold) {
  require_nonempty(member_scores.size(), nonmember_scores.size());
  std::size_t tp = 0, tn = 0;
  for (double s : member_scores) tp += s < threshold;
  for (double s : nonmember_scores) tn += !(s < threshold);
  return 0.5 * (double(tp) / double(member_scores.size()) +
                double(tn) / double(nonmember_scores.size()));
}

Threshold search_threshold(std::span<const double> member_scores,
                           std::span<const double> nonmember_scores) {
  const std::size_t m = member_scores.size(), n = nonmember_scores.size();
  require_nonempty(m, n);
  struct Item {
    double score;
    bool member;
  };
  std::vector<Item> all;
  all.reserve(m + n);
  for (double s : member_scores) all.push_back({s, true});
  for (double s : nonmember_scores) all.push_back({s, false});
  for (const auto& it : all) {
    if (std::isnan(it.score)) throw std::invalid_argument("search_threshold: NaN score");
  }
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });

  // Objective numerator tp*n + tn*m is exact in integers; the cut at -inf
  // has tp = 0 and tn = n.
  std::uint64_t tp = 0, tn = n;
  std::uint64_t best = tp * n + tn * m;
  double best_value = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < all.size();) {
    const double s = all[i].score;
    while (i < all.size() && all[i].score == s) {
      if (all[i].member) {
        ++tp;
      } else {
        --tn;
      }
      ++i;
    }
    const std::uint64_t score = tp * n + tn * m;
    if (score > best) {
      best = score;
      if (i == all.size()) {
        best_value = std::numeric_limits<double>::infinity();
      } else {
        const double next = all[i].score;
        double mid = s + (next - s) / 2.0;
        if (!(mid > s)) mid = next;
        best_value = mid;
      }
    }
  }
  return Threshold{best_value, double(best) / (2.0 * double(m) * double(n))};
}

Threshold search_threshold(std::span<const ScoreRecord> records) {
  std::vector<double> mem, non;
  for (const auto& r : records) (r.is_member ? mem : non).push_back(r.score);
  return search_threshold(mem, non);
}

double evaluate_asr(std::span<const Verdict> verdicts, const std::vector<bool>& is_member,
                    std::ostream* warn) {
  if (verdicts.size() != is_member.size()) {
    throw std::invalid_argument("evaluate_asr: " + std::to_string(verdicts.size()) +
                                " verdicts for " + std::to_string(is_member.size()) + " labels");
  }
  if (verdicts.empty()) throw std::invalid_argument("evaluate_asr: empty evaluation set");
  std::size_t correct = 0, members = 0;
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    members += is_member[i];
    correct += (verdicts[i] == Verdict::member) == is_member[i];
  }
  const std::size_t nonmembers = verdicts.size() - members;
  const double gap = std::abs(double(members) - double(nonmembers));
  if (warn && gap > 0.01 * double(verdicts.size())) {
    *warn << "warning: evaluation set is imbalanced (" << members << " members, " << nonmembers
          << " non-members); ASR is not balanced accuracy\n";
  }
  return double(correct) / double(verdicts.size());
}

SummaryStats summarize(std::vector<double> values) {
  SummaryStats s;
  s.count = values.size();
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  double acc = 0.0;
  for (double v : values) acc += v;
  s.mean = acc / double(values.size());
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(var / double(values.size()));
  auto quantile = [&](double q) {
    const double pos = q * double(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - double(lo)) * (values[hi] - values[lo]);
  };
  s.q1 = quantile(0.25);
  s.median = quantile(0.5);
  s.q3 = quantile(0.75);
  return s;
}

AttackReport make_report(std::string method, const Threshold& threshold,
                         std::vector<ScoreRecord> records, std::ostream* warn) {
  AttackReport r;
  r.method = std::move(method);
  r.threshold = threshold;
  std::vector<double> mem, non;
  std::vector<bool> truth;
  for (const auto& rec : records) {
    r.verdicts.push_back(infer(rec.score, threshold));
    truth.push_back(rec.is_member);
    (rec.is_member ? mem : non).push_back(rec.score);
  }
  r.asr = evaluate_asr(r.verdicts, truth, warn);
  r.member_stats = summarize(std::move(mem));
  r.nonmember_stats = summarize(std::move(non));
  r.records = std::move(records);
  return r;
}

ModelPair simulate_target(const Encoder& target_encoder, const Decoder& shadow_decoder,
                          const Dataset& shadow_data, std::span<const std::size_t> shadow_train,
                          const TrainConfig& config) {
  TrainConfig ft = config;
  ft.freeze_encoder = true;
  auto tuned = finetune_decoder(target_encoder, shadow_decoder, shadow_data, shadow_train, ft);
  ModelPair out{shadow_decoder.config(), target_encoder, std::move(tuned.decoder)};
  out.encoder.set_requires_grad(false);
  return out;
}

std::vector<ScoreRecord> score_records(const Encoder& enc, const Decoder& dec, const Dataset& data,
                                       std::span<const std::size_t> members,
                                       std::span<const std::size_t> nonmembers,
                                       const ScoreOptions& options, std::uint64_t seed,
                                       Split split) {
  std::vector<ScoreRecord> out;
  const auto ms = score_samples(enc, dec, data, members, options, seed);
  const auto ns = score_samples(enc, dec, data, nonmembers, options, seed);
  for (std::size_t i = 0; i < members.size(); ++i) out.push_back({members[i], ms[i], true, split});
  for (std::size_t i = 0; i < nonmembers.size(); ++i) {
    out.push_back({nonmembers[i], ns[i], false, split});
  }
  return out;
}

AttackReport run_attack(const AttackInputs& in, const AttackOptions& options, std::ostream* warn) {
  if (!in.target || !in.shadow || !in.target_data || !in.shadow_data) {
    throw std::invalid_argument("run_attack: missing model or dataset");
  }
  const std::uint64_t score_seed = derive_seed(options.seed, "attack.score");
  auto calibration =
      score_records(in.shadow->encoder, in.shadow->decoder, *in.shadow_data, in.shadow_train,
                    in.shadow_test, options.score, score_seed, Split::shadow);
  const Threshold threshold = search_threshold(calibration);

  TrainConfig ft = options.finetune;
  ft.seed = derive_seed(options.seed, "attack.finetune");
  const ModelPair simulated = simulate_target(in.target->encoder, in.shadow->decoder,
                                              *in.shadow_data, in.shadow_train, ft);
  auto records = score_records(simulated.encoder, simulated.decoder, *in.target_data,
                               in.target_train, in.target_test, options.score, score_seed,
                               Split::target);
  AttackReport report = make_report("ours", threshold, std::move(records), warn);
  report.calibration = std::move(calibration);
  return report;
}

void write_scores_csv(std::ostream& out, std::span<const ScoreRecord> records) {
  out << "sample_id,split,is_member,score\n";
  for (const auto& r : records) {
    out << r.sample_id << ',' << split_name(r.split) << ',' << (r.is_member ? 1 : 0) << ','
        << format_double(r.score) << '\n';
  }
}

}  // namespace mimi
