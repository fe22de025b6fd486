#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "mimi/attack.hpp"
#include "mimi/rng.hpp"

using namespace mimi;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_side = 8;
  c.patch_side = 4;
  c.embed_dim = 16;
  c.heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.decoder_dim = 16;
  c.decoder_heads = 2;
  c.mask_ratio = 0.5;
  return c;
}

// Exhaustive scan: every candidate cut, counted directly.
Threshold brute_force(const std::vector<double>& mem, const std::vector<double>& non) {
  std::vector<double> all(mem);
  all.insert(all.end(), non.begin(), non.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  std::vector<double> cuts{-std::numeric_limits<double>::infinity()};
  for (std::size_t i = 0; i + 1 < all.size(); ++i) {
    // a cut strictly above all[i]; adjacent doubles leave only all[i + 1]
    const double mid = all[i] + (all[i + 1] - all[i]) / 2;
    cuts.push_back(mid > all[i] ? mid : all[i + 1]);
  }
  cuts.push_back(std::numeric_limits<double>::infinity());
  Threshold best{cuts[0], -1.0};
  for (double c : cuts) {
    double tp = 0, tn = 0;
    for (double s : mem) tp += s < c ? 1 : 0;
    for (double s : non) tn += s < c ? 0 : 1;
    const double obj = 0.5 * (tp / double(mem.size()) + tn / double(non.size()));
    if (obj > best.objective + 1e-12) best = {c, obj};
  }
  return best;
}

std::vector<std::size_t> iota_indices(std::size_t n, std::size_t start = 0) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), start);
  return v;
}

}  // namespace

TEST_CASE("search_threshold examples") {
  SUBCASE("separable") {
    const std::vector<double> m{0.1, 0.2}, n{0.8, 0.9};
    const Threshold t = search_threshold(m, n);
    CHECK(t.value == doctest::Approx(0.5));
    CHECK(t.objective == 1.0);
  }
  SUBCASE("indistinguishable") {
    const std::vector<double> s{0.3, 0.1, 0.7, 0.7};
    CHECK(search_threshold(s, s).objective == 0.5);
  }
  SUBCASE("reversed order cannot beat chance") {
    const std::vector<double> m{0.8, 0.9}, n{0.1, 0.2};
    const Threshold t = search_threshold(m, n);
    CHECK(t.objective == 0.5);
    CHECK(t.value == -std::numeric_limits<double>::infinity());
  }
  SUBCASE("empty lists are rejected") {
    const std::vector<double> m{0.1}, none;
    CHECK_THROWS_AS(search_threshold(m, none), std::invalid_argument);
    CHECK_THROWS_AS(search_threshold(none, m), std::invalid_argument);
  }
}

TEST_CASE("search_threshold matches an exhaustive scan") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const bool discrete = trial % 3 == 0;  // force ties
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> coarse(0, 20);
    auto draw = [&](double shift) { return discrete ? coarse(rng) / 20.0 + shift : u(rng) + shift; };
    std::vector<double> m(200), n(200);
    for (auto& v : m) v = draw(0.0);
    for (auto& v : n) v = draw(0.15);
    const Threshold fast = search_threshold(m, n);
    const Threshold slow = brute_force(m, n);
    CHECK(fast.objective == doctest::Approx(slow.objective).epsilon(1e-12));
    CHECK(fast.value == slow.value);
    CHECK(balanced_accuracy(m, n, fast.value) == doctest::Approx(fast.objective).epsilon(1e-12));
    CHECK(fast.objective >= 0.5);
  }
}

TEST_CASE("infer uses a strict boundary") {
  const Threshold t{0.0022, 0.9};
  CHECK(infer(0.0010, t) == Verdict::member);
  CHECK(infer(0.0100, t) == Verdict::nonmember);
  CHECK(infer(0.0022, t) == Verdict::nonmember);

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 0.01);
  for (int i = 0; i < 1000; ++i) {
    double a = u(rng), b = u(rng);
    if (a > b) std::swap(a, b);
    if (infer(b, t) == Verdict::member) CHECK(infer(a, t) == Verdict::member);
  }
}

TEST_CASE("evaluate_asr") {
  const std::vector<Verdict> v{Verdict::member, Verdict::nonmember};
  CHECK(evaluate_asr(v, {true, false}) == 1.0);
  CHECK(evaluate_asr(v, {false, true}) == 0.0);
  CHECK_THROWS_AS(evaluate_asr(v, {true}), std::invalid_argument);

  SUBCASE("fair coin over a balanced set sits at chance") {
    std::mt19937_64 rng(4);
    std::vector<Verdict> coin(10000);
    std::vector<bool> truth(10000);
    for (std::size_t i = 0; i < coin.size(); ++i) {
      coin[i] = rng() % 2 ? Verdict::member : Verdict::nonmember;
      truth[i] = i % 2 == 0;
    }
    CHECK(std::abs(evaluate_asr(coin, truth) - 0.5) <= 0.02);
  }
  SUBCASE("imbalance is reported") {
    std::ostringstream warn;
    const std::vector<Verdict> three(3, Verdict::member);
    evaluate_asr(three, {true, true, false}, &warn);
    CHECK(warn.str().find("imbalanced") != std::string::npos);
    std::ostringstream quiet;
    evaluate_asr(v, {true, false}, &quiet);
    CHECK(quiet.str().empty());
  }
}

TEST_CASE("summaries") {
  const auto s = summarize({5, 1, 4, 2, 3});
  CHECK(s.mean == 3.0);
  CHECK(s.median == 3.0);
  CHECK(s.q1 == 2.0);
  CHECK(s.q3 == 4.0);
  CHECK(s.stddev == doctest::Approx(std::sqrt(2.0)));
}

TEST_CASE("membership_score") {
  const ModelPair m = ModelPair::create(tiny_config(), 3);
  const Dataset d = normalize(synth_generate("blobs,n=12,side=8,seed=1"));

  SUBCASE("a decoder that reproduces the patches scores zero") {
    ModelPair z = m;
    for (auto& [name, t] : z.decoder.parameters()) {
      if (name.rfind("decoder.head", 0) == 0) {
        Tensor w = t;
        std::fill(w.mutable_data().begin(), w.mutable_data().end(), 0.0f);
      }
    }
    CHECK(membership_score(z.encoder, z.decoder, Tensor::zeros({1, 8, 8}), 3, 1) == 0.0);
    CHECK(membership_score(z.encoder, z.decoder, Tensor::zeros({1, 8, 8}), 3, 1,
                           ScoreScope::full_image) == 0.0);
  }
  SUBCASE("fixed seed is deterministic") {
    const Tensor img = d.image_tensor(0);
    CHECK(membership_score(m.encoder, m.decoder, img, 1, 9) ==
          membership_score(m.encoder, m.decoder, img, 1, 9));
    CHECK_THROWS_AS(membership_score(m.encoder, m.decoder, img, 0, 9), std::invalid_argument);
  }
  SUBCASE("batched scoring equals per-image calls") {
    const auto idx = iota_indices(12);
    const std::uint64_t seed = 44;
    for (auto scope : {ScoreScope::masked_only, ScoreScope::full_image}) {
      const auto batch = score_samples(m.encoder, m.decoder, d, idx, {3, scope}, seed);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const double one = membership_score(m.encoder, m.decoder, d.image_tensor(i), 3,
                                            mix_seed(seed, i), scope);
        CHECK(batch[i] == doctest::Approx(one).epsilon(1e-6));
        CHECK(batch[i] >= 0.0);
      }
    }
  }
  SUBCASE("more draws reduce variance across seeds") {
    const Tensor img = d.image_tensor(3);
    auto variance = [&](std::size_t draws) {
      std::vector<double> v;
      for (std::uint64_t s = 0; s < 100; ++s) {
        v.push_back(membership_score(m.encoder, m.decoder, img, draws, 1000 + s));
      }
      const double mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
      double acc = 0;
      for (double x : v) acc += (x - mean) * (x - mean);
      return acc / double(v.size() - 1);
    };
    CHECK(variance(16) < variance(1));
  }
}

TEST_CASE("target simulation") {
  const Dataset d = normalize(synth_generate("stripes,n=48,side=8,seed=6"));
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 8;
  cfg.learning_rate = 2e-3;
  const auto target = pretrain(tiny_config(), cfg, d, iota_indices(24));
  const ModelPair untrained = ModelPair::create(tiny_config(), 17);
  const auto shadow_train = iota_indices(24, 24);
  const std::uint64_t sum = checksum(target.model.encoder.parameters());

  TrainConfig ft = cfg;
  ft.epochs = 15;
  const ModelPair sim = simulate_target(target.model.encoder, untrained.decoder, d, shadow_train, ft);
  CHECK(checksum(target.model.encoder.parameters()) == sum);
  CHECK(checksum(sim.encoder.parameters()) == sum);

  auto mean_score = [&](const Decoder& dec) {
    const auto s = score_samples(target.model.encoder, dec, d, shadow_train, {}, 5);
    return std::accumulate(s.begin(), s.end(), 0.0) / double(s.size());
  };
  CHECK(mean_score(sim.decoder) < mean_score(untrained.decoder));

  ft.epochs = 0;
  const ModelPair same = simulate_target(target.model.encoder, untrained.decoder, d, shadow_train, ft);
  CHECK(checksum(same.decoder.parameters()) == checksum(untrained.decoder.parameters()));
}

TEST_CASE("report assembly and score CSV") {
  std::vector<ScoreRecord> recs{{0, 0.1, true, Split::target},
                                {1, 0.2, true, Split::target},
                                {2, 0.15, false, Split::target},
                                {3, 0.9, false, Split::target}};
  const AttackReport r = make_report("ours", Threshold{0.5, 1.0}, recs);
  CHECK(r.asr == 0.75);
  CHECK(r.verdicts[2] == Verdict::member);
  CHECK(r.member_stats.count == 2);
  CHECK(r.nonmember_stats.mean == doctest::Approx(0.525));

  std::ostringstream csv;
  write_scores_csv(csv, recs);
  CHECK(csv.str() == "sample_id,split,is_member,score\n0,target,1,0.1\n1,target,1,0.2\n"
                     "2,target,0,0.15\n3,target,0,0.9\n");
}
