#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "mimi/data.hpp"
#include "mimi/model.hpp"

using namespace mimi;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_side = 8;
  c.patch_side = 4;
  c.embed_dim = 16;
  c.heads = 2;
  c.encoder_layers = 2;
  c.decoder_layers = 1;
  c.decoder_dim = 8;
  c.decoder_heads = 2;
  c.mask_ratio = 0.5;
  return c;
}

Tensor random_image(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<float> normal;
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = normal(rng);
  return Tensor::from_data(std::move(shape), std::move(v));
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::equal(a.data().begin(), a.data().end(), b.data().begin(), b.data().end());
}

}  // namespace

TEST_CASE("patchify examples") {
  SUBCASE("unit patches in raster order") {
    const Tensor p = patchify(Tensor::from_data({1, 2, 2}, {1, 2, 3, 4}), 1);
    CHECK(p.shape() == Shape{4, 1});
    CHECK(std::vector<float>(p.data().begin(), p.data().end()) == std::vector<float>{1, 2, 3, 4});
  }
  SUBCASE("constant image") {
    const Tensor p = patchify(Tensor::full({1, 4, 4}, 7.0f), 2);
    CHECK(p.shape() == Shape{4, 4});
    for (float v : p.data()) CHECK(v == 7.0f);
  }
  SUBCASE("second patch of a 1x4x4 ramp") {
    std::vector<float> ramp(16);
    for (int i = 0; i < 16; ++i) ramp[i] = float(i);
    const Tensor p = patchify(Tensor::from_data({1, 4, 4}, ramp), 2);
    CHECK(p.data()[4] == 2.0f);
    CHECK(p.data()[5] == 3.0f);
    CHECK(p.data()[6] == 6.0f);
    CHECK(p.data()[7] == 7.0f);
  }
  SUBCASE("indivisible side") {
    CHECK_THROWS_AS(patchify(Tensor::zeros({1, 6, 6}), 4), ShapeError);
  }
}

TEST_CASE("patchify round trip is exact across geometries") {
  std::mt19937_64 rng(1);
  for (std::size_t c : {1, 3}) {
    for (auto [side, patch] : {std::pair{8, 4}, {8, 2}, {32, 8}, {12, 3}, {4, 1}}) {
      const Tensor img = random_image({c, std::size_t(side), std::size_t(side)}, rng);
      const Tensor p = patchify(img, patch);
      CHECK(p.shape() == Shape{std::size_t(side / patch) * std::size_t(side / patch), c * patch * patch});
      CHECK(same_bits(unpatchify(p, c, side), img));
    }
  }
}

TEST_CASE("sample_mask") {
  SUBCASE("ratio 0.75 of 4 masks exactly 3") {
    CHECK(sample_mask(4, 0.75, 0).masked.size() == 3);
  }
  SUBCASE("determinism") {
    CHECK(sample_mask(196, 0.5, 3) == sample_mask(196, 0.5, 3));
    CHECK(sample_mask(196, 0.5, 3).masked != sample_mask(196, 0.5, 4).masked);
  }
  SUBCASE("count exactness, or rejection when the count would be 0 or n") {
    for (double r : {0.1, 0.25, 0.5, 0.75, 0.9}) {
      for (std::size_t n : {4, 16, 64, 196}) {
        const auto k = static_cast<std::size_t>(std::llround(r * double(n)));
        if (k == 0 || k == n) {
          CHECK_THROWS_AS(sample_mask(n, r, 1), ConfigError);
          continue;
        }
        const MaskPlan plan = sample_mask(n, r, 1);
        CHECK(plan.masked.size() == k);
        CHECK(std::is_sorted(plan.masked.begin(), plan.masked.end()));
        CHECK(std::adjacent_find(plan.masked.begin(), plan.masked.end()) == plan.masked.end());
        CHECK(plan.masked.back() < n);
      }
    }
  }
  SUBCASE("binomial frequency: n=8, ratio 0.5, 10000 draws") {
    std::vector<int> hits(8, 0);
    for (std::uint64_t s = 0; s < 10000; ++s) {
      for (auto i : sample_mask(8, 0.5, s * 7919 + 13).masked) ++hits[i];
    }
    for (int h : hits) CHECK(std::abs(h - 5000) <= 150);
  }
}

TEST_CASE("encode and decode shapes") {
  ModelConfig c = tiny_config();
  c.mask_ratio = 0.75;
  const ModelPair m = ModelPair::create(c, 5);
  std::mt19937_64 rng(2);
  const Tensor patches = patchify(random_image({1, 8, 8}, rng), 4);
  const MaskPlan plan = sample_mask(4, 0.75, 9);
  const Tensor z = encode(m.encoder, patches, plan);
  CHECK(z.shape() == Shape{1, 16});
  const Tensor out = decode(m.decoder, z, plan);
  CHECK(out.shape() == Shape{4, 16});
  CHECK_THROWS_AS(decode(m.decoder, Tensor::zeros({2, 16}), plan), ShapeError);
  CHECK_THROWS_AS(encode(m.encoder, Tensor::zeros({5, 16}), plan), ShapeError);
  CHECK(decode(m.decoder, encode(m.encoder, patches, empty_mask(4)), empty_mask(4)).shape() ==
        Shape{4, 16});
}

TEST_CASE("encoder is permutation equivariant over (patch, position) pairs") {
  ModelConfig c = tiny_config();
  c.image_side = 12;  // 9 patches
  const Encoder enc(c, 3);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t t = 5;
    const Tensor x = random_image({1, t, c.patch_dim()}, rng);
    std::vector<float> pos{0, 2, 3, 7, 8};
    const Tensor out = enc.forward(x, Tensor::from_data({1, t}, pos));
    const std::size_t i = rng() % t, j = (i + 1 + rng() % (t - 1)) % t;
    std::vector<float> xs(x.data().begin(), x.data().end());
    std::swap_ranges(xs.begin() + i * c.patch_dim(), xs.begin() + (i + 1) * c.patch_dim(),
                     xs.begin() + j * c.patch_dim());
    std::swap(pos[i], pos[j]);
    const Tensor swapped =
        enc.forward(Tensor::from_data({1, t, c.patch_dim()}, xs), Tensor::from_data({1, t}, pos));
    const std::size_t d = c.embed_dim;
    for (std::size_t r = 0; r < t; ++r) {
      const std::size_t src = r == i ? j : r == j ? i : r;
      for (std::size_t k = 0; k < d; ++k) {
        CHECK(swapped.data()[src * d + k] == doctest::Approx(out.data()[r * d + k]).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("zero patch embedding makes output depend only on positions") {
  const ModelPair m = ModelPair::create(tiny_config(), 8);
  for (auto& [name, t] : m.encoder.parameters()) {
    if (name == "encoder.patch.weight") {
      Tensor w = t;
      std::fill(w.mutable_data().begin(), w.mutable_data().end(), 0.0f);
    }
  }
  std::mt19937_64 rng(6);
  const MaskPlan plan = sample_mask(4, 0.5, 1);
  const Tensor a = encode(m.encoder, patchify(random_image({1, 8, 8}, rng), 4), plan);
  const Tensor b = encode(m.encoder, patchify(random_image({1, 8, 8}, rng), 4), plan);
  CHECK(same_bits(a, b));
}

TEST_CASE("decoder without blocks is affine in the embeddings") {
  ModelConfig c = tiny_config();
  c.decoder_layers = 0;
  const Decoder dec(c, 2);
  std::mt19937_64 rng(3);
  const MaskPlan plan = sample_mask(4, 0.5, 2);
  const Tensor e = random_image({2, c.embed_dim}, rng);
  std::vector<float> twice(e.data().begin(), e.data().end());
  for (auto& v : twice) v *= 2.0f;
  const Tensor o0 = decode(dec, Tensor::zeros({2, c.embed_dim}), plan);
  const Tensor o1 = decode(dec, e, plan);
  const Tensor o2 = decode(dec, Tensor::from_data({2, c.embed_dim}, twice), plan);
  for (std::size_t i = 0; i < o0.numel(); ++i) {
    const double lhs = o2.data()[i] - o0.data()[i];
    const double rhs = 2.0 * (o1.data()[i] - o0.data()[i]);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-4).scale(1e-4));
  }
}

TEST_CASE("reconstruct is deterministic for a fixed seed") {
  const ModelPair m = ModelPair::create(tiny_config(), 1);
  std::mt19937_64 rng(9);
  const Tensor img = random_image({1, 8, 8}, rng);
  const auto a = reconstruct(m, img, 77), b = reconstruct(m, img, 77);
  CHECK(a.plan == b.plan);
  CHECK(same_bits(a.patches, b.patches));
  CHECK_THROWS_AS(reconstruct(m, Tensor::zeros({3, 8, 8}), 1), ShapeError);
}

TEST_CASE("untrained model error on normalized data is near the data variance") {
  ModelConfig c;  // desk-scale default geometry
  const ModelPair m = ModelPair::create(c, 4);
  const Dataset d = normalize(synth_generate("blobs,n=64,side=32,seed=2"));
  double acc = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Tensor img = d.image_tensor(i);
    const auto r = reconstruct(m, img, i);
    acc += masked_mse(r.patches, patchify(img, c.patch_side), mask_tensor(r.plan)).item();
  }
  CHECK(acc / double(d.size()) == doctest::Approx(1.0).epsilon(0.15));
}

TEST_CASE("model checkpoint round trip") {
  const ModelPair m = ModelPair::create(tiny_config(), 12);
  const auto path = std::filesystem::temp_directory_path() / "mimi_model_rt.ckpt";
  save_model(path, m, {{"train_seed", "42"}});
  const LoadedModel back = load_model(path);
  CHECK(back.model.config == m.config);
  CHECK(back.header.at("train_seed") == "42");
  CHECK(checksum(back.model.parameters()) == checksum(m.parameters()));
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 1);
  CHECK_THROWS_AS(load_model(path), FormatError);
}

TEST_CASE("config validation") {
  ModelConfig c = tiny_config();
  c.patch_side = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.mask_ratio = 0.1;  // rounds to 0 of 4
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  const auto kv = c.to_kv();
  CHECK(ModelConfig::from_kv(kv) == c);
}
