#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "../support/gradcheck.hpp"
#include "mimi/checkpoint.hpp"
#include "mimi/tensor.hpp"

using namespace mimi;

TEST_CASE("softmax of uniform logits is uniform") {
  const Tensor y = softmax(Tensor::zeros({3}));
  for (float v : y.data()) CHECK(v == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("matmul with a ones column returns row sums of the transpose") {
  // [[1,0,0],[0,1,0]] x ones(3,1) -> column sums of the identity-padded rows
  const Tensor a = Tensor::from_data({2, 3}, {1, 0, 0, 0, 1, 0});
  const Tensor b = Tensor::full({3, 1}, 1.0f);
  const Tensor c = matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 1});
  CHECK(c.data()[0] == 1.0f);
  CHECK(c.data()[1] == 1.0f);
}

TEST_CASE("layernorm output has zero mean and unit variance") {
  const Tensor x = Tensor::from_data({3}, {1, 2, 3});
  const Tensor y = layernorm(x, Tensor::full({3}, 1.0f), Tensor::zeros({3}), 1e-5);
  // by hand: mean 2, var 2/3, so y = (x-2)/sqrt(2/3 + 1e-5)
  double mean = 0, var = 0;
  for (float v : y.data()) mean += v;
  mean /= 3;
  for (float v : y.data()) var += (v - mean) * (v - mean);
  var /= 3;
  CHECK(std::abs(mean) < 1e-6);
  CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(y.data()[0] == doctest::Approx(-1.0 / std::sqrt(2.0 / 3.0 + 1e-5)));
}

TEST_CASE("backward of sum(w*w) gives 2w") {
  Tensor w = Tensor::from_data({2}, {1, 2}, true);
  backward(sum(mul(w, w)));
  CHECK(w.grad()[0] == 2.0f);
  CHECK(w.grad()[1] == 4.0f);
}

TEST_CASE("masked_mse examples") {
  const Tensor t = Tensor::from_data({2, 2}, {0.5f, -1.0f, 2.0f, 3.0f});

  SUBCASE("identical inputs give zero loss and zero gradient") {
    Tensor p = t.clone();
    p.set_requires_grad(true);
    const Tensor loss = masked_mse(p, t, Tensor::full({2}, 1.0f));
    CHECK(loss.item() == 0.0f);
    backward(loss);
    for (float g : p.grad()) CHECK(g == 0.0f);
  }
  SUBCASE("constant offset of one gives one") {
    std::vector<float> shifted(t.data().begin(), t.data().end());
    for (auto& v : shifted) v += 1.0f;
    const Tensor p = Tensor::from_data({2, 2}, shifted);
    CHECK(masked_mse(p, t, Tensor::from_data({2}, {0, 1})).item() == doctest::Approx(1.0));
    CHECK(masked_mse(p, t, Tensor::from_data({2}, {1, 1})).item() == doctest::Approx(1.0));
  }
  SUBCASE("hand arithmetic: diffs (0,0),(3,4), second patch only") {
    const Tensor target = Tensor::zeros({2, 2});
    const Tensor pred = Tensor::from_data({2, 2}, {0, 0, 3, 4});
    CHECK(masked_mse(pred, target, Tensor::from_data({2}, {0, 1})).item() == 12.5f);
    CHECK(masked_mse(pred, target, Tensor::from_data({2}, {0, 1}), LossNorm::per_patch).item() ==
          25.0f);
  }
  SUBCASE("empty mask is rejected") {
    CHECK_THROWS_AS(masked_mse(t, t, Tensor::zeros({2})), std::invalid_argument);
  }
  SUBCASE("mask length must match patch count") {
    CHECK_THROWS_AS(masked_mse(t, t, Tensor::full({3}, 1.0f)), ShapeError);
  }
}

TEST_CASE("masked_mse is symmetric, non-negative and zero only on equal patches") {
  std::mt19937_64 rng(11);
  std::normal_distribution<float> normal;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> a(12), b(12), m(4);
    for (auto& v : a) v = normal(rng);
    for (auto& v : b) v = normal(rng);
    for (auto& v : m) v = float(rng() % 2);
    m[rng() % 4] = 1;
    const Tensor ta = Tensor::from_data({4, 3}, a), tb = Tensor::from_data({4, 3}, b);
    const Tensor mask = Tensor::from_data({4}, m);
    const float ab = masked_mse(ta, tb, mask).item();
    CHECK(ab == masked_mse(tb, ta, mask).item());
    CHECK(ab > 0.0f);
    CHECK(masked_mse(ta, ta, mask).item() == 0.0f);
  }
}

TEST_CASE("shape errors name the op and dimensions") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 2});
  try {
    (void)matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(reshape(a, {4, 2}), ShapeError);
  CHECK_THROWS_AS(slice(a, 1, 2, 2), ShapeError);
}

TEST_CASE("apply dispatches by kind and rejects unknown kinds") {
  const std::vector<Tensor> in{Tensor::zeros({3})};
  const Tensor y = apply<float>("softmax", in);
  CHECK(y.data()[1] == doctest::Approx(1.0 / 3.0));
  const Tensor s = apply<float>(OpKind::scale, in, {{"factor", 2.0}});
  CHECK(s.data()[0] == 0.0f);
  const Tensor r = apply<float>(OpKind::reshape, in, {{"d0", 1.0}, {"d1", 3.0}});
  CHECK(r.shape() == Shape{1, 3});
  CHECK_THROWS_AS(apply<float>("convolve", in), std::invalid_argument);
  CHECK_THROWS_WITH_AS(apply<float>(OpKind::matmul, in), doctest::Contains("matmul"),
                       std::invalid_argument);
}

TEST_CASE("ops record a node only when an input requires grad") {
  const Tensor a = Tensor::zeros({2});
  CHECK(add(a, a).is_leaf());
  Tensor b = Tensor::zeros({2}, true);
  const Tensor c = add(a, b);
  CHECK_FALSE(c.is_leaf());
  CHECK(c.producer() == OpKind::add);
}

TEST_CASE("backward rejects non-scalar losses and a second pass") {
  Tensor w = Tensor::from_data({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(mul(w, w)), GraphError);
  const Tensor loss = sum(mul(w, w));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), GraphError);
  CHECK_THROWS_AS(backward(Tensor::zeros({1}, true)), GraphError);
}

TEST_CASE("gradients accumulate across shared uses") {
  Tensor w = Tensor::from_data({1}, {3}, true);
  backward(sum(add(mul(w, w), scale(w, 2.0))));  // d/dw (w^2 + 2w) = 2w + 2
  CHECK(w.grad()[0] == 8.0f);
}

TEST_CASE("non-finite results are rejected") {
  const Tensor big = Tensor::full({2}, 3e38f);
  CHECK_THROWS_AS(scale(big, 10.0), NonFiniteError);
}

TEST_CASE("identical op sequences are bit-identical") {
  auto run = [] {
    std::mt19937_64 rng(5);
    const auto a = testing::random_tensor({4, 8}, rng);
    std::vector<float> af(a.data().begin(), a.data().end());
    const Tensor x = Tensor::from_data({4, 8}, af);
    const Tensor w = Tensor::full({8, 8}, 0.125f);
    const Tensor y =
        softmax(gelu(layernorm(matmul(x, w), Tensor::full({8}, 1.f), Tensor::zeros({8}))));
    return std::vector<float>(y.data().begin(), y.data().end());
  };
  CHECK(run() == run());
}

TEST_CASE("every op kind passes central finite differences") {
  std::mt19937_64 rng(20240601);
  for (OpKind kind : testing::kAllOps) {
    CAPTURE(op_name(kind));
    double worst = 0.0;
    for (int trial = 0; trial < 25; ++trial) {
      worst = std::max(worst, testing::random_op_trial(kind, rng).max_rel_error);
    }
    CHECK(worst <= 1e-3);
  }
}

TEST_CASE("finite-difference oracle on a random 5-parameter graph") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    // x[1x5] -> layernorm -> matmul -> gelu -> softmax
    const auto w = testing::random_tensor({5, 3}, rng);
    auto op = [w](const std::vector<Tensor64>& in) {
      const Tensor64 h = layernorm(in[0], Tensor64::full({5}, 1.0), Tensor64::zeros({5}));
      return softmax(gelu(matmul(h, w)));
    };
    const auto r = testing::finite_difference_check(op, {testing::random_tensor({1, 5}, rng)},
                                                    {true}, rng);
    CHECK(r.max_rel_error <= 1e-3);
  }
}

TEST_CASE("checkpoint container round-trips and rejects truncation") {
  NamedTensors ts{{"alpha", Tensor::from_data({2, 2}, {1.5f, -2.f, 0.f, 3.25f})},
                  {"beta.gamma", Tensor::from_data({3}, {7, 8, 9})}};
  std::stringstream buf;
  write_tensors(buf, ts);
  const std::string bytes = buf.str();
  CHECK(bytes.substr(0, 4) == "MIMT");

  std::stringstream in(bytes);
  const auto back = read_tensors(in);
  REQUIRE(back.size() == 2);
  CHECK(back[0].first == "alpha");
  CHECK(back[1].second.shape() == Shape{3});
  CHECK(std::equal(back[0].second.data().begin(), back[0].second.data().end(),
                   ts[0].second.data().begin()));

  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() - 1}) {
    std::stringstream part(bytes.substr(0, cut));
    CHECK_THROWS_AS(read_tensors(part), FormatError);
  }
  std::stringstream bad("XXXX");
  CHECK_THROWS_AS(read_tensors(bad), FormatError);
}
