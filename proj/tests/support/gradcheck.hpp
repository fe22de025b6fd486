#pragma once

// Central finite-difference oracle for the autodiff ops. Test-only: the
// numeric side never calls backward(), only forward evaluations.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mimi/tensor.hpp"

namespace mimi::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

using OpBuilder = std::function<Tensor64(const std::vector<Tensor64>&)>;

/// Relative error |a-n| / max(|a|, |n|, floor).
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares analytic gradients of loss = sum(op(inputs) * w) against central
/// differences with step h. Only inputs flagged in `differentiable` are probed.
inline GradCheck finite_difference_check(const OpBuilder& op, std::vector<Tensor64> inputs,
                                         const std::vector<bool>& differentiable,
                                         std::mt19937_64& rng, double h = 1e-4) {
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<Tensor64> tracked;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    tracked.push_back(Tensor64::from_data(inputs[i].shape(),
                                          {inputs[i].data().begin(), inputs[i].data().end()},
                                          differentiable[i]));
  }
  const Tensor64 probe_out = op(tracked);
  std::vector<double> w(probe_out.numel());
  for (auto& v : w) v = normal(rng);
  const Tensor64 weights = Tensor64::from_data(probe_out.shape(), w);

  const Tensor64 loss = sum(mul(probe_out, weights));
  backward(loss);

  auto evaluate = [&](const std::vector<Tensor64>& xs) {
    const Tensor64 out = op(xs);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) acc += out.data()[i] * w[i];
    return acc;
  };

  GradCheck result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!differentiable[i]) continue;
    const auto analytic = tracked[i].has_grad()
                              ? std::vector<double>(tracked[i].grad().begin(),
                                                    tracked[i].grad().end())
                              : std::vector<double>(tracked[i].numel(), 0.0);
    for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
      std::vector<Tensor64> plus, minus;
      for (std::size_t m = 0; m < inputs.size(); ++m) {
        plus.push_back(inputs[m].clone());
        minus.push_back(inputs[m].clone());
      }
      plus[i].mutable_data()[j] += h;
      minus[i].mutable_data()[j] -= h;
      const double numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * h);
      result.max_rel_error = std::max(result.max_rel_error, rel_error(analytic[j], numeric));
      ++result.checked;
    }
  }
  return result;
}

inline Tensor64 random_tensor(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal(rng);
  return Tensor64::from_data(std::move(shape), std::move(v));
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// One random trial for `kind` with every tensor at most 32 elements.
inline GradCheck random_op_trial(OpKind kind, std::mt19937_64& rng) {
  auto diff = [](std::size_t n) { return std::vector<bool>(n, true); };
  switch (kind) {
    case OpKind::matmul: {
      const std::size_t variant = pick(rng, 0, 2);
      if (variant == 2) {
        const std::size_t b = 2, m = pick(rng, 1, 3), k = pick(rng, 1, 4), n = pick(rng, 1, 3);
        const bool tb = pick(rng, 0, 1) == 1;
        return finite_difference_check(
            [tb](const auto& x) { return matmul(x[0], x[1], tb); },
            {random_tensor({b, m, k}, rng), random_tensor(tb ? Shape{b, n, k} : Shape{b, k, n}, rng)},
            diff(2), rng);
      }
      const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 5), n = pick(rng, 1, 4);
      const bool tb = variant == 1;
      return finite_difference_check(
          [tb](const auto& x) { return matmul(x[0], x[1], tb); },
          {random_tensor({m, k}, rng), random_tensor(tb ? Shape{n, k} : Shape{k, n}, rng)},
          diff(2), rng);
    }
    case OpKind::add: {
      const std::size_t r = pick(rng, 1, 4), c = pick(rng, 1, 6);
      const bool bias = pick(rng, 0, 1) == 1;
      return finite_difference_check(
          [](const auto& x) { return add(x[0], x[1]); },
          {random_tensor({r, c}, rng), random_tensor(bias ? Shape{c} : Shape{r, c}, rng)},
          diff(2), rng);
    }
    case OpKind::mul: {
      const Shape s{pick(rng, 1, 4), pick(rng, 1, 6)};
      return finite_difference_check([](const auto& x) { return mul(x[0], x[1]); },
                                     {random_tensor(s, rng), random_tensor(s, rng)}, diff(2),
                                     rng);
    }
    case OpKind::scale: {
      const double f = std::normal_distribution<double>(0.0, 2.0)(rng);
      return finite_difference_check([f](const auto& x) { return scale(x[0], f); },
                                     {random_tensor({pick(rng, 1, 4), pick(rng, 1, 8)}, rng)},
                                     diff(1), rng);
    }
    case OpKind::gelu:
      return finite_difference_check([](const auto& x) { return gelu(x[0]); },
                                     {random_tensor({pick(rng, 1, 4), pick(rng, 1, 8)}, rng, 2.0)},
                                     diff(1), rng);
    case OpKind::softmax:
      return finite_difference_check([](const auto& x) { return softmax(x[0]); },
                                     {random_tensor({pick(rng, 1, 4), pick(rng, 2, 8)}, rng, 2.0)},
                                     diff(1), rng);
    case OpKind::layernorm: {
      const std::size_t r = pick(rng, 1, 4), c = pick(rng, 2, 8);
      return finite_difference_check(
          [](const auto& x) { return layernorm(x[0], x[1], x[2], 1e-5); },
          {random_tensor({r, c}, rng), random_tensor({c}, rng), random_tensor({c}, rng)},
          diff(3), rng);
    }
    case OpKind::embed_lookup: {
      const std::size_t rows = pick(rng, 2, 6), d = pick(rng, 1, 4), k = pick(rng, 1, 6);
      std::vector<double> idx(k);
      for (auto& v : idx) v = double(pick(rng, 0, rows - 1));
      return finite_difference_check(
          [](const auto& x) { return embed_lookup(x[0], x[1]); },
          {random_tensor({rows, d}, rng), Tensor64::from_data({k}, idx)}, {true, false}, rng);
    }
    case OpKind::reshape: {
      const std::size_t r = pick(rng, 1, 4), c = pick(rng, 1, 8);
      return finite_difference_check(
          [r, c](const auto& x) { return reshape(x[0], {c, r}); },
          {random_tensor({r, c}, rng)}, diff(1), rng);
    }
    case OpKind::concat: {
      const std::size_t parts = pick(rng, 2, 3), r = pick(rng, 1, 3), c = pick(rng, 1, 3);
      const int axis = static_cast<int>(pick(rng, 0, 1));
      std::vector<Tensor64> xs;
      for (std::size_t i = 0; i < parts; ++i) {
        xs.push_back(axis == 0 ? random_tensor({pick(rng, 1, 3), c}, rng)
                               : random_tensor({r, pick(rng, 1, 3)}, rng));
      }
      return finite_difference_check(
          [axis](const auto& x) { return concat<double>(x, axis); }, xs, diff(parts), rng);
    }
    case OpKind::slice: {
      const Shape s{pick(rng, 1, 4), pick(rng, 1, 6)};
      const int axis = static_cast<int>(pick(rng, 0, 1));
      const std::size_t len = pick(rng, 1, s[axis]);
      const std::size_t start = pick(rng, 0, s[axis] - len);
      return finite_difference_check(
          [=](const auto& x) { return slice(x[0], axis, start, len); },
          {random_tensor(s, rng)}, diff(1), rng);
    }
    case OpKind::masked_mse: {
      const std::size_t n = pick(rng, 1, 4), pd = pick(rng, 1, 4);
      std::vector<double> m(n);
      for (auto& v : m) v = double(pick(rng, 0, 1));
      m[pick(rng, 0, n - 1)] = 1.0;
      const bool per_patch = pick(rng, 0, 1) == 1;
      return finite_difference_check(
          [per_patch](const auto& x) {
            return masked_mse(x[0], x[1], x[2],
                              per_patch ? LossNorm::per_patch : LossNorm::per_pixel);
          },
          {random_tensor({n, pd}, rng), random_tensor({n, pd}, rng), Tensor64::from_data({n}, m)},
          {true, true, false}, rng);
    }
    case OpKind::sum:
      return finite_difference_check([](const auto& x) { return sum(x[0]); },
                                     {random_tensor({pick(rng, 1, 4), pick(rng, 1, 8)}, rng)},
                                     diff(1), rng);
    case OpKind::dropout: {
      const std::uint64_t seed = rng();
      return finite_difference_check(
          [seed](const auto& x) { return dropout(x[0], 0.3, seed); },
          {random_tensor({pick(rng, 1, 4), pick(rng, 1, 8)}, rng)}, diff(1), rng);
    }
    case OpKind::cross_entropy: {
      const std::size_t n = pick(rng, 1, 4), c = pick(rng, 2, 6);
      std::vector<double> labels(n);
      for (auto& v : labels) v = double(pick(rng, 0, c - 1));
      return finite_difference_check(
          [](const auto& x) { return cross_entropy(x[0], x[1]); },
          {random_tensor({n, c}, rng, 2.0), Tensor64::from_data({n}, labels)}, {true, false},
          rng);
    }
  }
  return {};
}

inline constexpr OpKind kAllOps[] = {
    OpKind::matmul,  OpKind::add,       OpKind::mul,          OpKind::scale,
    OpKind::gelu,    OpKind::softmax,   OpKind::layernorm,    OpKind::embed_lookup,
    OpKind::reshape, OpKind::concat,    OpKind::slice,        OpKind::masked_mse,
    OpKind::sum,     OpKind::dropout,   OpKind::cross_entropy};

}  // namespace mimi::testing
