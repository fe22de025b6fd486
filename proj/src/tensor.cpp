#include "mimi/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

namespace mimi {

namespace detail {

template <typename T>
struct TensorImpl;

template <typename T>
struct Node {
  OpKind kind;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(const std::vector<T>&)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::shared_ptr<Node<T>> node;
};

}  // namespace detail

namespace {

using detail::Node;
using detail::TensorImpl;

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<Mat<T>>;
template <typename T>
using CMapM = Eigen::Map<const Mat<T>>;

constexpr std::array<std::string_view, 15> kOpNames = {
    "matmul",  "add",   "mul",          "scale",  "gelu",
    "softmax", "layernorm", "embed_lookup", "reshape", "concat",
    "slice",   "masked_mse", "sum",      "dropout", "cross_entropy"};

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

template <typename T>
const ImplPtr<T>& need(const BasicTensor<T>& t, OpKind kind) {
  if (!t.defined()) {
    throw std::invalid_argument(std::string(op_name(kind)) +
                                ": undefined input tensor");
  }
  return t.impl();
}

template <typename T>
std::vector<T>& grad_of(TensorImpl<T>& impl) {
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), T(0));
  return impl.grad;
}

[[noreturn]] void shape_fail(OpKind kind, const std::string& what) {
  throw ShapeError(std::string(op_name(kind)) + ": " + what);
}

template <typename T>
BasicTensor<T> make_result(OpKind kind, Shape shape, std::vector<T> data,
                           std::vector<ImplPtr<T>> inputs,
                           std::function<void(const std::vector<T>&)> bw) {
  for (const T v : data) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string(op_name(kind)) +
                           ": produced a non-finite value");
    }
  }
  auto out = std::make_shared<TensorImpl<T>>();
  out->shape = std::move(shape);
  out->data = std::move(data);
  const bool track = std::any_of(inputs.begin(), inputs.end(),
                                 [](const auto& p) { return p->requires_grad; });
  if (track) {
    out->requires_grad = true;
    out->node = std::make_shared<Node<T>>(
        Node<T>{kind, std::move(inputs), std::move(bw)});
  }
  return BasicTensor<T>(std::move(out));
}

std::size_t norm_axis(int axis, std::size_t rank, OpKind kind) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    shape_fail(kind, "axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

double attr(const Attrs& attrs, const std::string& key, double fallback) {
  auto it = attrs.find(key);
  return it == attrs.end() ? fallback : it->second;
}

double attr_required(const Attrs& attrs, const std::string& key, OpKind kind) {
  auto it = attrs.find(key);
  if (it == attrs.end()) {
    throw std::invalid_argument(std::string(op_name(kind)) +
                                ": missing attribute '" + key + "'");
  }
  return it->second;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string_view op_name(OpKind kind) {
  return kOpNames.at(static_cast<std::size_t>(kind));
}

std::optional<OpKind> op_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kOpNames.size(); ++i) {
    if (kOpNames[i] == name) return static_cast<OpKind>(i);
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// BasicTensor

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_data(Shape shape, std::vector<T> data,
                                         bool requires_grad) {
  if (shape.empty()) shape = {1};
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return BasicTensor<T>(std::move(impl));
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
  return impl_->shape;
}

template <typename T>
std::size_t BasicTensor<T>::dim(int axis) const {
  return impl_->shape[norm_axis(axis, impl_->shape.size(), OpKind::reshape)];
}

template <typename T>
std::size_t BasicTensor<T>::numel() const {
  return impl_->data.size();
}

template <typename T>
std::span<const T> BasicTensor<T>::data() const {
  return impl_->data;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_data() {
  if (impl_->node) throw GraphError("mutable_data: tensor is produced by an op");
  return impl_->data;
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item: tensor is not a scalar " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
bool BasicTensor<T>::requires_grad() const {
  return impl_->requires_grad;
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool value) {
  if (impl_->node) throw GraphError("set_requires_grad: tensor is produced by an op");
  impl_->requires_grad = value;
}

template <typename T>
bool BasicTensor<T>::has_grad() const {
  return !impl_->grad.empty();
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
  return impl_->grad;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_grad() {
  return grad_of(*impl_);
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  impl_->grad.clear();
}

template <typename T>
bool BasicTensor<T>::is_leaf() const {
  return !impl_->node;
}

template <typename T>
std::optional<OpKind> BasicTensor<T>::producer() const {
  if (!impl_->node) return std::nullopt;
  return impl_->node->kind;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return from_data(impl_->shape, impl_->data, false);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return from_data(impl_->shape, impl_->data, impl_->requires_grad);
}

// ---------------------------------------------------------------------------
// Operations

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b,
                      bool transpose_b) {
  constexpr auto K = OpKind::matmul;
  const auto& ai = need(a, K);
  const auto& bi = need(b, K);
  const Shape& as = ai->shape;
  const Shape& bs = bi->shape;

  if (bs.size() == 2) {
    const std::size_t k = as.back();
    const std::size_t kb = transpose_b ? bs[1] : bs[0];
    const std::size_t n = transpose_b ? bs[0] : bs[1];
    if (k != kb) {
      shape_fail(K, "inner dimensions differ: a" + shape_str(as) + " vs b" +
                        shape_str(bs) + (transpose_b ? " (transposed)" : ""));
    }
    const std::size_t rows = ai->data.size() / k;
    Shape os(as.begin(), as.end() - 1);
    os.push_back(n);
    std::vector<T> out(rows * n);
    CMapM<T> A(ai->data.data(), rows, k);
    CMapM<T> B(bi->data.data(), bs[0], bs[1]);
    MapM<T> C(out.data(), rows, n);
    if (transpose_b) {
      C.noalias() = A * B.transpose();
    } else {
      C.noalias() = A * B;
    }
    auto bw = [ai, bi, rows, k, n, transpose_b](const std::vector<T>& g) {
      CMapM<T> G(g.data(), rows, n);
      CMapM<T> A(ai->data.data(), rows, k);
      CMapM<T> B(bi->data.data(), bi->shape[0], bi->shape[1]);
      if (ai->requires_grad) {
        MapM<T> GA(grad_of(*ai).data(), rows, k);
        if (transpose_b) {
          GA.noalias() += G * B;
        } else {
          GA.noalias() += G * B.transpose();
        }
      }
      if (bi->requires_grad) {
        MapM<T> GB(grad_of(*bi).data(), bi->shape[0], bi->shape[1]);
        if (transpose_b) {
          GB.noalias() += G.transpose() * A;
        } else {
          GB.noalias() += A.transpose() * G;
        }
      }
    };
    return make_result<T>(K, std::move(os), std::move(out), {ai, bi}, bw);
  }

  if (bs.size() == 3) {
    if (as.size() != 3 || as[0] != bs[0]) {
      shape_fail(K, "batched operands must be [B,m,k] and [B,k,n]: a" +
                        shape_str(as) + " vs b" + shape_str(bs));
    }
    const std::size_t batch = as[0], m = as[1], k = as[2];
    const std::size_t kb = transpose_b ? bs[2] : bs[1];
    const std::size_t n = transpose_b ? bs[1] : bs[2];
    if (k != kb) {
      shape_fail(K, "inner dimensions differ: a" + shape_str(as) + " vs b" +
                        shape_str(bs) + (transpose_b ? " (transposed)" : ""));
    }
    std::vector<T> out(batch * m * n);
    const std::size_t br = bs[1], bc = bs[2];
    for (std::size_t i = 0; i < batch; ++i) {
      CMapM<T> A(ai->data.data() + i * m * k, m, k);
      CMapM<T> B(bi->data.data() + i * br * bc, br, bc);
      MapM<T> C(out.data() + i * m * n, m, n);
      if (transpose_b) {
        C.noalias() = A * B.transpose();
      } else {
        C.noalias() = A * B;
      }
    }
    auto bw = [ai, bi, batch, m, k, n, br, bc,
               transpose_b](const std::vector<T>& g) {
      T* ga = ai->requires_grad ? grad_of(*ai).data() : nullptr;
      T* gb = bi->requires_grad ? grad_of(*bi).data() : nullptr;
      for (std::size_t i = 0; i < batch; ++i) {
        CMapM<T> G(g.data() + i * m * n, m, n);
        CMapM<T> A(ai->data.data() + i * m * k, m, k);
        CMapM<T> B(bi->data.data() + i * br * bc, br, bc);
        if (ga) {
          MapM<T> GA(ga + i * m * k, m, k);
          if (transpose_b) {
            GA.noalias() += G * B;
          } else {
            GA.noalias() += G * B.transpose();
          }
        }
        if (gb) {
          MapM<T> GB(gb + i * br * bc, br, bc);
          if (transpose_b) {
            GB.noalias() += G.transpose() * A;
          } else {
            GB.noalias() += A.transpose() * G;
          }
        }
      }
    };
    return make_result<T>(K, {batch, m, n}, std::move(out), {ai, bi}, bw);
  }

  shape_fail(K, "right operand must have rank 2 or 3, got " + shape_str(bs));
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  constexpr auto K = OpKind::add;
  const auto& ai = need(a, K);
  const auto& bi = need(b, K);
  if (ai->shape == bi->shape) {
    std::vector<T> out(ai->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ai->data[i] + bi->data[i];
    auto bw = [ai, bi](const std::vector<T>& g) {
      for (auto* p : {ai.get(), bi.get()}) {
        if (!p->requires_grad) continue;
        auto& gp = grad_of(*p);
        for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
      }
    };
    return make_result<T>(K, ai->shape, std::move(out), {ai, bi}, bw);
  }
  if (bi->shape.size() == 1 && bi->shape[0] == ai->shape.back()) {
    const std::size_t cols = bi->shape[0];
    const std::size_t rows = ai->data.size() / cols;
    std::vector<T> out(ai->data.size());
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        out[r * cols + c] = ai->data[r * cols + c] + bi->data[c];
      }
    }
    auto bw = [ai, bi, rows, cols](const std::vector<T>& g) {
      if (ai->requires_grad) {
        auto& ga = grad_of(*ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bi->requires_grad) {
        auto& gb = grad_of(*bi);
        for (std::size_t c = 0; c < cols; ++c) {
          double acc = 0.0;
          for (std::size_t r = 0; r < rows; ++r) acc += g[r * cols + c];
          gb[c] += static_cast<T>(acc);
        }
      }
    };
    return make_result<T>(K, ai->shape, std::move(out), {ai, bi}, bw);
  }
  shape_fail(K, "shapes " + shape_str(ai->shape) + " and " + shape_str(bi->shape) +
                    " are neither equal nor a last-axis bias");
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  constexpr auto K = OpKind::mul;
  const auto& ai = need(a, K);
  const auto& bi = need(b, K);
  if (ai->shape != bi->shape) {
    shape_fail(K, "shapes differ: " + shape_str(ai->shape) + " vs " +
                      shape_str(bi->shape));
  }
  std::vector<T> out(ai->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ai->data[i] * bi->data[i];
  auto bw = [ai, bi](const std::vector<T>& g) {
    if (ai->requires_grad) {
      auto& ga = grad_of(*ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      auto& gb = grad_of(*bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
    }
  };
  return make_result<T>(K, ai->shape, std::move(out), {ai, bi}, bw);
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, double factor) {
  constexpr auto K = OpKind::scale;
  const auto& ai = need(a, K);
  const T f = static_cast<T>(factor);
  std::vector<T> out(ai->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ai->data[i] * f;
  auto bw = [ai, f](const std::vector<T>& g) {
    auto& ga = grad_of(*ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * f;
  };
  return make_result<T>(K, ai->shape, std::move(out), {ai}, bw);
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& a) {
  constexpr auto K = OpKind::gelu;
  const auto& ai = need(a, K);
  std::vector<T> out(ai->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = ai->data[i];
    out[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)));
  }
  auto bw = [ai](const std::vector<T>& g) {
    auto& ga = grad_of(*ai);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = ai->data[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      ga[i] += static_cast<T>(g[i] * (cdf + x * pdf));
    }
  };
  return make_result<T>(K, ai->shape, std::move(out), {ai}, bw);
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& a) {
  constexpr auto K = OpKind::softmax;
  const auto& ai = need(a, K);
  const std::size_t cols = ai->shape.back();
  const std::size_t rows = ai->data.size() / cols;
  std::vector<T> out(ai->data.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = ai->data.data() + r * cols;
    T* y = out.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(double(x[c]) - mx);
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = static_cast<T>(std::exp(double(x[c]) - mx) / total);
    }
  }
  auto saved = std::make_shared<std::vector<T>>(out);
  auto bw = [ai, saved, rows, cols](const std::vector<T>& g) {
    auto& ga = grad_of(*ai);
    const auto& y = *saved;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += double(g[o + c]) * y[o + c];
      for (std::size_t c = 0; c < cols; ++c) {
        ga[o + c] += static_cast<T>(y[o + c] * (g[o + c] - dot));
      }
    }
  };
  return make_result<T>(K, ai->shape, std::move(out), {ai}, bw);
}

template <typename T>
BasicTensor<T> layernorm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                         const BasicTensor<T>& beta, double eps) {
  constexpr auto K = OpKind::layernorm;
  const auto& xi = need(x, K);
  const auto& gi = need(gamma, K);
  const auto& bi = need(beta, K);
  const std::size_t cols = xi->shape.back();
  if (gi->shape != Shape{cols} || bi->shape != Shape{cols}) {
    shape_fail(K, "gamma/beta must be [" + std::to_string(cols) + "], got " +
                      shape_str(gi->shape) + " and " + shape_str(bi->shape));
  }
  const std::size_t rows = xi->data.size() / cols;
  std::vector<T> out(xi->data.size());
  auto xhat = std::make_shared<std::vector<T>>(xi->data.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* v = xi->data.data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += v[c];
    mean /= double(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = v[c] - mean;
      var += d * d;
    }
    var /= double(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (v[c] - mean) * rs;
      (*xhat)[r * cols + c] = static_cast<T>(h);
      out[r * cols + c] = static_cast<T>(h * gi->data[c] + bi->data[c]);
    }
  }
  auto bw = [xi, gi, bi, xhat, rstd, rows, cols](const std::vector<T>& g) {
    const auto& h = *xhat;
    if (gi->requires_grad || bi->requires_grad) {
      std::vector<double> dg(cols, 0.0), db(cols, 0.0);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          dg[c] += double(g[r * cols + c]) * h[r * cols + c];
          db[c] += g[r * cols + c];
        }
      }
      if (gi->requires_grad) {
        auto& gg = grad_of(*gi);
        for (std::size_t c = 0; c < cols; ++c) gg[c] += static_cast<T>(dg[c]);
      }
      if (bi->requires_grad) {
        auto& gb = grad_of(*bi);
        for (std::size_t c = 0; c < cols; ++c) gb[c] += static_cast<T>(db[c]);
      }
    }
    if (xi->requires_grad) {
      auto& gx = grad_of(*xi);
      std::vector<double> dh(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t o = r * cols;
        double sum_dh = 0.0, sum_dh_h = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          dh[c] = double(g[o + c]) * gi->data[c];
          sum_dh += dh[c];
          sum_dh_h += dh[c] * h[o + c];
        }
        const double n = double(cols);
        for (std::size_t c = 0; c < cols; ++c) {
          gx[o + c] += static_cast<T>((*rstd)[r] / n *
                                      (n * dh[c] - sum_dh - h[o + c] * sum_dh_h));
        }
      }
    }
  };
  return make_result<T>(K, xi->shape, std::move(out), {xi, gi, bi}, bw);
}

template <typename T>
BasicTensor<T> embed_lookup(const BasicTensor<T>& table,
                            const BasicTensor<T>& indices) {
  constexpr auto K = OpKind::embed_lookup;
  const auto& ti = need(table, K);
  const auto& ii = need(indices, K);
  if (ti->shape.size() != 2) shape_fail(K, "table must be [N,d], got " + shape_str(ti->shape));
  const std::size_t n_rows = ti->shape[0], d = ti->shape[1];
  std::vector<std::size_t> idx(ii->data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const double v = ii->data[i];
    if (!(v >= 0.0) || v >= double(n_rows) || v != std::floor(v)) {
      shape_fail(K, "index " + std::to_string(v) + " outside table of " +
                        std::to_string(n_rows) + " rows");
    }
    idx[i] = static_cast<std::size_t>(v);
  }
  std::vector<T> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(ti->data.data() + idx[i] * d, d, out.data() + i * d);
  }
  Shape os = ii->shape;
  os.push_back(d);
  auto bw = [ti, idx = std::move(idx), d](const std::vector<T>& g) {
    if (!ti->requires_grad) return;
    auto& gt = grad_of(*ti);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t c = 0; c < d; ++c) gt[idx[i] * d + c] += g[i * d + c];
    }
  };
  // indices never receive gradient
  return make_result<T>(K, std::move(os), std::move(out), {ti}, bw);
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  constexpr auto K = OpKind::reshape;
  const auto& ai = need(a, K);
  if (shape_numel(shape) != ai->data.size() ||
      std::find(shape.begin(), shape.end(), 0u) != shape.end()) {
    shape_fail(K, "cannot view " + shape_str(ai->shape) + " as " + shape_str(shape));
  }
  auto bw = [ai](const std::vector<T>& g) {
    auto& ga = grad_of(*ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  };
  return make_result<T>(K, std::move(shape), ai->data, {ai}, bw);
}

template <typename T>
BasicTensor<T> concat(std::span<const BasicTensor<T>> parts, int axis) {
  constexpr auto K = OpKind::concat;
  if (parts.empty()) shape_fail(K, "no inputs");
  std::vector<ImplPtr<T>> ins;
  for (const auto& p : parts) ins.push_back(need(p, K));
  const Shape& s0 = ins[0]->shape;
  const std::size_t ax = norm_axis(axis, s0.size(), K);
  Shape os = s0;
  os[ax] = 0;
  for (const auto& p : ins) {
    if (p->shape.size() != s0.size()) shape_fail(K, "rank mismatch");
    for (std::size_t i = 0; i < s0.size(); ++i) {
      if (i != ax && p->shape[i] != s0[i]) {
        shape_fail(K, "shapes " + shape_str(s0) + " and " + shape_str(p->shape) +
                          " differ off the concat axis");
      }
    }
    os[ax] += p->shape[ax];
  }
  const std::size_t outer = shape_numel(Shape(s0.begin(), s0.begin() + ax));
  const std::size_t inner = shape_numel(Shape(s0.begin() + ax + 1, s0.end()));
  const std::size_t out_stride = os[ax] * inner;
  std::vector<T> out(outer * out_stride);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : ins) {
    offsets.push_back(off);
    const std::size_t w = p->shape[ax] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p->data.data() + o * w, w, out.data() + o * out_stride + off);
    }
    off += w;
  }
  auto bw = [ins, offsets, outer, inner, out_stride, ax](const std::vector<T>& g) {
    for (std::size_t j = 0; j < ins.size(); ++j) {
      if (!ins[j]->requires_grad) continue;
      auto& gp = grad_of(*ins[j]);
      const std::size_t w = ins[j]->shape[ax] * inner;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t c = 0; c < w; ++c) {
          gp[o * w + c] += g[o * out_stride + offsets[j] + c];
        }
      }
    }
  };
  return make_result<T>(K, std::move(os), std::move(out), ins, bw);
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& a, int axis, std::size_t start,
                     std::size_t length) {
  constexpr auto K = OpKind::slice;
  const auto& ai = need(a, K);
  const Shape& s = ai->shape;
  const std::size_t ax = norm_axis(axis, s.size(), K);
  if (length == 0 || start + length > s[ax]) {
    shape_fail(K, "range [" + std::to_string(start) + "," +
                      std::to_string(start + length) + ") exceeds axis " +
                      std::to_string(ax) + " of " + shape_str(s));
  }
  const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + ax));
  const std::size_t inner = shape_numel(Shape(s.begin() + ax + 1, s.end()));
  const std::size_t in_stride = s[ax] * inner;
  const std::size_t w = length * inner;
  std::vector<T> out(outer * w);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(ai->data.data() + o * in_stride + start * inner, w,
                out.data() + o * w);
  }
  Shape os = s;
  os[ax] = length;
  auto bw = [ai, outer, inner, in_stride, w, start](const std::vector<T>& g) {
    auto& ga = grad_of(*ai);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t c = 0; c < w; ++c) {
        ga[o * in_stride + start * inner + c] += g[o * w + c];
      }
    }
  };
  return make_result<T>(K, std::move(os), std::move(out), {ai}, bw);
}

template <typename T>
BasicTensor<T> masked_mse(const BasicTensor<T>& pred, const BasicTensor<T>& target,
                          const BasicTensor<T>& mask, LossNorm norm) {
  constexpr auto K = OpKind::masked_mse;
  const auto& pi = need(pred, K);
  const auto& ti = need(target, K);
  const auto& mi = need(mask, K);
  if (pi->shape != ti->shape) {
    shape_fail(K, "pred " + shape_str(pi->shape) + " vs target " +
                      shape_str(ti->shape));
  }
  if (pi->shape.size() < 2) shape_fail(K, "expected [..., n_patches, patch_dim]");
  const Shape rows_shape(pi->shape.begin(), pi->shape.end() - 1);
  if (mi->shape != rows_shape) {
    shape_fail(K, "mask " + shape_str(mi->shape) + " does not match patch grid " +
                      shape_str(rows_shape));
  }
  const std::size_t pd = pi->shape.back();
  const std::size_t rows = mi->data.size();
  std::vector<char> sel(rows);
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    sel[r] = mi->data[r] != T(0);
    count += sel[r];
  }
  if (count == 0) throw std::invalid_argument("masked_mse: mask selects no patch");
  const double denom = norm == LossNorm::per_pixel ? double(count * pd) : double(count);
  double acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!sel[r]) continue;
    for (std::size_t c = 0; c < pd; ++c) {
      const double d = double(pi->data[r * pd + c]) - ti->data[r * pd + c];
      acc += d * d;
    }
  }
  std::vector<T> out{static_cast<T>(acc / denom)};
  auto bw = [pi, ti, sel = std::move(sel), pd, denom](const std::vector<T>& g) {
    const double k = 2.0 * g[0] / denom;
    for (auto [who, sign] : {std::pair{pi.get(), 1.0}, std::pair{ti.get(), -1.0}}) {
      if (!who->requires_grad) continue;
      auto& gw = grad_of(*who);
      for (std::size_t r = 0; r < sel.size(); ++r) {
        if (!sel[r]) continue;
        for (std::size_t c = 0; c < pd; ++c) {
          const std::size_t i = r * pd + c;
          gw[i] += static_cast<T>(sign * k * (double(pi->data[i]) - ti->data[i]));
        }
      }
    }
  };
  return make_result<T>(K, {1}, std::move(out), {pi, ti}, bw);
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  constexpr auto K = OpKind::sum;
  const auto& ai = need(a, K);
  double acc = 0.0;
  for (const T v : ai->data) acc += v;
  auto bw = [ai](const std::vector<T>& g) {
    auto& ga = grad_of(*ai);
    for (auto& v : ga) v += g[0];
  };
  return make_result<T>(K, {1}, {static_cast<T>(acc)}, {ai}, bw);
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& a, double rate, std::uint64_t seed) {
  constexpr auto K = OpKind::dropout;
  const auto& ai = need(a, K);
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout: rate must lie in [0,1)");
  }
  if (rate == 0.0) return a;
  std::mt19937_64 rng(seed);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  auto keep = std::make_shared<std::vector<T>>(ai->data.size());
  std::vector<T> out(ai->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = double(rng() >> 11) * 0x1.0p-53;
    (*keep)[i] = u >= rate ? keep_scale : T(0);
    out[i] = ai->data[i] * (*keep)[i];
  }
  auto bw = [ai, keep](const std::vector<T>& g) {
    auto& ga = grad_of(*ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*keep)[i];
  };
  return make_result<T>(K, ai->shape, std::move(out), {ai}, bw);
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits,
                             const BasicTensor<T>& labels) {
  constexpr auto K = OpKind::cross_entropy;
  const auto& li = need(logits, K);
  const auto& yi = need(labels, K);
  if (li->shape.size() != 2 || yi->data.size() != li->shape[0]) {
    shape_fail(K, "logits " + shape_str(li->shape) + " vs labels " +
                      shape_str(yi->shape));
  }
  const std::size_t n = li->shape[0], c = li->shape[1];
  auto probs = std::make_shared<std::vector<double>>(n * c);
  std::vector<std::size_t> cls(n);
  double nll = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double y = yi->data[r];
    if (!(y >= 0.0) || y >= double(c) || y != std::floor(y)) {
      shape_fail(K, "label " + std::to_string(y) + " outside " + std::to_string(c) +
                        " classes");
    }
    cls[r] = static_cast<std::size_t>(y);
    const T* x = li->data.data() + r * c;
    const double mx = *std::max_element(x, x + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(double(x[j]) - mx);
    for (std::size_t j = 0; j < c; ++j) {
      (*probs)[r * c + j] = std::exp(double(x[j]) - mx) / total;
    }
    nll -= double(x[cls[r]]) - mx - std::log(total);
  }
  auto bw = [li, probs, cls = std::move(cls), n, c](const std::vector<T>& g) {
    auto& gl = grad_of(*li);
    const double k = g[0] / double(n);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < c; ++j) {
        const double onehot = j == cls[r] ? 1.0 : 0.0;
        gl[r * c + j] += static_cast<T>(k * ((*probs)[r * c + j] - onehot));
      }
    }
  };
  return make_result<T>(K, {1}, {static_cast<T>(nll / double(n))}, {li}, bw);
}

template <typename T>
BasicTensor<T> apply(OpKind kind, std::span<const BasicTensor<T>> in,
                     const Attrs& attrs) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      throw std::invalid_argument(std::string(op_name(kind)) + ": expected " +
                                  std::to_string(n) + " inputs, got " +
                                  std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::matmul:
      arity(2);
      return matmul(in[0], in[1], attr(attrs, "transpose_b", 0) != 0);
    case OpKind::add:
      arity(2);
      return add(in[0], in[1]);
    case OpKind::mul:
      arity(2);
      return mul(in[0], in[1]);
    case OpKind::scale:
      arity(1);
      return scale(in[0], attr_required(attrs, "factor", kind));
    case OpKind::gelu:
      arity(1);
      return gelu(in[0]);
    case OpKind::softmax:
      arity(1);
      return softmax(in[0]);
    case OpKind::layernorm:
      arity(3);
      return layernorm(in[0], in[1], in[2], attr(attrs, "eps", 1e-5));
    case OpKind::embed_lookup:
      arity(2);
      return embed_lookup(in[0], in[1]);
    case OpKind::reshape: {
      arity(1);
      Shape s;
      for (int i = 0;; ++i) {
        auto it = attrs.find("d" + std::to_string(i));
        if (it == attrs.end()) break;
        s.push_back(static_cast<std::size_t>(it->second));
      }
      return reshape(in[0], std::move(s));
    }
    case OpKind::concat:
      return concat(in, static_cast<int>(attr(attrs, "axis", 0)));
    case OpKind::slice:
      arity(1);
      return slice(in[0], static_cast<int>(attr(attrs, "axis", 0)),
                   static_cast<std::size_t>(attr_required(attrs, "start", kind)),
                   static_cast<std::size_t>(attr_required(attrs, "length", kind)));
    case OpKind::masked_mse:
      arity(3);
      return masked_mse(in[0], in[1], in[2],
                        attr(attrs, "per_patch", 0) != 0 ? LossNorm::per_patch
                                                         : LossNorm::per_pixel);
    case OpKind::sum:
      arity(1);
      return sum(in[0]);
    case OpKind::dropout:
      arity(1);
      return dropout(in[0], attr_required(attrs, "rate", kind),
                     static_cast<std::uint64_t>(attr(attrs, "seed", 0)));
    case OpKind::cross_entropy:
      arity(2);
      return cross_entropy(in[0], in[1]);
  }
  throw std::invalid_argument("apply: unknown op kind");
}

template <typename T>
BasicTensor<T> apply(std::string_view kind, std::span<const BasicTensor<T>> in,
                     const Attrs& attrs) {
  auto k = op_from_name(kind);
  if (!k) throw std::invalid_argument("apply: unknown op kind '" + std::string(kind) + "'");
  return apply<T>(*k, in, attrs);
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (!loss.defined()) throw GraphError("backward: undefined loss");
  auto* root = loss.impl().get();
  if (root->data.size() != 1) {
    throw GraphError("backward: loss must be a scalar, got shape " +
                     shape_str(root->shape));
  }
  if (root->consumed) {
    throw GraphError("backward: graph already consumed; run the forward pass again");
  }
  if (!root->node) {
    throw GraphError("backward: loss was not produced by a recorded op");
  }

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> seen;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->node && next < node->node->inputs.size()) {
      auto* child = node->node->inputs[next++].get();
      if (child->node && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  root->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* t = *it;
    if (t->grad.empty()) continue;
    t->node->backward(t->grad);
  }
  for (auto* t : order) {
    t->node.reset();
    t->consumed = true;
  }
}

#define MIMI_INSTANTIATE(T)                                                        \
  template class BasicTensor<T>;                                                   \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&,     \
                                 bool);                                            \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);       \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);       \
  template BasicTensor<T> scale(const BasicTensor<T>&, double);                    \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                             \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                          \
  template BasicTensor<T> layernorm(const BasicTensor<T>&, const BasicTensor<T>&,  \
                                    const BasicTensor<T>&, double);                \
  template BasicTensor<T> embed_lookup(const BasicTensor<T>&,                      \
                                       const BasicTensor<T>&);                     \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                   \
  template BasicTensor<T> concat(std::span<const BasicTensor<T>>, int);            \
  template BasicTensor<T> slice(const BasicTensor<T>&, int, std::size_t,           \
                                std::size_t);                                      \
  template BasicTensor<T> masked_mse(const BasicTensor<T>&, const BasicTensor<T>&, \
                                     const BasicTensor<T>&, LossNorm);             \
  template BasicTensor<T> sum(const BasicTensor<T>&);                              \
  template BasicTensor<T> dropout(const BasicTensor<T>&, double, std::uint64_t);   \
  template BasicTensor<T> cross_entropy(const BasicTensor<T>&,                     \
                                        const BasicTensor<T>&);                    \
  template BasicTensor<T> apply(OpKind, std::span<const BasicTensor<T>>,           \
                                const Attrs&);                                     \
  template BasicTensor<T> apply(std::string_view, std::span<const BasicTensor<T>>, \
                                const Attrs&);                                     \
  template void backward(const BasicTensor<T>&);

MIMI_INSTANTIATE(float)
MIMI_INSTANTIATE(double)

#undef MIMI_INSTANTIATE

}  // namespace mimi
