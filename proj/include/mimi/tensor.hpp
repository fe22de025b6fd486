#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mimi {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Operation kinds recorded in the differentiation graph.
enum class OpKind {
  matmul,
  add,
  mul,
  scale,
  gelu,
  softmax,
  layernorm,
  embed_lookup,
  reshape,
  concat,
  slice,
  masked_mse,
  sum,
  dropout,
  cross_entropy,
};

std::string_view op_name(OpKind kind);
std::optional<OpKind> op_from_name(std::string_view name);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
template <typename T>
struct TensorImpl;
}

/// Dense row-major tensor that can take part in a reverse-mode graph.
///
/// Copies are shallow: two handles share storage and graph position. Use
/// clone() or detach() for an independent copy.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor from_data(Shape shape, std::vector<T> data,
                               bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  /// Negative axes count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const;

  std::span<const T> data() const;
  /// Writable view; only legal on leaves (tensors not produced by an op).
  std::span<T> mutable_data();
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  bool is_leaf() const;
  std::optional<OpKind> producer() const;

  /// Same values, no graph, no grad.
  BasicTensor detach() const;
  /// Independent leaf copy that keeps requires_grad.
  BasicTensor clone() const;

  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }
  explicit BasicTensor(std::shared_ptr<detail::TensorImpl<T>> impl)
      : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

enum class LossNorm { per_pixel, per_patch };

// Differentiable operations. Leading dimensions are flattened into rows
// unless stated otherwise; the only implicit broadcast is a rank-1 bias over
// the last axis in add().

/// a[..., k] x b[k, n] -> [..., n]; or batched a[B, m, k] x b[B, k, n].
/// With transpose_b the right operand is stored as [n, k] / [B, n, k].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b,
                      bool transpose_b = false);
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, double factor);
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& a);
/// Over the last axis, max-subtracted.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& a);
template <typename T>
BasicTensor<T> layernorm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                         const BasicTensor<T>& beta, double eps = 1e-5);
/// Rows of table[N, d] picked by integer-valued entries of `indices`.
/// Output shape is indices.shape + [d]. Gradient flows into the table only.
template <typename T>
BasicTensor<T> embed_lookup(const BasicTensor<T>& table,
                            const BasicTensor<T>& indices);
template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);
template <typename T>
BasicTensor<T> concat(std::span<const BasicTensor<T>> parts, int axis);
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& a, int axis, std::size_t start,
                     std::size_t length);
/// Mean squared error over the patches selected by `mask`.
///
/// pred and target are [..., n_patches, patch_dim]; mask is [..., n_patches]
/// with 0/1 entries. per_pixel divides by selected pixels, per_patch by
/// selected patches.
template <typename T>
BasicTensor<T> masked_mse(const BasicTensor<T>& pred,
                          const BasicTensor<T>& target,
                          const BasicTensor<T>& mask,
                          LossNorm norm = LossNorm::per_pixel);
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a);
/// Inverted dropout with a mask drawn from `seed`. rate == 0 is identity.
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& a, double rate, std::uint64_t seed);
/// Mean negative log-likelihood of integer `labels` under softmax(logits).
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits,
                             const BasicTensor<T>& labels);

using Attrs = std::map<std::string, double>;

/// Generic entry point: dispatches on kind, reading options from attrs
/// (transpose_b, factor, eps, axis, start, length, rate, seed, per_patch,
/// and d0..dN for reshape).
template <typename T>
BasicTensor<T> apply(OpKind kind, std::span<const BasicTensor<T>> inputs,
                     const Attrs& attrs = {});
template <typename T>
BasicTensor<T> apply(std::string_view kind,
                     std::span<const BasicTensor<T>> inputs,
                     const Attrs& attrs = {});

/// Populates grad on every reachable tensor that requires it, then consumes
/// the graph. A second call on the same loss throws GraphError.
template <typename T>
void backward(const BasicTensor<T>& loss);

}  // namespace mimi
