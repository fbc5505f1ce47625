#pragma once

// Minimal dense tensor with reverse-mode differentiation.
//
// A Tensor is a cheap handle to a node in a dynamically built graph. Values
// are 32-bit floats stored row-major; reductions accumulate in 64-bit. Every
// op checks its output for NaN/Inf and throws NumericalError, so a finite
// graph stays finite.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ditvq/common.hpp"

namespace ditvq {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {
struct Node;
}

/// Backward callback: reads the output node's grad and accumulates into its
/// parents' grads.
using BackwardFn = std::function<void(const Tensor& out)>;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, float value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);
  /// Copies a row-major Eigen matrix into a 2-D tensor.
  static Tensor from_matrix(const MatrixF& m, bool requires_grad = false);

  /// Result of a differentiable op. Tracks grad iff any parent does.
  static Tensor make_result(const std::string& op, const Shape& shape, std::vector<float> values,
                            std::vector<Tensor> parents, BackwardFn backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const float> data() const;
  /// Writable view of the values. Only valid for leaves (used by optimizers).
  std::span<float> mutable_data();
  float item() const;
  float at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const float> grad() const;
  /// Grad buffer, allocated on first use. Ops call this from backward.
  std::span<float> grad_buffer() const;
  void zero_grad();

  /// Rows = product of leading extents, cols = last extent.
  Eigen::Map<const MatrixF> matrix() const;
  MatrixF to_matrix() const { return MatrixF(matrix()); }
  std::vector<float> values() const;

  /// Same values, no history, no grad.
  Tensor detach() const;
  /// Independent leaf copy.
  Tensor clone(bool requires_grad) const;

  const std::vector<Tensor>& parents() const;
  bool is_leaf() const;
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend void backward(const Tensor& loss);
};

/// Populate grads of every tracked leaf reachable from a scalar loss.
/// Leaf grads accumulate across calls; intermediate grads are recomputed.
void backward(const Tensor& loss);

// Linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// x[n×i] · weight[o×i]^T + bias[o]. bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
Tensor abs(const Tensor& a);
Tensor activation_gelu(const Tensor& x);

// Row broadcasts over the last axis: a[...×h] with row[h].
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor mul_row(const Tensor& a, const Tensor& row);

// Normalisations
Tensor layer_norm(const Tensor& z, float eps = 1e-5F);
Tensor softmax(const Tensor& x);

// Reductions
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Mean over elements of (a - b)^2.
Tensor mse(const Tensor& a, const Tensor& b);

// Shape ops
Tensor reshape(const Tensor& a, const Shape& shape);
/// Columns [begin, end) of the last axis.
Tensor slice_last(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_last(const std::vector<Tensor>& parts);
/// Row `index` of a 2-D table, as a 1-D tensor.
Tensor row(const Tensor& table, std::size_t index);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

}  // namespace ditvq
