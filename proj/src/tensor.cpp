#include "ditvq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace ditvq {

namespace detail {
struct Node {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;
  bool requires_grad = false;
  std::vector<Tensor> parents;
  BackwardFn backward;
  std::string op;
};
}  // namespace detail

namespace {

using detail::Node;

MatrixD as_double(const Tensor& t) { return t.matrix().cast<double>(); }

void check_finite(const std::string& op, const std::vector<float>& v) {
  for (float x : v) {
    if (!std::isfinite(x)) throw NumericalError(op + ": produced a non-finite value");
  }
}

std::size_t last_extent(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

// Accumulate a double matrix into a tensor's grad buffer (same element order).
void accumulate(const Tensor& t, const MatrixD& g) {
  auto buf = t.grad_buffer();
  const double* src = g.data();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += static_cast<float>(src[i]);
}

std::vector<float> to_vector(const MatrixD& m) {
  std::vector<float> out(static_cast<std::size_t>(m.size()));
  const double* src = m.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(src[i]);
  return out;
}

Eigen::Map<const MatrixF> grad_matrix(const Tensor& out) {
  const auto g = out.grad();
  return {g.data(), out.matrix().rows(), out.matrix().cols()};
}

template <typename F, typename DF>
Tensor unary(const char* op, const Tensor& x, F f, DF df) {
  const auto in = x.data();
  std::vector<float> v(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) v[i] = static_cast<float>(f(static_cast<double>(in[i])));
  return Tensor::make_result(op, x.shape(), std::move(v), {x}, [df](const Tensor& out) {
    const Tensor& p = out.parents()[0];
    if (!p.requires_grad()) return;
    const auto g = out.grad();
    const auto in = p.data();
    auto buf = p.grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i) {
      buf[i] += static_cast<float>(static_cast<double>(g[i]) * df(static_cast<double>(in[i])));
    }
  });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor handle

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) { return full(shape, 0.0F, requires_grad); }

Tensor Tensor::full(const Shape& shape, float value, bool requires_grad) {
  return from(shape, std::vector<float>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::from(const Shape& shape, std::vector<float> values, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  }
  check_finite("tensor", values);
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->op = "leaf";
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor Tensor::from_matrix(const MatrixF& m, bool requires_grad) {
  std::vector<float> v(m.data(), m.data() + m.size());
  return from({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, std::move(v),
              requires_grad);
}

Tensor Tensor::make_result(const std::string& op, const Shape& shape, std::vector<float> values,
                           std::vector<Tensor> parents, BackwardFn backward) {
  if (shape_numel(shape) != values.size()) throw DimensionError(op + ": internal shape mismatch");
  check_finite(op, values);
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->value = std::move(values);
  node->op = op;
  node->requires_grad =
      std::any_of(parents.begin(), parents.end(), [](const Tensor& p) { return p.requires_grad(); });
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis out of range for " + shape_str(shape()));
  return shape()[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const float> Tensor::data() const { return node_->value; }

std::span<float> Tensor::mutable_data() {
  if (!is_leaf()) throw ContractError("mutable_data on a non-leaf tensor");
  return node_->value;
}

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

float Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape()[axis]) throw DimensionError("index out of range");
    flat = flat * shape()[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const float> Tensor::grad() const { return node_->grad; }

std::span<float> Tensor::grad_buffer() const {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0F);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0F);
}

Eigen::Map<const MatrixF> Tensor::matrix() const {
  const auto cols = static_cast<Eigen::Index>(last_extent(*this));
  const auto rows = static_cast<Eigen::Index>(numel()) / cols;
  return {node_->value.data(), rows, cols};
}

std::vector<float> Tensor::values() const { return node_->value; }

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

Tensor Tensor::clone(bool requires_grad) const { return from(shape(), node_->value, requires_grad); }

const std::vector<Tensor>& Tensor::parents() const { return node_->parents; }

bool Tensor::is_leaf() const { return !node_->backward; }

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw ContractError("backward: loss does not track gradients");

  // Post-order DFS gives a topological order (parents before children).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node_.get(), 0}};
  seen.insert(loss.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].node_.get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* node : order) {
    if (node->backward) node->grad.assign(node->value.size(), 0.0F);
  }
  loss.grad_buffer()[0] += 1.0F;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->backward) continue;
    // Re-wrap without extending lifetime beyond the loss graph.
    std::shared_ptr<Node> alias(std::shared_ptr<Node>{}, node);
    node->backward(Tensor(alias));
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const MatrixD out = as_double(a) * as_double(b);
  return Tensor::make_result("matmul", {a.dim(0), b.dim(1)}, to_vector(out), {a, b},
                             [](const Tensor& o) {
                               const auto& a = o.parents()[0];
                               const auto& b = o.parents()[1];
                               const MatrixD g = grad_matrix(o).cast<double>();
                               if (a.requires_grad()) accumulate(a, g * as_double(b).transpose());
                               if (b.requires_grad()) accumulate(b, as_double(a).transpose() * g);
                             });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const MatrixF t = a.matrix().transpose();
  return Tensor::make_result("transpose", {a.dim(1), a.dim(0)}, std::vector<float>(t.data(), t.data() + t.size()),
                             {a}, [](const Tensor& o) {
                               const auto& a = o.parents()[0];
                               if (!a.requires_grad()) return;
                               accumulate(a, grad_matrix(o).transpose().cast<double>());
                             });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("linear", weight, 2);
  if (x.rank() != 1 && x.rank() != 2) throw DimensionError("linear: input must be 1-D or 2-D");
  const std::size_t in = weight.dim(1);
  const std::size_t out = weight.dim(0);
  if (last_extent(x) != in) {
    throw DimensionError("linear: input width " + std::to_string(last_extent(x)) +
                         " does not match weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out)) {
    throw DimensionError("linear: bias shape " + shape_str(bias.shape()) + " for weight " +
                         shape_str(weight.shape()));
  }
  MatrixD y = as_double(x) * as_double(weight).transpose();
  if (bias.defined()) y.rowwise() += bias.matrix().cast<double>().row(0);
  Shape shape = x.rank() == 1 ? Shape{out} : Shape{x.dim(0), out};
  std::vector<Tensor> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return Tensor::make_result("linear", shape, to_vector(y), std::move(parents), [](const Tensor& o) {
    const auto& x = o.parents()[0];
    const auto& w = o.parents()[1];
    const MatrixD g = grad_matrix(o).cast<double>();
    if (x.requires_grad()) accumulate(x, g * as_double(w));
    if (w.requires_grad()) accumulate(w, g.transpose() * as_double(x));
    if (o.parents().size() > 2 && o.parents()[2].requires_grad()) {
      accumulate(o.parents()[2], g.colwise().sum());
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<float> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  return Tensor::make_result("add", a.shape(), std::move(v), {a, b}, [](const Tensor& o) {
    const auto g = o.grad();
    for (const auto& p : o.parents()) {
      if (!p.requires_grad()) continue;
      auto buf = p.grad_buffer();
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<float> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  return Tensor::make_result("sub", a.shape(), std::move(v), {a, b}, [](const Tensor& o) {
    const auto g = o.grad();
    const auto& a = o.parents()[0];
    const auto& b = o.parents()[1];
    if (a.requires_grad()) {
      auto buf = a.grad_buffer();
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
    }
    if (b.requires_grad()) {
      auto buf = b.grad_buffer();
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<float> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  return Tensor::make_result("mul", a.shape(), std::move(v), {a, b}, [](const Tensor& o) {
    const auto g = o.grad();
    const auto& a = o.parents()[0];
    const auto& b = o.parents()[1];
    if (a.requires_grad()) {
      auto buf = a.grad_buffer();
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i] * b.data()[i];
    }
    if (b.requires_grad()) {
      auto buf = b.grad_buffer();
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i] * a.data()[i];
    }
  });
}

Tensor scale(const Tensor& a, float s) {
  return unary("scale", a, [s](double x) { return s * x; }, [s](double) { return double{s}; });
}

Tensor add_scalar(const Tensor& a, float s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double) { return 1.0; });
}

Tensor abs(const Tensor& a) {
  // Subgradient sign(0) = 0.
  return unary("abs", a, [](double x) { return std::abs(x); },
               [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor activation_gelu(const Tensor& x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  return unary(
      "gelu", x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v))); },
      [](double v) {
        const double u = k * (v + c * v * v * v);
        const double th = std::tanh(u);
        return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * k * (1.0 + 3.0 * c * v * v);
      });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rank() != 1 || row.dim(0) != last_extent(a)) {
    throw DimensionError("add_row: " + shape_str(row.shape()) + " cannot broadcast over " +
                         shape_str(a.shape()));
  }
  MatrixF y = a.matrix();
  y.rowwise() += row.matrix().row(0);
  return Tensor::make_result("add_row", a.shape(), std::vector<float>(y.data(), y.data() + y.size()),
                             {a, row}, [](const Tensor& o) {
                               const auto& a = o.parents()[0];
                               const auto& r = o.parents()[1];
                               const MatrixD g = grad_matrix(o).cast<double>();
                               if (a.requires_grad()) accumulate(a, g);
                               if (r.requires_grad()) accumulate(r, g.colwise().sum());
                             });
}

Tensor mul_row(const Tensor& a, const Tensor& row) {
  if (row.rank() != 1 || row.dim(0) != last_extent(a)) {
    throw DimensionError("mul_row: " + shape_str(row.shape()) + " cannot broadcast over " +
                         shape_str(a.shape()));
  }
  MatrixF y = a.matrix();
  y.array().rowwise() *= row.matrix().row(0).array();
  return Tensor::make_result("mul_row", a.shape(), std::vector<float>(y.data(), y.data() + y.size()),
                             {a, row}, [](const Tensor& o) {
                               const auto& a = o.parents()[0];
                               const auto& r = o.parents()[1];
                               const MatrixD g = grad_matrix(o).cast<double>();
                               if (a.requires_grad()) {
                                 MatrixD ga = g;
                                 ga.array().rowwise() *= as_double(r).row(0).array();
                                 accumulate(a, ga);
                               }
                               if (r.requires_grad()) {
                                 accumulate(r, (g.array() * as_double(a).array()).colwise().sum().matrix());
                               }
                             });
}

// ---------------------------------------------------------------------------
// Normalisations

Tensor layer_norm(const Tensor& z, float eps) {
  if (z.rank() == 0 || last_extent(z) < 2) {
    throw DimensionError("layer_norm: last extent must be >= 2, got " + shape_str(z.shape()));
  }
  const MatrixD x = as_double(z);
  const Eigen::Index h = x.cols();
  MatrixD xhat(x.rows(), h);
  Vector<double> inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + static_cast<double>(eps));
    xhat.row(r) = (x.row(r).array() - mu) * inv_std[r];
  }
  return Tensor::make_result("layer_norm", z.shape(), to_vector(xhat), {z},
                             [xhat, inv_std](const Tensor& o) {
                               const auto& z = o.parents()[0];
                               if (!z.requires_grad()) return;
                               const MatrixD g = grad_matrix(o).cast<double>();
                               MatrixD dx(g.rows(), g.cols());
                               for (Eigen::Index r = 0; r < g.rows(); ++r) {
                                 const double mg = g.row(r).mean();
                                 const double mgx = (g.row(r).array() * xhat.row(r).array()).mean();
                                 dx.row(r) = inv_std[r] * (g.row(r).array() - mg - xhat.row(r).array() * mgx);
                               }
                               accumulate(z, dx);
                             });
}

Tensor softmax(const Tensor& x) {
  const MatrixD v = as_double(x);
  MatrixD y(v.rows(), v.cols());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double m = v.row(r).maxCoeff();
    y.row(r) = (v.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  std::vector<float> out = to_vector(y);
  return Tensor::make_result("softmax", x.shape(), std::move(out), {x}, [](const Tensor& o) {
    const auto& x = o.parents()[0];
    if (!x.requires_grad()) return;
    const MatrixD y = as_double(o);
    const MatrixD g = grad_matrix(o).cast<double>();
    MatrixD dx(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const double dot = g.row(r).dot(y.row(r));
      dx.row(r) = y.row(r).array() * (g.row(r).array() - dot);
    }
    accumulate(x, dx);
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (float v : a.data()) s += v;
  return Tensor::make_result("sum", {}, {static_cast<float>(s)}, {a}, [](const Tensor& o) {
    const auto& a = o.parents()[0];
    if (!a.requires_grad()) return;
    const float g = o.grad()[0];
    for (auto& v : a.grad_buffer()) v += g;
  });
}

Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (float v : a.data()) s += v;
  const double n = static_cast<double>(a.numel());
  return Tensor::make_result("mean", {}, {static_cast<float>(s / n)}, {a}, [n](const Tensor& o) {
    const auto& a = o.parents()[0];
    if (!a.requires_grad()) return;
    const float g = static_cast<float>(o.grad()[0] / n);
    for (auto& v : a.grad_buffer()) v += g;
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape("mse", a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - b.data()[i];
    s += d * d;
  }
  const double n = static_cast<double>(a.numel());
  return Tensor::make_result("mse", {}, {static_cast<float>(s / n)}, {a, b}, [n](const Tensor& o) {
    const auto& a = o.parents()[0];
    const auto& b = o.parents()[1];
    const double g = o.grad()[0] * 2.0 / n;
    for (int side = 0; side < 2; ++side) {
      const auto& p = side == 0 ? a : b;
      if (!p.requires_grad()) continue;
      const double sign = side == 0 ? 1.0 : -1.0;
      auto buf = p.grad_buffer();
      for (std::size_t i = 0; i < buf.size(); ++i) {
        buf[i] += static_cast<float>(sign * g * (static_cast<double>(a.data()[i]) - b.data()[i]));
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  return Tensor::make_result("reshape", shape, a.values(), {a}, [](const Tensor& o) {
    const auto& a = o.parents()[0];
    if (!a.requires_grad()) return;
    const auto g = o.grad();
    auto buf = a.grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
  });
}

Tensor slice_last(const Tensor& a, std::size_t begin, std::size_t end) {
  const std::size_t h = last_extent(a);
  if (a.rank() == 0 || begin >= end || end > h) {
    throw DimensionError("slice_last: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + shape_str(a.shape()));
  }
  const auto m = a.matrix();
  const MatrixF s = m.middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin));
  Shape shape = a.shape();
  shape.back() = end - begin;
  return Tensor::make_result("slice_last", shape, std::vector<float>(s.data(), s.data() + s.size()), {a},
                             [begin](const Tensor& o) {
                               const auto& a = o.parents()[0];
                               if (!a.requires_grad()) return;
                               const auto g = grad_matrix(o);
                               auto buf = a.grad_buffer();
                               const std::size_t h = last_extent(a);
                               for (Eigen::Index r = 0; r < g.rows(); ++r) {
                                 for (Eigen::Index c = 0; c < g.cols(); ++c) {
                                   buf[static_cast<std::size_t>(r) * h + begin + static_cast<std::size_t>(c)] += g(r, c);
                                 }
                               }
                             });
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_last: no inputs");
  const auto rows = parts[0].matrix().rows();
  Eigen::Index width = 0;
  for (const auto& p : parts) {
    if (p.matrix().rows() != rows || p.rank() != parts[0].rank()) {
      throw DimensionError("concat_last: leading extents differ");
    }
    width += p.matrix().cols();
  }
  MatrixF out(rows, width);
  Eigen::Index col = 0;
  for (const auto& p : parts) {
    out.middleCols(col, p.matrix().cols()) = p.matrix();
    col += p.matrix().cols();
  }
  Shape shape = parts[0].shape();
  shape.back() = static_cast<std::size_t>(width);
  return Tensor::make_result("concat_last", shape, std::vector<float>(out.data(), out.data() + out.size()),
                             parts, [](const Tensor& o) {
                               const auto g = grad_matrix(o);
                               Eigen::Index col = 0;
                               for (const auto& p : o.parents()) {
                                 const auto w = p.matrix().cols();
                                 if (p.requires_grad()) {
                                   accumulate(p, g.middleCols(col, w).cast<double>());
                                 }
                                 col += w;
                               }
                             });
}

Tensor row(const Tensor& table, std::size_t index) {
  require_rank("row", table, 2);
  if (index >= table.dim(0)) throw InputError("row: index " + std::to_string(index) + " out of range");
  const std::size_t w = table.dim(1);
  std::vector<float> v(table.data().begin() + static_cast<std::ptrdiff_t>(index * w),
                       table.data().begin() + static_cast<std::ptrdiff_t>((index + 1) * w));
  return Tensor::make_result("row", {w}, std::move(v), {table}, [index, w](const Tensor& o) {
    const auto& t = o.parents()[0];
    if (!t.requires_grad()) return;
    const auto g = o.grad();
    auto buf = t.grad_buffer();
    for (std::size_t c = 0; c < w; ++c) buf[index * w + c] += g[c];
  });
}

}  // namespace ditvq
