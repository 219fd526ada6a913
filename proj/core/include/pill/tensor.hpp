#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pill {

/// Dimension mismatch between operands; the message reports both shapes.
class shape_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A primitive produced (or was handed) a non-finite value.
class numeric_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of the differentiation graph (e.g. backward run twice).
class autodiff_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

namespace detail {

// One recorded node of the differentiation graph. Nodes are created in
// execution order (monotonic `seq`), so parents always precede children;
// the backward walk sorts reachable nodes by `seq` descending and visits
// each exactly once.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily during backward
  bool needs_grad = false;
  bool backward_ran = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  std::int64_t size() const { return static_cast<std::int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

/// Dense row-major tensor of 64-bit floats. A Tensor is a cheap handle to a
/// graph node; ops on tensors whose inputs require gradients record a
/// backward rule so `backward(loss)` can fill per-tensor `.grad()`.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor constant(const Shape& shape, double fill);
  static Tensor from(const Shape& shape, std::vector<double> values);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }

  Tensor& set_requires_grad(bool on);
  bool requires_grad() const;

  const Shape& shape() const;
  int dim(int i) const;
  std::int64_t size() const;

  std::span<const double> values() const;
  /// Mutable access to the raw storage. Reserved for the optimizer and for
  /// deliberate test poking; does not record anything on the graph.
  std::span<double> values_mut();

  double item() const;                 // scalar tensors only
  double at(int i) const;              // 1-d
  double at(int i, int j) const;       // 2-d

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  std::shared_ptr<detail::Node> node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Reverse-mode sweep from a scalar loss. Every tensor that requires a
/// gradient and is reachable from `loss` ends up with dLoss/dTensor in its
/// grad accumulator. Running it twice on the same loss without building a
/// fresh graph is an error.
void backward(const Tensor& loss);

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
/// Adds a [1 x n] row vector to every row of a [m x n] matrix.
Tensor add_rowvec(const Tensor& a, const Tensor& bias);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor silu(const Tensor& a);
Tensor tanh_act(const Tensor& a);
/// Numerically stabilized softmax over the last dimension.
Tensor softmax_lastdim(const Tensor& a);
/// RMS normalization over the last dimension, scaled by `weight`; eps = 1e-6.
Tensor rmsnorm(const Tensor& a, const Tensor& weight);
/// Mean of -log softmax(logits=[T x V])[target] over positions with mask set.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     const std::vector<bool>& mask);
/// Rotary position encoding applied per head to a [T x n_heads*d_head] matrix.
Tensor rope(const Tensor& a, int n_heads, double theta_base = 10000.0);
Tensor cols_slice(const Tensor& a, int c0, int c1);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
/// Row lookup: out[i] = table[ids[i]]; backward scatter-adds.
Tensor rows_gather(const Tensor& table, std::span<const int> ids);
/// Mean of the selected rows, as a [1 x d] tensor.
Tensor mean_rows(const Tensor& a, std::span<const int> rows);
/// Expands a [1 x h] vector to [1 x h*repeat] by repeating each entry.
Tensor expand_per_head(const Tensor& g, int repeat);
Tensor sum_all(const Tensor& a);

}  // namespace pill
