#include "pill/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace pill {

namespace {

thread_local std::uint64_t g_seq = 0;

std::int64_t shape_product(const Shape& s) {
  std::int64_t p = 1;
  for (int d : s) p *= d;
  return p;
}

void validate_shape(const Shape& s, const char* where) {
  if (s.empty()) throw shape_error(std::string(where) + ": empty shape");
  for (int d : s) {
    if (d <= 0)
      throw shape_error(std::string(where) + ": non-positive dimension in " +
                        shape_str(s));
  }
}

void check_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x))
      throw numeric_error(std::string(op) + ": non-finite value produced");
  }
}

std::shared_ptr<detail::Node> make_node(Shape shape,
                                        std::vector<double> value) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->seq = ++g_seq;
  return n;
}

using NodePtr = std::shared_ptr<detail::Node>;

// Records an op result. The backward rule is retained only when some input
// participates in the gradient graph, so inference-only forwards stay cheap.
Tensor make_op(Shape shape, std::vector<double> value, const char* opname,
               std::vector<NodePtr> parents,
               std::function<void(detail::Node&)> backprop) {
  check_finite(value, opname);
  auto n = make_node(std::move(shape), std::move(value));
  bool any = false;
  for (const auto& p : parents) any = any || p->needs_grad;
  if (any) {
    n->needs_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return Tensor::wrap(n);
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::wrap(std::shared_ptr<detail::Node> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

Tensor Tensor::zeros(const Shape& shape) { return constant(shape, 0.0); }

Tensor Tensor::constant(const Shape& shape, double fill) {
  validate_shape(shape, "Tensor::constant");
  if (!std::isfinite(fill))
    throw numeric_error("Tensor::constant: non-finite fill");
  return wrap(make_node(shape, std::vector<double>(shape_product(shape), fill)));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values) {
  validate_shape(shape, "Tensor::from");
  if (shape_product(shape) != static_cast<std::int64_t>(values.size()))
    throw shape_error("Tensor::from: shape " + shape_str(shape) + " wants " +
                      std::to_string(shape_product(shape)) + " values, got " +
                      std::to_string(values.size()));
  check_finite(values, "Tensor::from");
  return wrap(make_node(shape, std::move(values)));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor& Tensor::set_requires_grad(bool on) {
  node_->needs_grad = on;
  return *this;
}

bool Tensor::requires_grad() const { return node_ && node_->needs_grad; }

const Shape& Tensor::shape() const { return node_->shape; }

int Tensor::dim(int i) const { return node_->shape.at(static_cast<size_t>(i)); }

std::int64_t Tensor::size() const { return node_->size(); }

std::span<const double> Tensor::values() const { return node_->value; }

std::span<double> Tensor::values_mut() { return node_->value; }

double Tensor::item() const {
  if (size() != 1)
    throw shape_error("Tensor::item: not a scalar, shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(int i) const { return node_->value.at(static_cast<size_t>(i)); }

double Tensor::at(int i, int j) const {
  if (node_->shape.size() != 2)
    throw shape_error("Tensor::at(i,j): tensor is not 2-d");
  return node_->value.at(static_cast<size_t>(i) * node_->shape[1] +
                         static_cast<size_t>(j));
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad())
    throw autodiff_error("Tensor::grad: no gradient accumulated");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

// ---- backward --------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw autodiff_error("backward: loss must be a defined scalar");
  auto root = loss.node();
  if (!root->needs_grad)
    throw autodiff_error("backward: loss is not connected to any gradient");
  if (root->backward_ran)
    throw autodiff_error(
        "backward: already run on this graph; reset gradients and rebuild");

  // Iterative DFS over parent edges; creation order is a topological order,
  // so sorting reachable nodes by seq descending gives the reverse walk.
  std::vector<detail::Node*> order;
  std::vector<detail::Node*> stack{root.get()};
  std::vector<detail::Node*> seen;
  auto mark = [&seen](detail::Node* n) {
    // `backward_ran` doubles as the visited flag for this sweep.
    n->backward_ran = true;
    seen.push_back(n);
  };
  mark(root.get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->needs_grad && !p->backward_ran) {
        mark(p.get());
        stack.push_back(p.get());
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) {
              return a->seq > b->seq;
            });

  root->ensure_grad();
  root->grad[0] = 1.0;
  for (detail::Node* n : order) {
    if (n->backprop) n->backprop(*n);
  }
  // Leave the flag set only on the root: it guards double-backward. Interior
  // and leaf nodes may appear in later graphs.
  for (detail::Node* n : seen) {
    if (n != root.get()) n->backward_ran = false;
  }
}

// ---- ops -------------------------------------------------------------------

namespace {

void require_2d(const Tensor& t, const char* op) {
  if (t.shape().size() != 2)
    throw shape_error(std::string(op) + ": expected 2-d tensor, got " +
                      shape_str(t.shape()));
}

void accumulate(detail::Node& dst, std::span<const double> g) {
  dst.ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw shape_error("matmul: inner dimensions disagree, " +
                      shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  const auto* A = a.values().data();
  const auto* B = b.values().data();
  for (int i = 0; i < m; ++i) {
    double* crow = out.data() + static_cast<size_t>(i) * n;
    const double* arow = A + static_cast<size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = B + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return make_op({m, n}, std::move(out), "matmul", {a.node(), b.node()},
                 [m, k, n](detail::Node& self) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   const double* dC = self.grad.data();
                   if (pa.needs_grad) {
                     pa.ensure_grad();
                     // dA = dC * B^T
                     const double* B = pb.value.data();
                     for (int i = 0; i < m; ++i) {
                       const double* dcrow = dC + static_cast<size_t>(i) * n;
                       double* darow = pa.grad.data() + static_cast<size_t>(i) * k;
                       for (int kk = 0; kk < k; ++kk) {
                         const double* brow = B + static_cast<size_t>(kk) * n;
                         double acc = 0.0;
                         for (int j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
                         darow[kk] += acc;
                       }
                     }
                   }
                   if (pb.needs_grad) {
                     pb.ensure_grad();
                     // dB = A^T * dC
                     const double* A = pa.value.data();
                     for (int i = 0; i < m; ++i) {
                       const double* arow = A + static_cast<size_t>(i) * k;
                       const double* dcrow = dC + static_cast<size_t>(i) * n;
                       for (int kk = 0; kk < k; ++kk) {
                         const double av = arow[kk];
                         double* dbrow = pb.grad.data() + static_cast<size_t>(kk) * n;
                         for (int j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
                       }
                     }
                   }
                 });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n);
  const auto* A = a.values().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<size_t>(j) * m + i] = A[static_cast<size_t>(i) * n + j];
  return make_op({n, m}, std::move(out), "transpose", {a.node()},
                 [m, n](detail::Node& self) {
                   auto& pa = *self.parents[0];
                   if (!pa.needs_grad) return;
                   pa.ensure_grad();
                   for (int j = 0; j < n; ++j)
                     for (int i = 0; i < m; ++i)
                       pa.grad[static_cast<size_t>(i) * n + j] +=
                           self.grad[static_cast<size_t>(j) * m + i];
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw shape_error("add: shape mismatch, " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_op(a.shape(), std::move(out), "add", {a.node(), b.node()},
                 [](detail::Node& self) {
                   for (int p = 0; p < 2; ++p) {
                     auto& par = *self.parents[p];
                     if (par.needs_grad) accumulate(par, self.grad);
                   }
                 });
}

Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
  require_2d(a, "add_rowvec");
  require_2d(bias, "add_rowvec");
  const int m = a.dim(0), n = a.dim(1);
  if (bias.dim(0) != 1 || bias.dim(1) != n)
    throw shape_error("add_rowvec: bias " + shape_str(bias.shape()) +
                      " does not broadcast over " + shape_str(a.shape()));
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = bias.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] += bv[j];
  return make_op({m, n}, std::move(out), "add_rowvec", {a.node(), bias.node()},
                 [m, n](detail::Node& self) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   if (pa.needs_grad) accumulate(pa, self.grad);
                   if (pb.needs_grad) {
                     pb.ensure_grad();
                     for (int i = 0; i < m; ++i)
                       for (int j = 0; j < n; ++j)
                         pb.grad[j] += self.grad[static_cast<size_t>(i) * n + j];
                   }
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw shape_error("mul: shape mismatch, " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  std::vector<double> out(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_op(a.shape(), std::move(out), "mul", {a.node(), b.node()},
                 [](detail::Node& self) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   if (pa.needs_grad) {
                     pa.ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       pa.grad[i] += self.grad[i] * pb.value[i];
                   }
                   if (pb.needs_grad) {
                     pb.ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       pb.grad[i] += self.grad[i] * pa.value[i];
                   }
                 });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  const auto av = a.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  return make_op(a.shape(), std::move(out), "scale", {a.node()},
                 [c](detail::Node& self) {
                   auto& pa = *self.parents[0];
                   if (!pa.needs_grad) return;
                   pa.ensure_grad();
                   for (size_t i = 0; i < self.grad.size(); ++i)
                     pa.grad[i] += self.grad[i] * c;
                 });
}

Tensor silu(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto av = a.values();
  for (size_t i = 0; i < out.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-av[i]));
    out[i] = av[i] * s;
  }
  return make_op(a.shape(), std::move(out), "silu", {a.node()},
                 [](detail::Node& self) {
                   auto& pa = *self.parents[0];
                   if (!pa.needs_grad) return;
                   pa.ensure_grad();
                   for (size_t i = 0; i < self.grad.size(); ++i) {
                     const double x = pa.value[i];
                     const double s = 1.0 / (1.0 + std::exp(-x));
                     pa.grad[i] += self.grad[i] * s * (1.0 + x * (1.0 - s));
                   }
                 });
}

Tensor tanh_act(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto av = a.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
  return make_op(a.shape(), std::move(out), "tanh", {a.node()},
                 [](detail::Node& self) {
                   auto& pa = *self.parents[0];
                   if (!pa.needs_grad) return;
                   pa.ensure_grad();
                   for (size_t i = 0; i < self.grad.size(); ++i) {
                     const double y = self.value[i];
                     pa.grad[i] += self.grad[i] * (1.0 - y * y);
                   }
                 });
}

Tensor softmax_lastdim(const Tensor& a) {
  const Shape& s = a.shape();
  const int n = s.back();
  const std::int64_t rows = a.size() / n;
  std::vector<double> out(a.size());
  const auto av = a.values();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * n;
    double* y = out.data() + r * n;
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    if (!std::isfinite(mx))
      throw numeric_error("softmax_lastdim: non-finite input");
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    for (int j = 0; j < n; ++j) y[j] /= sum;
  }
  return make_op(s, std::move(out), "softmax_lastdim", {a.node()},
                 [n, rows](detail::Node& self) {
                   auto& pa = *self.parents[0];
                   if (!pa.needs_grad) return;
                   pa.ensure_grad();
                   for (std::int64_t r = 0; r < rows; ++r) {
                     const double* y = self.value.data() + r * n;
                     const double* dy = self.grad.data() + r * n;
                     double dot = 0.0;
                     for (int j = 0; j < n; ++j) dot += dy[j] * y[j];
                     double* dx = pa.grad.data() + r * n;
                     for (int j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
                   }
                 });
}

Tensor rmsnorm(const Tensor& a, const Tensor& weight) {
  constexpr double kEps = 1e-6;
  const Shape& s = a.shape();
  const int d = s.back();
  if (weight.size() != d)
    throw shape_error("rmsnorm: weight " + shape_str(weight.shape()) +
                      " does not match last dim of " + shape_str(s));
  const std::int64_t rows = a.size() / d;
  std::vector<double> out(a.size());
  std::vector<double> inv_rms(static_cast<size_t>(rows));
  const auto av = a.values();
  const auto wv = weight.values();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * d;
    double ms = 0.0;
    for (int j = 0; j < d; ++j) ms += x[j] * x[j];
    ms /= d;
    const double inv = 1.0 / std::sqrt(ms + kEps);
    inv_rms[static_cast<size_t>(r)] = inv;
    double* y = out.data() + r * d;
    for (int j = 0; j < d; ++j) y[j] = x[j] * inv * wv[j];
  }
  return make_op(
      s, std::move(out), "rmsnorm", {a.node(), weight.node()},
      [d, rows, inv_rms = std::move(inv_rms)](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pw = *self.parents[1];
        if (pa.needs_grad) pa.ensure_grad();
        if (pw.needs_grad) pw.ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* x = pa.value.data() + r * d;
          const double* dy = self.grad.data() + r * d;
          const double inv = inv_rms[static_cast<size_t>(r)];
          if (pa.needs_grad) {
            double dot = 0.0;  // sum_i dy_i * w_i * x_i
            for (int j = 0; j < d; ++j) dot += dy[j] * pw.value[j] * x[j];
            const double k = inv * inv * inv * dot / d;
            double* dx = pa.grad.data() + r * d;
            for (int j = 0; j < d; ++j)
              dx[j] += dy[j] * pw.value[j] * inv - x[j] * k;
          }
          if (pw.needs_grad) {
            for (int j = 0; j < d; ++j) pw.grad[j] += dy[j] * x[j] * inv;
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     const std::vector<bool>& mask) {
  require_2d(logits, "cross_entropy");
  const int t_len = logits.dim(0), vocab = logits.dim(1);
  if (static_cast<int>(targets.size()) != t_len ||
      static_cast<int>(mask.size()) != t_len)
    throw shape_error("cross_entropy: targets/mask length does not match " +
                      std::to_string(t_len) + " positions");
  int n_masked = 0;
  for (int t = 0; t < t_len; ++t) {
    if (!mask[static_cast<size_t>(t)]) continue;
    ++n_masked;
    if (targets[static_cast<size_t>(t)] < 0 ||
        targets[static_cast<size_t>(t)] >= vocab)
      throw std::invalid_argument("cross_entropy: target out of vocab at position " +
                                  std::to_string(t));
  }
  if (n_masked == 0)
    throw std::invalid_argument("cross_entropy: mask selects no positions");

  // Cache the probabilities for the backward rule.
  std::vector<double> probs(static_cast<size_t>(t_len) * vocab, 0.0);
  const auto lv = logits.values();
  double loss = 0.0;
  for (int t = 0; t < t_len; ++t) {
    if (!mask[static_cast<size_t>(t)]) continue;
    const double* row = lv.data() + static_cast<size_t>(t) * vocab;
    double mx = row[0];
    for (int v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
    double sum = 0.0;
    double* prow = probs.data() + static_cast<size_t>(t) * vocab;
    for (int v = 0; v < vocab; ++v) {
      prow[v] = std::exp(row[v] - mx);
      sum += prow[v];
    }
    for (int v = 0; v < vocab; ++v) prow[v] /= sum;
    loss -= std::log(prow[targets[static_cast<size_t>(t)]]);
  }
  loss /= n_masked;

  std::vector<int> tgt(targets.begin(), targets.end());
  return make_op(
      {1}, {loss}, "cross_entropy", {logits.node()},
      [t_len, vocab, n_masked, mask, tgt = std::move(tgt),
       probs = std::move(probs)](detail::Node& self) {
        auto& pl = *self.parents[0];
        if (!pl.needs_grad) return;
        pl.ensure_grad();
        const double g = self.grad[0] / n_masked;
        for (int t = 0; t < t_len; ++t) {
          if (!mask[static_cast<size_t>(t)]) continue;
          const double* prow = probs.data() + static_cast<size_t>(t) * vocab;
          double* drow = pl.grad.data() + static_cast<size_t>(t) * vocab;
          for (int v = 0; v < vocab; ++v) drow[v] += g * prow[v];
          drow[tgt[static_cast<size_t>(t)]] -= g;
        }
      });
}

Tensor rope(const Tensor& a, int n_heads, double theta_base) {
  require_2d(a, "rope");
  const int t_len = a.dim(0), d_model = a.dim(1);
  if (n_heads <= 0 || d_model % n_heads != 0)
    throw shape_error("rope: " + shape_str(a.shape()) +
                      " not divisible into " + std::to_string(n_heads) + " heads");
  const int d_head = d_model / n_heads;
  if (d_head % 2 != 0)
    throw shape_error("rope: head dim must be even, got " + std::to_string(d_head));

  const int half = d_head / 2;
  std::vector<double> cs(static_cast<size_t>(t_len) * half);
  std::vector<double> sn(static_cast<size_t>(t_len) * half);
  for (int t = 0; t < t_len; ++t) {
    for (int j = 0; j < half; ++j) {
      const double freq = std::pow(theta_base, -2.0 * j / d_head);
      cs[static_cast<size_t>(t) * half + j] = std::cos(t * freq);
      sn[static_cast<size_t>(t) * half + j] = std::sin(t * freq);
    }
  }
  std::vector<double> out(a.size());
  const auto av = a.values();
  for (int t = 0; t < t_len; ++t) {
    for (int h = 0; h < n_heads; ++h) {
      const size_t base = static_cast<size_t>(t) * d_model + h * d_head;
      for (int j = 0; j < half; ++j) {
        const double c = cs[static_cast<size_t>(t) * half + j];
        const double s = sn[static_cast<size_t>(t) * half + j];
        const double x0 = av[base + 2 * j], x1 = av[base + 2 * j + 1];
        out[base + 2 * j] = x0 * c - x1 * s;
        out[base + 2 * j + 1] = x0 * s + x1 * c;
      }
    }
  }
  return make_op({t_len, d_model}, std::move(out), "rope", {a.node()},
                 [t_len, d_model, d_head, n_heads, half, cs = std::move(cs),
                  sn = std::move(sn)](detail::Node& self) {
                   auto& pa = *self.parents[0];
                   if (!pa.needs_grad) return;
                   pa.ensure_grad();
                   for (int t = 0; t < t_len; ++t) {
                     for (int h = 0; h < n_heads; ++h) {
                       const size_t base =
                           static_cast<size_t>(t) * d_model + h * d_head;
                       for (int j = 0; j < half; ++j) {
                         const double c = cs[static_cast<size_t>(t) * half + j];
                         const double s = sn[static_cast<size_t>(t) * half + j];
                         const double g0 = self.grad[base + 2 * j];
                         const double g1 = self.grad[base + 2 * j + 1];
                         pa.grad[base + 2 * j] += g0 * c + g1 * s;
                         pa.grad[base + 2 * j + 1] += -g0 * s + g1 * c;
                       }
                     }
                   }
                 });
}

Tensor cols_slice(const Tensor& a, int c0, int c1) {
  require_2d(a, "cols_slice");
  const int m = a.dim(0), n = a.dim(1);
  if (c0 < 0 || c1 > n || c0 >= c1)
    throw shape_error("cols_slice: range [" + std::to_string(c0) + "," +
                      std::to_string(c1) + ") invalid for " + shape_str(a.shape()));
  const int w = c1 - c0;
  std::vector<double> out(static_cast<size_t>(m) * w);
  const auto av = a.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j)
      out[static_cast<size_t>(i) * w + j] = av[static_cast<size_t>(i) * n + c0 + j];
  return make_op({m, w}, std::move(out), "cols_slice", {a.node()},
                 [m, n, w, c0](detail::Node& self) {
                   auto& pa = *self.parents[0];
                   if (!pa.needs_grad) return;
                   pa.ensure_grad();
                   for (int i = 0; i < m; ++i)
                     for (int j = 0; j < w; ++j)
                       pa.grad[static_cast<size_t>(i) * n + c0 + j] +=
                           self.grad[static_cast<size_t>(i) * w + j];
                 });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw shape_error("concat_cols: no parts");
  const int m = parts[0].dim(0);
  int n = 0;
  std::vector<int> widths;
  std::vector<NodePtr> parents;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_cols");
    if (p.dim(0) != m)
      throw shape_error("concat_cols: row mismatch, " + shape_str(p.shape()) +
                        " vs " + shape_str(parts[0].shape()));
    widths.push_back(p.dim(1));
    n += p.dim(1);
    parents.push_back(p.node());
  }
  std::vector<double> out(static_cast<size_t>(m) * n);
  int off = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].values();
    const int w = widths[k];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        out[static_cast<size_t>(i) * n + off + j] = pv[static_cast<size_t>(i) * w + j];
    off += w;
  }
  return make_op({m, n}, std::move(out), "concat_cols", std::move(parents),
                 [m, n, widths = std::move(widths)](detail::Node& self) {
                   int off = 0;
                   for (size_t k = 0; k < self.parents.size(); ++k) {
                     auto& p = *self.parents[k];
                     const int w = widths[k];
                     if (p.needs_grad) {
                       p.ensure_grad();
                       for (int i = 0; i < m; ++i)
                         for (int j = 0; j < w; ++j)
                           p.grad[static_cast<size_t>(i) * w + j] +=
                               self.grad[static_cast<size_t>(i) * n + off + j];
                     }
                     off += w;
                   }
                 });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw shape_error("concat_rows: no parts");
  const int n = parts[0].dim(1);
  int m = 0;
  std::vector<int> heights;
  std::vector<NodePtr> parents;
  std::vector<double> out;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_rows");
    if (p.dim(1) != n)
      throw shape_error("concat_rows: column mismatch, " + shape_str(p.shape()) +
                        " vs " + shape_str(parts[0].shape()));
    heights.push_back(p.dim(0));
    m += p.dim(0);
    parents.push_back(p.node());
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  return make_op({m, n}, std::move(out), "concat_rows", std::move(parents),
                 [n, heights = std::move(heights)](detail::Node& self) {
                   size_t off = 0;
                   for (size_t k = 0; k < self.parents.size(); ++k) {
                     auto& p = *self.parents[k];
                     const size_t len = static_cast<size_t>(heights[k]) * n;
                     if (p.needs_grad) {
                       p.ensure_grad();
                       for (size_t i = 0; i < len; ++i)
                         p.grad[i] += self.grad[off + i];
                     }
                     off += len;
                   }
                 });
}

Tensor rows_gather(const Tensor& table, std::span<const int> ids) {
  require_2d(table, "rows_gather");
  const int rows = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= rows)
      throw shape_error("rows_gather: index " + std::to_string(id) +
                        " out of range for " + shape_str(table.shape()));
  }
  const int t_len = static_cast<int>(ids.size());
  if (t_len == 0) throw shape_error("rows_gather: empty index list");
  std::vector<double> out(static_cast<size_t>(t_len) * d);
  const auto tv = table.values();
  for (int i = 0; i < t_len; ++i)
    std::copy_n(tv.data() + static_cast<size_t>(ids[static_cast<size_t>(i)]) * d,
                d, out.data() + static_cast<size_t>(i) * d);
  std::vector<int> idv(ids.begin(), ids.end());
  return make_op({t_len, d}, std::move(out), "rows_gather", {table.node()},
                 [d, idv = std::move(idv)](detail::Node& self) {
                   auto& pt = *self.parents[0];
                   if (!pt.needs_grad) return;
                   pt.ensure_grad();
                   for (size_t i = 0; i < idv.size(); ++i) {
                     double* dst = pt.grad.data() + static_cast<size_t>(idv[i]) * d;
                     const double* src = self.grad.data() + i * d;
                     for (int j = 0; j < d; ++j) dst[j] += src[j];
                   }
                 });
}

Tensor mean_rows(const Tensor& a, std::span<const int> rows) {
  require_2d(a, "mean_rows");
  const int m = a.dim(0), d = a.dim(1);
  if (rows.empty()) throw shape_error("mean_rows: empty row set");
  for (int r : rows) {
    if (r < 0 || r >= m)
      throw shape_error("mean_rows: row " + std::to_string(r) +
                        " out of range for " + shape_str(a.shape()));
  }
  std::vector<double> out(static_cast<size_t>(d), 0.0);
  const auto av = a.values();
  for (int r : rows)
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(j)] += av[static_cast<size_t>(r) * d + j];
  const double inv = 1.0 / static_cast<double>(rows.size());
  for (double& x : out) x *= inv;
  std::vector<int> rs(rows.begin(), rows.end());
  return make_op({1, d}, std::move(out), "mean_rows", {a.node()},
                 [d, inv, rs = std::move(rs)](detail::Node& self) {
                   auto& pa = *self.parents[0];
                   if (!pa.needs_grad) return;
                   pa.ensure_grad();
                   for (int r : rs)
                     for (int j = 0; j < d; ++j)
                       pa.grad[static_cast<size_t>(r) * d + j] += self.grad[static_cast<size_t>(j)] * inv;
                 });
}

Tensor expand_per_head(const Tensor& g, int repeat) {
  require_2d(g, "expand_per_head");
  if (g.dim(0) != 1)
    throw shape_error("expand_per_head: expected [1 x h], got " + shape_str(g.shape()));
  if (repeat <= 0) throw shape_error("expand_per_head: repeat must be positive");
  const int h = g.dim(1);
  std::vector<double> out(static_cast<size_t>(h) * repeat);
  const auto gv = g.values();
  for (int i = 0; i < h; ++i)
    for (int r = 0; r < repeat; ++r) out[static_cast<size_t>(i) * repeat + r] = gv[i];
  return make_op({1, h * repeat}, std::move(out), "expand_per_head", {g.node()},
                 [h, repeat](detail::Node& self) {
                   auto& pg = *self.parents[0];
                   if (!pg.needs_grad) return;
                   pg.ensure_grad();
                   for (int i = 0; i < h; ++i) {
                     double acc = 0.0;
                     for (int r = 0; r < repeat; ++r)
                       acc += self.grad[static_cast<size_t>(i) * repeat + r];
                     pg.grad[i] += acc;
                   }
                 });
}

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return make_op({1}, {s}, "sum_all", {a.node()}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    if (!pa.needs_grad) return;
    pa.ensure_grad();
    const double g = self.grad[0];
    for (double& gx : pa.grad) gx += g;
  });
}

}  // namespace pill
