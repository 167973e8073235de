#include "heartpfl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace heartpfl {

namespace {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(op) + ": non-finite result");
    }
  }
}

NodePtr make_leaf(std::vector<std::size_t> shape, std::vector<double> values,
                  bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->requires_grad = requires_grad;
  return n;
}

// Result node; records parents/backprop only when a parent requires grad.
Tensor make_op(const char* op, std::vector<std::size_t> shape,
               std::vector<double> values, std::vector<NodePtr> parents,
               std::function<void(TensorNode&)> backprop) {
  check_finite(op, values);
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->op = op;
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return Tensor::wrap(std::move(n));
}

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                   " and " + shape_str(b.shape()) + " do not conform");
}

// Rank-2 view of a rank-1/rank-2 tensor: vectors are 1 x n rows.
struct RowView {
  std::size_t rows, cols;
};

RowView as_rows(const Tensor& t, const char* op) {
  if (t.rank() == 1) return {1, t.shape()[0]};
  if (t.rank() == 2) return {t.shape()[0], t.shape()[1]};
  throw ShapeError(std::string(op) + ": expected rank 1 or 2, got shape " +
                   shape_str(t.shape()));
}

}  // namespace

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::scalar(double v, bool requires_grad) {
  return wrap(make_leaf({}, {v}, requires_grad));
}

Tensor Tensor::vec(std::vector<double> v, bool requires_grad) {
  std::size_t n = v.size();
  return wrap(make_leaf({n}, std::move(v), requires_grad));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> v, bool requires_grad) {
  if (v.size() != rows * cols) {
    throw ShapeError("matrix: " + std::to_string(v.size()) +
                     " values for shape " + shape_str({rows, cols}));
  }
  return wrap(make_leaf({rows, cols}, std::move(v), requires_grad));
}

Tensor Tensor::zeros(const std::vector<std::size_t>& shape,
                     bool requires_grad) {
  return wrap(make_leaf(shape, std::vector<double>(shape_numel(shape), 0.0),
                        requires_grad));
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> v,
                    bool requires_grad) {
  if (v.size() != shape_numel(shape)) {
    throw ShapeError("from: " + std::to_string(v.size()) +
                     " values for shape " + shape_str(shape));
  }
  return wrap(make_leaf(std::move(shape), std::move(v), requires_grad));
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows: tensor is not rank 2");
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols: tensor is not rank 2");
  return node_->shape[1];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item: tensor has " + std::to_string(numel()) +
                     " elements");
  }
  return node_->values[0];
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("grad: no gradient materialized");
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->grad.assign(node_->values.size(), 0.0);
}

Tensor Tensor::detached(bool requires_grad) const {
  return wrap(make_leaf(node_->shape, node_->values, requires_grad));
}

// ---- Tape / backward -------------------------------------------------------

Tape Tape::build(const Tensor& root) {
  Tape tape;
  if (!root.defined() || !root.node()->requires_grad) return tape;
  // Iterative DFS postorder: parents land before their consumers.
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      tape.nodes_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1 || loss.rank() != 0) {
    throw ShapeError("backward: loss must be a scalar");
  }
  if (!loss.node()->requires_grad) return;
  Tape tape = Tape::build(loss);
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  const auto& order = tape.nodes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    shape_fail("matmul", a, b);
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* po = out.data() + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = pa[i * k + l];
      const double* pbl = pb + l * n;
      for (std::size_t j = 0; j < n; ++j) po[j] += av * pbl[j];
    }
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_op(
      "matmul", {m, n}, std::move(out), {an, bn},
      [an, bn, m, k, n](TensorNode& self) {
        const double* g = self.grad.data();
        if (an->requires_grad) {
          an->ensure_grad();
          double* ga = an->grad.data();
          const double* pb = bn->values.data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t l = 0; l < k; ++l) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j)
                acc += g[i * n + j] * pb[l * n + j];
              ga[i * k + l] += acc;
            }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          double* gb = bn->grad.data();
          const double* pa = an->values.data();
          for (std::size_t l = 0; l < k; ++l)
            for (std::size_t i = 0; i < m; ++i) {
              const double av = pa[i * k + l];
              for (std::size_t j = 0; j < n; ++j)
                gb[l * n + j] += av * g[i * n + j];
            }
        }
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
    return make_op("add", a.shape(), std::move(out), {an, bn},
                   [an, bn](TensorNode& self) {
                     if (an->requires_grad) {
                       an->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         an->grad[i] += self.grad[i];
                     }
                     if (bn->requires_grad) {
                       bn->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         bn->grad[i] += self.grad[i];
                     }
                   });
  }
  // Row broadcast: [m x n] + [n].
  if (a.rank() == 2 && b.rank() == 1 && a.cols() == b.shape()[0]) {
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(a.values());
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b.values()[j];
    return make_op("add", a.shape(), std::move(out), {an, bn},
                   [an, bn, m, n](TensorNode& self) {
                     if (an->requires_grad) {
                       an->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         an->grad[i] += self.grad[i];
                     }
                     if (bn->requires_grad) {
                       bn->ensure_grad();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j)
                           bn->grad[j] += self.grad[i * n + j];
                     }
                   });
  }
  // Scalar broadcast.
  if (b.rank() == 0) {
    const double c = b.item();
    std::vector<double> out(a.values());
    for (double& x : out) x += c;
    return make_op("add", a.shape(), std::move(out), {an, bn},
                   [an, bn](TensorNode& self) {
                     if (an->requires_grad) {
                       an->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         an->grad[i] += self.grad[i];
                     }
                     if (bn->requires_grad) {
                       bn->ensure_grad();
                       for (double g : self.grad) bn->grad[0] += g;
                     }
                   });
  }
  shape_fail("add", a, b);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("sub", a, b);
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  std::vector<double> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.values()[i];
  return make_op("sub", a.shape(), std::move(out), {an, bn},
                 [an, bn](TensorNode& self) {
                   if (an->requires_grad) {
                     an->ensure_grad();
                     for (std::size_t i = 0; i < self.grad.size(); ++i)
                       an->grad[i] += self.grad[i];
                   }
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     for (std::size_t i = 0; i < self.grad.size(); ++i)
                       bn->grad[i] -= self.grad[i];
                   }
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.values()[i];
    return make_op("mul", a.shape(), std::move(out), {an, bn},
                   [an, bn](TensorNode& self) {
                     if (an->requires_grad) {
                       an->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         an->grad[i] += self.grad[i] * bn->values[i];
                     }
                     if (bn->requires_grad) {
                       bn->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         bn->grad[i] += self.grad[i] * an->values[i];
                     }
                   });
  }
  if (b.rank() == 0) {
    const double c = b.item();
    std::vector<double> out(a.values());
    for (double& x : out) x *= c;
    return make_op("mul", a.shape(), std::move(out), {an, bn},
                   [an, bn, c](TensorNode& self) {
                     if (an->requires_grad) {
                       an->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         an->grad[i] += self.grad[i] * c;
                     }
                     if (bn->requires_grad) {
                       bn->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         bn->grad[0] += self.grad[i] * an->values[i];
                     }
                   });
  }
  shape_fail("mul", a, b);
}

Tensor scale(const Tensor& a, double c) {
  auto an = a.node_ptr();
  std::vector<double> out(a.values());
  for (double& x : out) x *= c;
  return make_op("scale", a.shape(), std::move(out), {an},
                 [an, c](TensorNode& self) {
                   an->ensure_grad();
                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                     an->grad[i] += self.grad[i] * c;
                 });
}

Tensor relu(const Tensor& a) {
  auto an = a.node_ptr();
  std::vector<double> out(a.values());
  for (double& x : out) x = x > 0.0 ? x : 0.0;
  return make_op("relu", a.shape(), std::move(out), {an},
                 [an](TensorNode& self) {
                   an->ensure_grad();
                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                     if (an->values[i] > 0.0) an->grad[i] += self.grad[i];
                 });
}

Tensor sum_all(const Tensor& a) {
  auto an = a.node_ptr();
  double s = 0.0;
  for (double x : a.values()) s += x;
  return make_op("sum", {}, {s}, {an}, [an](TensorNode& self) {
    an->ensure_grad();
    const double g = self.grad[0];
    for (double& x : an->grad) x += g;
  });
}

Tensor mean_all(const Tensor& a) {
  auto an = a.node_ptr();
  const double inv = 1.0 / static_cast<double>(a.numel());
  double s = 0.0;
  for (double x : a.values()) s += x;
  return make_op("mean", {}, {s * inv}, {an}, [an, inv](TensorNode& self) {
    an->ensure_grad();
    const double g = self.grad[0] * inv;
    for (double& x : an->grad) x += g;
  });
}

Tensor normalize_rows(const Tensor& a) {
  auto [m, n] = as_rows(a, "normalize_rows");
  auto an = a.node_ptr();
  std::vector<double> out(a.values());
  std::vector<double> sums(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += out[i * n + j];
    if (std::abs(s) < 1e-300) {
      throw NumericError("normalize_rows: row " + std::to_string(i) +
                         " sums to zero");
    }
    sums[i] = s;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= s;
  }
  return make_op("normalize_rows", a.shape(), std::move(out), {an},
                 [an, m, n, sums](TensorNode& self) {
                   an->ensure_grad();
                   for (std::size_t i = 0; i < m; ++i) {
                     const double s = sums[i];
                     double dot = 0.0;
                     for (std::size_t j = 0; j < n; ++j)
                       dot += self.grad[i * n + j] * self.values[i * n + j];
                     for (std::size_t j = 0; j < n; ++j)
                       an->grad[i * n + j] +=
                           (self.grad[i * n + j] - dot) / s;
                   }
                 });
}

Tensor dropout(const Tensor& a, double p, bool train, Rng& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw std::invalid_argument("dropout: p must be in [0, 1)");
  }
  if (!train || p == 0.0) return a;  // identity
  auto an = a.node_ptr();
  const double keep = 1.0 - p;
  auto mask = std::make_shared<std::vector<double>>(a.numel());
  std::vector<double> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double m = rng.bernoulli(p) ? 0.0 : 1.0 / keep;
    (*mask)[i] = m;
    out[i] *= m;
  }
  return make_op("dropout", a.shape(), std::move(out), {an},
                 [an, mask](TensorNode& self) {
                   an->ensure_grad();
                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                     an->grad[i] += self.grad[i] * (*mask)[i];
                 });
}

Tensor feature_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  auto [m, n] = as_rows(x, "feature_norm");
  if (gamma.rank() != 1 || gamma.shape()[0] != n || beta.rank() != 1 ||
      beta.shape()[0] != n) {
    throw ShapeError("feature_norm: scale/shift must be length " +
                     std::to_string(n) + ", got " + shape_str(gamma.shape()) +
                     " and " + shape_str(beta.shape()));
  }
  constexpr double kEps = 1e-5;
  auto xn = x.node_ptr();
  auto gn = gamma.node_ptr();
  auto bn = beta.node_ptr();
  auto xhat = std::make_shared<std::vector<double>>(m * n);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = x.values().data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xi[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = xi[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + kEps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xi[j] - mean) * is;
      (*xhat)[i * n + j] = h;
      out[i * n + j] = gamma.values()[j] * h + beta.values()[j];
    }
  }
  return make_op(
      "feature_norm", x.shape(), std::move(out), {xn, gn, bn},
      [xn, gn, bn, xhat, inv_std, m, n](TensorNode& self) {
        const double* g = self.grad.data();
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
              gn->grad[j] += g[i * n + j] * (*xhat)[i * n + j];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) bn->grad[j] += g[i * n + j];
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          const double invn = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            // dxhat_j = g_j * gamma_j; dx from the standard layer-norm pullback
            double sum_dh = 0.0, sum_dh_h = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = g[i * n + j] * gn->values[j];
              sum_dh += dh;
              sum_dh_h += dh * (*xhat)[i * n + j];
            }
            const double is = (*inv_std)[i];
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = g[i * n + j] * gn->values[j];
              const double h = (*xhat)[i * n + j];
              xn->grad[i * n + j] +=
                  is * (dh - invn * sum_dh - invn * h * sum_dh_h);
            }
          }
        }
      });
}

namespace {

// Shared row-wise log-softmax on values.
void log_softmax_rows(const double* in, double* out, std::size_t m,
                      std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = in + i * n;
    double mx = xi[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    double lse = 0.0;
    for (std::size_t j = 0; j < n; ++j) lse += std::exp(xi[j] - mx);
    lse = mx + std::log(lse);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xi[j] - lse;
  }
}

}  // namespace

Tensor softmax(const Tensor& a) {
  auto [m, n] = as_rows(a, "softmax");
  auto an = a.node_ptr();
  std::vector<double> out(m * n);
  log_softmax_rows(a.values().data(), out.data(), m, n);
  for (double& x : out) x = std::exp(x);
  return make_op("softmax", a.shape(), std::move(out), {an},
                 [an, m, n](TensorNode& self) {
                   an->ensure_grad();
                   for (std::size_t i = 0; i < m; ++i) {
                     // Normalizing by the row sum (1 up to rounding) makes a
                     // constant upstream gradient vanish exactly.
                     double dot = 0.0, ysum = 0.0;
                     for (std::size_t j = 0; j < n; ++j) {
                       dot += self.grad[i * n + j] * self.values[i * n + j];
                       ysum += self.values[i * n + j];
                     }
                     dot /= ysum;
                     for (std::size_t j = 0; j < n; ++j)
                       an->grad[i * n + j] += self.values[i * n + j] *
                                              (self.grad[i * n + j] - dot);
                   }
                 });
}

Tensor log_softmax(const Tensor& a) {
  auto [m, n] = as_rows(a, "log_softmax");
  auto an = a.node_ptr();
  std::vector<double> out(m * n);
  log_softmax_rows(a.values().data(), out.data(), m, n);
  return make_op("log_softmax", a.shape(), std::move(out), {an},
                 [an, m, n](TensorNode& self) {
                   an->ensure_grad();
                   for (std::size_t i = 0; i < m; ++i) {
                     double gsum = 0.0;
                     for (std::size_t j = 0; j < n; ++j)
                       gsum += self.grad[i * n + j];
                     for (std::size_t j = 0; j < n; ++j)
                       an->grad[i * n + j] +=
                           self.grad[i * n + j] -
                           std::exp(self.values[i * n + j]) * gsum;
                   }
                 });
}

Tensor select_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
  if (a.rank() != 2) {
    throw ShapeError("select_rows: expected rank 2, got " +
                     shape_str(a.shape()));
  }
  const std::size_t n = a.cols();
  for (auto i : idx) {
    if (i >= a.rows()) {
      throw std::out_of_range("select_rows: index " + std::to_string(i) +
                              " out of " + std::to_string(a.rows()));
    }
  }
  auto an = a.node_ptr();
  std::vector<double> out(idx.size() * n);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(a.values().data() + idx[r] * n, n, out.data() + r * n);
  auto idx_copy = std::make_shared<std::vector<std::size_t>>(idx);
  return make_op("select_rows", {idx.size(), n}, std::move(out), {an},
                 [an, idx_copy, n](TensorNode& self) {
                   an->ensure_grad();
                   for (std::size_t r = 0; r < idx_copy->size(); ++r)
                     for (std::size_t j = 0; j < n; ++j)
                       an->grad[(*idx_copy)[r] * n + j] +=
                           self.grad[r * n + j];
                 });
}

Tensor row(const Tensor& a, std::size_t i) {
  if (a.rank() != 2) {
    throw ShapeError("row: expected rank 2, got " + shape_str(a.shape()));
  }
  if (i >= a.rows()) {
    throw std::out_of_range("row: index " + std::to_string(i) + " out of " +
                            std::to_string(a.rows()));
  }
  const std::size_t n = a.cols();
  auto an = a.node_ptr();
  std::vector<double> out(a.values().data() + i * n,
                          a.values().data() + (i + 1) * n);
  return make_op("row", {n}, std::move(out), {an},
                 [an, i, n](TensorNode& self) {
                   an->ensure_grad();
                   for (std::size_t j = 0; j < n; ++j)
                     an->grad[i * n + j] += self.grad[j];
                 });
}

Tensor segment_mean_pool(const Tensor& a, std::size_t out_dim) {
  auto [m, n] = as_rows(a, "segment_mean_pool");
  if (out_dim == 0 || out_dim > n) {
    throw ShapeError("segment_mean_pool: cannot pool " + shape_str(a.shape()) +
                     " to " + std::to_string(out_dim) + " columns");
  }
  auto an = a.node_ptr();
  auto bounds = std::make_shared<std::vector<std::size_t>>(out_dim + 1);
  for (std::size_t j = 0; j <= out_dim; ++j) (*bounds)[j] = j * n / out_dim;
  std::vector<double> out(m * out_dim, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < out_dim; ++j) {
      const std::size_t lo = (*bounds)[j], hi = (*bounds)[j + 1];
      double s = 0.0;
      for (std::size_t l = lo; l < hi; ++l) s += a.values()[i * n + l];
      out[i * out_dim + j] = s / static_cast<double>(hi - lo);
    }
  }
  std::vector<std::size_t> out_shape =
      a.rank() == 1 ? std::vector<std::size_t>{out_dim}
                    : std::vector<std::size_t>{m, out_dim};
  return make_op("segment_mean_pool", std::move(out_shape), std::move(out),
                 {an}, [an, bounds, m, n, out_dim](TensorNode& self) {
                   an->ensure_grad();
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < out_dim; ++j) {
                       const std::size_t lo = (*bounds)[j],
                                         hi = (*bounds)[j + 1];
                       const double g = self.grad[i * out_dim + j] /
                                        static_cast<double>(hi - lo);
                       for (std::size_t l = lo; l < hi; ++l)
                         an->grad[i * n + l] += g;
                     }
                 });
}

// ---- losses ----------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy: logits must be rank 2, got " +
                     shape_str(logits.shape()));
  }
  const std::size_t m = logits.rows(), n = logits.cols();
  if (labels.size() != m) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(m) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= n) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) +
                              " out of [0, " + std::to_string(n) + ")");
    }
  }
  auto ln = logits.node_ptr();
  auto lsm = std::make_shared<std::vector<double>>(m * n);
  log_softmax_rows(logits.values().data(), lsm->data(), m, n);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    loss -= (*lsm)[i * n + static_cast<std::size_t>(labels[i])];
  loss /= static_cast<double>(m);
  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  return make_op("cross_entropy", {}, {loss}, {ln},
                 [ln, lsm, labels_copy, m, n](TensorNode& self) {
                   ln->ensure_grad();
                   const double g = self.grad[0] / static_cast<double>(m);
                   for (std::size_t i = 0; i < m; ++i) {
                     const auto y =
                         static_cast<std::size_t>((*labels_copy)[i]);
                     for (std::size_t j = 0; j < n; ++j) {
                       double p = std::exp((*lsm)[i * n + j]);
                       ln->grad[i * n + j] += g * (p - (j == y ? 1.0 : 0.0));
                     }
                   }
                 });
}

Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape()) shape_fail("kl_divergence", p, q);
  auto [m, n] = as_rows(p, "kl_divergence");
  for (std::size_t i = 0; i < m; ++i) {
    double sp = 0.0, sq = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      sp += p.values()[i * n + j];
      sq += q.values()[i * n + j];
    }
    if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6) {
      throw std::invalid_argument(
          "kl_divergence: row " + std::to_string(i) +
          " is not normalized (sums " + std::to_string(sp) + ", " +
          std::to_string(sq) + ")");
    }
  }
  auto pn = p.node_ptr();
  auto qn = q.node_ptr();
  double total = 0.0;
  for (std::size_t i = 0; i < m * n; ++i) {
    const double pv = p.values()[i];
    const double ph = std::max(pv, kKlFloor);
    const double qh = std::max(q.values()[i], kKlFloor);
    total += pv * (std::log(ph) - std::log(qh));
  }
  total /= static_cast<double>(m);
  return make_op(
      "kl_divergence", {}, {total}, {pn, qn},
      [pn, qn, m, n](TensorNode& self) {
        const double g = self.grad[0] / static_cast<double>(m);
        if (pn->requires_grad) {
          pn->ensure_grad();
          for (std::size_t i = 0; i < m * n; ++i) {
            const double pv = pn->values[i];
            const double ph = std::max(pv, kKlFloor);
            const double qh = std::max(qn->values[i], kKlFloor);
            double d = std::log(ph) - std::log(qh);
            if (pv > kKlFloor) d += 1.0;
            pn->grad[i] += g * d;
          }
        }
        if (qn->requires_grad) {
          qn->ensure_grad();
          for (std::size_t i = 0; i < m * n; ++i) {
            const double qv = qn->values[i];
            if (qv > kKlFloor)
              qn->grad[i] -= g * pn->values[i] / qv;
          }
        }
      });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || b.rank() != 1 || a.shape() != b.shape()) {
    shape_fail("cosine_similarity", a, b);
  }
  const std::size_t n = a.numel();
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += a.values()[i] * b.values()[i];
    na2 += a.values()[i] * a.values()[i];
    nb2 += b.values()[i] * b.values()[i];
  }
  if (na2 == 0.0 || nb2 == 0.0) {
    // Zero-vector convention: maximally uninformative direction.
    return Tensor::scalar(0.0);
  }
  const double na = std::sqrt(na2), nb = std::sqrt(nb2);
  double c = dot / (na * nb);
  c = std::clamp(c, -1.0, 1.0);
  const bool clamped = (dot / (na * nb)) != c;
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_op(
      "cosine_similarity", {}, {c}, {an, bn},
      [an, bn, n, na, nb, c, clamped](TensorNode& self) {
        if (clamped) return;
        const double g = self.grad[0];
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            an->grad[i] += g * (bn->values[i] / (na * nb) -
                                c * an->values[i] / (na * na));
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            bn->grad[i] += g * (an->values[i] / (na * nb) -
                                c * bn->values[i] / (nb * nb));
        }
      });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("mse", a, b);
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  const std::size_t n = a.numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.values()[i] - b.values()[i];
    s += d * d;
  }
  s /= static_cast<double>(n);
  return make_op("mse", {}, {s}, {an, bn}, [an, bn, n](TensorNode& self) {
    const double g = 2.0 * self.grad[0] / static_cast<double>(n);
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        an->grad[i] += g * (an->values[i] - bn->values[i]);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        bn->grad[i] -= g * (an->values[i] - bn->values[i]);
    }
  });
}

std::size_t argmax_row(const std::vector<double>& v, std::size_t begin,
                       std::size_t end) {
  std::size_t best = begin;
  for (std::size_t i = begin + 1; i < end; ++i)
    if (v[i] > v[best]) best = i;
  return best - begin;
}

}  // namespace heartpfl
