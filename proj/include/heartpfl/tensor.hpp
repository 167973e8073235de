#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "heartpfl/rng.hpp"

namespace heartpfl {

// Thrown when operand shapes do not conform; message names the op and shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Thrown when a forward op produces a non-finite element.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// One recorded value in the computation graph. Non-leaf nodes carry a
// backprop closure that pulls this node's grad into its parents.
struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until materialized
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> backprop;

  std::size_t numel() const { return values.size(); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

// Value-semantic handle to a shared graph node. 64-bit floats throughout.
class Tensor {
 public:
  Tensor() = default;

  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor vec(std::vector<double> v, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> v, bool requires_grad = false);
  static Tensor zeros(const std::vector<std::size_t>& shape,
                      bool requires_grad = false);
  static Tensor from(std::vector<std::size_t> shape, std::vector<double> v,
                     bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->numel(); }
  std::size_t rows() const;
  std::size_t cols() const;

  const std::vector<double>& values() const { return node_->values; }
  std::vector<double>& values() { return node_->values; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    if (!rg) node_->grad.clear();  // frozen tensors carry no gradient state
  }

  bool has_grad() const { return node_->grad.size() == node_->values.size(); }
  const std::vector<double>& grad() const;
  void zero_grad();

  // Leaf copy of the current values, detached from any graph.
  Tensor detached(bool requires_grad = false) const;

  TensorNode* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

  static Tensor wrap(NodePtr n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  NodePtr node_;
};

// Ordered record of the operations reachable from a root, topologically
// sorted so that parents precede consumers. backward() walks it once in
// reverse.
class Tape {
 public:
  static Tape build(const Tensor& root);
  const std::vector<TensorNode*>& nodes() const { return nodes_; }

 private:
  std::vector<TensorNode*> nodes_;
};

// ---- forward ops ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// Same shape, or b a length-cols vector broadcast over rows, or b scalar.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise; b may be scalar
Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor normalize_rows(const Tensor& a);
Tensor dropout(const Tensor& a, double p, bool train, Rng& rng);
// Row-wise standardization with learnable per-column scale/shift.
Tensor feature_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
Tensor select_rows(const Tensor& a, const std::vector<std::size_t>& idx);
Tensor row(const Tensor& a, std::size_t i);
// Contiguous-segment mean pooling of each row down to out_dim columns.
Tensor segment_mean_pool(const Tensor& a, std::size_t out_dim);

// ---- losses ---------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);
// Rows of p and q must sum to 1 within 1e-6. Mean row KL for matrices.
Tensor kl_divergence(const Tensor& p, const Tensor& q);
inline constexpr double kKlFloor = 1e-12;
// Vectors only; zero-vector input yields 0 by convention.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
Tensor mse(const Tensor& a, const Tensor& b);

// ---- backward -------------------------------------------------------------

// Fills grad of every requires_grad leaf reachable from `loss` (scalar).
void backward(const Tensor& loss);

// ---- value-level helpers (no graph) ---------------------------------------

std::size_t argmax_row(const std::vector<double>& v, std::size_t begin,
                       std::size_t end);
std::string shape_str(const std::vector<std::size_t>& shape);

}  // namespace heartpfl
