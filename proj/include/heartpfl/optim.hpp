#pragma once

#include <cstdint>
#include <vector>

#include "heartpfl/tensor.hpp"

namespace heartpfl {

enum class OptimizerKind { kSgd, kAdam };

// Plain gradient descent or adaptive-moment updates over a fixed parameter
// list. Moment buffers are keyed positionally and sized on first step.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr);

  // Applies one update; every parameter must carry a materialized gradient.
  void step(std::vector<Tensor>& params);

  void zero_grad(std::vector<Tensor>& params);

  OptimizerKind kind() const { return kind_; }
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr);
  std::int64_t step_count() const { return step_count_; }

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

 private:
  OptimizerKind kind_;
  double lr_;
  std::int64_t step_count_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace heartpfl
