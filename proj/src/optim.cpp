#include "heartpfl/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace heartpfl {

Optimizer::Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {
  if (lr <= 0.0) {
    // A zero rate is allowed only through set_learning_rate (decay paths);
    // construction with a non-positive rate is always a config mistake.
    if (lr != 0.0) throw std::invalid_argument("optimizer: learning rate must be >= 0");
  }
}

void Optimizer::set_learning_rate(double lr) {
  if (lr < 0.0) throw std::invalid_argument("optimizer: learning rate must be >= 0");
  lr_ = lr;
}

void Optimizer::zero_grad(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

void Optimizer::step(std::vector<Tensor>& params) {
  if (kind_ == OptimizerKind::kAdam && m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].numel(), 0.0);
      v_[i].assign(params[i].numel(), 0.0);
    }
  }
  if (kind_ == OptimizerKind::kAdam && m_.size() != params.size()) {
    throw std::invalid_argument("optimizer: parameter list changed size");
  }
  ++step_count_;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.has_grad()) {
      throw std::invalid_argument("optimizer: missing gradient for parameter " +
                                  std::to_string(i));
    }
    const auto& g = p.grad();
    auto& w = p.values();
    if (kind_ == OptimizerKind::kSgd) {
      for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr_ * g[j];
    } else {
      if (m_[i].size() != w.size()) {
        throw std::invalid_argument("optimizer: parameter shape changed");
      }
      const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_count_));
      const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_count_));
      for (std::size_t j = 0; j < w.size(); ++j) {
        m_[i][j] = kBeta1 * m_[i][j] + (1.0 - kBeta1) * g[j];
        v_[i][j] = kBeta2 * v_[i][j] + (1.0 - kBeta2) * g[j] * g[j];
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        w[j] -= lr_ * mhat / (std::sqrt(vhat) + kEps);
      }
    }
  }
}

}  // namespace heartpfl
