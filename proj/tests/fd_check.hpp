#pragma once

// Central finite-difference gradient oracle, independent of the backward
// pass it checks. The loss builder must be a pure function of the current
// parameter values (fix any rng seeds inside it).

#include <cmath>
#include <functional>
#include <vector>

#include "heartpfl/tensor.hpp"

namespace heartpfl::testing {

struct FdReport {
  double max_err = 0.0;
  std::size_t checked = 0;
};

inline double fd_rel_err(double analytic, double fd) {
  return std::abs(analytic - fd) /
         std::max({1.0, std::abs(analytic), std::abs(fd)});
}

inline FdReport fd_compare(std::vector<Tensor> params,
                           const std::function<Tensor()>& make_loss,
                           double h = 1e-5) {
  for (auto& p : params) p.zero_grad();
  backward(make_loss());
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(p.grad());

  FdReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& w = params[pi].values();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double saved = w[j];
      w[j] = saved + h;
      const double up = make_loss().item();
      w[j] = saved - h;
      const double down = make_loss().item();
      w[j] = saved;
      const double fd = (up - down) / (2.0 * h);
      report.max_err = std::max(report.max_err, fd_rel_err(grads[pi][j], fd));
      ++report.checked;
    }
  }
  return report;
}

// Values away from relu/clamp kinks: magnitude in [0.1, 1.1].
inline std::vector<double> random_signed(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) {
    x = rng.uniform(0.1, 1.1) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
  }
  return v;
}

inline std::vector<double> random_distribution_row(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  double total = 0.0;
  for (auto& x : v) {
    x = rng.uniform(0.05, 1.0);
    total += x;
  }
  for (auto& x : v) x /= total;
  return v;
}

}  // namespace heartpfl::testing
