#include "heartpfl/akt.hpp"

#include <cmath>
#include <numeric>

#include "heartpfl/optim.hpp"

namespace heartpfl::akt {

void PgdConfig::validate() const {
  if (epsilon < 0.0) throw std::invalid_argument("pgd: epsilon must be >= 0");
  if (step_size <= 0.0) throw std::invalid_argument("pgd: step_size must be > 0");
  if (steps < 1) throw std::invalid_argument("pgd: steps must be >= 1");
  if (epsilon > 0.0 && step_size > epsilon && !allow_large_step) {
    throw std::invalid_argument(
        "pgd: step_size exceeds epsilon (set allow_large_step to override)");
  }
}

void AktConfig::validate() const {
  if (!use_clean && !use_adversarial) {
    throw std::invalid_argument("akt: at least one of clean/adversarial views required");
  }
  if (server_lr <= 0.0) throw std::invalid_argument("akt: server_lr must be > 0");
  if (server_batch == 0) throw std::invalid_argument("akt: server_batch must be > 0");
  pgd.validate();
}

Tensor ensemble_probs(const std::vector<Model>& locals, const Tensor& x) {
  if (locals.empty()) {
    throw std::invalid_argument("ensemble_probs: need at least one model");
  }
  Tensor acc;
  std::size_t out_dim = 0;
  for (const auto& m : locals) {
    Tensor p = softmax(forward_logits(m, x, /*train=*/false));
    if (!acc.defined()) {
      acc = p;
      out_dim = p.cols();
    } else {
      if (p.cols() != out_dim) {
        throw ShapeError("ensemble_probs: mismatched output dims " +
                         std::to_string(p.cols()) + " vs " +
                         std::to_string(out_dim));
      }
      acc = add(acc, p);
    }
  }
  return scale(acc, 1.0 / static_cast<double>(locals.size()));
}

namespace {

Tensor reduce(Tensor mean_loss, std::size_t batch_rows, bool sum_reduction) {
  if (!sum_reduction) return mean_loss;
  return scale(mean_loss, static_cast<double>(batch_rows));
}

}  // namespace

Tensor ekt_loss(const Model& global, const std::vector<Model>& locals,
                const Tensor& x, bool sum_reduction) {
  if (x.rank() != 2 || x.rows() == 0) {
    throw std::invalid_argument("ekt_loss: empty proxy batch");
  }
  Tensor ensemble = ensemble_probs(locals, x);
  Tensor pg = softmax(forward_logits(global, x, /*train=*/false));
  return reduce(kl_divergence(ensemble, pg), x.rows(), sum_reduction);
}

Tensor symmetric_kl_loss(const Model& global, const std::vector<Model>& locals,
                         const Tensor& x, bool sum_reduction) {
  if (x.rank() != 2 || x.rows() == 0) {
    throw std::invalid_argument("symmetric_kl_loss: empty proxy batch");
  }
  Tensor ensemble = ensemble_probs(locals, x);
  Tensor pg = softmax(forward_logits(global, x, /*train=*/false));
  Tensor both = add(kl_divergence(ensemble, pg), kl_divergence(pg, ensemble));
  return reduce(both, x.rows(), sum_reduction);
}

Tensor pgd_generate(const Tensor& x, const std::vector<int>& labels,
                    const ForwardFn& forward, std::size_t num_classes,
                    const PgdConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (x.rank() != 2 || labels.size() != x.rows()) {
    throw ShapeError("pgd_generate: batch " + shape_str(x.shape()) + " with " +
                     std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw std::out_of_range("pgd_generate: label " + std::to_string(y) +
                              " outside the model's class space");
    }
  }
  if (cfg.epsilon == 0.0) return x.detached(false);

  const auto& base = x.values();
  // Projection in measured coordinates: clamping to base +- eps can land one
  // ulp outside the ball after rounding, so pull endpoints inward until
  // |adv - base| <= eps holds for the exact subtraction the contract checks.
  auto project = [eps = cfg.epsilon](double v, double center) {
    v = std::clamp(v, center - eps, center + eps);
    while (v - center > eps || center - v > eps) v = std::nextafter(v, center);
    return v;
  };
  std::vector<double> adv(base);
  if (cfg.random_init) {
    Rng rng(derive_seed(seed, hash_tag("pgd-init")));
    for (std::size_t i = 0; i < adv.size(); ++i) {
      adv[i] = project(adv[i] + rng.uniform(-cfg.epsilon, cfg.epsilon), base[i]);
    }
  }
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    Tensor xt = Tensor::matrix(x.rows(), x.cols(), adv, /*requires_grad=*/true);
    Tensor loss = cross_entropy(forward(xt), labels);
    backward(loss);
    const auto& g = xt.grad();
    for (std::size_t i = 0; i < adv.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw NumericError("pgd_generate: non-finite gradient");
      }
      const double step = g[i] > 0.0 ? cfg.step_size : (g[i] < 0.0 ? -cfg.step_size : 0.0);
      adv[i] = project(adv[i] + step, base[i]);
    }
  }
  return Tensor::matrix(x.rows(), x.cols(), std::move(adv));
}

Tensor pgd_generate(const Tensor& x, const std::vector<int>& labels,
                    const Model& model, const PgdConfig& cfg,
                    std::uint64_t seed) {
  return pgd_generate(
      x, labels,
      [&model](const Tensor& xt) {
        return forward_logits(model, xt, /*train=*/false);
      },
      model.spec().num_classes, cfg, seed);
}

std::vector<Tensor> build_proxy_views(const Tensor& x,
                                      const std::vector<int>& labels,
                                      const std::vector<Model>& locals,
                                      const Model& global, const AktConfig& cfg,
                                      std::uint64_t seed) {
  cfg.validate();
  std::vector<Tensor> views;
  if (cfg.use_clean) views.push_back(x);
  if (cfg.use_adversarial) {
    std::uint64_t view_idx = 0;
    for (const auto& local : locals) {
      views.push_back(pgd_generate(x, labels, local, cfg.pgd,
                                   derive_seed(seed, hash_tag("view"), view_idx)));
      ++view_idx;
    }
    views.push_back(pgd_generate(x, labels, global, cfg.pgd,
                                 derive_seed(seed, hash_tag("view"), view_idx)));
  }
  return views;
}

AktStats akt_update(Model& global, const std::vector<Model>& locals,
                    const Dataset& proxy, bool proxy_in_domain,
                    const AktConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (proxy.size() == 0) throw std::invalid_argument("akt_update: empty proxy");
  if (locals.empty()) throw std::invalid_argument("akt_update: no local models");

  AktStats stats;
  std::vector<Tensor> params = global.adapter.trainable();
  Optimizer opt(OptimizerKind::kAdam, cfg.server_lr);
  Rng order_rng(derive_seed(seed, hash_tag("server-order")));
  std::vector<std::size_t> order(proxy.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.server_epochs; ++epoch) {
    order_rng.shuffle(order);
    std::uint64_t batch_index = 0;
    for (std::size_t off = 0; off < order.size(); off += cfg.server_batch) {
      const std::size_t hi = std::min(order.size(), off + cfg.server_batch);
      std::vector<std::size_t> idx(order.begin() + off, order.begin() + hi);
      Tensor x = proxy.batch_features(idx);
      std::vector<int> labels;
      if (proxy_in_domain) {
        labels = proxy.batch_labels(idx);
      } else {
        // Label-space mismatch: pseudo-label with the global model's argmax.
        Tensor logits = forward_logits(global, x, /*train=*/false);
        const std::size_t v = logits.cols();
        labels.resize(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
          labels[i] = static_cast<int>(
              argmax_row(logits.values(), i * v, (i + 1) * v));
        }
      }
      auto views = build_proxy_views(x, labels, locals, global, cfg,
                                     derive_seed(seed, hash_tag("batch"), epoch,
                                                 batch_index));
      // PGD against the global model leaves stale gradients behind.
      opt.zero_grad(params);
      Tensor acc = Tensor::scalar(0.0);
      for (const auto& view : views) {
        Tensor term = cfg.use_symmetric_kl
                          ? symmetric_kl_loss(global, locals, view, cfg.sum_reduction)
                          : ekt_loss(global, locals, view, cfg.sum_reduction);
        acc = add(acc, term);
      }
      Tensor loss = scale(acc, 1.0 / static_cast<double>(views.size()));
      backward(loss);
      opt.step(params);
      stats.losses.push_back(loss.item());
      ++batch_index;
    }
  }
  return stats;
}

}  // namespace heartpfl::akt
