#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "heartpfl/model.hpp"

namespace heartpfl::akt {

struct PgdConfig {
  double epsilon = 0.1;      // l-inf radius, in feature units
  double step_size = 0.025;  // epsilon / 4
  std::size_t steps = 5;
  bool random_init = true;
  bool allow_large_step = false;

  void validate() const;
};

struct AktConfig {
  bool use_clean = true;
  bool use_adversarial = true;
  bool use_symmetric_kl = true;
  std::size_t server_epochs = 1;
  std::size_t server_batch = 256;
  double server_lr = 0.001;
  bool sum_reduction = false;  // per-batch sum instead of mean
  PgdConfig pgd;

  void validate() const;
};

// Arithmetic mean of the local models' softmax outputs.
Tensor ensemble_probs(const std::vector<Model>& locals, const Tensor& x);

// One-way distillation: KL(ensemble || global) over the batch.
Tensor ekt_loss(const Model& global, const std::vector<Model>& locals,
                const Tensor& x, bool sum_reduction = false);

// KL(ensemble || global) + KL(global || ensemble).
Tensor symmetric_kl_loss(const Model& global, const std::vector<Model>& locals,
                         const Tensor& x, bool sum_reduction = false);

// T steps of sign-gradient ascent on CE with l-inf projection onto the
// epsilon ball around x. Model parameter values are untouched.
using ForwardFn = std::function<Tensor(const Tensor&)>;  // batch -> logits
Tensor pgd_generate(const Tensor& x, const std::vector<int>& labels,
                    const ForwardFn& forward, std::size_t num_classes,
                    const PgdConfig& cfg, std::uint64_t seed);
Tensor pgd_generate(const Tensor& x, const std::vector<int>& labels,
                    const Model& model, const PgdConfig& cfg,
                    std::uint64_t seed);

// Clean view (if enabled) plus adversarial views against each local model
// in ascending order and finally against the global model.
std::vector<Tensor> build_proxy_views(const Tensor& x,
                                      const std::vector<int>& labels,
                                      const std::vector<Model>& locals,
                                      const Model& global, const AktConfig& cfg,
                                      std::uint64_t seed);

struct AktStats {
  std::vector<double> losses;  // one entry per optimizer step
};

// E_server passes of adaptive-moment updates of the global adapter on the
// distillation loss accumulated over all proxy views. Out-of-domain proxies
// use the global model's argmax predictions as PGD labels.
AktStats akt_update(Model& global, const std::vector<Model>& locals,
                    const Dataset& proxy, bool proxy_in_domain,
                    const AktConfig& cfg, std::uint64_t seed);

}  // namespace heartpfl::akt
