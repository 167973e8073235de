#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "heartpfl/hda.hpp"
#include "heartpfl/model.hpp"

namespace heartpfl::metrics {

// Argmax-match fraction; ties break toward the lowest class index.
double accuracy(const Model& model, const Dataset& data,
                const std::vector<std::size_t>& idx);
double accuracy(const Model& model, const Dataset& data);

// Mean over (sample, layer) of cos(global feature, personalized prototype);
// samples whose class lacks a prototype are skipped.
double representation_alignment(const Model& global,
                                const hda::PrototypeSet& protos,
                                const Dataset& data,
                                const std::vector<std::size_t>& idx);

// Population standard deviation of per-sample final-tap feature l2 norms.
double feature_norm_variance(const Model& model, const Dataset& data,
                             const std::vector<std::size_t>& idx);

struct LandscapeGrid {
  double half_width = 1.0;
  std::size_t resolution = 21;
  std::vector<double> offsets_a, offsets_b;  // grid axes
  std::vector<double> loss;                  // row-major [a][b]

  double at(std::size_t ia, std::size_t ib) const {
    return loss[ia * offsets_b.size() + ib];
  }
};

// Generic grid sweep over a flattened parameter vector along two seeded unit
// directions; parameters are restored bit-identically afterward.
LandscapeGrid landscape_sweep(std::vector<Tensor>& params, double half_width,
                              std::size_t resolution, std::uint64_t seed,
                              const std::function<double()>& eval_loss);

// Mean cross-entropy surface around the model's adapter parameters.
LandscapeGrid loss_landscape(Model& model, const Dataset& data,
                             const std::vector<std::size_t>& idx,
                             double half_width, std::size_t resolution,
                             std::uint64_t seed);

// Mean cross-entropy of the model on the given samples (no training noise).
double eval_cross_entropy(const Model& model, const Dataset& data,
                          const std::vector<std::size_t>& idx);

void save_landscape_csv(const LandscapeGrid& grid, const std::string& path,
                        std::uint64_t config_hash, std::uint64_t seed);

}  // namespace heartpfl::metrics
