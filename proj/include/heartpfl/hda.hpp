#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "heartpfl/model.hpp"

namespace heartpfl::hda {

// Per-(layer, class) pooled prototype vectors; only locally present classes
// hold an entry.
struct PrototypeSet {
  std::size_t proto_dim = 0;
  std::vector<std::vector<Tensor>> layer_class;  // [layer][class]
  std::vector<std::size_t> counts;               // per class

  std::size_t num_layers() const { return layer_class.size(); }
  bool has_class(int v) const {
    return v >= 0 && static_cast<std::size_t>(v) < counts.size() &&
           counts[static_cast<std::size_t>(v)] > 0;
  }
  const Tensor& at(std::size_t layer, int v) const;
};

// Split of tap layers into the cosine-aligned early stage and the
// MSE-aligned deep stage.
struct StagePartition {
  std::vector<char> early_mask;  // size L

  static StagePartition split_prefix(std::size_t num_layers,
                                     std::size_t early_count);
  std::size_t num_layers() const { return early_mask.size(); }
  bool is_early(std::size_t layer) const;
};

enum class PrototypeMode { kEpochSnapshot, kPerBatch };
PrototypeMode prototype_mode_from_string(const std::string& s);
const char* prototype_mode_name(PrototypeMode m);

struct HdaConfig {
  double lambda_hda = 1.0;
  double lambda_prox = 1.0;
  StagePartition stages;
  PrototypeMode prototype_mode = PrototypeMode::kEpochSnapshot;

  void validate() const;
};

// Snapshot prototypes: class means of pooled features under the current
// model, dropout disabled, detached from any gradient path.
PrototypeSet extract_prototypes(const Model& model, const Dataset& data,
                                const std::vector<std::size_t>& idx);

// Differentiable prototypes from a live feature bundle (per-batch mode).
PrototypeSet batch_prototypes(const FeatureBundle& bundle,
                              const std::vector<int>& labels,
                              std::size_t num_classes);

// Early stage: 1 - cos; deep stage: mse. `layer` is 0-based.
Tensor alignment_term(const Tensor& f_global, const Tensor& prototype,
                      std::size_t layer, const StagePartition& stages);

struct HdaLossResult {
  Tensor loss;            // scalar
  std::size_t skipped = 0;  // batch samples whose class lacks a prototype
};

HdaLossResult hda_loss(const Model& global_model, const PrototypeSet& protos,
                       const Tensor& x, const std::vector<int>& labels,
                       const StagePartition& stages);

struct ObjectiveResult {
  Tensor loss;  // scalar, gradient flows to the personalized adapter only
  double ce_value = 0.0;
  double prox_value = 0.0;
  double hda_value = 0.0;
  std::size_t skipped = 0;
};

// CE + lambda_prox * 1/2 ||omega - theta||^2 + lambda_hda * hda term. The
// global model is treated as a constant; prototypes follow cfg.prototype_mode.
ObjectiveResult personalized_objective(const Tensor& x,
                                       const std::vector<int>& labels,
                                       Model& personalized,
                                       const Model& global_model,
                                       const PrototypeSet& snapshot_protos,
                                       const HdaConfig& cfg, Rng& dropout_rng);

struct ClientTrainConfig {
  std::size_t epochs = 2;
  double lr = 0.01;
  std::size_t batch = 16;
};

struct UpdateStats {
  std::vector<double> epoch_losses;
  std::size_t skipped_samples = 0;
};

UpdateStats client_personalized_update(Model& personalized,
                                       const Model& global_model,
                                       const Dataset& data,
                                       const std::vector<std::size_t>& train_idx,
                                       const ClientTrainConfig& train,
                                       const HdaConfig& cfg,
                                       std::uint64_t seed);

// Structured dump for the metrics/analysis side.
std::string export_prototypes(const PrototypeSet& protos);

}  // namespace heartpfl::hda
