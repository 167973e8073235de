#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "heartpfl/data.hpp"
#include "heartpfl/tensor.hpp"

namespace heartpfl {

struct BackboneSpec {
  std::size_t input_dim = 16;
  std::vector<std::size_t> widths = {64, 64, 64, 64};
  std::size_t num_classes = 10;
  // activation is fixed relu

  std::size_t num_stages() const { return widths.size(); }
  void validate() const;
};

// One representational stage: two linear+relu layers, mirroring the
// multi-layer stages of the full-scale backbone this stands in for.
struct BackboneStage {
  Tensor w1, b1, w2, b2;
};

struct Backbone {
  BackboneSpec spec;
  std::vector<BackboneStage> stages;

  static Backbone init(const BackboneSpec& spec, Rng& rng,
                       bool requires_grad = true);
  void set_requires_grad(bool rg);
  std::vector<Tensor> params();
  std::size_t param_count() const;
  std::uint64_t checksum() const;
};

std::size_t backbone_param_count(const BackboneSpec& spec);
std::size_t adapter_param_count(const BackboneSpec& spec);

// Norm-dropout-linear block applied residually after its stage.
struct AdapterBlock {
  Tensor norm_scale, norm_shift, linear;
};

struct Adapter {
  std::vector<AdapterBlock> blocks;
  Tensor head_w, head_b;
  double dropout_rate = 0.1;

  // Identity-initialized blocks (unit scale, zero shift, zero linear map)
  // with the given classifier head.
  static Adapter init(const BackboneSpec& spec, double dropout_rate,
                      const Tensor& head_w, const Tensor& head_b);

  Adapter clone(bool requires_grad) const;
  void assign_from(const Adapter& src);  // copy values in place
  std::vector<Tensor> trainable();
  std::vector<const Tensor*> tensors() const;
  std::size_t param_count() const;
  std::uint64_t checksum() const;
};

enum class ModelRole { kGlobal, kPersonalized, kLocal };
const char* role_name(ModelRole role);

struct FeatureBundle {
  std::vector<Tensor> features;  // one pooled [B x proto_dim] matrix per tap
  Tensor logits;                 // [B x V]
};

// Frozen backbone shared read-only across models; the adapter is the only
// trainable state.
struct Model {
  std::shared_ptr<const Backbone> backbone;
  Adapter adapter;
  ModelRole role = ModelRole::kGlobal;
  std::size_t proto_dim = 32;

  const BackboneSpec& spec() const { return backbone->spec; }
  std::size_t num_taps() const { return backbone->spec.num_stages(); }
  Model clone(ModelRole new_role, bool trainable) const;
};

struct ParamCounts {
  std::size_t frozen = 0;
  std::size_t trainable = 0;
};

ParamCounts count_params(const Model& model);

// Full feature pass: per-stage adapted features pooled to proto_dim, plus
// logits. rng is only consumed when train and the dropout rate is nonzero.
FeatureBundle forward_with_features(const Model& model, const Tensor& x,
                                    bool train, Rng* rng = nullptr);
Tensor forward_logits(const Model& model, const Tensor& x, bool train,
                      Rng* rng = nullptr);

struct PretrainConfig {
  std::size_t epochs = 5;
  double lr = 0.001;
  std::size_t batch = 32;
  double dropout_rate = 0.1;
  std::size_t proto_dim = 32;
};

// Supervised pretraining of backbone+head on pooled data, then freeze; the
// returned global model carries the pretrained head and identity adapters.
Model pretrain_and_freeze(const BackboneSpec& spec, const Dataset& pool,
                          const PretrainConfig& cfg, std::uint64_t seed);

Adapter clone_adapter(const Model& src);

void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

}  // namespace heartpfl
