#include "heartpfl/hda.hpp"

#include <cmath>
#include <numeric>

#include "heartpfl/optim.hpp"
#include "json.hpp"

namespace heartpfl::hda {

const Tensor& PrototypeSet::at(std::size_t layer, int v) const {
  if (layer >= layer_class.size() || !has_class(v)) {
    throw std::out_of_range("prototype_set: no prototype for layer " +
                            std::to_string(layer) + " class " +
                            std::to_string(v));
  }
  return layer_class[layer][static_cast<std::size_t>(v)];
}

StagePartition StagePartition::split_prefix(std::size_t num_layers,
                                            std::size_t early_count) {
  if (early_count > num_layers) {
    throw std::invalid_argument("stage_partition: early_count exceeds layer count");
  }
  StagePartition p;
  p.early_mask.assign(num_layers, 0);
  for (std::size_t i = 0; i < early_count; ++i) p.early_mask[i] = 1;
  return p;
}

bool StagePartition::is_early(std::size_t layer) const {
  if (layer >= early_mask.size()) {
    throw std::out_of_range("stage_partition: layer " + std::to_string(layer) +
                            " outside the partition");
  }
  return early_mask[layer] != 0;
}

PrototypeMode prototype_mode_from_string(const std::string& s) {
  if (s == "epoch_snapshot") return PrototypeMode::kEpochSnapshot;
  if (s == "per_batch") return PrototypeMode::kPerBatch;
  throw std::invalid_argument("unknown prototype_mode: " + s);
}

const char* prototype_mode_name(PrototypeMode m) {
  return m == PrototypeMode::kEpochSnapshot ? "epoch_snapshot" : "per_batch";
}

void HdaConfig::validate() const {
  if (lambda_hda < 0.0 || lambda_prox < 0.0) {
    throw std::invalid_argument("hda: loss weights must be >= 0");
  }
  if (stages.num_layers() == 0) {
    throw std::invalid_argument("hda: empty stage partition");
  }
}

PrototypeSet extract_prototypes(const Model& model, const Dataset& data,
                                const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw std::invalid_argument("extract_prototypes: empty data");
  const std::size_t num_layers = model.num_taps();
  const std::size_t num_classes = data.num_classes;
  PrototypeSet out;
  out.proto_dim = model.proto_dim;
  out.counts.assign(num_classes, 0);
  out.layer_class.assign(num_layers, std::vector<Tensor>(num_classes));

  Tensor x = data.batch_features(idx);
  FeatureBundle bundle = forward_with_features(model, x, /*train=*/false);
  std::vector<int> labels = data.batch_labels(idx);
  for (int y : labels) ++out.counts[static_cast<std::size_t>(y)];

  for (std::size_t l = 0; l < num_layers; ++l) {
    const auto& f = bundle.features[l].values();
    std::vector<std::vector<double>> acc(num_classes,
                                         std::vector<double>(out.proto_dim, 0.0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
      auto& a = acc[static_cast<std::size_t>(labels[i])];
      for (std::size_t j = 0; j < out.proto_dim; ++j) {
        a[j] += f[i * out.proto_dim + j];
      }
    }
    for (std::size_t v = 0; v < num_classes; ++v) {
      if (out.counts[v] == 0) continue;
      for (auto& a : acc[v]) a /= static_cast<double>(out.counts[v]);
      out.layer_class[l][v] = Tensor::vec(std::move(acc[v]));
    }
  }
  return out;
}

PrototypeSet batch_prototypes(const FeatureBundle& bundle,
                              const std::vector<int>& labels,
                              std::size_t num_classes) {
  PrototypeSet out;
  if (bundle.features.empty()) {
    throw std::invalid_argument("batch_prototypes: bundle has no features");
  }
  out.proto_dim = bundle.features[0].cols();
  out.counts.assign(num_classes, 0);
  out.layer_class.assign(bundle.features.size(), std::vector<Tensor>(num_classes));
  std::vector<std::vector<std::size_t>> rows_of(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    rows_of[static_cast<std::size_t>(labels[i])].push_back(i);
    ++out.counts[static_cast<std::size_t>(labels[i])];
  }
  for (std::size_t l = 0; l < bundle.features.size(); ++l) {
    for (std::size_t v = 0; v < num_classes; ++v) {
      if (rows_of[v].empty()) continue;
      Tensor sel = select_rows(bundle.features[l], rows_of[v]);
      // Column means via a ones row vector keep the mean differentiable.
      Tensor ones = Tensor::matrix(1, rows_of[v].size(),
                                   std::vector<double>(rows_of[v].size(), 1.0));
      Tensor summed = row(matmul(ones, sel), 0);
      out.layer_class[l][v] =
          scale(summed, 1.0 / static_cast<double>(rows_of[v].size()));
    }
  }
  return out;
}

Tensor alignment_term(const Tensor& f_global, const Tensor& prototype,
                      std::size_t layer, const StagePartition& stages) {
  if (f_global.shape() != prototype.shape() || f_global.rank() != 1) {
    throw ShapeError("alignment_term: feature " + shape_str(f_global.shape()) +
                     " vs prototype " + shape_str(prototype.shape()));
  }
  if (stages.is_early(layer)) {
    Tensor c = cosine_similarity(f_global, prototype);
    return add(scale(c, -1.0), Tensor::scalar(1.0));
  }
  return mse(f_global, prototype);
}

HdaLossResult hda_loss(const Model& global_model, const PrototypeSet& protos,
                       const Tensor& x, const std::vector<int>& labels,
                       const StagePartition& stages) {
  if (stages.num_layers() != global_model.num_taps()) {
    throw std::invalid_argument("hda_loss: stage partition does not cover the taps");
  }
  FeatureBundle bundle = forward_with_features(global_model, x, /*train=*/false);
  const std::size_t num_layers = bundle.features.size();
  HdaLossResult out;
  Tensor acc = Tensor::scalar(0.0);
  std::size_t effective = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!protos.has_class(labels[i])) {
      ++out.skipped;
      continue;
    }
    ++effective;
    for (std::size_t l = 0; l < num_layers; ++l) {
      Tensor f = row(bundle.features[l], i);
      Tensor term = alignment_term(f, protos.at(l, labels[i]), l, stages);
      acc = add(acc, term);
    }
  }
  if (effective == 0) {
    out.loss = Tensor::scalar(0.0);
    return out;
  }
  out.loss = scale(acc, 1.0 / (static_cast<double>(effective) *
                               static_cast<double>(num_layers)));
  return out;
}

ObjectiveResult personalized_objective(const Tensor& x,
                                       const std::vector<int>& labels,
                                       Model& personalized,
                                       const Model& global_model,
                                       const PrototypeSet& snapshot_protos,
                                       const HdaConfig& cfg, Rng& dropout_rng) {
  cfg.validate();
  ObjectiveResult out;
  Tensor logits = forward_logits(personalized, x, /*train=*/true, &dropout_rng);
  Tensor loss = cross_entropy(logits, labels);
  out.ce_value = loss.item();

  if (cfg.lambda_prox > 0.0) {
    auto omega = personalized.adapter.tensors();
    auto theta = global_model.adapter.tensors();
    Tensor acc = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < omega.size(); ++i) {
      Tensor d = sub(*omega[i], *theta[i]);
      acc = add(acc, sum_all(mul(d, d)));
    }
    out.prox_value = 0.5 * acc.item();
    loss = add(loss, scale(acc, 0.5 * cfg.lambda_prox));
  }

  if (cfg.lambda_hda > 0.0) {
    HdaLossResult hl;
    if (cfg.prototype_mode == PrototypeMode::kPerBatch) {
      FeatureBundle own = forward_with_features(personalized, x, /*train=*/false);
      PrototypeSet live = batch_prototypes(own, labels, snapshot_protos.counts.size());
      hl = hda_loss(global_model, live, x, labels, cfg.stages);
    } else {
      hl = hda_loss(global_model, snapshot_protos, x, labels, cfg.stages);
    }
    out.hda_value = hl.loss.item();
    out.skipped = hl.skipped;
    loss = add(loss, scale(hl.loss, cfg.lambda_hda));
  }

  out.loss = loss;
  return out;
}

UpdateStats client_personalized_update(Model& personalized,
                                       const Model& global_model,
                                       const Dataset& data,
                                       const std::vector<std::size_t>& train_idx,
                                       const ClientTrainConfig& train,
                                       const HdaConfig& cfg,
                                       std::uint64_t seed) {
  cfg.validate();
  if (train_idx.empty()) {
    throw std::invalid_argument("client_personalized_update: no train data");
  }
  UpdateStats stats;
  std::vector<Tensor> params = personalized.adapter.trainable();
  Optimizer opt(OptimizerKind::kSgd, train.lr);
  Rng order_rng(derive_seed(seed, hash_tag("order")));
  Rng dropout_rng(derive_seed(seed, hash_tag("dropout")));
  std::vector<std::size_t> order(train_idx);
  const std::size_t batch = std::max<std::size_t>(1, train.batch);
  const bool need_snapshot =
      cfg.lambda_hda > 0.0 && cfg.prototype_mode == PrototypeMode::kEpochSnapshot;

  PrototypeSet snapshot;
  if (cfg.lambda_hda > 0.0 && cfg.prototype_mode == PrototypeMode::kPerBatch) {
    snapshot.counts.assign(data.num_classes, 0);  // class-count carrier only
  }
  for (std::size_t epoch = 0; epoch < train.epochs; ++epoch) {
    if (need_snapshot) {
      snapshot = extract_prototypes(personalized, data, train_idx);
    }
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t off = 0; off < order.size(); off += batch) {
      const std::size_t hi = std::min(order.size(), off + batch);
      std::vector<std::size_t> idx(order.begin() + off, order.begin() + hi);
      Tensor x = data.batch_features(idx);
      auto obj = personalized_objective(x, data.batch_labels(idx), personalized,
                                        global_model, snapshot, cfg, dropout_rng);
      opt.zero_grad(params);
      backward(obj.loss);
      opt.step(params);
      epoch_loss += obj.loss.item();
      stats.skipped_samples += obj.skipped;
      ++batches;
    }
    stats.epoch_losses.push_back(batches ? epoch_loss / static_cast<double>(batches)
                                         : 0.0);
  }
  return stats;
}

std::string export_prototypes(const PrototypeSet& protos) {
  nlohmann::json j;
  j["proto_dim"] = protos.proto_dim;
  j["counts"] = protos.counts;
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < protos.num_layers(); ++l) {
    nlohmann::json classes = nlohmann::json::object();
    for (std::size_t v = 0; v < protos.counts.size(); ++v) {
      if (protos.counts[v] == 0) continue;
      classes[std::to_string(v)] = protos.layer_class[l][v].values();
    }
    layers.push_back(std::move(classes));
  }
  j["layers"] = std::move(layers);
  return j.dump();
}

}  // namespace heartpfl::hda
