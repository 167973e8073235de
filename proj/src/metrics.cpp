#include "heartpfl/metrics.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

namespace heartpfl::metrics {

namespace {

std::vector<std::size_t> all_indices(const Dataset& data) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

double cosine_values(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

}  // namespace

double accuracy(const Model& model, const Dataset& data,
                const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw std::invalid_argument("accuracy: empty evaluation set");
  Tensor logits = forward_logits(model, data.batch_features(idx), /*train=*/false);
  const std::size_t v = logits.cols();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto pred = argmax_row(logits.values(), i * v, (i + 1) * v);
    if (static_cast<int>(pred) == data.labels[idx[i]]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(idx.size());
}

double accuracy(const Model& model, const Dataset& data) {
  return accuracy(model, data, all_indices(data));
}

double representation_alignment(const Model& global,
                                const hda::PrototypeSet& protos,
                                const Dataset& data,
                                const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw std::invalid_argument("representation_alignment: empty probe");
  FeatureBundle bundle =
      forward_with_features(global, data.batch_features(idx), /*train=*/false);
  const std::size_t num_layers = bundle.features.size();
  const std::size_t d = protos.proto_dim;
  double total = 0.0;
  std::size_t terms = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const int y = data.labels[idx[i]];
    if (!protos.has_class(y)) continue;
    for (std::size_t l = 0; l < num_layers; ++l) {
      const auto& f = bundle.features[l].values();
      std::vector<double> fi(f.begin() + static_cast<std::ptrdiff_t>(i * d),
                             f.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
      total += cosine_values(fi, protos.at(l, y).values());
      ++terms;
    }
  }
  return terms == 0 ? 0.0 : total / static_cast<double>(terms);
}

double feature_norm_variance(const Model& model, const Dataset& data,
                             const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw std::invalid_argument("feature_norm_variance: empty probe");
  FeatureBundle bundle =
      forward_with_features(model, data.batch_features(idx), /*train=*/false);
  const auto& f = bundle.features.back().values();
  const std::size_t d = model.proto_dim;
  std::vector<double> norms(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += f[i * d + j] * f[i * d + j];
    norms[i] = std::sqrt(s);
  }
  double mean = 0.0;
  for (double n : norms) mean += n;
  mean /= static_cast<double>(norms.size());
  double var = 0.0;
  for (double n : norms) var += (n - mean) * (n - mean);
  var /= static_cast<double>(norms.size());
  return std::sqrt(var);
}

LandscapeGrid landscape_sweep(std::vector<Tensor>& params, double half_width,
                              std::size_t resolution, std::uint64_t seed,
                              const std::function<double()>& eval_loss) {
  if (resolution < 3 || resolution % 2 == 0) {
    throw std::invalid_argument("landscape: resolution must be odd and >= 3");
  }
  std::size_t total = 0;
  for (const auto& p : params) total += p.numel();

  std::vector<double> original;
  original.reserve(total);
  for (const auto& p : params) {
    original.insert(original.end(), p.values().begin(), p.values().end());
  }

  auto unit_direction = [&](std::uint64_t tag) {
    Rng rng(derive_seed(seed, hash_tag("landscape-dir"), tag));
    std::vector<double> d(total);
    double norm2 = 0.0;
    for (auto& v : d) {
      v = rng.normal();
      norm2 += v * v;
    }
    const double inv = 1.0 / std::sqrt(std::max(norm2, 1e-300));
    for (auto& v : d) v *= inv;
    return d;
  };
  const std::vector<double> d1 = unit_direction(1);
  const std::vector<double> d2 = unit_direction(2);

  LandscapeGrid grid;
  grid.half_width = half_width;
  grid.resolution = resolution;
  grid.offsets_a.resize(resolution);
  grid.offsets_b.resize(resolution);
  for (std::size_t i = 0; i < resolution; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(resolution - 1);
    grid.offsets_a[i] = -half_width + 2.0 * half_width * t;
    grid.offsets_b[i] = grid.offsets_a[i];
  }
  // Exact zero at the center point so the unperturbed loss sits on the grid.
  grid.offsets_a[resolution / 2] = 0.0;
  grid.offsets_b[resolution / 2] = 0.0;
  grid.loss.assign(resolution * resolution, 0.0);

  auto write_point = [&](double a, double b) {
    std::size_t off = 0;
    for (auto& p : params) {
      auto& w = p.values();
      for (std::size_t j = 0; j < w.size(); ++j, ++off) {
        w[j] = original[off] + a * d1[off] + b * d2[off];
      }
    }
  };

  for (std::size_t ia = 0; ia < resolution; ++ia) {
    for (std::size_t ib = 0; ib < resolution; ++ib) {
      write_point(grid.offsets_a[ia], grid.offsets_b[ib]);
      grid.loss[ia * resolution + ib] = eval_loss();
    }
  }

  // Bit-identical restore.
  std::size_t off = 0;
  for (auto& p : params) {
    auto& w = p.values();
    for (std::size_t j = 0; j < w.size(); ++j, ++off) w[j] = original[off];
  }
  return grid;
}

double eval_cross_entropy(const Model& model, const Dataset& data,
                          const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw std::invalid_argument("eval_cross_entropy: empty set");
  Tensor logits = forward_logits(model, data.batch_features(idx), /*train=*/false);
  return cross_entropy(logits, data.batch_labels(idx)).item();
}

LandscapeGrid loss_landscape(Model& model, const Dataset& data,
                             const std::vector<std::size_t>& idx,
                             double half_width, std::size_t resolution,
                             std::uint64_t seed) {
  std::vector<Tensor> params = model.adapter.trainable();
  // Probe passes need no graph; suspend grad tracking for speed and restore.
  std::vector<bool> flags(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    flags[i] = params[i].requires_grad();
    params[i].set_requires_grad(false);
  }
  auto grid = landscape_sweep(params, half_width, resolution, seed, [&]() {
    return eval_cross_entropy(model, data, idx);
  });
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].set_requires_grad(flags[i]);
  }
  return grid;
}

void save_landscape_csv(const LandscapeGrid& grid, const std::string& path,
                        std::uint64_t config_hash, std::uint64_t seed) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_landscape_csv: cannot open " + path);
  out.precision(17);
  out << "# config_hash=" << std::hex << config_hash << std::dec
      << " seed=" << seed << "\n";
  out << "a,b,loss\n";
  for (std::size_t ia = 0; ia < grid.offsets_a.size(); ++ia) {
    for (std::size_t ib = 0; ib < grid.offsets_b.size(); ++ib) {
      out << grid.offsets_a[ia] << ',' << grid.offsets_b[ib] << ','
          << grid.at(ia, ib) << '\n';
    }
  }
}

}  // namespace heartpfl::metrics
