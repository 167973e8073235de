#include "heartpfl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace heartpfl {

void Dataset::validate() const {
  if (labels.empty()) throw std::invalid_argument("dataset: empty");
  if (features.size() != labels.size() * dim) {
    throw std::invalid_argument("dataset: feature/label size mismatch");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw std::invalid_argument("dataset: label " + std::to_string(y) +
                                  " out of [0, " +
                                  std::to_string(num_classes) + ")");
    }
  }
}

Tensor Dataset::batch_features(const std::vector<std::size_t>& idx) const {
  std::vector<double> out(idx.size() * dim);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(features.data() + idx[r] * dim, dim, out.data() + r * dim);
  }
  return Tensor::matrix(idx.size(), dim, std::move(out));
}

std::vector<int> Dataset::batch_labels(const std::vector<std::size_t>& idx) const {
  std::vector<int> out(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) out[r] = labels[idx[r]];
  return out;
}

Dataset subset(const Dataset& d, const std::vector<std::size_t>& idx) {
  Dataset out;
  out.dim = d.dim;
  out.num_classes = d.num_classes;
  out.domain = d.domain;
  out.features.resize(idx.size() * d.dim);
  out.labels.resize(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(d.features.data() + idx[r] * d.dim, d.dim,
                out.features.data() + r * d.dim);
    out.labels[r] = d.labels[idx[r]];
  }
  return out;
}

namespace {

// Cluster means on the scaled orthoplex (+-class_sep * e_k) while classes
// fit; extra classes fall back to random unit directions.
std::vector<double> mixture_means(std::size_t num_classes, std::size_t dim,
                                  double class_sep, Rng& rng) {
  std::vector<double> means(num_classes * dim, 0.0);
  for (std::size_t v = 0; v < num_classes; ++v) {
    if (v < 2 * dim) {
      const std::size_t axis = v / 2;
      means[v * dim + axis] = (v % 2 == 0 ? class_sep : -class_sep);
    } else {
      double norm2 = 0.0;
      std::vector<double> u(dim);
      for (std::size_t j = 0; j < dim; ++j) {
        u[j] = rng.normal();
        norm2 += u[j] * u[j];
      }
      const double s = class_sep / std::sqrt(std::max(norm2, 1e-12));
      for (std::size_t j = 0; j < dim; ++j) means[v * dim + j] = u[j] * s;
    }
  }
  return means;
}

Dataset sample_mixture(std::size_t num_classes, std::size_t dim, std::size_t n,
                       const std::vector<double>& means, double cov_scale,
                       std::uint64_t seed, std::string domain) {
  Dataset d;
  d.dim = dim;
  d.num_classes = num_classes;
  d.domain = std::move(domain);
  d.features.resize(n * dim);
  d.labels.resize(n);
  // Round-robin labels, then a seeded shuffle of sample order so slices of
  // the dataset stay class balanced.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, hash_tag("mixture")));
  rng.shuffle(order);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(order[i] % num_classes);
    d.labels[i] = y;
    for (std::size_t j = 0; j < dim; ++j) {
      d.features[i * dim + j] =
          means[static_cast<std::size_t>(y) * dim + j] +
          cov_scale * rng.normal();
    }
  }
  return d;
}

}  // namespace

Dataset generate_gaussian_mixture(std::size_t num_classes, std::size_t dim,
                                  std::size_t n, double class_sep,
                                  std::uint64_t seed, std::string domain) {
  if (num_classes < 2 || dim == 0 || n < num_classes) {
    throw std::invalid_argument("generate_gaussian_mixture: need V >= 2 and n >= V");
  }
  Rng mean_rng(derive_seed(seed, hash_tag("means")));
  auto means = mixture_means(num_classes, dim, class_sep, mean_rng);
  return sample_mixture(num_classes, dim, n, means, 1.0, seed, std::move(domain));
}

Dataset generate_shifted_mixture(std::size_t num_classes, std::size_t dim,
                                 std::size_t n, double class_sep,
                                 double covariance_scale, std::uint64_t seed,
                                 std::string domain) {
  if (num_classes < 2 || dim == 0 || n < num_classes) {
    throw std::invalid_argument("generate_shifted_mixture: need V >= 2 and n >= V");
  }
  // Random unit directions for every class: a different family than the
  // axis-aligned layout even at equal separation.
  Rng mean_rng(derive_seed(seed, hash_tag("ood-means")));
  std::vector<double> means(num_classes * dim);
  for (std::size_t v = 0; v < num_classes; ++v) {
    double norm2 = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      means[v * dim + j] = mean_rng.normal();
      norm2 += means[v * dim + j] * means[v * dim + j];
    }
    const double s = class_sep / std::sqrt(std::max(norm2, 1e-12));
    for (std::size_t j = 0; j < dim; ++j) means[v * dim + j] *= s;
  }
  return sample_mixture(num_classes, dim, n, means, covariance_scale, seed,
                        std::move(domain));
}

void ClientPartition::validate(std::size_t parent_size) const {
  std::vector<char> seen(parent_size, 0);
  std::size_t total = 0;
  for (const auto& ids : client_indices) {
    for (auto i : ids) {
      if (i >= parent_size) {
        throw std::logic_error("partition: index out of range");
      }
      if (seen[i]) throw std::logic_error("partition: duplicate index");
      seen[i] = 1;
      ++total;
    }
  }
  if (total != parent_size) {
    throw std::logic_error("partition: covers " + std::to_string(total) +
                           " of " + std::to_string(parent_size) + " samples");
  }
}

std::uint64_t ClientPartition::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& ids : client_indices) {
    const std::uint64_t n = ids.size();
    h = fnv1a(&n, sizeof(n), h);
    h = fnv1a(ids.data(), ids.size() * sizeof(std::size_t), h);
  }
  return h;
}

ClientPartition dirichlet_partition(const Dataset& data, std::size_t n_clients,
                                    double alpha, std::size_t min_per_client,
                                    std::uint64_t seed) {
  if (n_clients == 0) throw std::invalid_argument("dirichlet_partition: N >= 1");
  if (alpha <= 0.0) throw std::invalid_argument("dirichlet_partition: alpha > 0");
  if (data.size() < n_clients * min_per_client) {
    throw std::invalid_argument("dirichlet_partition: dataset too small for min_per_client");
  }
  std::vector<std::vector<std::size_t>> by_class(data.num_classes);
  for (std::size_t i = 0; i < data.size(); ++i) {
    by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);
  }
  constexpr int kMaxRetries = 100;
  for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
    Rng rng(derive_seed(seed, hash_tag("dirichlet"), attempt));
    ClientPartition part;
    part.client_indices.assign(n_clients, {});
    part.alpha = alpha;
    part.seed = seed;
    part.min_per_client = min_per_client;
    for (auto idx : by_class) {
      if (idx.empty()) continue;
      rng.shuffle(idx);
      std::vector<double> prop(n_clients);
      double total = 0.0;
      for (auto& p : prop) {
        p = rng.gamma(alpha);
        total += p;
      }
      if (total <= 0.0) {
        prop.assign(n_clients, 1.0);
        total = static_cast<double>(n_clients);
      }
      double cum = 0.0;
      std::size_t start = 0;
      for (std::size_t c = 0; c < n_clients; ++c) {
        cum += prop[c] / total;
        std::size_t end =
            c + 1 == n_clients
                ? idx.size()
                : std::min(idx.size(),
                           static_cast<std::size_t>(
                               std::floor(cum * static_cast<double>(idx.size()) + 0.5)));
        end = std::max(end, start);
        for (std::size_t i = start; i < end; ++i) {
          part.client_indices[c].push_back(idx[i]);
        }
        start = end;
      }
    }
    bool ok = true;
    for (const auto& ids : part.client_indices) {
      if (ids.size() < min_per_client) {
        ok = false;
        break;
      }
    }
    if (ok) {
      part.validate(data.size());
      return part;
    }
  }
  throw std::runtime_error(
      "dirichlet_partition: min_per_client infeasible after retries "
      "(alpha too small or dataset too sparse)");
}

SplitResult split_client_train_test(const ClientPartition& partition,
                                    const Dataset& data, double test_fraction,
                                    std::uint64_t seed) {
  if (test_fraction <= 0.0 || test_fraction >= 1.0) {
    throw std::invalid_argument("split: test_fraction must be in (0, 1)");
  }
  SplitResult out;
  out.clients.resize(partition.num_clients());
  for (std::size_t c = 0; c < partition.num_clients(); ++c) {
    const auto& ids = partition.client_indices[c];
    auto& split = out.clients[c];
    if (ids.size() <= 1) {
      split.train = ids;
      if (ids.size() == 1) ++out.single_sample_warnings;
      continue;
    }
    Rng rng(derive_seed(seed, hash_tag("split"), c));
    std::vector<std::vector<std::size_t>> by_class(data.num_classes);
    for (auto i : ids) by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);
    for (auto& group : by_class) {
      if (group.empty()) continue;
      rng.shuffle(group);
      const auto n_test = static_cast<std::size_t>(
          std::floor(test_fraction * static_cast<double>(group.size())));
      for (std::size_t i = 0; i < group.size(); ++i) {
        (i < n_test ? split.test : split.train).push_back(group[i]);
      }
    }
    // Stratified flooring can starve small clients of test data entirely;
    // evaluation needs at least one held-out sample.
    if (split.test.empty()) {
      split.test.push_back(split.train.back());
      split.train.pop_back();
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.test.begin(), split.test.end());
  }
  return out;
}

Dataset make_proxy(const Dataset& base, const std::vector<std::size_t>& exclude,
                   std::size_t size, ProxyMode mode, double class_sep,
                   std::uint64_t seed) {
  if (mode == ProxyMode::kOutOfDomain) {
    return generate_shifted_mixture(base.num_classes, base.dim, size, class_sep,
                                    1.3, derive_seed(seed, hash_tag("ood")),
                                    base.domain + "-ood");
  }
  std::vector<char> used(base.size(), 0);
  for (auto i : exclude) used[i] = 1;
  std::vector<std::size_t> free;
  for (std::size_t i = 0; i < base.size(); ++i) {
    if (!used[i]) free.push_back(i);
  }
  if (size > free.size()) {
    throw std::invalid_argument("make_proxy: requested " + std::to_string(size) +
                                " samples, only " + std::to_string(free.size()) +
                                " unclaimed");
  }
  Rng rng(derive_seed(seed, hash_tag("proxy")));
  rng.shuffle(free);
  free.resize(size);
  std::sort(free.begin(), free.end());
  return subset(base, free);
}

Dataset load_delimited(const std::string& path, std::string domain) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_delimited: cannot open " + path);
  Dataset d;
  d.domain = std::move(domain);
  std::string line;
  int max_label = -1;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    for (char& ch : line) {
      if (ch == ',' || ch == ';' || ch == '\t') ch = ' ';
    }
    std::istringstream ls(line);
    std::vector<double> row;
    double v;
    while (ls >> v) row.push_back(v);
    if (row.size() < 2) {
      throw std::runtime_error("load_delimited: malformed line: " + line);
    }
    const int label = static_cast<int>(std::llround(row.back()));
    row.pop_back();
    if (d.dim == 0) d.dim = row.size();
    if (row.size() != d.dim) {
      throw std::runtime_error("load_delimited: inconsistent feature count");
    }
    d.features.insert(d.features.end(), row.begin(), row.end());
    d.labels.push_back(label);
    max_label = std::max(max_label, label);
  }
  if (d.labels.empty()) throw std::runtime_error("load_delimited: no samples in " + path);
  d.num_classes = static_cast<std::size_t>(max_label + 1);
  d.validate();
  return d;
}

void save_delimited(const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_delimited: cannot open " + path);
  out.precision(17);
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < d.dim; ++j) out << d.features[i * d.dim + j] << ' ';
    out << d.labels[i] << '\n';
  }
}

std::vector<std::vector<std::size_t>> class_histograms(
    const ClientPartition& partition, const Dataset& data) {
  std::vector<std::vector<std::size_t>> hist(
      partition.num_clients(), std::vector<std::size_t>(data.num_classes, 0));
  for (std::size_t c = 0; c < partition.num_clients(); ++c) {
    for (auto i : partition.client_indices[c]) {
      ++hist[c][static_cast<std::size_t>(data.labels[i])];
    }
  }
  return hist;
}

double label_entropy(const std::vector<std::size_t>& counts) {
  double total = 0.0;
  for (auto c : counts) total += static_cast<double>(c);
  if (total == 0.0) return 0.0;
  double h = 0.0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log(p);
  }
  return h;
}

std::string partition_report(const ClientPartition& partition,
                             const Dataset& data) {
  auto hist = class_histograms(partition, data);
  std::ostringstream os;
  os << "clients=" << partition.num_clients() << " samples=" << data.size()
     << " classes=" << data.num_classes << " alpha=" << partition.alpha
     << " seed=" << partition.seed << "\n";
  os << "client  total  entropy  per-class counts\n";
  for (std::size_t c = 0; c < hist.size(); ++c) {
    std::size_t total = 0;
    for (auto k : hist[c]) total += k;
    os << c << "  " << total << "  " << label_entropy(hist[c]) << "  [";
    for (std::size_t v = 0; v < hist[c].size(); ++v) {
      if (v) os << " ";
      os << hist[c][v];
    }
    os << "]\n";
  }
  return os.str();
}

}  // namespace heartpfl
