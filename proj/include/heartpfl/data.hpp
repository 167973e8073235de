#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "heartpfl/tensor.hpp"

namespace heartpfl {

// Immutable after construction; safe for shared concurrent reads.
struct Dataset {
  std::size_t dim = 0;
  std::size_t num_classes = 0;
  std::string domain = "synthetic";
  std::vector<double> features;  // size() x dim, row-major
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  void validate() const;

  Tensor batch_features(const std::vector<std::size_t>& idx) const;
  std::vector<int> batch_labels(const std::vector<std::size_t>& idx) const;
};

Dataset subset(const Dataset& d, const std::vector<std::size_t>& idx);

// n samples from V unit-covariance Gaussian clusters whose means are
// class_sep apart. Deterministic per seed.
Dataset generate_gaussian_mixture(std::size_t num_classes, std::size_t dim,
                                  std::size_t n, double class_sep,
                                  std::uint64_t seed,
                                  std::string domain = "synthetic");

// Same label space and dimension, different cluster geometry: randomly
// oriented means and scaled covariance.
Dataset generate_shifted_mixture(std::size_t num_classes, std::size_t dim,
                                 std::size_t n, double class_sep,
                                 double covariance_scale, std::uint64_t seed,
                                 std::string domain);

struct ClientPartition {
  std::vector<std::vector<std::size_t>> client_indices;
  double alpha = 0.0;
  std::uint64_t seed = 0;
  std::size_t min_per_client = 0;

  std::size_t num_clients() const { return client_indices.size(); }
  // Disjointness and full coverage of [0, parent_size).
  void validate(std::size_t parent_size) const;
  std::uint64_t fingerprint() const;
};

// Class-by-class Dirichlet(alpha) allocation with bounded resampling until
// every client holds at least min_per_client samples.
ClientPartition dirichlet_partition(const Dataset& data, std::size_t n_clients,
                                    double alpha, std::size_t min_per_client,
                                    std::uint64_t seed);

struct ClientSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

struct SplitResult {
  std::vector<ClientSplit> clients;
  std::size_t single_sample_warnings = 0;
};

SplitResult split_client_train_test(const ClientPartition& partition,
                                    const Dataset& data, double test_fraction,
                                    std::uint64_t seed);

enum class ProxyMode { kInDomain, kOutOfDomain };

// In-domain: draws `size` indices of `base` that are not in `exclude`
// (disjoint from all client data). Out-of-domain: fresh generation from a
// shifted mixture family tagged with a distinct domain.
Dataset make_proxy(const Dataset& base, const std::vector<std::size_t>& exclude,
                   std::size_t size, ProxyMode mode, double class_sep,
                   std::uint64_t seed);

// One sample per line: dim feature values then an integer label.
Dataset load_delimited(const std::string& path, std::string domain = "file");
void save_delimited(const Dataset& d, const std::string& path);

std::vector<std::vector<std::size_t>> class_histograms(
    const ClientPartition& partition, const Dataset& data);
double label_entropy(const std::vector<std::size_t>& counts);
std::string partition_report(const ClientPartition& partition,
                             const Dataset& data);

}  // namespace heartpfl
