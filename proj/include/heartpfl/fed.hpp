#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "heartpfl/akt.hpp"
#include "heartpfl/data.hpp"
#include "heartpfl/hda.hpp"
#include "heartpfl/model.hpp"

namespace heartpfl::fed {

enum class Method { kHeartPfl, kHdaOnly, kAktOnly, kFedAvgPer, kPlainEkt };
Method method_from_string(const std::string& s);
const char* method_name(Method m);

struct FLConfig {
  std::uint64_t seed = 1;
  Method method = Method::kHeartPfl;
  std::size_t rounds = 30;
  std::size_t eval_interval = 5;
  std::size_t threads = 1;

  // clients
  std::size_t num_clients = 20;
  std::size_t clients_per_round = 8;
  std::size_t client_epochs = 2;
  double client_lr = 0.01;
  double client_lr_decay = 1.0;  // multiplicative per round; 1 = no decay
  std::size_t client_batch = 16;

  // data: many classes with few per-client shots, so cross-client knowledge
  // genuinely matters; class_sep places the fine-tuning baseline in the
  // 50-70% band
  std::size_t data_classes = 30;
  std::size_t data_dim = 32;
  std::size_t data_samples = 600;
  std::size_t pretrain_samples = 4096;
  std::size_t proxy_size = 256;
  double class_sep = 3.0;
  double dirichlet_alpha = 0.1;
  std::size_t min_per_client = 5;
  double test_fraction = 0.3;
  ProxyMode proxy_mode = ProxyMode::kInDomain;
  std::string data_file;  // optional delimited dataset replacing the mixture

  // model
  std::vector<std::size_t> widths = {64, 64, 64, 64};
  std::size_t proto_dim = 32;
  double dropout_rate = 0.1;
  std::size_t pretrain_epochs = 5;
  double pretrain_lr = 0.001;
  std::size_t pretrain_batch = 32;
  // Swap the pretrained classifier for a fresh one so label knowledge is
  // learned federatedly on top of the frozen features.
  bool reinit_head = true;

  // hda
  double lambda_hda = 1.0;
  double lambda_prox = 1.0;
  // Tap layers assigned to the early (cosine) stage; kAutoEarly = ceil(L/2).
  static constexpr std::size_t kAutoEarly = static_cast<std::size_t>(-1);
  std::size_t hda_early_count = kAutoEarly;
  hda::PrototypeMode prototype_mode = hda::PrototypeMode::kEpochSnapshot;

  akt::AktConfig akt;

  void validate() const;
  std::size_t resolved_early_count() const;
};

// Method tags collapse onto loss weights and server flags so every variant
// exercises the identical code path.
struct EffectiveConfig {
  double lambda_hda = 0.0;
  double lambda_prox = 0.0;
  bool akt_enabled = false;
  akt::AktConfig akt;
};
EffectiveConfig resolve_method(const FLConfig& cfg);

struct ClientState {
  std::size_t id = 0;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  Model personalized;  // persists across rounds whether or not sampled
};

struct RoundRecord {
  std::size_t round = 0;
  std::vector<std::size_t> sampled;
  double mean_client_loss = 0.0;
  std::vector<double> server_loss;
  bool evaluated = false;
  double pers_acc_mean = 0.0;
  double pers_acc_std = 0.0;
  double global_acc = 0.0;
  double alignment = 0.0;
  double norm_variance = 0.0;
  double wall_clock_sec = 0.0;  // in-memory only; never serialized
};

struct DataBundle {
  Dataset client_pool;
  Dataset pretrain_pool;
  Dataset proxy;
  ClientPartition partition;
  SplitResult splits;
  std::vector<std::size_t> global_test;  // union of client test indices
};

// Pure function of the config: dataset generation (or file ingest),
// partitioning, per-client splits, and proxy construction.
DataBundle build_data(const FLConfig& cfg);

struct ExperimentState {
  FLConfig cfg;
  DataBundle data;
  Model global;
  std::vector<ClientState> clients;
  hda::StagePartition stages;
};

// Uniform sample without replacement, deterministic in (seed, round),
// returned sorted ascending.
std::vector<std::size_t> sample_clients(std::size_t round, std::size_t n,
                                        std::size_t k, std::uint64_t seed);

Adapter adapter_average(const std::vector<Adapter>& uploads);

struct ClientRoundResult {
  Adapter upload;           // trained local adapter
  double mean_loss = 0.0;   // personalized-phase objective mean
};

// Phase 1: personalized update on the HDA objective (weights per effective
// config). Phase 2: CE training of a fresh clone of the global adapter.
ClientRoundResult client_round(ClientState& client, const Model& global_frozen,
                               const ExperimentState& state,
                               const EffectiveConfig& eff, std::size_t round);

RoundRecord run_round(ExperimentState& state, std::size_t round);

ExperimentState init_experiment(const FLConfig& cfg);

struct ExperimentResult {
  std::vector<RoundRecord> records;
  double final_pers_acc_mean = 0.0;
  double final_global_acc = 0.0;
  std::uint64_t partition_fingerprint = 0;
  std::uint64_t final_global_checksum = 0;
  std::vector<std::uint64_t> final_client_checksums;
};

// Full run; when out_dir is nonempty, records/checkpoints/summary are
// persisted there (records flushed per round).
ExperimentResult run_experiment(const FLConfig& cfg, const std::string& out_dir,
                                std::uint64_t config_hash = 0);

std::string record_to_json(const RoundRecord& rec, const FLConfig& cfg,
                           std::uint64_t config_hash);

// Honors the HEARTPFL_THREADS env cap; n <= 1 runs inline.
void parallel_for(std::size_t count, std::size_t threads,
                  const std::function<void(std::size_t)>& fn);
std::size_t effective_threads(std::size_t requested);

}  // namespace heartpfl::fed
