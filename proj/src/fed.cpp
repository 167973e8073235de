#include "heartpfl/fed.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>

#include "heartpfl/metrics.hpp"
#include "heartpfl/optim.hpp"
#include "json.hpp"

namespace heartpfl::fed {

Method method_from_string(const std::string& s) {
  if (s == "heart_pfl") return Method::kHeartPfl;
  if (s == "hda_only") return Method::kHdaOnly;
  if (s == "akt_only") return Method::kAktOnly;
  if (s == "fedavg_per") return Method::kFedAvgPer;
  if (s == "plain_ekt") return Method::kPlainEkt;
  throw std::invalid_argument(
      "unknown method: " + s +
      " (expected heart_pfl|hda_only|akt_only|fedavg_per|plain_ekt)");
}

const char* method_name(Method m) {
  switch (m) {
    case Method::kHeartPfl: return "heart_pfl";
    case Method::kHdaOnly: return "hda_only";
    case Method::kAktOnly: return "akt_only";
    case Method::kFedAvgPer: return "fedavg_per";
    case Method::kPlainEkt: return "plain_ekt";
  }
  return "unknown";
}

void FLConfig::validate() const {
  if (num_clients == 0 || clients_per_round == 0 ||
      clients_per_round > num_clients) {
    throw std::invalid_argument("config: need 1 <= clients_per_round <= clients");
  }
  if (rounds == 0) throw std::invalid_argument("config: rounds >= 1");
  if (client_lr <= 0.0 || client_lr_decay <= 0.0) {
    throw std::invalid_argument("config: client rates must be > 0");
  }
  if (client_batch == 0) throw std::invalid_argument("config: client_batch >= 1");
  if (eval_interval == 0) throw std::invalid_argument("config: eval_interval >= 1");
  if (lambda_hda < 0.0 || lambda_prox < 0.0) {
    throw std::invalid_argument("config: hda weights must be >= 0");
  }
  if (widths.size() < 2) throw std::invalid_argument("config: need >= 2 stages");
  if (hda_early_count != kAutoEarly && hda_early_count > widths.size()) {
    throw std::invalid_argument("config: hda.early_count exceeds stage count");
  }
  if (proto_dim == 0) throw std::invalid_argument("config: proto_dim >= 1");
  akt.validate();
}

std::size_t FLConfig::resolved_early_count() const {
  if (hda_early_count != kAutoEarly) return hda_early_count;
  return (widths.size() + 1) / 2;
}

EffectiveConfig resolve_method(const FLConfig& cfg) {
  EffectiveConfig eff;
  eff.akt = cfg.akt;
  switch (cfg.method) {
    case Method::kHeartPfl:
      eff.lambda_hda = cfg.lambda_hda;
      eff.lambda_prox = cfg.lambda_prox;
      eff.akt_enabled = true;
      break;
    case Method::kHdaOnly:
      eff.lambda_hda = cfg.lambda_hda;
      eff.lambda_prox = cfg.lambda_prox;
      eff.akt_enabled = false;
      break;
    case Method::kAktOnly:
      eff.akt_enabled = true;
      break;
    case Method::kFedAvgPer:
      eff.akt_enabled = false;
      break;
    case Method::kPlainEkt:
      eff.akt_enabled = true;
      eff.akt.use_clean = true;
      eff.akt.use_adversarial = false;
      eff.akt.use_symmetric_kl = false;
      break;
  }
  return eff;
}

std::size_t effective_threads(std::size_t requested) {
  std::size_t n = requested == 0 ? 1 : requested;
  if (const char* cap = std::getenv("HEARTPFL_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(cap, &end, 10);
    if (end != cap && v > 0) n = std::min<std::size_t>(n, v);
  }
  return std::max<std::size_t>(1, n);
}

void parallel_for(std::size_t count, std::size_t threads,
                  const std::function<void(std::size_t)>& fn) {
  threads = std::min(effective_threads(threads), count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&]() {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

std::vector<std::size_t> sample_clients(std::size_t round, std::size_t n,
                                        std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(derive_seed(seed, hash_tag("sample"), round));
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

Adapter adapter_average(const std::vector<Adapter>& uploads) {
  if (uploads.empty()) throw std::invalid_argument("adapter_average: no uploads");
  Adapter avg = uploads[0].clone(false);
  auto acc = avg.trainable();  // handles into avg's tensors
  for (std::size_t u = 1; u < uploads.size(); ++u) {
    auto src = uploads[u].tensors();
    if (src.size() != acc.size()) {
      throw ShapeError("adapter_average: upload structure mismatch");
    }
    for (std::size_t t = 0; t < acc.size(); ++t) {
      auto& a = acc[t].values();
      const auto& s = src[t]->values();
      if (a.size() != s.size()) {
        throw ShapeError("adapter_average: upload shape mismatch");
      }
      for (std::size_t j = 0; j < a.size(); ++j) a[j] += s[j];
    }
  }
  const double inv = 1.0 / static_cast<double>(uploads.size());
  for (auto& t : acc) {
    for (auto& v : t.values()) v *= inv;
  }
  return avg;
}

DataBundle build_data(const FLConfig& cfg) {
  cfg.validate();
  DataBundle d;

  Dataset base;
  const std::size_t total =
      cfg.pretrain_samples + cfg.data_samples + cfg.proxy_size;
  if (!cfg.data_file.empty()) {
    base = load_delimited(cfg.data_file);
    if (base.size() < total) {
      throw std::invalid_argument("config: data file has " +
                                  std::to_string(base.size()) +
                                  " samples, need " + std::to_string(total));
    }
    std::vector<std::size_t> order(base.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, hash_tag("file-order")));
    rng.shuffle(order);
    order.resize(total);
    base = subset(base, order);
  } else {
    base = generate_gaussian_mixture(cfg.data_classes, cfg.data_dim, total,
                                     cfg.class_sep,
                                     derive_seed(cfg.seed, hash_tag("data")));
  }

  std::vector<std::size_t> pre_idx(cfg.pretrain_samples);
  std::iota(pre_idx.begin(), pre_idx.end(), 0);
  std::vector<std::size_t> client_idx(cfg.data_samples);
  std::iota(client_idx.begin(), client_idx.end(), cfg.pretrain_samples);
  d.pretrain_pool = subset(base, pre_idx);
  d.client_pool = subset(base, client_idx);

  std::vector<std::size_t> claimed(cfg.pretrain_samples + cfg.data_samples);
  std::iota(claimed.begin(), claimed.end(), 0);
  d.proxy = make_proxy(base, claimed, cfg.proxy_size, cfg.proxy_mode,
                       cfg.class_sep, derive_seed(cfg.seed, hash_tag("proxy")));

  d.partition = dirichlet_partition(d.client_pool, cfg.num_clients,
                                    cfg.dirichlet_alpha, cfg.min_per_client,
                                    derive_seed(cfg.seed, hash_tag("partition")));
  d.splits = split_client_train_test(d.partition, d.client_pool,
                                     cfg.test_fraction,
                                     derive_seed(cfg.seed, hash_tag("split")));
  for (const auto& split : d.splits.clients) {
    d.global_test.insert(d.global_test.end(), split.test.begin(),
                         split.test.end());
  }
  std::sort(d.global_test.begin(), d.global_test.end());
  return d;
}

ExperimentState init_experiment(const FLConfig& cfg) {
  ExperimentState st;
  st.cfg = cfg;
  st.data = build_data(cfg);

  BackboneSpec spec;
  spec.input_dim = st.data.client_pool.dim;
  spec.widths = cfg.widths;
  spec.num_classes = st.data.client_pool.num_classes;
  PretrainConfig pc;
  pc.epochs = cfg.pretrain_epochs;
  pc.lr = cfg.pretrain_lr;
  pc.batch = cfg.pretrain_batch;
  pc.dropout_rate = cfg.dropout_rate;
  pc.proto_dim = cfg.proto_dim;
  st.global = pretrain_and_freeze(spec, st.data.pretrain_pool, pc,
                                  derive_seed(cfg.seed, hash_tag("pretrain")));
  if (cfg.reinit_head) {
    Rng head_rng(derive_seed(cfg.seed, hash_tag("head-init")));
    auto& w = st.global.adapter.head_w.values();
    const double s = std::sqrt(2.0 / static_cast<double>(spec.widths.back()));
    for (auto& v : w) v = head_rng.normal(0.0, s);
    for (auto& v : st.global.adapter.head_b.values()) v = 0.0;
  }

  st.stages = hda::StagePartition::split_prefix(spec.num_stages(),
                                                cfg.resolved_early_count());

  st.clients.resize(cfg.num_clients);
  for (std::size_t c = 0; c < cfg.num_clients; ++c) {
    st.clients[c].id = c;
    st.clients[c].train = st.data.splits.clients[c].train;
    st.clients[c].test = st.data.splits.clients[c].test;
    st.clients[c].personalized = st.global.clone(ModelRole::kPersonalized, true);
  }
  return st;
}

ClientRoundResult client_round(ClientState& client, const Model& global_frozen,
                               const ExperimentState& state,
                               const EffectiveConfig& eff, std::size_t round) {
  const FLConfig& cfg = state.cfg;
  const double lr =
      cfg.client_lr * std::pow(cfg.client_lr_decay, static_cast<double>(round));
  ClientRoundResult out;

  // Phase 1: personalized adapter on the combined objective.
  hda::HdaConfig hc;
  hc.lambda_hda = eff.lambda_hda;
  hc.lambda_prox = eff.lambda_prox;
  hc.stages = state.stages;
  hc.prototype_mode = cfg.prototype_mode;
  hda::ClientTrainConfig tc;
  tc.epochs = cfg.client_epochs;
  tc.lr = lr;
  tc.batch = cfg.client_batch;
  auto stats = hda::client_personalized_update(
      client.personalized, global_frozen, state.data.client_pool, client.train, tc,
      hc, derive_seed(cfg.seed, hash_tag("client-personal"), round, client.id));
  if (!stats.epoch_losses.empty()) {
    double s = 0.0;
    for (double v : stats.epoch_losses) s += v;
    out.mean_loss = s / static_cast<double>(stats.epoch_losses.size());
  }

  // Phase 2: local adapter from the broadcast global, plain cross-entropy.
  Model local = global_frozen.clone(ModelRole::kLocal, true);
  std::vector<Tensor> params = local.adapter.trainable();
  Optimizer opt(OptimizerKind::kSgd, lr);
  Rng order_rng(derive_seed(cfg.seed, hash_tag("client-local-order"), round,
                            client.id));
  Rng dropout_rng(derive_seed(cfg.seed, hash_tag("client-local-dropout"), round,
                              client.id));
  std::vector<std::size_t> order(client.train);
  for (std::size_t epoch = 0; epoch < cfg.client_epochs; ++epoch) {
    order_rng.shuffle(order);
    for (std::size_t off = 0; off < order.size(); off += cfg.client_batch) {
      const std::size_t hi = std::min(order.size(), off + cfg.client_batch);
      std::vector<std::size_t> idx(order.begin() + off, order.begin() + hi);
      Tensor x = state.data.client_pool.batch_features(idx);
      Tensor loss = cross_entropy(
          forward_logits(local, x, /*train=*/true, &dropout_rng),
          state.data.client_pool.batch_labels(idx));
      opt.zero_grad(params);
      backward(loss);
      opt.step(params);
    }
  }
  out.upload = local.adapter.clone(false);
  return out;
}

namespace {

struct EvalResult {
  double pers_mean = 0.0, pers_std = 0.0;
  double global_acc = 0.0;
  double alignment = 0.0;
  double norm_variance = 0.0;
};

EvalResult evaluate(const ExperimentState& st) {
  EvalResult ev;
  std::vector<double> accs(st.clients.size());
  std::vector<double> aligns(st.clients.size());
  std::vector<double> norms(st.clients.size());
  for (std::size_t c = 0; c < st.clients.size(); ++c) {
    const auto& client = st.clients[c];
    accs[c] = metrics::accuracy(client.personalized, st.data.client_pool, client.test);
    auto protos = hda::extract_prototypes(client.personalized, st.data.client_pool,
                                          client.train);
    aligns[c] = metrics::representation_alignment(st.global, protos,
                                                  st.data.client_pool, client.test);
    norms[c] = metrics::feature_norm_variance(st.global, st.data.client_pool,
                                              client.test);
  }
  double mean = 0.0;
  for (double a : accs) mean += a;
  mean /= static_cast<double>(accs.size());
  double var = 0.0;
  for (double a : accs) var += (a - mean) * (a - mean);
  var /= static_cast<double>(accs.size());
  ev.pers_mean = mean;
  ev.pers_std = std::sqrt(var);
  ev.global_acc = metrics::accuracy(st.global, st.data.client_pool, st.data.global_test);
  double align = 0.0, nv = 0.0;
  for (std::size_t c = 0; c < st.clients.size(); ++c) {
    align += aligns[c];
    nv += norms[c];
  }
  ev.alignment = align / static_cast<double>(st.clients.size());
  ev.norm_variance = nv / static_cast<double>(st.clients.size());
  return ev;
}

}  // namespace

RoundRecord run_round(ExperimentState& state, std::size_t round) {
  const auto t0 = std::chrono::steady_clock::now();
  const FLConfig& cfg = state.cfg;
  const EffectiveConfig eff = resolve_method(cfg);
  RoundRecord rec;
  rec.round = round;
  rec.sampled = sample_clients(round, cfg.num_clients, cfg.clients_per_round,
                               cfg.seed);

  // Broadcast snapshot of the global model, shared read-only by all clients.
  const Model global_frozen = state.global.clone(ModelRole::kGlobal, false);

  std::vector<ClientRoundResult> results(rec.sampled.size());
  parallel_for(rec.sampled.size(), cfg.threads, [&](std::size_t i) {
    results[i] = client_round(state.clients[rec.sampled[i]], global_frozen,
                              state, eff, round);
  });

  double loss_sum = 0.0;
  std::vector<Adapter> uploads;
  uploads.reserve(results.size());
  for (auto& r : results) {
    loss_sum += r.mean_loss;
    uploads.push_back(std::move(r.upload));
  }
  rec.mean_client_loss = loss_sum / static_cast<double>(results.size());

  // Adapter averaging in ascending-client-id order.
  Adapter averaged = adapter_average(uploads);
  state.global.adapter.assign_from(averaged);

  if (eff.akt_enabled) {
    std::vector<Model> locals;
    locals.reserve(uploads.size());
    for (const auto& up : uploads) {
      Model m = state.global.clone(ModelRole::kLocal, false);
      m.adapter.assign_from(up);
      locals.push_back(std::move(m));
    }
    auto stats = akt::akt_update(state.global, locals, state.data.proxy,
                                 cfg.proxy_mode == ProxyMode::kInDomain, eff.akt,
                                 derive_seed(cfg.seed, hash_tag("akt"), round));
    rec.server_loss = std::move(stats.losses);
  }

  if (round % cfg.eval_interval == 0 || round + 1 == cfg.rounds) {
    rec.evaluated = true;
    EvalResult ev = evaluate(state);
    rec.pers_acc_mean = ev.pers_mean;
    rec.pers_acc_std = ev.pers_std;
    rec.global_acc = ev.global_acc;
    rec.alignment = ev.alignment;
    rec.norm_variance = ev.norm_variance;
  }
  rec.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return rec;
}

std::string record_to_json(const RoundRecord& rec, const FLConfig& cfg,
                           std::uint64_t config_hash) {
  nlohmann::json j;
  j["schema_version"] = 1;
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(config_hash));
  j["config_hash"] = hex;
  j["seed"] = cfg.seed;
  j["method"] = method_name(cfg.method);
  j["round"] = rec.round;
  j["sampled"] = rec.sampled;
  j["mean_client_loss"] = rec.mean_client_loss;
  j["server_loss"] = rec.server_loss;
  j["eval"] = rec.evaluated;
  if (rec.evaluated) {
    j["pers_acc_mean"] = rec.pers_acc_mean;
    j["pers_acc_std"] = rec.pers_acc_std;
    j["global_acc"] = rec.global_acc;
    j["alignment"] = rec.alignment;
    j["norm_variance"] = rec.norm_variance;
  }
  return j.dump();
}

ExperimentResult run_experiment(const FLConfig& cfg, const std::string& out_dir,
                                std::uint64_t config_hash) {
  ExperimentState st = init_experiment(cfg);
  ExperimentResult out;
  out.partition_fingerprint = st.data.partition.fingerprint();

  namespace fs = std::filesystem;
  std::ofstream records;
  if (!out_dir.empty()) {
    fs::create_directories(fs::path(out_dir) / "checkpoints");
    records.open(fs::path(out_dir) / "records.jsonl", std::ios::trunc);
    if (!records) throw std::runtime_error("run: cannot write records in " + out_dir);
  }

  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    RoundRecord rec = run_round(st, r);
    if (records.is_open()) {
      records << record_to_json(rec, cfg, config_hash) << '\n';
      records.flush();
      char name[64];
      std::snprintf(name, sizeof(name), "global_round_%04zu.json", r);
      save_model(st.global, (fs::path(out_dir) / "checkpoints" / name).string());
    }
    out.records.push_back(std::move(rec));
  }

  const RoundRecord& last = out.records.back();
  out.final_pers_acc_mean = last.pers_acc_mean;
  out.final_global_acc = last.global_acc;
  out.final_global_checksum = st.global.adapter.checksum();
  for (const auto& client : st.clients) {
    out.final_client_checksums.push_back(client.personalized.adapter.checksum());
  }

  if (!out_dir.empty()) {
    const fs::path final_dir = fs::path(out_dir) / "checkpoints" / "final";
    fs::create_directories(final_dir);
    save_model(st.global, (final_dir / "global.json").string());
    for (const auto& client : st.clients) {
      char name[64];
      std::snprintf(name, sizeof(name), "client_%03zu.json", client.id);
      save_model(client.personalized, (final_dir / name).string());
    }
  }
  return out;
}

}  // namespace heartpfl::fed
