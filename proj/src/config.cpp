#include "heartpfl/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace heartpfl::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Shortest representation that round-trips exactly.
std::string fmt_double(double v) {
  char buf[40];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
  }
  return std::string(buf, end);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw std::invalid_argument("config: " + key + " expects a boolean, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double out;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: " + key + " expects a number, got '" + v + "'");
  }
  if (pos != v.size()) {
    throw std::invalid_argument("config: " + key + " has trailing junk: '" + v + "'");
  }
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long out;
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: " + key + " expects a non-negative integer, got '" + v + "'");
  }
  if (pos != v.size()) {
    throw std::invalid_argument("config: " + key + " has trailing junk: '" + v + "'");
  }
  return out;
}

std::vector<std::size_t> parse_size_list(const std::string& key,
                                         const std::string& v) {
  std::vector<std::size_t> out;
  std::string item;
  std::istringstream is(v);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(static_cast<std::size_t>(parse_uint(key, item)));
  }
  if (out.empty()) throw std::invalid_argument("config: " + key + " is empty");
  return out;
}

struct Field {
  const char* key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    auto add = [&f](const char* key,
                    std::function<void(ExperimentConfig&, const std::string&)> set,
                    std::function<std::string(const ExperimentConfig&)> get) {
      f.push_back({key, std::move(set), std::move(get)});
    };

    add("seed",
        [](ExperimentConfig& c, const std::string& v) { c.fl.seed = parse_uint("seed", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.seed); });
    add("method",
        [](ExperimentConfig& c, const std::string& v) { c.fl.method = fed::method_from_string(v); },
        [](const ExperimentConfig& c) { return std::string(fed::method_name(c.fl.method)); });
    add("rounds",
        [](ExperimentConfig& c, const std::string& v) { c.fl.rounds = parse_uint("rounds", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.rounds); });
    add("eval_interval",
        [](ExperimentConfig& c, const std::string& v) { c.fl.eval_interval = parse_uint("eval_interval", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.eval_interval); });
    add("threads",
        [](ExperimentConfig& c, const std::string& v) { c.fl.threads = parse_uint("threads", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.threads); });
    add("out",
        [](ExperimentConfig& c, const std::string& v) { c.out_dir = v; },
        [](const ExperimentConfig& c) { return c.out_dir; });

    add("clients.count",
        [](ExperimentConfig& c, const std::string& v) { c.fl.num_clients = parse_uint("clients.count", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.num_clients); });
    add("clients.per_round",
        [](ExperimentConfig& c, const std::string& v) { c.fl.clients_per_round = parse_uint("clients.per_round", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.clients_per_round); });
    add("clients.epochs",
        [](ExperimentConfig& c, const std::string& v) { c.fl.client_epochs = parse_uint("clients.epochs", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.client_epochs); });
    add("clients.lr",
        [](ExperimentConfig& c, const std::string& v) { c.fl.client_lr = parse_double("clients.lr", v); },
        [](const ExperimentConfig& c) { return fmt_double(c.fl.client_lr); });
    add("clients.lr_decay",
        [](ExperimentConfig& c, const std::string& v) { c.fl.client_lr_decay = parse_double("clients.lr_decay", v); },
        [](const ExperimentConfig& c) { return fmt_double(c.fl.client_lr_decay); });
    add("clients.batch",
        [](ExperimentConfig& c, const std::string& v) { c.fl.client_batch = parse_uint("clients.batch", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.client_batch); });

    add("data.classes",
        [](ExperimentConfig& c, const std::string& v) { c.fl.data_classes = parse_uint("data.classes", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.data_classes); });
    add("data.dim",
        [](ExperimentConfig& c, const std::string& v) { c.fl.data_dim = parse_uint("data.dim", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.data_dim); });
    add("data.samples",
        [](ExperimentConfig& c, const std::string& v) { c.fl.data_samples = parse_uint("data.samples", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.data_samples); });
    add("data.pretrain_samples",
        [](ExperimentConfig& c, const std::string& v) { c.fl.pretrain_samples = parse_uint("data.pretrain_samples", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.pretrain_samples); });
    add("data.proxy_size",
        [](ExperimentConfig& c, const std::string& v) { c.fl.proxy_size = parse_uint("data.proxy_size", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.proxy_size); });
    add("data.class_sep",
        [](ExperimentConfig& c, const std::string& v) { c.fl.class_sep = parse_double("data.class_sep", v); },
        [](const ExperimentConfig& c) { return fmt_double(c.fl.class_sep); });
    add("data.dirichlet_alpha",
        [](ExperimentConfig& c, const std::string& v) { c.fl.dirichlet_alpha = parse_double("data.dirichlet_alpha", v); },
        [](const ExperimentConfig& c) { return fmt_double(c.fl.dirichlet_alpha); });
    add("data.min_per_client",
        [](ExperimentConfig& c, const std::string& v) { c.fl.min_per_client = parse_uint("data.min_per_client", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.min_per_client); });
    add("data.test_fraction",
        [](ExperimentConfig& c, const std::string& v) { c.fl.test_fraction = parse_double("data.test_fraction", v); },
        [](const ExperimentConfig& c) { return fmt_double(c.fl.test_fraction); });
    add("data.proxy_mode",
        [](ExperimentConfig& c, const std::string& v) {
          if (v == "in_domain") c.fl.proxy_mode = ProxyMode::kInDomain;
          else if (v == "out_of_domain") c.fl.proxy_mode = ProxyMode::kOutOfDomain;
          else throw std::invalid_argument("config: data.proxy_mode expects in_domain|out_of_domain");
        },
        [](const ExperimentConfig& c) {
          return std::string(c.fl.proxy_mode == ProxyMode::kInDomain ? "in_domain" : "out_of_domain");
        });
    add("data.file",
        [](ExperimentConfig& c, const std::string& v) { c.fl.data_file = v; },
        [](const ExperimentConfig& c) { return c.fl.data_file; });

    add("model.widths",
        [](ExperimentConfig& c, const std::string& v) { c.fl.widths = parse_size_list("model.widths", v); },
        [](const ExperimentConfig& c) {
          std::string s;
          for (std::size_t i = 0; i < c.fl.widths.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(c.fl.widths[i]);
          }
          return s;
        });
    add("model.proto_dim",
        [](ExperimentConfig& c, const std::string& v) { c.fl.proto_dim = parse_uint("model.proto_dim", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.proto_dim); });
    add("model.dropout",
        [](ExperimentConfig& c, const std::string& v) { c.fl.dropout_rate = parse_double("model.dropout", v); },
        [](const ExperimentConfig& c) { return fmt_double(c.fl.dropout_rate); });
    add("model.pretrain_epochs",
        [](ExperimentConfig& c, const std::string& v) { c.fl.pretrain_epochs = parse_uint("model.pretrain_epochs", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.pretrain_epochs); });
    add("model.pretrain_lr",
        [](ExperimentConfig& c, const std::string& v) { c.fl.pretrain_lr = parse_double("model.pretrain_lr", v); },
        [](const ExperimentConfig& c) { return fmt_double(c.fl.pretrain_lr); });
    add("model.pretrain_batch",
        [](ExperimentConfig& c, const std::string& v) { c.fl.pretrain_batch = parse_uint("model.pretrain_batch", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.pretrain_batch); });
    add("model.reinit_head",
        [](ExperimentConfig& c, const std::string& v) { c.fl.reinit_head = parse_bool("model.reinit_head", v); },
        [](const ExperimentConfig& c) { return std::string(c.fl.reinit_head ? "true" : "false"); });

    add("hda.lambda_hda",
        [](ExperimentConfig& c, const std::string& v) { c.fl.lambda_hda = parse_double("hda.lambda_hda", v); },
        [](const ExperimentConfig& c) { return fmt_double(c.fl.lambda_hda); });
    add("hda.lambda_prox",
        [](ExperimentConfig& c, const std::string& v) { c.fl.lambda_prox = parse_double("hda.lambda_prox", v); },
        [](const ExperimentConfig& c) { return fmt_double(c.fl.lambda_prox); });
    add("hda.early_count",
        [](ExperimentConfig& c, const std::string& v) {
          c.fl.hda_early_count = v == "auto" ? fed::FLConfig::kAutoEarly
                                             : parse_uint("hda.early_count", v);
        },
        [](const ExperimentConfig& c) {
          return c.fl.hda_early_count == fed::FLConfig::kAutoEarly
                     ? std::string("auto")
                     : std::to_string(c.fl.hda_early_count);
        });
    add("hda.prototype_mode",
        [](ExperimentConfig& c, const std::string& v) { c.fl.prototype_mode = hda::prototype_mode_from_string(v); },
        [](const ExperimentConfig& c) { return std::string(hda::prototype_mode_name(c.fl.prototype_mode)); });

    add("akt.use_clean",
        [](ExperimentConfig& c, const std::string& v) { c.fl.akt.use_clean = parse_bool("akt.use_clean", v); },
        [](const ExperimentConfig& c) { return std::string(c.fl.akt.use_clean ? "true" : "false"); });
    add("akt.use_adversarial",
        [](ExperimentConfig& c, const std::string& v) { c.fl.akt.use_adversarial = parse_bool("akt.use_adversarial", v); },
        [](const ExperimentConfig& c) { return std::string(c.fl.akt.use_adversarial ? "true" : "false"); });
    add("akt.use_symmetric_kl",
        [](ExperimentConfig& c, const std::string& v) { c.fl.akt.use_symmetric_kl = parse_bool("akt.use_symmetric_kl", v); },
        [](const ExperimentConfig& c) { return std::string(c.fl.akt.use_symmetric_kl ? "true" : "false"); });
    add("akt.epochs",
        [](ExperimentConfig& c, const std::string& v) { c.fl.akt.server_epochs = parse_uint("akt.epochs", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.akt.server_epochs); });
    add("akt.batch",
        [](ExperimentConfig& c, const std::string& v) { c.fl.akt.server_batch = parse_uint("akt.batch", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.akt.server_batch); });
    add("akt.lr",
        [](ExperimentConfig& c, const std::string& v) { c.fl.akt.server_lr = parse_double("akt.lr", v); },
        [](const ExperimentConfig& c) { return fmt_double(c.fl.akt.server_lr); });
    add("akt.sum_reduction",
        [](ExperimentConfig& c, const std::string& v) { c.fl.akt.sum_reduction = parse_bool("akt.sum_reduction", v); },
        [](const ExperimentConfig& c) { return std::string(c.fl.akt.sum_reduction ? "true" : "false"); });
    add("akt.pgd.epsilon",
        [](ExperimentConfig& c, const std::string& v) { c.fl.akt.pgd.epsilon = parse_double("akt.pgd.epsilon", v); },
        [](const ExperimentConfig& c) { return fmt_double(c.fl.akt.pgd.epsilon); });
    add("akt.pgd.step_size",
        [](ExperimentConfig& c, const std::string& v) { c.fl.akt.pgd.step_size = parse_double("akt.pgd.step_size", v); },
        [](const ExperimentConfig& c) { return fmt_double(c.fl.akt.pgd.step_size); });
    add("akt.pgd.steps",
        [](ExperimentConfig& c, const std::string& v) { c.fl.akt.pgd.steps = parse_uint("akt.pgd.steps", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.fl.akt.pgd.steps); });
    add("akt.pgd.random_init",
        [](ExperimentConfig& c, const std::string& v) { c.fl.akt.pgd.random_init = parse_bool("akt.pgd.random_init", v); },
        [](const ExperimentConfig& c) { return std::string(c.fl.akt.pgd.random_init ? "true" : "false"); });
    add("akt.pgd.allow_large_step",
        [](ExperimentConfig& c, const std::string& v) { c.fl.akt.pgd.allow_large_step = parse_bool("akt.pgd.allow_large_step", v); },
        [](const ExperimentConfig& c) { return std::string(c.fl.akt.pgd.allow_large_step ? "true" : "false"); });
    return f;
  }();
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (key == f.key) return &f;
  }
  return nullptr;
}

}  // namespace

std::vector<std::string> known_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.emplace_back(f.key);
  return out;
}

void apply_override(ExperimentConfig& cfg, const std::string& key,
                    const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw std::invalid_argument("config: unknown key '" + key + "'");
  f->set(cfg, value);
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  ExperimentConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: " + path + ":" +
                                  std::to_string(lineno) +
                                  ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      apply_override(cfg, key, value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": " +
                                  e.what());
    }
  }
  return cfg;
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  for (const auto& f : fields()) {
    os << f.key << " = " << f.get(cfg) << "\n";
  }
  return os.str();
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  // The output directory is not part of the experiment's semantics; two runs
  // of the same experiment into different directories share a hash.
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& f : fields()) {
    if (std::string_view(f.key) == "out") continue;
    const std::string line = std::string(f.key) + " = " + f.get(cfg) + "\n";
    h = fnv1a(line.data(), line.size(), h);
  }
  return h;
}

std::vector<std::string> valid_variants() {
  return {"baseline", "hda",       "akt",      "hda+akt", "clean",
          "adv",      "clean+skl", "clean+adv", "adv+skl", "full"};
}

fed::FLConfig variant_config(const fed::FLConfig& base,
                             const std::string& variant) {
  fed::FLConfig cfg = base;
  auto set_akt = [&cfg](bool clean, bool adv, bool skl) {
    cfg.method = fed::Method::kHeartPfl;
    cfg.akt.use_clean = clean;
    cfg.akt.use_adversarial = adv;
    cfg.akt.use_symmetric_kl = skl;
  };
  if (variant == "baseline") {
    cfg.method = fed::Method::kFedAvgPer;
  } else if (variant == "hda") {
    cfg.method = fed::Method::kHdaOnly;
  } else if (variant == "akt") {
    cfg.method = fed::Method::kAktOnly;
  } else if (variant == "hda+akt" || variant == "full") {
    set_akt(true, true, true);
  } else if (variant == "clean") {
    set_akt(true, false, false);
  } else if (variant == "adv") {
    set_akt(false, true, false);
  } else if (variant == "clean+skl") {
    set_akt(true, false, true);
  } else if (variant == "clean+adv") {
    set_akt(true, true, false);
  } else if (variant == "adv+skl") {
    set_akt(false, true, true);
  } else {
    std::string names;
    for (const auto& v : valid_variants()) {
      if (!names.empty()) names += ", ";
      names += v;
    }
    throw std::invalid_argument("unknown variant '" + variant +
                                "' (valid: " + names + ")");
  }
  return cfg;
}

}  // namespace heartpfl::cli
