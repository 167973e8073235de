#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "heartpfl/config.hpp"
#include "heartpfl/fed.hpp"
#include "heartpfl/metrics.hpp"

namespace fs = std::filesystem;
using namespace heartpfl;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> overrides;  // key=value
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
  auto* c = cmd->add_option("--config", args.config_path, "Config file path");
  if (config_required) c->required();
  cmd->add_option("--out", args.out_dir, "Output directory");
  cmd->add_option("--set", args.overrides, "Override config key (key=value), repeatable");
  cmd->add_option("--seed", args.seed, "Master seed override")
      ->each([&args](const std::string&) { args.seed_set = true; });
}

cli::ExperimentConfig load_config(const CommonArgs& args) {
  cli::ExperimentConfig cfg = args.config_path.empty()
                                  ? cli::ExperimentConfig{}
                                  : cli::parse_config_file(args.config_path);
  for (const auto& kv : args.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    }
    cli::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (args.seed_set) cfg.fl.seed = args.seed;
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  cfg.fl.validate();
  return cfg;
}

void echo_config(const cli::ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  std::ofstream echo(fs::path(cfg.out_dir) / "config.resolved.cfg");
  echo << cli::serialize_config(cfg);
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

int cmd_run(const CommonArgs& args) {
  cli::ExperimentConfig cfg = load_config(args);
  const std::uint64_t hash = cli::config_hash(cfg);
  echo_config(cfg);
  auto result = fed::run_experiment(cfg.fl, cfg.out_dir, hash);

  std::ofstream summary(fs::path(cfg.out_dir) / "summary.csv");
  summary.precision(17);
  summary << "# config_hash=" << hash_hex(hash) << " seed=" << cfg.fl.seed << "\n";
  summary << "method,seed,rounds,final_pers_acc_mean,final_pers_acc_std,"
             "final_global_acc,partition_fingerprint\n";
  const auto& last = result.records.back();
  summary << fed::method_name(cfg.fl.method) << ',' << cfg.fl.seed << ','
          << cfg.fl.rounds << ',' << last.pers_acc_mean << ','
          << last.pers_acc_std << ',' << last.global_acc << ','
          << hash_hex(result.partition_fingerprint) << '\n';

  std::cout << "run complete: " << result.records.size() << " rounds, "
            << "final personalized acc " << last.pers_acc_mean
            << ", global acc " << last.global_acc << "\n"
            << "artifacts in " << cfg.out_dir << "\n";
  return 0;
}

int cmd_ablate(const CommonArgs& args, const std::vector<std::string>& variants,
               const std::vector<std::uint64_t>& seeds) {
  cli::ExperimentConfig base = load_config(args);
  std::vector<std::string> vars =
      variants.empty() ? std::vector<std::string>{"baseline", "hda", "akt", "full"}
                       : variants;
  std::vector<std::uint64_t> seed_list =
      seeds.empty() ? std::vector<std::uint64_t>{base.fl.seed} : seeds;

  // Validate names before any run starts.
  for (const auto& v : vars) cli::variant_config(base.fl, v);

  fs::create_directories(base.out_dir);
  const std::uint64_t hash = cli::config_hash(base);
  echo_config(base);

  struct Row {
    std::string variant;
    std::vector<double> pers, glob;
    std::uint64_t fingerprint = 0;
  };
  std::vector<Row> rows;
  for (const auto& v : vars) {
    Row row;
    row.variant = v;
    for (auto s : seed_list) {
      fed::FLConfig fl = cli::variant_config(base.fl, v);
      fl.seed = s;
      std::ostringstream sub;
      sub << base.out_dir << "/" << v << "_seed" << s;
      auto result = fed::run_experiment(fl, sub.str(), hash);
      row.pers.push_back(result.final_pers_acc_mean);
      row.glob.push_back(result.final_global_acc);
      row.fingerprint = result.partition_fingerprint;
      std::cout << v << " seed=" << s
                << " pers=" << result.final_pers_acc_mean
                << " global=" << result.final_global_acc << "\n";
    }
    rows.push_back(std::move(row));
  }

  std::ofstream table(fs::path(base.out_dir) / "ablate_summary.csv");
  table.precision(17);
  table << "# config_hash=" << hash_hex(hash) << " seed=" << base.fl.seed << "\n";
  table << "variant,partition_fingerprint";
  for (auto s : seed_list) table << ",pers_seed" << s;
  table << ",pers_mean";
  for (auto s : seed_list) table << ",global_seed" << s;
  table << ",global_mean\n";
  for (const auto& row : rows) {
    double pm = 0.0, gm = 0.0;
    for (double p : row.pers) pm += p;
    for (double g : row.glob) gm += g;
    pm /= static_cast<double>(row.pers.size());
    gm /= static_cast<double>(row.glob.size());
    table << row.variant << ',' << hash_hex(row.fingerprint);
    for (double p : row.pers) table << ',' << p;
    table << ',' << pm;
    for (double g : row.glob) table << ',' << g;
    table << ',' << gm << '\n';
  }
  std::cout << "ablation table written to " << base.out_dir
            << "/ablate_summary.csv\n";
  return 0;
}

int cmd_landscape(const CommonArgs& args, const std::string& checkpoint,
                  std::size_t grid_res, double grid_halfwidth) {
  cli::ExperimentConfig cfg = load_config(args);
  if (!fs::exists(checkpoint)) {
    std::cerr << "error: checkpoint not found: " << checkpoint << "\n";
    return 1;
  }
  Model model = load_model(checkpoint);
  fed::DataBundle data = fed::build_data(cfg.fl);
  auto grid = metrics::loss_landscape(model, data.client_pool, data.global_test,
                                      grid_halfwidth, grid_res,
                                      derive_seed(cfg.fl.seed, hash_tag("landscape")));
  fs::create_directories(cfg.out_dir);
  const std::string out = (fs::path(cfg.out_dir) / "landscape.csv").string();
  metrics::save_landscape_csv(grid, out, cli::config_hash(cfg), cfg.fl.seed);
  std::cout << "landscape grid (" << grid_res << "x" << grid_res
            << ") written to " << out << "\n"
            << "center loss " << grid.at(grid_res / 2, grid_res / 2) << "\n";
  return 0;
}

int cmd_partition_report(const CommonArgs& args) {
  cli::ExperimentConfig cfg = load_config(args);
  fed::DataBundle data = fed::build_data(cfg.fl);
  const std::string report = partition_report(data.partition, data.client_pool);
  std::cout << report;
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    std::ofstream out(fs::path(cfg.out_dir) / "partition_report.txt");
    out << "# config_hash=" << hash_hex(cli::config_hash(cfg))
        << " seed=" << cfg.fl.seed << "\n";
    out << report;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale personalized federated learning simulator "
               "(HDA client alignment + AKT server distillation)"};
  app.require_subcommand(1);

  CommonArgs run_args, ablate_args, land_args, part_args;
  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds;
  std::string checkpoint;
  std::size_t grid_res = 21;
  double grid_halfwidth = 1.0;

  auto* run = app.add_subcommand("run", "Run one experiment");
  add_common(run, run_args);

  auto* ablate = app.add_subcommand("ablate", "Run ablation variants under a shared seed/partition");
  add_common(ablate, ablate_args);
  ablate->add_option("--variants", variants, "Comma/space separated variant names")
      ->delimiter(',');
  ablate->add_option("--seeds", seeds, "Seeds for per-seed columns")->delimiter(',');

  auto* land = app.add_subcommand("landscape", "Loss surface around a checkpoint");
  add_common(land, land_args);
  land->add_option("--checkpoint", checkpoint, "Model checkpoint path")->required();
  land->add_option("--grid-res", grid_res, "Grid resolution (odd, >= 3)");
  land->add_option("--grid-halfwidth", grid_halfwidth, "Grid half width");

  auto* part = app.add_subcommand("partition-report", "Per-client class histograms");
  add_common(part, part_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(run_args);
    if (ablate->parsed()) return cmd_ablate(ablate_args, variants, seeds);
    if (land->parsed()) return cmd_landscape(land_args, checkpoint, grid_res, grid_halfwidth);
    if (part->parsed()) return cmd_partition_report(part_args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
