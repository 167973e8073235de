#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "heartpfl/fed.hpp"

namespace heartpfl::cli {

struct ExperimentConfig {
  fed::FLConfig fl;
  std::string out_dir = "runs/out";
};

// Flat key-value config file: one `key = value` per line, dotted keys for
// nesting, `#` comments. Unknown keys are rejected.
ExperimentConfig parse_config_file(const std::string& path);
void apply_override(ExperimentConfig& cfg, const std::string& key,
                    const std::string& value);

// Deterministic full echo; re-ingesting it reproduces the run bit-identically.
std::string serialize_config(const ExperimentConfig& cfg);
std::uint64_t config_hash(const ExperimentConfig& cfg);

std::vector<std::string> known_keys();

// Ablation variant table: each name maps onto a method plus server flags.
fed::FLConfig variant_config(const fed::FLConfig& base,
                             const std::string& variant);
std::vector<std::string> valid_variants();

}  // namespace heartpfl::cli
