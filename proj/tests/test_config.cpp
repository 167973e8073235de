#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "heartpfl/config.hpp"

using namespace heartpfl;

namespace {

std::filesystem::path write_temp(const std::string& body) {
  const auto path =
      std::filesystem::temp_directory_path() / "heartpfl_cfg_test.cfg";
  std::ofstream out(path);
  out << body;
  return path;
}

}  // namespace

TEST_CASE("defaults round trip through serialize and parse") {
  cli::ExperimentConfig defaults;
  const std::string echo = cli::serialize_config(defaults);
  const auto path = write_temp(echo);
  cli::ExperimentConfig reparsed = cli::parse_config_file(path.string());
  CHECK(cli::serialize_config(reparsed) == echo);
  CHECK(cli::config_hash(reparsed) == cli::config_hash(defaults));
  std::filesystem::remove(path);
}

TEST_CASE("unknown keys are rejected with the offending name") {
  const auto path = write_temp("seed = 3\nnot.a.key = 1\n");
  try {
    cli::parse_config_file(path.string());
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("not.a.key") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("comments, blanks, and spacing are tolerated") {
  const auto path = write_temp(
      "# experiment\n"
      "\n"
      "seed = 12   # inline comment\n"
      "clients.count=6\n"
      "  data.class_sep =  3.5  \n");
  auto cfg = cli::parse_config_file(path.string());
  CHECK(cfg.fl.seed == 12);
  CHECK(cfg.fl.num_clients == 6);
  CHECK(cfg.fl.class_sep == 3.5);
  std::filesystem::remove(path);
}

TEST_CASE("override changes exactly the named field") {
  cli::ExperimentConfig a;
  cli::ExperimentConfig b;
  cli::apply_override(b, "clients.lr", "0.05");
  const std::string ea = cli::serialize_config(a);
  const std::string eb = cli::serialize_config(b);
  // exactly one line differs
  std::istringstream sa(ea), sb(eb);
  std::string la, lb;
  std::size_t diffs = 0;
  while (std::getline(sa, la) && std::getline(sb, lb)) {
    if (la != lb) {
      ++diffs;
      CHECK(lb == "clients.lr = 0.05");
    }
  }
  CHECK(diffs == 1);
}

TEST_CASE("bad values carry field-level messages") {
  cli::ExperimentConfig cfg;
  CHECK_THROWS_AS(cli::apply_override(cfg, "rounds", "abc"), std::invalid_argument);
  CHECK_THROWS_AS(cli::apply_override(cfg, "clients.lr", "fast"), std::invalid_argument);
  CHECK_THROWS_AS(cli::apply_override(cfg, "akt.use_clean", "maybe"), std::invalid_argument);
  CHECK_THROWS_AS(cli::apply_override(cfg, "data.proxy_mode", "sideways"), std::invalid_argument);
}

TEST_CASE("widths parse as a comma list") {
  cli::ExperimentConfig cfg;
  cli::apply_override(cfg, "model.widths", "16, 32,64");
  CHECK(cfg.fl.widths == std::vector<std::size_t>{16, 32, 64});
}

TEST_CASE("variant table") {
  fed::FLConfig base;
  SUBCASE("method variants") {
    CHECK(cli::variant_config(base, "baseline").method == fed::Method::kFedAvgPer);
    CHECK(cli::variant_config(base, "hda").method == fed::Method::kHdaOnly);
    CHECK(cli::variant_config(base, "akt").method == fed::Method::kAktOnly);
    CHECK(cli::variant_config(base, "full").method == fed::Method::kHeartPfl);
  }
  SUBCASE("server-flag variants") {
    auto clean = cli::variant_config(base, "clean");
    CHECK(clean.akt.use_clean);
    CHECK_FALSE(clean.akt.use_adversarial);
    CHECK_FALSE(clean.akt.use_symmetric_kl);
    auto adv_skl = cli::variant_config(base, "adv+skl");
    CHECK_FALSE(adv_skl.akt.use_clean);
    CHECK(adv_skl.akt.use_adversarial);
    CHECK(adv_skl.akt.use_symmetric_kl);
    auto full = cli::variant_config(base, "full");
    CHECK(full.akt.use_clean);
    CHECK(full.akt.use_adversarial);
    CHECK(full.akt.use_symmetric_kl);
  }
  SUBCASE("unknown variant lists the valid names") {
    try {
      cli::variant_config(base, "bogus");
      FAIL("expected rejection");
    } catch (const std::invalid_argument& e) {
      const std::string msg = e.what();
      CHECK(msg.find("bogus") != std::string::npos);
      CHECK(msg.find("clean+skl") != std::string::npos);
    }
  }
  SUBCASE("every advertised variant resolves") {
    for (const auto& name : cli::valid_variants()) {
      CHECK_NOTHROW(cli::variant_config(base, name));
    }
  }
}

TEST_CASE("method names round trip") {
  for (auto m : {fed::Method::kHeartPfl, fed::Method::kHdaOnly,
                 fed::Method::kAktOnly, fed::Method::kFedAvgPer,
                 fed::Method::kPlainEkt}) {
    CHECK(fed::method_from_string(fed::method_name(m)) == m);
  }
  CHECK_THROWS_AS(fed::method_from_string("zen"), std::invalid_argument);
}
