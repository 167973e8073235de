#include <cmath>
#include <numeric>

#include "doctest.h"
#include "fd_check.hpp"
#include "heartpfl/akt.hpp"

using namespace heartpfl;
using heartpfl::testing::random_signed;

namespace {

Model base_model(std::uint64_t seed, std::size_t classes = 3,
                 std::size_t dim = 5) {
  BackboneSpec spec;
  spec.input_dim = dim;
  spec.widths = {6, 6};
  spec.num_classes = classes;
  Dataset pool = generate_gaussian_mixture(classes, dim, 48, 2.0, seed);
  PretrainConfig pc;
  pc.epochs = 2;
  pc.batch = 16;
  pc.proto_dim = 3;
  return pretrain_and_freeze(spec, pool, pc, seed);
}

Model randomized(const Model& base, std::uint64_t seed, bool trainable) {
  Model m = base.clone(ModelRole::kLocal, trainable);
  Rng rng(seed);
  std::vector<Tensor> ts;
  for (auto& blk : m.adapter.blocks) {
    ts.push_back(blk.norm_scale);
    ts.push_back(blk.norm_shift);
    ts.push_back(blk.linear);
  }
  ts.push_back(m.adapter.head_w);
  ts.push_back(m.adapter.head_b);
  for (auto& t : ts) {
    for (auto& v : t.values()) v += 0.4 * rng.normal();
  }
  return m;
}

Tensor random_batch(std::size_t rows, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::matrix(rows, dim, random_signed(rows * dim, rng));
}

}  // namespace

TEST_CASE("ensemble probabilities") {
  Model base = base_model(7);
  Tensor x = random_batch(6, 5, 70);

  SUBCASE("single model equals its own softmax") {
    std::vector<Model> locals = {randomized(base, 1, false)};
    Tensor ens = akt::ensemble_probs(locals, x);
    Tensor sm = softmax(forward_logits(locals[0], x, false));
    for (std::size_t i = 0; i < ens.numel(); ++i) {
      CHECK(ens.values()[i] == doctest::Approx(sm.values()[i]).epsilon(1e-15));
    }
  }
  SUBCASE("identical models equal either one") {
    Model a = randomized(base, 2, false);
    std::vector<Model> locals = {a.clone(ModelRole::kLocal, false),
                                 a.clone(ModelRole::kLocal, false)};
    Tensor ens = akt::ensemble_probs(locals, x);
    Tensor sm = softmax(forward_logits(a, x, false));
    for (std::size_t i = 0; i < ens.numel(); ++i) {
      CHECK(ens.values()[i] == doctest::Approx(sm.values()[i]).epsilon(1e-14));
    }
  }
  SUBCASE("three random models match the direct averaging oracle") {
    std::vector<Model> locals = {randomized(base, 3, false),
                                 randomized(base, 4, false),
                                 randomized(base, 5, false)};
    Tensor ens = akt::ensemble_probs(locals, x);
    std::vector<double> expect(ens.numel(), 0.0);
    for (const auto& m : locals) {
      Tensor sm = softmax(forward_logits(m, x, false));
      for (std::size_t i = 0; i < expect.size(); ++i) expect[i] += sm.values()[i];
    }
    for (std::size_t i = 0; i < expect.size(); ++i) {
      CHECK(std::abs(ens.values()[i] - expect[i] / 3.0) < 1e-12);
    }
    // rows stay normalized
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 3; ++c) s += ens.values()[r * 3 + c];
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
  SUBCASE("empty ensemble is an error") {
    CHECK_THROWS_AS(akt::ensemble_probs({}, x), std::invalid_argument);
  }
}

TEST_CASE("ekt loss") {
  Model base = base_model(11);
  Tensor x = random_batch(5, 5, 110);

  SUBCASE("global identical to the single local scores zero") {
    Model local = randomized(base, 6, false);
    Model global = local.clone(ModelRole::kGlobal, true);
    std::vector<Model> locals = {std::move(local)};
    CHECK(akt::ekt_loss(global, locals, x).item() ==
          doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("nonnegative on random pairs, matches per-sample oracle") {
    Model global = randomized(base, 7, true);
    std::vector<Model> locals = {randomized(base, 8, false),
                                 randomized(base, 9, false)};
    const double v = akt::ekt_loss(global, locals, x).item();
    CHECK(v >= 0.0);
    // oracle: mean over rows of sum_j pbar log(pbar/pg)
    Tensor pbar = akt::ensemble_probs(locals, x);
    Tensor pg = softmax(forward_logits(global, x, false));
    double total = 0.0;
    for (std::size_t i = 0; i < pbar.numel(); ++i) {
      const double p = pbar.values()[i];
      const double q = std::max(pg.values()[i], kKlFloor);
      total += p * (std::log(std::max(p, kKlFloor)) - std::log(q));
    }
    total /= 5.0;
    CHECK(std::abs(v - total) < 1e-12);
  }
}

TEST_CASE("symmetric kl loss") {
  Model base = base_model(13);
  Tensor x = random_batch(4, 5, 130);
  Model global = randomized(base, 10, true);
  std::vector<Model> locals = {randomized(base, 11, false),
                               randomized(base, 12, false)};

  SUBCASE("zero when the streams coincide") {
    Model same = locals[0].clone(ModelRole::kGlobal, true);
    std::vector<Model> single = {locals[0].clone(ModelRole::kLocal, false)};
    CHECK(akt::symmetric_kl_loss(same, single, x).item() ==
          doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("equals ekt plus the reverse direction") {
    const double skl = akt::symmetric_kl_loss(global, locals, x).item();
    const double fwd = akt::ekt_loss(global, locals, x).item();
    Tensor pbar = akt::ensemble_probs(locals, x);
    Tensor pg = softmax(forward_logits(global, x, false));
    const double rev = kl_divergence(pg, pbar).item();
    CHECK(skl == doctest::Approx(fwd + rev).epsilon(1e-12));
  }
  SUBCASE("stream swap leaves the value unchanged exactly") {
    // KL(a||b)+KL(b||a) vs KL(b||a)+KL(a||b) on the same evaluated tensors
    Tensor pbar = akt::ensemble_probs(locals, x);
    Tensor pg = softmax(forward_logits(global, x, false));
    const double ab = kl_divergence(pbar, pg).item() + kl_divergence(pg, pbar).item();
    const double ba = kl_divergence(pg, pbar).item() + kl_divergence(pbar, pg).item();
    CHECK(ab == ba);
  }
  SUBCASE("gradient into the global adapter matches finite differences") {
    auto loss = [&]() { return akt::symmetric_kl_loss(global, locals, x); };
    auto report = heartpfl::testing::fd_compare(global.adapter.trainable(), loss);
    CHECK(report.max_err < 1e-4);
  }
}

TEST_CASE("pgd generation") {
  Model base = base_model(17);
  Model target = randomized(base, 14, false);
  Tensor x = random_batch(4, 5, 170);
  std::vector<int> labels = {0, 1, 2, 0};

  SUBCASE("zero radius returns the input exactly") {
    akt::PgdConfig cfg;
    cfg.epsilon = 0.0;
    cfg.step_size = 0.1;
    cfg.allow_large_step = true;
    Tensor adv = akt::pgd_generate(x, labels, target, cfg, 1);
    CHECK(adv.values() == x.values());
  }
  SUBCASE("projection bound holds elementwise") {
    Rng rng(171);
    for (int t = 0; t < 50; ++t) {
      akt::PgdConfig cfg;
      cfg.epsilon = rng.uniform(0.01, 0.5);
      cfg.step_size = cfg.epsilon / 4.0;
      cfg.steps = 1 + static_cast<std::size_t>(rng.below(6));
      Tensor xb = random_batch(3, 5, 172 + static_cast<std::uint64_t>(t));
      Tensor adv = akt::pgd_generate(xb, {0, 1, 2}, target, cfg,
                                     static_cast<std::uint64_t>(t));
      for (std::size_t i = 0; i < adv.numel(); ++i) {
        CHECK(std::abs(adv.values()[i] - xb.values()[i]) <= cfg.epsilon);
      }
    }
  }
  SUBCASE("model parameter values are untouched") {
    const std::uint64_t before = target.adapter.checksum();
    const std::uint64_t backbone_before = target.backbone->checksum();
    akt::PgdConfig cfg;
    akt::pgd_generate(x, labels, target, cfg, 3);
    CHECK(target.adapter.checksum() == before);
    CHECK(target.backbone->checksum() == backbone_before);
  }
  SUBCASE("single step on a linear model matches the analytic oracle") {
    // model: logits = x W + b through an identity trunk is not available, so
    // derive the oracle from the autodiff input gradient instead: one step of
    // sign ascent from a fixed start with no random init.
    akt::PgdConfig cfg;
    cfg.epsilon = 0.2;
    cfg.step_size = 0.05;
    cfg.steps = 1;
    cfg.random_init = false;
    Tensor adv = akt::pgd_generate(x, labels, target, cfg, 4);
    Tensor xt = x.detached(true);
    backward(cross_entropy(forward_logits(target, xt, false), labels));
    const auto& g = xt.grad();
    for (std::size_t i = 0; i < adv.numel(); ++i) {
      const double step = g[i] > 0.0 ? 0.05 : (g[i] < 0.0 ? -0.05 : 0.0);
      const double expect =
          std::clamp(x.values()[i] + step, x.values()[i] - 0.2, x.values()[i] + 0.2);
      CHECK(adv.values()[i] == doctest::Approx(expect).epsilon(1e-10));
    }
  }
  SUBCASE("invalid labels are rejected") {
    akt::PgdConfig cfg;
    CHECK_THROWS_AS(akt::pgd_generate(x, {0, 1, 2, 5}, target, cfg, 1),
                    std::out_of_range);
  }
  SUBCASE("step larger than the ball is rejected unless allowed") {
    akt::PgdConfig cfg;
    cfg.epsilon = 0.1;
    cfg.step_size = 0.5;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.allow_large_step = true;
    CHECK_NOTHROW(cfg.validate());
  }
}

TEST_CASE("proxy view construction") {
  Model base = base_model(19);
  Model global = randomized(base, 20, true);
  std::vector<Model> locals = {randomized(base, 21, false),
                               randomized(base, 22, false)};
  Tensor x = random_batch(4, 5, 190);
  std::vector<int> labels = {0, 1, 2, 1};

  akt::AktConfig cfg;
  SUBCASE("clean only") {
    cfg.use_adversarial = false;
    auto views = akt::build_proxy_views(x, labels, locals, global, cfg, 1);
    REQUIRE(views.size() == 1);
    CHECK(views[0].values() == x.values());
  }
  SUBCASE("adversarial only: one view per local plus the global") {
    cfg.use_clean = false;
    auto views = akt::build_proxy_views(x, labels, locals, global, cfg, 2);
    CHECK(views.size() == 3);
    for (const auto& v : views) {
      for (std::size_t i = 0; i < v.numel(); ++i) {
        CHECK(std::abs(v.values()[i] - x.values()[i]) <= cfg.pgd.epsilon);
      }
    }
  }
  SUBCASE("both flags off is invalid") {
    cfg.use_clean = false;
    cfg.use_adversarial = false;
    CHECK_THROWS_AS(akt::build_proxy_views(x, labels, locals, global, cfg, 3),
                    std::invalid_argument);
  }
}

TEST_CASE("akt update") {
  Model base = base_model(23);
  Dataset proxy = generate_gaussian_mixture(3, 5, 32, 2.0, 230);

  SUBCASE("single local identical to the global: zero loss, no movement") {
    Model global = randomized(base, 24, true);
    std::vector<Model> locals = {global.clone(ModelRole::kLocal, false)};
    akt::AktConfig cfg;
    cfg.use_adversarial = false;
    cfg.use_symmetric_kl = false;
    const std::uint64_t before = global.adapter.checksum();
    auto stats = akt::akt_update(global, locals, proxy, true, cfg, 5);
    for (double l : stats.losses) CHECK(l == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(global.adapter.checksum() == before);
  }
  SUBCASE("locals and backbone are bit-unchanged by the update") {
    Model global = randomized(base, 25, true);
    std::vector<Model> locals = {randomized(base, 26, false),
                                 randomized(base, 27, false)};
    std::vector<std::uint64_t> sums;
    for (const auto& m : locals) sums.push_back(m.adapter.checksum());
    const std::uint64_t backbone = base.backbone->checksum();
    akt::AktConfig cfg;
    akt::akt_update(global, locals, proxy, true, cfg, 6);
    for (std::size_t i = 0; i < locals.size(); ++i) {
      CHECK(locals[i].adapter.checksum() == sums[i]);
    }
    CHECK(base.backbone->checksum() == backbone);
  }
  SUBCASE("distillation reduces the mean symmetric kl on the proxy") {
    Model global = randomized(base, 28, true);
    std::vector<Model> locals = {randomized(base, 29, false),
                                 randomized(base, 30, false),
                                 randomized(base, 31, false)};
    std::vector<std::size_t> all(proxy.size());
    std::iota(all.begin(), all.end(), 0);
    Tensor x = proxy.batch_features(all);
    const double before = akt::symmetric_kl_loss(global, locals, x).item();
    akt::AktConfig cfg;
    cfg.server_epochs = 8;
    akt::akt_update(global, locals, proxy, true, cfg, 7);
    const double after = akt::symmetric_kl_loss(global, locals, x).item();
    CHECK(after < before);
  }
  SUBCASE("out-of-domain proxies run on pseudo labels") {
    Model global = randomized(base, 32, true);
    std::vector<Model> locals = {randomized(base, 33, false)};
    Dataset ood = generate_shifted_mixture(3, 5, 24, 2.0, 1.3, 231, "ood");
    akt::AktConfig cfg;
    CHECK_NOTHROW(akt::akt_update(global, locals, ood, false, cfg, 8));
  }
  SUBCASE("sum reduction scales the loss by the batch size") {
    Model global = randomized(base, 34, true);
    std::vector<Model> locals = {randomized(base, 35, false)};
    std::vector<std::size_t> all(proxy.size());
    std::iota(all.begin(), all.end(), 0);
    Tensor x = proxy.batch_features(all);
    const double mean_v = akt::symmetric_kl_loss(global, locals, x, false).item();
    const double sum_v = akt::symmetric_kl_loss(global, locals, x, true).item();
    CHECK(sum_v == doctest::Approx(mean_v * static_cast<double>(proxy.size()))
                       .epsilon(1e-12));
  }
}
