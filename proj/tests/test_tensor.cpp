#include <cmath>
#include <set>

#include "doctest.h"
#include "fd_check.hpp"
#include "heartpfl/tensor.hpp"

using namespace heartpfl;
using heartpfl::testing::fd_compare;
using heartpfl::testing::random_distribution_row;
using heartpfl::testing::random_signed;

namespace {

// Direct-summation cross entropy, no shared code with the op.
double ce_oracle(const std::vector<double>& logits, std::size_t rows,
                 std::size_t cols, const std::vector<int>& labels) {
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    double denom = 0.0;
    for (std::size_t j = 0; j < cols; ++j) denom += std::exp(logits[i * cols + j]);
    const double p = std::exp(logits[i * cols + static_cast<std::size_t>(labels[i])]) / denom;
    total += -std::log(p);
  }
  return total / static_cast<double>(rows);
}

double kl_oracle(const std::vector<double>& p, const std::vector<double>& q,
                 std::size_t rows, std::size_t cols) {
  double total = 0.0;
  for (std::size_t i = 0; i < rows * cols; ++i) {
    const double ph = std::max(p[i], kKlFloor);
    const double qh = std::max(q[i], kKlFloor);
    total += p[i] * (std::log(ph) - std::log(qh));
  }
  return total / static_cast<double>(rows);
}

}  // namespace

TEST_CASE("softmax symmetry and normalization") {
  Tensor x = Tensor::vec({0.0, 0.0, 0.0});
  Tensor s = softmax(x);
  for (double v : s.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  Rng rng(7);
  for (int t = 0; t < 20; ++t) {
    Tensor m = Tensor::matrix(3, 5, random_signed(15, rng));
    Tensor sm = softmax(m);
    Tensor lsm = log_softmax(m);
    for (std::size_t i = 0; i < 3; ++i) {
      double row_sum = 0.0, exp_sum = 0.0;
      for (std::size_t j = 0; j < 5; ++j) {
        row_sum += sm.values()[i * 5 + j];
        exp_sum += std::exp(lsm.values()[i * 5 + j]);
      }
      CHECK(std::abs(row_sum - 1.0) < 1e-9);
      CHECK(std::abs(exp_sum - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("relu definition") {
  Tensor x = Tensor::vec({-1.0, 2.0});
  Tensor y = relu(x);
  CHECK(y.values()[0] == 0.0);
  CHECK(y.values()[1] == 2.0);
}

TEST_CASE("matmul of ones") {
  Tensor a = Tensor::matrix(2, 3, std::vector<double>(6, 1.0));
  Tensor b = Tensor::matrix(3, 2, std::vector<double>(6, 1.0));
  Tensor c = matmul(a, b);
  REQUIRE(c.shape() == std::vector<std::size_t>{2, 2});
  for (double v : c.values()) CHECK(v == 3.0);  // hand computation
}

TEST_CASE("shape errors name the op and shapes") {
  Tensor a = Tensor::matrix(2, 3, std::vector<double>(6, 1.0));
  Tensor b = Tensor::matrix(4, 2, std::vector<double>(8, 1.0));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("non-finite forward result raises a numeric fault") {
  Tensor big = Tensor::vec({1e308, 1e308});
  CHECK_THROWS_AS(mul(big, big), NumericError);
}

TEST_CASE("cross entropy values") {
  SUBCASE("confident correct is near zero") {
    Tensor logits = Tensor::matrix(1, 2, {10.0, -10.0});
    CHECK(cross_entropy(logits, {0}).item() == doctest::Approx(0.0).epsilon(1e-6));
  }
  SUBCASE("uniform logits give ln V") {
    for (std::size_t v : {2, 3, 7}) {
      Tensor logits = Tensor::matrix(1, v, std::vector<double>(v, 0.42));
      CHECK(cross_entropy(logits, {1}).item() ==
            doctest::Approx(std::log(static_cast<double>(v))).epsilon(1e-12));
    }
  }
  SUBCASE("random case matches direct-summation oracle") {
    Rng rng(11);
    auto vals = random_signed(12, rng);
    Tensor logits = Tensor::matrix(4, 3, vals);
    std::vector<int> labels = {2, 0, 1, 1};
    CHECK(std::abs(cross_entropy(logits, labels).item() -
                   ce_oracle(vals, 4, 3, labels)) < 1e-10);
  }
  SUBCASE("out of range label") {
    Tensor logits = Tensor::matrix(1, 3, {0.0, 0.0, 0.0});
    CHECK_THROWS_AS(cross_entropy(logits, {3}), std::out_of_range);
    CHECK_THROWS_AS(cross_entropy(logits, {-1}), std::out_of_range);
  }
  SUBCASE("nonnegative") {
    Rng rng(13);
    for (int t = 0; t < 20; ++t) {
      Tensor logits = Tensor::matrix(3, 4, random_signed(12, rng));
      CHECK(cross_entropy(logits, {0, 1, 2}).item() >= 0.0);
    }
  }
}

TEST_CASE("kl divergence laws") {
  SUBCASE("identity") {
    Tensor p = Tensor::vec({0.2, 0.3, 0.5});
    CHECK(kl_divergence(p, p).item() == doctest::Approx(0.0).epsilon(1e-15));
  }
  SUBCASE("one-hot vs uniform is ln 2") {
    Tensor p = Tensor::vec({1.0, 0.0});
    Tensor q = Tensor::vec({0.5, 0.5});
    CHECK(kl_divergence(p, q).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("random pair matches oracle and is nonnegative") {
    Rng rng(3);
    for (int t = 0; t < 50; ++t) {
      auto pv = random_distribution_row(6, rng);
      auto qv = random_distribution_row(6, rng);
      Tensor p = Tensor::vec(pv);
      Tensor q = Tensor::vec(qv);
      const double v = kl_divergence(p, q).item();
      CHECK(v >= 0.0);
      CHECK(std::abs(v - kl_oracle(pv, qv, 1, 6)) < 1e-12);
    }
  }
  SUBCASE("non-normalized rows rejected") {
    Tensor p = Tensor::vec({0.9, 0.3});
    Tensor q = Tensor::vec({0.5, 0.5});
    CHECK_THROWS_AS(kl_divergence(p, q), std::invalid_argument);
  }
}

TEST_CASE("cosine similarity") {
  Tensor v = Tensor::vec({1.0, -2.0, 0.5});
  CHECK(cosine_similarity(v, v).item() == doctest::Approx(1.0).epsilon(1e-12));
  Tensor neg = Tensor::vec({-1.0, 2.0, -0.5});
  CHECK(cosine_similarity(v, neg).item() == doctest::Approx(-1.0).epsilon(1e-12));
  Tensor e1 = Tensor::vec({1.0, 0.0});
  Tensor e2 = Tensor::vec({0.0, 1.0});
  CHECK(cosine_similarity(e1, e2).item() == 0.0);
  Tensor zero = Tensor::vec({0.0, 0.0});
  CHECK(cosine_similarity(zero, e1).item() == 0.0);
  CHECK_THROWS_AS(cosine_similarity(e1, Tensor::vec({1.0, 2.0, 3.0})), ShapeError);
  // range bound
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    Tensor a = Tensor::vec(random_signed(4, rng));
    Tensor b = Tensor::vec(random_signed(4, rng));
    const double c = cosine_similarity(a, b).item();
    CHECK(c >= -1.0);
    CHECK(c <= 1.0);
  }
}

TEST_CASE("mse") {
  Tensor v = Tensor::vec({1.0, 2.0});
  CHECK(mse(v, v).item() == 0.0);
  CHECK(mse(Tensor::vec({0.0, 0.0}), Tensor::vec({1.0, 1.0})).item() == 1.0);
  Rng rng(17);
  auto av = random_signed(8, rng);
  auto bv = random_signed(8, rng);
  double expect = 0.0;
  for (std::size_t i = 0; i < 8; ++i) expect += (av[i] - bv[i]) * (av[i] - bv[i]);
  expect /= 8.0;
  CHECK(std::abs(mse(Tensor::vec(av), Tensor::vec(bv)).item() - expect) < 1e-12);
  CHECK_THROWS_AS(mse(v, Tensor::vec({1.0, 2.0, 3.0})), ShapeError);
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives all-ones gradient") {
    Rng rng(1);
    Tensor w = Tensor::matrix(2, 3, random_signed(6, rng), true);
    backward(sum_all(w));
    for (double g : w.grad()) CHECK(g == 1.0);
  }
  SUBCASE("mse against zero") {
    Tensor w = Tensor::vec({3.0}, true);
    backward(mse(w, Tensor::vec({0.0})));
    CHECK(w.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
  }
  SUBCASE("non-scalar loss rejected") {
    Tensor w = Tensor::vec({1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(relu(w)), ShapeError);
  }
  SUBCASE("diamond graph accumulates each node exactly once") {
    Tensor x = Tensor::vec({2.0}, true);
    Tensor y = add(mul(x, x), mul(x, x));  // 2x^2, dy/dx = 4x = 8
    backward(sum_all(y));
    CHECK(x.grad()[0] == doctest::Approx(8.0).epsilon(1e-12));
  }
  SUBCASE("tape visits each node once") {
    Tensor x = Tensor::vec({1.5}, true);
    Tensor a = mul(x, x);
    Tensor loss = sum_all(add(a, a));
    Tape tape = Tape::build(loss);
    std::set<TensorNode*> seen;
    for (auto* n : tape.nodes()) {
      CHECK(seen.insert(n).second);  // no duplicates
    }
  }
  SUBCASE("non-participating leaves keep zero grads") {
    Tensor used = Tensor::vec({1.0}, true);
    Tensor unused = Tensor::vec({5.0}, true);
    unused.zero_grad();
    backward(sum_all(used));
    CHECK(unused.grad()[0] == 0.0);
  }
}

TEST_CASE("dropout semantics") {
  Rng rng(23);
  Tensor x = Tensor::vec(random_signed(64, rng));
  Rng r1(1);
  // identity cases share the node entirely
  CHECK(dropout(x, 0.3, false, r1).node() == x.node());
  CHECK(dropout(x, 0.0, true, r1).node() == x.node());
  CHECK_THROWS_AS(dropout(x, 1.0, true, r1), std::invalid_argument);
  // train mode zeros roughly p of entries and rescales the rest
  Rng r2(42);
  Tensor y = dropout(x, 0.5, true, r2);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < 64; ++i) {
    if (y.values()[i] == 0.0) {
      ++zeros;
    } else {
      CHECK(y.values()[i] == doctest::Approx(x.values()[i] * 2.0));
    }
  }
  CHECK(zeros > 8);
  CHECK(zeros < 56);
}

TEST_CASE("finite differences across every op (sampled)") {
  Rng rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const std::uint64_t mask_seed = derive_seed(900, trial);
    Tensor a = Tensor::matrix(3, 4, random_signed(12, rng), true);
    Tensor b = Tensor::matrix(4, 2, random_signed(8, rng), true);
    Tensor bias = Tensor::vec(random_signed(2, rng), true);
    Tensor gamma = Tensor::vec(random_signed(4, rng), true);
    Tensor beta = Tensor::vec(random_signed(4, rng), true);
    std::vector<int> labels = {1, 0, 1};

    auto composite = [&]() {
      Rng mask_rng(mask_seed);
      Tensor h = feature_norm(a, gamma, beta);
      h = dropout(h, 0.25, true, mask_rng);
      Tensor logits = add(matmul(relu(h), b), bias);
      Tensor ce = cross_entropy(logits, labels);
      Tensor sm = softmax(logits);
      Tensor pooled = segment_mean_pool(a, 2);
      Tensor extra = add(mean_all(sm), mean_all(pooled));
      Tensor r0 = row(a, 0);
      Tensor r1 = row(a, 1);
      Tensor cs = cosine_similarity(r0, r1);
      Tensor sel = select_rows(a, {2, 0});
      return add(add(ce, extra), add(cs, mean_all(mul(sel, sel))));
    };
    auto report = fd_compare({a, b, bias, gamma, beta}, composite);
    worst = std::max(worst, report.max_err);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("finite differences for kl and normalize_rows") {
  Rng rng(207);
  for (int trial = 0; trial < 5; ++trial) {
    // raw positives; normalize_rows turns them into distributions
    std::vector<double> pv(8), qv(8);
    for (auto& x : pv) x = rng.uniform(0.2, 1.0);
    for (auto& x : qv) x = rng.uniform(0.2, 1.0);
    Tensor p_raw = Tensor::matrix(2, 4, pv, true);
    Tensor q_raw = Tensor::matrix(2, 4, qv, true);
    auto loss = [&]() {
      return kl_divergence(normalize_rows(p_raw), normalize_rows(q_raw));
    };
    auto report = fd_compare({p_raw, q_raw}, loss);
    CHECK(report.max_err < 1e-4);
  }
}

TEST_CASE("deterministic forward under a fixed seed") {
  auto run = [] {
    Rng rng(77);
    Tensor a = Tensor::matrix(4, 4, random_signed(16, rng), true);
    Tensor b = Tensor::matrix(4, 3, random_signed(12, rng), true);
    Rng mask(5);
    Tensor out = softmax(matmul(dropout(relu(a), 0.2, true, mask), b));
    return out.values();
  };
  CHECK(run() == run());  // bit-identical
}
