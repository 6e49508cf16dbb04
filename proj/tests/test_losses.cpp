#include <doctest.h>

#include <cmath>
#include <random>

#include "caft/errors.hpp"
#include "caft/losses.hpp"
#include "helpers.hpp"

using namespace caft;
using caft::testing::ptrs;
using caft::testing::random_param;
using caft::testing::random_tensor;

namespace {

Tensor random_log_probs(std::size_t T, std::size_t V, std::mt19937_64& rng) {
  Tape tape(false);
  return log_softmax_rows(tape.constant(random_tensor({T, V}, rng, -3, 3))).value();
}

CtcTarget random_feasible_target(std::size_t T, std::size_t V, std::size_t max_u,
                                 std::mt19937_64& rng) {
  for (;;) {
    CtcTarget t;
    const std::size_t u = std::uniform_int_distribution<std::size_t>(0, max_u)(rng);
    for (std::size_t k = 0; k < u; ++k) {
      t.tokens.push_back(std::uniform_int_distribution<int>(1, static_cast<int>(V) - 1)(rng));
    }
    if (t.min_frames() <= T) return t;
  }
}

double ctc_value(const Tensor& lp, const CtcTarget& target) {
  Tape tape(false);
  return ctc_loss(tape.constant(lp), target).item();
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("ctc single frame and empty target") {
  Tensor uniform(Shape{1, 3}, {std::log(1.0 / 3), std::log(1.0 / 3), std::log(1.0 / 3)});
  CHECK(ctc_value(uniform, {{1}}) == doctest::Approx(std::log(3.0)).epsilon(1e-14));

  std::mt19937_64 rng(1);
  const Tensor lp = random_log_probs(4, 3, rng);
  double blanks = 0;
  for (std::size_t t = 0; t < 4; ++t) blanks -= lp.at(t, 0);
  CHECK(ctc_value(lp, {}) == doctest::Approx(blanks).epsilon(1e-14));
}

TEST_CASE("ctc two-frame hand enumeration") {
  std::mt19937_64 rng(2);
  const Tensor lp = random_log_probs(2, 2, rng);
  const double paths[] = {lp.at(0, 1) + lp.at(1, 0), lp.at(0, 0) + lp.at(1, 1),
                          lp.at(0, 1) + lp.at(1, 1)};
  const double expected = -logsumexp(paths);
  CHECK(std::fabs(ctc_brute_force(lp, {{1}}) - expected) < 1e-12);
  CHECK(std::fabs(ctc_value(lp, {{1}}) - expected) < 1e-12);
}

TEST_CASE("ctc forward recursion agrees with enumeration") {
  std::mt19937_64 rng(3);
  double worst = 0;
  for (int k = 0; k < 300; ++k) {
    const std::size_t T = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
    const std::size_t V = std::uniform_int_distribution<std::size_t>(2, 3)(rng);
    const Tensor lp = random_log_probs(T, V, rng);
    const CtcTarget target = random_feasible_target(T, V, 3, rng);
    const double loss = ctc_value(lp, target);
    CHECK(loss >= 0.0);
    worst = std::max(worst, std::fabs(loss - ctc_brute_force(lp, target)));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("ctc infeasible targets are errors in both implementations") {
  std::mt19937_64 rng(4);
  const Tensor lp = random_log_probs(2, 3, rng);
  const CtcTarget repeat{{1, 1}};  // needs 3 frames
  CHECK(repeat.min_frames() == 3);
  CHECK_THROWS_AS(ctc_value(lp, repeat), InfeasibleTargetError);
  CHECK_THROWS_AS(ctc_brute_force(lp, repeat), InfeasibleTargetError);
  CHECK_THROWS_AS(ctc_value(lp, {{1, 2, 1}}), InfeasibleTargetError);
  CHECK_THROWS_AS(ctc_value(lp, {{0}}), ContractError);
  CHECK_THROWS_AS(ctc_value(lp, {{3}}), ContractError);
}

TEST_CASE("ctc brute force guards the path count") {
  std::mt19937_64 rng(5);
  const Tensor lp = random_log_probs(13, 3, rng);  // 3^13 > 1e6
  CHECK_THROWS_AS(ctc_brute_force(lp, {{1}}), ContractError);
}

TEST_CASE("ctc gradient matches finite differences") {
  std::mt19937_64 rng(6);
  for (int k = 0; k < 10; ++k) {
    const std::size_t T = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
    const std::size_t V = std::uniform_int_distribution<std::size_t>(2, 4)(rng);
    const CtcTarget target = random_feasible_target(T, V, 3, rng);
    std::vector<Parameter> ps{random_param("logits", {T, V}, rng, -2, 2)};
    auto f = [&](Tape& t) { return ctc_loss(log_softmax_rows(t.watch(ps[0])), target); };
    auto p = ptrs(ps);
    CHECK(grad_check(f, p) < 1e-4);
  }
}

TEST_CASE("greedy decode") {
  auto frames = [](std::vector<int> best, std::size_t V) {
    Tensor lp(Shape{best.size(), V});
    lp.fill(-5.0);
    for (std::size_t t = 0; t < best.size(); ++t) lp.at(t, static_cast<std::size_t>(best[t])) = -0.1;
    return lp;
  };
  CHECK(ctc_greedy_decode(frames({1, 1, 0, 1}, 3)) == std::vector<int>{1, 1});
  CHECK(ctc_greedy_decode(frames({0, 0, 0}, 3)).empty());
  CHECK(ctc_greedy_decode(frames({2, 2, 2}, 3)) == std::vector<int>{2});
  Tensor tie(Shape{1, 3}, {-1.0, -0.5, -0.5});
  CHECK(ctc_greedy_decode(tie) == std::vector<int>{1});
}

TEST_CASE("cross entropy") {
  Tape tape;
  CHECK(cross_entropy(tape.constant(Tensor(Shape{3})), 1).item() ==
        doctest::Approx(std::log(3.0)).epsilon(1e-15));
  CHECK(cross_entropy(tape.constant(Tensor(Shape{3}, {0, 1e3, 0})), 1).item() < 1e-300);
  CHECK_THROWS_AS(cross_entropy(tape.constant(Tensor(Shape{3})), 3), ContractError);
  std::mt19937_64 rng(7);
  std::vector<Parameter> ps{random_param("logits", {3}, rng, -2, 2)};
  auto f = [&](Tape& t) { return cross_entropy(t.watch(ps[0]), 2); };
  auto p = ptrs(ps);
  CHECK(grad_check(f, p) < 1e-6);
}

TEST_CASE("context loss") {
  Tape tape;
  auto emb = [&](std::vector<double> v, EmbeddingSource s) {
    const std::size_t n = v.size();
    return ContextEmbedding{tape.constant(Tensor(Shape{n}, std::move(v))), s};
  };
  const auto ej = emb({1, 1}, EmbeddingSource::from_neighbors);
  const auto ei = emb({4, 5}, EmbeddingSource::from_current);
  CHECK(context_loss(ej, ei).item() == 5.0);
  CHECK(context_loss(ei, ej).item() == context_loss(ej, ei).item());
  CHECK(context_loss(ei, ei).item() == 0.0);
  CHECK_THROWS_AS(context_loss(ej, emb({1, 2, 3}, EmbeddingSource::from_current)),
                  DimensionError);
}

TEST_CASE("total loss composition") {
  Tape tape;
  Var task = tape.variable(Tensor::scalar(1.5));
  Var ctx = tape.variable(Tensor::scalar(0.2));
  const LossBundle b = total_loss(task, ctx, 10.0);
  CHECK(b.total_value() == 1.5 + 10.0 * 0.2);
  CHECK(b.total_value() == doctest::Approx(3.5));
  const LossBundle z = total_loss(task, ctx, 0.0);
  CHECK(z.total_value() == 1.5);
  tape.backward(z.total);
  CHECK(tape.grad(ctx)[0] == 0.0);
  CHECK(tape.grad(task)[0] == 1.0);
  const LossBundle none = total_loss(task, std::nullopt, 10.0);
  CHECK(none.total.id == task.id);
  CHECK(none.context_value() == 0.0);
  CHECK_THROWS_AS(total_loss(task, ctx, -1.0), ContractError);
}

}  // TEST_SUITE
