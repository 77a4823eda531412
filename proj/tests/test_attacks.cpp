#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hpr/attacks.hpp"
#include "hpr/ensemble.hpp"
#include "hpr/error.hpp"
#include "oracles.hpp"

using namespace hpr;

namespace {

// Two-class linear model with weight rows w0, w1 as a [d, 2] single layer.
Classifier linear_model(const std::vector<double>& w0, const std::vector<double>& w1, double b0,
                        double b1) {
  const std::size_t d = w0.size();
  Classifier c = Classifier::initialize(ModelSpec::mlp(d, 2, {}), 1);
  auto w = c.mutable_params().entries[0].value.mutable_data();
  for (std::size_t i = 0; i < d; ++i) {
    w[i * 2] = w0[i];
    w[i * 2 + 1] = w1[i];
  }
  auto b = c.mutable_params().entries[1].value.mutable_data();
  b[0] = b0;
  b[1] = b1;
  return c;
}

double sgn(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

}  // namespace

TEST(Attacks, BudgetValidation) {
  AttackBudget b;
  EXPECT_NEAR(b.epsilon, 8.0 / 255.0, 1e-15);
  EXPECT_EQ(b.queries, 500u);
  EXPECT_NEAR(b.step_size(), 2.0 * b.epsilon / 20.0, 1e-15);
  b.epsilon = -0.1;
  EXPECT_THROW(b.validate(), InvalidArgument);
  b = {};
  b.queries = 0;
  EXPECT_THROW(b.validate(), InvalidArgument);
}

TEST(Attacks, MarginLoss) {
  const std::vector<double> z{1.0, 3.0, 2.5};
  EXPECT_DOUBLE_EQ(margin_loss(z, 1), 0.5);
  EXPECT_DOUBLE_EQ(margin_loss(z, 0), -2.0);
}

TEST(Attacks, PgdOnLinearModelReachesTheOptimalCorner) {
  // For a two-class linear model the worst l-inf perturbation of the true
  // class is -eps * sign(w_y - w_other) coordinate-wise.
  const std::vector<double> w0{1.0, -2.0, 0.5, 3.0}, w1{-1.0, 1.0, 0.25, -2.0};
  const auto model = linear_model(w0, w1, 0.0, 0.0);
  const std::vector<double> x{0.5, 0.5, 0.5, 0.5};
  AttackBudget b;
  const AdvResult r = pgd(model, x, 0, b);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(r.delta[i], -b.epsilon * sgn(w0[i] - w1[i]), 1e-12);
  }
  EXPECT_TRUE(satisfies_constraints(r, x, b.epsilon));
}

TEST(Attacks, ZeroBudgetLeavesInputUnchanged) {
  const auto model = oracle::random_mlp(5, {4}, 3, 1);
  const std::vector<double> x{0.1, 0.2, 0.3, 0.4, 0.5};
  AttackBudget b;
  b.epsilon = 0.0;
  const AdvResult r = pgd(model, x, 1, b);
  for (double d : r.delta) EXPECT_EQ(d, 0.0);
  EXPECT_EQ(r.x_adv, x);
}

TEST(Attacks, BoxClippingAtTheCorners) {
  const auto model = oracle::random_mlp(3, {4}, 2, 5);
  const std::vector<double> x{0.0, 1.0, 0.995};
  const AdvResult r = pgd(model, x, 0, AttackBudget{});
  EXPECT_TRUE(satisfies_constraints(r, x, AttackBudget{}.epsilon));
  for (double v : r.x_adv) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Attacks, TransferWithZeroRadiusIsBitIdenticalToMomentumPgd) {
  std::vector<Classifier> members;
  for (std::uint64_t s = 0; s < 3; ++s) members.push_back(oracle::random_mlp(6, {5}, 3, 40 + s));
  EnsembleSpec spec;
  spec.kind = EnsembleKind::kFull;
  spec.nodes = 3;
  const EnsembleModel ens(spec, members);
  std::mt19937_64 gen(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> x(6);
    for (double& v : x) v = u(gen);
    const std::size_t y = t % 3;
    const AdvResult a = transfer_attack(ens, x, y, AttackBudget{}, 0.0);
    const AdvResult b = momentum_pgd(ens, x, y, AttackBudget{});
    EXPECT_EQ(a.x_adv, b.x_adv);
    EXPECT_EQ(a.delta, b.delta);
  }
}

TEST(Attacks, SamRadiusChangesTheIterates) {
  const auto model = oracle::random_mlp(6, {5}, 3, 3);
  const std::vector<double> x{0.2, 0.4, 0.6, 0.8, 0.3, 0.5};
  const AttackBudget b;
  const AdvResult a = transfer_attack(model, x, 0, b, b.epsilon / 2);
  EXPECT_TRUE(satisfies_constraints(a, x, b.epsilon));
}

TEST(Attacks, SquareScheduleHalvesAtMilestones) {
  const SquareOptions o;
  EXPECT_DOUBLE_EQ(square_p(o, 0, 500), 0.8);
  EXPECT_DOUBLE_EQ(square_p(o, 9, 500), 0.8);
  EXPECT_DOUBLE_EQ(square_p(o, 10, 500), 0.4);
  EXPECT_DOUBLE_EQ(square_p(o, 50, 500), 0.2);
  EXPECT_DOUBLE_EQ(square_p(o, 200, 500), 0.1);
  EXPECT_DOUBLE_EQ(square_p(o, 400, 500), 0.05);
  EXPECT_DOUBLE_EQ(square_p(o, 499, 500), 0.05);
}

TEST(Attacks, SquareAttackRespectsBudgetAndIsDeterministic) {
  const auto model = oracle::random_mlp(8, {6}, 4, 7);
  const auto m = oracle::mirror(model);
  std::size_t calls = 0;
  LogitOracle oracle_fn = [&](std::span<const double> x) {
    ++calls;
    return oracle::logits(m, x);
  };
  std::mt19937_64 gen(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  AttackBudget b;
  b.queries = 60;
  for (int t = 0; t < 10; ++t) {
    std::vector<double> x(8);
    for (double& v : x) v = u(gen);
    const std::size_t y = oracle::logits(m, x)[0] > oracle::logits(m, x)[1] ? 0 : 1;
    calls = 0;
    const AdvResult r = square_attack(oracle_fn, x, y, b, 11 + t);
    EXPECT_LE(calls, b.queries);
    EXPECT_EQ(calls, r.queries_used);
    EXPECT_TRUE(satisfies_constraints(r, x, b.epsilon));
    for (std::size_t k = 1; k < r.margin_trace.size(); ++k) {
      EXPECT_LT(r.margin_trace[k], r.margin_trace[k - 1]);
    }
    const AdvResult again = square_attack(oracle_fn, x, y, b, 11 + t);
    EXPECT_EQ(again.x_adv, r.x_adv);
  }
}

TEST(Attacks, SquareAttackStopsAtOnceOnMisclassifiedInput) {
  const auto model = linear_model({1.0, 1.0}, {-1.0, -1.0}, 0.0, 0.0);
  const auto m = oracle::mirror(model);
  LogitOracle f = [&](std::span<const double> x) { return oracle::logits(m, x); };
  const std::vector<double> x{0.5, 0.5};
  const AdvResult r = square_attack(f, x, 1, AttackBudget{}, 1);
  EXPECT_EQ(r.queries_used, 1u);
  EXPECT_TRUE(r.success);
  for (double d : r.delta) EXPECT_EQ(d, 0.0);
}

TEST(Attacks, SquareAttackOnLinearModelMatchesTheMarginOracle) {
  // Success is possible iff margin < eps * ||w0 - w1||_1 (interior points).
  const std::size_t d = 12;
  std::mt19937_64 gen(99);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> w0(d), w1(d, 0.0);
  for (double& v : w0) v = nd(gen);
  const double l1 = [&] {
    double s = 0.0;
    for (double v : w0) s += std::abs(v);
    return s;
  }();
  const auto model = linear_model(w0, w1, 0.0, 0.0);
  const auto m = oracle::mirror(model);
  LogitOracle f = [&](std::span<const double> x) { return oracle::logits(m, x); };
  const AttackBudget b;
  std::uniform_real_distribution<double> u(b.epsilon, 1.0 - b.epsilon);
  std::size_t near = 0, near_ok = 0, far = 0, far_ok = 0;
  for (int t = 0; t < 200; ++t) {
    std::vector<double> x(d);
    for (double& v : x) v = u(gen);
    double margin = 0.0;
    for (std::size_t i = 0; i < d; ++i) margin += w0[i] * x[i];
    // shift the bias so the clean margin is a chosen multiple of eps*||w||_1
    const double target = (t % 2 == 0 ? 0.6 : 1.4) * b.epsilon * l1;
    const auto shifted = linear_model(w0, w1, target - margin, 0.0);
    const auto ms = oracle::mirror(shifted);
    LogitOracle fs = [&](std::span<const double> p) { return oracle::logits(ms, p); };
    const AdvResult r = square_attack(fs, x, 0, b, 1000 + t);
    if (t % 2 == 0) {
      ++near;
      near_ok += r.success;
    } else {
      ++far;
      far_ok += r.success;
    }
  }
  EXPECT_GE(static_cast<double>(near_ok) / near, 0.95);
  EXPECT_EQ(far_ok, 0u);
  (void)f;
}

TEST(Attacks, EvaluationIsIndependentOfJobCount) {
  GeneratorConfig g;
  g.classes = 3;
  g.dims = 5;
  g.per_class = 10;
  const Dataset ds = generate(g);
  const auto target = oracle::random_mlp(5, {4}, 3, 1);
  const auto sur = oracle::random_mlp(5, {4}, 3, 2);
  const std::vector<std::size_t> ids{0, 3, 5, 9, 12, 20};
  AttackBudget b;
  b.queries = 40;
  EvalOptions one, four;
  one.seed = four.seed = 5;
  four.jobs = 4;
  const auto q1 = evaluate_query_attack(target, ds, ids, b, one);
  const auto q4 = evaluate_query_attack(target, ds, ids, b, four);
  ASSERT_EQ(q1.size(), ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    EXPECT_EQ(q1[i].x_adv, q4[i].x_adv);
    EXPECT_EQ(q1[i].sample_id, ids[i]);
    EXPECT_EQ(q1[i].true_label, ds.labels[ids[i]]);
  }
  const auto t1 = evaluate_transfer_attack(target, sur, ds, ids, b, one);
  for (const auto& r : t1) {
    EXPECT_EQ(r.queries_used, 0u);
    EXPECT_EQ(r.adv_label, target.predict(r.x_adv));
    EXPECT_EQ(r.success, r.adv_label != r.true_label);
  }
  const std::string jl = to_jsonl(t1);
  EXPECT_EQ(std::count(jl.begin(), jl.end(), '\n'), 6);
  EXPECT_NE(jl.find("\"true_label\""), std::string::npos);
}
