#include <gtest/gtest.h>

#include <cmath>

#include "mdkto/objective.hpp"
#include "test_util.hpp"

namespace mdkto {
namespace {

using testing::constant_predictor;
using testing::finite_difference;
using testing::max_relative_error;
using testing::random_seq;
using testing::small_config;

double grid_sup(double beta, const std::function<double(double)>& f) {
  const int n = 1'000'000;
  const double lo = -200.0 / beta, hi = 200.0 / beta;
  double best = 0.0;
  for (int i = 0; i <= n; ++i) best = std::max(best, std::abs(f(lo + (hi - lo) * i / n)));
  return best;
}

TEST(Link, MidpointAndSaturation) {
  for (double beta : {0.1, 1.0, 7.0}) EXPECT_EQ(link(0.0, beta), 0.5);
  EXPECT_EQ(link(800.0, 1.0), 1.0);
  EXPECT_EQ(link(-800.0, 1.0), 0.0);
  for (double z : {-700.0, -350.0, 350.0, 700.0}) {
    EXPECT_TRUE(std::isfinite(link(z, 1.0)));
    EXPECT_TRUE(std::isfinite(link_deriv(z, 1.0)));
  }
  EXPECT_NEAR(link(1.0, 1.0) + link(-1.0, 1.0), 1.0, 1e-15);
}

TEST(Link, DerivativeSuprema) {
  EXPECT_NEAR(grid_sup(0.1, [](double u) { return link_deriv(u, 0.1); }), 0.025, 1e-6);
  EXPECT_NEAR(link_lipschitz(0.1), 0.025, 1e-15);
  const double h = 1e-5;
  const double sup2 = grid_sup(0.2, [&](double u) {
    return (link_deriv(u + h, 0.2) - link_deriv(u - h, 0.2)) / (2 * h);
  });
  EXPECT_NEAR(sup2, 0.0038490, 1e-7);
  EXPECT_NEAR(link_deriv_lipschitz(0.2), 0.2 * 0.2 / (6 * std::sqrt(3.0)), 1e-15);
}

TEST(GlobalBaseline, Means) {
  const std::vector<double> one{0.7}, sym{1.0, -1.0}, three{0.2, 0.4, 0.9};
  EXPECT_EQ(global_baseline(one), 0.7);
  EXPECT_EQ(global_baseline(sym), 0.0);
  EXPECT_NEAR(global_baseline(three), 0.5, 1e-15);
  EXPECT_THROW(global_baseline(std::vector<double>{}), ContractError);
}

TEST(KtoLoss, HandEvaluations) {
  KtoConfig cfg{1.0, 1.0, 1.0};
  const std::vector<double> lam{1.0, 1.0};
  const auto ms = make_margins({1.0, -1.0}, {+1, -1});
  EXPECT_EQ(ms.b0_hat, 0.0);
  const double expected = 1.0 - 1.0 / (1.0 + std::exp(-1.0));
  EXPECT_NEAR(kto_loss_from_margins(ms, lam, cfg).loss, expected, 1e-15);
  EXPECT_NEAR(expected, 0.26894, 1e-5);

  const auto single = make_margins({3.3}, {-1});
  EXPECT_EQ(single.delta_hat[0], 0.0);
  EXPECT_EQ(kto_loss_from_margins(single, std::vector<double>{0.6}, cfg).loss, 0.3);

  const auto flat = make_margins({2.0, 2.0, 2.0}, {+1, -1, -1});
  const std::vector<double> lam3{1.0, 0.5, 0.5};
  EXPECT_NEAR(kto_loss_from_margins(flat, lam3, cfg).loss, (2.0 / 3.0) / 2.0, 1e-15);
}

TEST(KtoLoss, BoundedTranslationInvariantAndCentered) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(8));
    KtoConfig cfg{0.05 + 3.0 * rng.uniform(), 0.1 + rng.uniform(), 0.1 + rng.uniform()};
    std::vector<double> r(m), lam(m);
    std::vector<int> s(m);
    for (int i = 0; i < m; ++i) {
      r[i] = 20.0 * rng.normal();
      s[i] = rng.below(2) ? 1 : -1;
      lam[i] = cfg.lambda_for(s[i]);
    }
    const auto ms = make_margins(r, s);
    const auto rep = kto_loss_from_margins(ms, lam, cfg);
    EXPECT_GE(rep.loss, 0.0);
    EXPECT_LE(rep.loss, cfg.lambda_max());
    double centered = 0.0;
    for (double x : ms.r_hat) centered += x - ms.b0_hat;
    EXPECT_NEAR(centered, 0.0, 1e-10);

    const double kappa = 10.0 * rng.normal();
    std::vector<double> shifted = r;
    for (double& x : shifted) x += kappa;
    const auto ms2 = make_margins(shifted, s);
    const auto rep2 = kto_loss_from_margins(ms2, lam, cfg);
    EXPECT_NEAR(rep2.loss, rep.loss, 1e-12);
    const auto a = kto_weights(ms, lam, cfg), a2 = kto_weights(ms2, lam, cfg);
    for (int i = 0; i < m; ++i) {
      EXPECT_NEAR(ms2.delta_hat[i], ms.delta_hat[i], 1e-10);
      EXPECT_NEAR(a2[i], a[i], 1e-12);
      EXPECT_LE(std::abs(a[i]), cfg.lambda_max() * cfg.beta / 4.0 + 1e-15);
    }
  }
}

struct GradFixture {
  ModelConfig cfg = small_config(3, 10);
  ModelParams policy = ModelParams::random(cfg, 0.8, 1);
  ModelParams ref = ModelParams::random(cfg, 0.8, 2);
  KtoConfig kto{0.7, 1.0, 0.6};
  EstimatorDesign design;

  Minibatch batch(std::uint64_t seed, int m) const {
    Minibatch b;
    for (int i = 0; i < m; ++i)
      b.items.push_back(make_item(random_seq(cfg.vocab, 2, 3 + i % 3, seed + i), i % 2 == 0, kto));
    return b;
  }
};

TEST(ElboMargin, ClosedFormsAndOracle) {
  GradFixture f;
  const auto seq = random_seq(f.cfg.vocab, 2, 4, 9);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto [a, b] = elbo_pair(f.policy, f.policy, seq, f.design, s);
    EXPECT_EQ(a.value - b.value, 0.0);
  }

  const auto cfg2 = small_config(2);
  const TokenSeq zeros{{1}, {0, 0, 0, 0}};
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto [a, b] = elbo_pair(ModelParams::zeros(cfg2), constant_predictor(cfg2, 0), zeros, f.design, s);
    EXPECT_NEAR(a.value - b.value, -4.0 * std::log(2.0), 1e-12);
  }

  std::vector<double> r;
  for (int s = 0; s < 10000; ++s) {
    const auto [a, b] = elbo_pair(f.policy, f.ref, seq, f.design, mix_seed(4, s));
    r.push_back(a.value - b.value);
  }
  const double exact = elbo_exact(f.policy, seq, MaskForm::l_form) - elbo_exact(f.ref, seq, MaskForm::l_form);
  EXPECT_LE(std::abs(mean(r) - exact), 4.0 * mean_se(r));
}

// Loss as a function of the policy with the reference values and baseline held fixed.
double frozen_loss(const ModelParams& p, const Minibatch& batch, const BatchEval& ev, double b0,
                   const KtoConfig& kto) {
  double total = 0.0;
  for (int i = 0; i < batch.size(); ++i) {
    const double r = evaluate_draw(p, batch.items[i].seq, ev.draws[i].policy) - ev.ref_elbo[i];
    total += batch.items[i].lambda * (1.0 - link(batch.items[i].s * (r - b0), kto.beta));
  }
  return total / batch.size();
}

double unfrozen_loss(const ModelParams& p, const Minibatch& batch, const BatchEval& ev, const KtoConfig& kto) {
  std::vector<double> r;
  for (int i = 0; i < batch.size(); ++i)
    r.push_back(evaluate_draw(p, batch.items[i].seq, ev.draws[i].policy) - ev.ref_elbo[i]);
  return kto_loss_from_margins(make_margins(r, batch_signs(batch)), batch_lambdas(batch), kto).loss;
}

TEST(KtoGrad, MatchesFrozenBaselineFiniteDifferences) {
  GradFixture f;
  for (std::uint64_t inst = 0; inst < 3; ++inst) {
    const auto batch = f.batch(100 + 10 * inst, 4);
    const auto ev = evaluate_batch(f.policy, f.ref, batch, f.design, inst, true);
    const auto step = kto_from_eval(ev, batch, f.kto, BaselineMode::global_mean);
    const auto fd = finite_difference(
        [&](const ModelParams& p) { return frozen_loss(p, batch, ev, step.margins.b0_hat, f.kto); }, f.policy);
    EXPECT_LE(max_relative_error(step.grad->grad, fd), 1e-4) << "instance " << inst;

    // The public entry point draws the same noise for loss and gradient.
    const auto g = kto_grad(f.policy, f.ref, batch, f.kto, f.design, inst);
    EXPECT_EQ(g.grad, step.grad->grad);
    const auto [loss, ms] = kto_loss(f.policy, f.ref, batch, f.kto, f.design, inst);
    EXPECT_EQ(loss.loss, step.loss.loss);
    EXPECT_EQ(ms.r_hat, step.margins.r_hat);
    for (double a : g.a_hat) EXPECT_LE(std::abs(a), f.kto.lambda_max() * f.kto.beta / 4.0);
  }
}

TEST(KtoGrad, StopGradientIsReal) {
  GradFixture f;
  const auto batch = f.batch(7, 3);
  const auto ev = evaluate_batch(f.policy, f.ref, batch, f.design, 5, true);
  const auto step = kto_from_eval(ev, batch, f.kto, BaselineMode::global_mean);
  ASSERT_NE(step.margins.r_hat[0], step.margins.r_hat[1]);
  const auto fd = finite_difference([&](const ModelParams& p) { return unfrozen_loss(p, batch, ev, f.kto); },
                                    f.policy);
  EXPECT_GT(max_relative_error(step.grad->grad, fd), 1e-2);
}

TEST(KtoGrad, SymmetricPointCancels) {
  GradFixture f;
  const auto seq = random_seq(f.cfg.vocab, 2, 4, 3);
  KtoConfig kto{0.5, 1.0, 1.0};
  Minibatch batch{{make_item(seq, true, kto), make_item(seq, false, kto)}};
  EstimatorDesign d;
  d.share_across_items = true;
  const auto g = kto_grad(f.policy, f.ref, batch, kto, d, 11);
  EXPECT_EQ(g.a_hat[0], -g.a_hat[1]);
  for (double x : g.grad.values()) EXPECT_EQ(x, 0.0);
}

TEST(KtoGrad, NoBaselineModeUsesRawMargins) {
  GradFixture f;
  const auto batch = f.batch(21, 4);
  const auto [loss, ms] = kto_loss(f.policy, f.ref, batch, f.kto, f.design, 3, BaselineMode::none);
  EXPECT_EQ(ms.b0_hat, 0.0);
  for (int i = 0; i < batch.size(); ++i) EXPECT_EQ(ms.delta_hat[i], ms.s[i] * ms.r_hat[i]);
}

TEST(AttachExact, NoiseFreeTwinsAreCentered) {
  GradFixture f;
  const auto batch = f.batch(31, 5);
  auto [loss, ms] = kto_loss(f.policy, f.ref, batch, f.kto, f.design, 1);
  attach_exact(ms, f.policy, f.ref, batch);
  ASSERT_TRUE(ms.r && ms.b0 && ms.delta);
  double s = 0.0;
  for (double x : *ms.r) s += x - *ms.b0;
  EXPECT_NEAR(s, 0.0, 1e-10);
}

TEST(Vrpo, DegenerateCases) {
  GradFixture f;
  EstimatorDesign d;
  d.share_across_items = true;
  const PreferencePair same{{1, 2}, {0, 1, 2}, {0, 1, 2}};
  EXPECT_NEAR(vrpo_loss(f.policy, f.ref, same, 0.5, d, 3), std::log(2.0), 1e-12);
  const PreferencePair diff{{1, 2}, {0, 1, 2}, {2, 2, 0, 1}};
  EstimatorDesign plain;
  EXPECT_NEAR(vrpo_loss(f.policy, f.policy, diff, 0.5, plain, 4), std::log(2.0), 1e-12);
}

TEST(Vrpo, LossFallsMonotonicallyInBeta) {
  GradFixture f;
  const PreferencePair pair{{1}, {0, 1, 2, 1}, {2, 2, 0, 1}};
  EstimatorDesign d;
  // Pick a seed whose margin is positive, then sweep beta.
  std::uint64_t seed = 0;
  while (vrpo_step(f.policy, f.ref, pair, 1.0, d, seed, false).margin <= 0.0) ++seed;
  double prev = std::log(2.0);
  for (double beta : {0.01, 0.1, 1.0, 10.0, 100.0, 1000.0}) {
    const double loss = vrpo_loss(f.policy, f.ref, pair, beta, d, seed);
    EXPECT_LT(loss, prev);
    prev = loss;
  }
  EXPECT_LT(prev, 1e-6);
}

TEST(Vrpo, GradientMatchesFiniteDifferences) {
  GradFixture f;
  const PreferencePair pair{{1, 0}, {0, 1, 2, 1}, {2, 2, 0}};
  EstimatorDesign d;
  const auto step = vrpo_step(f.policy, f.ref, pair, 0.8, d, 9, true);
  const auto fd = finite_difference([&](const ModelParams& p) { return vrpo_loss(p, f.ref, pair, 0.8, d, 9); },
                                    f.policy);
  EXPECT_LE(max_relative_error(*step.grad, fd), 1e-4);
}

}  // namespace
}  // namespace mdkto
