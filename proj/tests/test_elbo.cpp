#include <gtest/gtest.h>

#include <cmath>

#include "mdkto/elbo.hpp"
#include "mdkto/variance.hpp"
#include "test_util.hpp"

namespace mdkto {
namespace {

using testing::constant_predictor;
using testing::random_seq;
using testing::small_config;

const double kLn2 = std::log(2.0);

struct Sample {
  std::vector<double> xs;
  double mean() const { return mdkto::mean(xs); }
  double se() const { return mean_se(xs); }
  double var() const { return variance(xs); }
  double var_se() const { return variance_se(xs); }
};

Sample mc_sample(const ModelParams& p, const TokenSeq& seq, const EstimatorDesign& d, int n, std::uint64_t base) {
  Sample s;
  for (int i = 0; i < n; ++i) s.xs.push_back(elbo_mc(p, seq, d, mix_seed(base, i)).value);
  return s;
}

TEST(PerStepLossT, HandComputedValues) {
  const auto cfg = small_config(2);
  const auto uniform = ModelParams::zeros(cfg);
  const TokenSeq seq{{1}, {0, 1, 1, 0}};
  auto none = apply_mask(seq, {0, 0, 0, 0}, cfg.vocab.mask_id());
  none.form = MaskForm::t_form;
  none.t = 0.5;
  EXPECT_EQ(per_step_loss_t(uniform, none, seq), 0.0);

  auto two = apply_mask(seq, {1, 0, 1, 0}, cfg.vocab.mask_id());
  two.form = MaskForm::t_form;
  two.t = 0.5;
  EXPECT_NEAR(per_step_loss_t(uniform, two, seq), -2.0 * 2.0 * kLn2, 1e-12);
  EXPECT_NEAR(per_step_loss_t(uniform, two, seq), -2.7726, 1e-4);

  two.t = 0.0;
  EXPECT_THROW(per_step_loss_t(uniform, two, seq), DomainError);
}

TEST(PerStepLossL, HandComputedValues) {
  const auto cfg = small_config(2);
  const auto uniform = ModelParams::zeros(cfg);
  const TokenSeq seq{{0}, {1, 1, 0, 1}};
  for (int l = 1; l <= 4; ++l) {
    const auto masked = forward_mask_l(seq, l, 17 + l, cfg.vocab);
    EXPECT_NEAR(per_step_loss_l(uniform, masked, seq), -4.0 * kLn2, 1e-12);
  }

  const TokenSeq zeros{{1}, {0, 0, 0, 0}};
  const auto perfect = constant_predictor(cfg, 0);
  EXPECT_EQ(per_step_loss_l(perfect, forward_mask_l(zeros, 4, 1, cfg.vocab), zeros), 0.0);

  // Output bias a on token 0 gives p(0) = sigmoid(a) under K = 2.
  auto biased = ModelParams::zeros(cfg);
  biased.block(Block::b_out)[0] = 0.8;
  const double p = 1.0 / (1.0 + std::exp(-0.8));
  EXPECT_NEAR(per_step_loss_l(biased, forward_mask_l(zeros, 1, 3, cfg.vocab), zeros), 4.0 * std::log(p), 1e-12);

  auto wrong = forward_mask_l(seq, 2, 1, cfg.vocab);
  wrong.l = 3;
  EXPECT_THROW(per_step_loss_l(uniform, wrong, seq), ContractError);
}

TEST(ElboExact, ClosedForms) {
  const auto cfg = small_config(2);
  const TokenSeq seq{{1, 0}, {0, 1, 1, 0}};
  for (auto form : {MaskForm::l_form, MaskForm::t_form})
    EXPECT_NEAR(elbo_exact(ModelParams::zeros(cfg), seq, form), -4.0 * kLn2, 1e-12);
  const TokenSeq zeros{{1}, {0, 0, 0}};
  for (auto form : {MaskForm::l_form, MaskForm::t_form})
    EXPECT_EQ(elbo_exact(constant_predictor(cfg, 0), zeros, form), 0.0);
}

TEST(ElboExact, FormsAgreeOnRandomModels) {
  for (std::uint64_t inst = 0; inst < 10; ++inst) {
    const int K = 2 + static_cast<int>(inst % 3);
    const int L = 1 + static_cast<int>(inst % 6);
    const auto cfg = small_config(K, 10);
    const auto params = ModelParams::random(cfg, 1.0, 300 + inst);
    const auto seq = random_seq(cfg.vocab, 2, L, 400 + inst);
    const double l_form = elbo_exact(params, seq, MaskForm::l_form);
    const double t_form = elbo_exact(params, seq, MaskForm::t_form);
    EXPECT_NEAR(l_form, t_form, 1e-9);
    EXPECT_LT(l_form, 0.0);
  }
}

TEST(ElboExact, RefusesLongSequences) {
  const auto cfg = small_config(2, 20);
  const TokenSeq seq{{}, std::vector<TokenId>(13, 0)};
  EXPECT_THROW(elbo_exact(ModelParams::zeros(cfg), seq, MaskForm::l_form), DomainError);
}

TEST(ExactDraw, WeightsFormAProbabilityScaledByLoss) {
  // Sum over subsets of weight * |S| equals E[(L/l) l] / L... i.e. for a predictor with
  // log p = -1 at every position the ELBO is exactly -L.
  for (int L = 1; L <= 8; ++L) {
    for (auto form : {MaskForm::l_form, MaskForm::t_form}) {
      double s = 0.0;
      for (const auto& d : exact_draw(form, L).samples) {
        int k = 0;
        for (auto f : d.mask) k += f;
        s += d.coef * k;
      }
      EXPECT_NEAR(s, L, 1e-12);
    }
  }
}

TEST(ElboMc, SingleSampleEqualsPerStepLoss) {
  const auto cfg = small_config(3);
  const auto params = ModelParams::random(cfg, 1.0, 8);
  const auto seq = random_seq(cfg.vocab, 2, 5, 9);
  for (auto form : {MaskForm::l_form, MaskForm::t_form}) {
    EstimatorDesign d;
    d.form = form;
    d.n_t = d.n_yt = 1;
    NoiseDraw draw;
    const auto est = elbo_mc(params, seq, d, 1234, &draw);
    ASSERT_EQ(draw.samples.size(), 1u);
    EXPECT_EQ(est.draw_count, 1);
    auto masked = apply_mask(seq, draw.samples[0].mask, cfg.vocab.mask_id());
    masked.form = form;
    masked.t = draw.samples[0].level;
    masked.l = static_cast<int>(draw.samples[0].level);
    const double direct = form == MaskForm::l_form ? per_step_loss_l(params, masked, seq)
                                                   : per_step_loss_t(params, masked, seq);
    EXPECT_NEAR(est.value, direct, 1e-12);
  }
}

TEST(ElboMc, UniformPredictorHasZeroVarianceInLForm) {
  const auto cfg = small_config(3);
  const TokenSeq seq{{0}, {2, 1, 0, 1, 2}};
  EstimatorDesign d;
  d.n_t = 3;
  d.n_yt = 2;
  for (std::uint64_t s = 0; s < 200; ++s)
    EXPECT_NEAR(elbo_mc(ModelParams::zeros(cfg), seq, d, s).value, 5.0 * std::log(1.0 / 3.0), 1e-12);
}

TEST(ElboMc, DeterministicAndReplayable) {
  const auto cfg = small_config(3);
  const auto params = ModelParams::random(cfg, 1.0, 21);
  const auto seq = random_seq(cfg.vocab, 1, 6, 22);
  EstimatorDesign d;
  NoiseDraw draw;
  const auto a = elbo_mc(params, seq, d, 5, &draw);
  EXPECT_EQ(a.value, elbo_mc(params, seq, d, 5).value);
  EXPECT_EQ(a.value, elbo_with_draw(params, seq, d, draw).value);
  EXPECT_EQ(a.draw_count, d.budget());
}

TEST(ElboMc, UnbiasedAgainstEnumeration) {
  const auto cfg = small_config(3);
  for (std::uint64_t inst = 0; inst < 3; ++inst) {
    const auto params = ModelParams::random(cfg, 1.0, 500 + inst);
    const auto seq = random_seq(cfg.vocab, 2, 3, 600 + inst);
    for (auto form : {MaskForm::l_form, MaskForm::t_form}) {
      EstimatorDesign d;
      d.form = form;
      d.n_t = 2;
      d.n_yt = 1;
      const auto s = mc_sample(params, seq, d, 10000, 700 + inst);
      const double exact = elbo_exact(params, seq, form);
      EXPECT_LE(std::abs(s.mean() - exact), 4.0 * s.se()) << to_string(form) << "-form instance " << inst;
    }
  }
}

TEST(ElboMc, LFormVarianceBelowTForm) {
  for (std::uint64_t inst = 0; inst < 5; ++inst) {
    const auto cfg = small_config(3 + inst % 2);
    const auto params = ModelParams::random(cfg, 1.0, 800 + inst);
    const auto seq = random_seq(cfg.vocab, 2, 4 + inst % 3, 900 + inst);
    EstimatorDesign l_design, t_design;
    t_design.form = MaskForm::t_form;
    const auto l = mc_sample(params, seq, l_design, 4000, 1);
    const auto t = mc_sample(params, seq, t_design, 4000, 2);
    EXPECT_LE(l.var(), t.var() + 4.0 * std::hypot(l.var_se(), t.var_se())) << "instance " << inst;
  }
}

TEST(ElboMc, FullTimestepAllocationMinimizesVariance) {
  const auto cfg = small_config(4);
  const auto params = ModelParams::random(cfg, 1.0, 31);
  const auto seq = random_seq(cfg.vocab, 2, 6, 32);
  EstimatorDesign best;
  best.n_t = 16;
  best.n_yt = 1;
  const auto b = mc_sample(params, seq, best, 3000, 3);
  for (int n_t : {8, 4, 2, 1}) {
    EstimatorDesign d;
    d.n_t = n_t;
    d.n_yt = 16 / n_t;
    const auto s = mc_sample(params, seq, d, 3000, 4 + n_t);
    EXPECT_LE(b.var(), s.var() + 4.0 * std::hypot(b.var_se(), s.var_se())) << "n_t=" << n_t;
  }
}

TEST(ElboPair, IdenticalModelsSharedDrawsAreBitIdentical) {
  const auto cfg = small_config(3);
  const auto params = ModelParams::random(cfg, 1.0, 1);
  const auto seq = random_seq(cfg.vocab, 2, 5, 2);
  EstimatorDesign d;
  d.share_policy_ref = true;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto [a, b] = elbo_pair(params, params, seq, d, s);
    EXPECT_EQ(a.value, b.value);
  }
}

TEST(ElboPair, SharingInducesPositiveCovariance) {
  const auto cfg = small_config(3);
  const auto policy = ModelParams::random(cfg, 1.0, 10);
  const auto ref = ModelParams::random(cfg, 1.0, 11);
  const auto seq = random_seq(cfg.vocab, 2, 5, 12);
  for (bool shared : {true, false}) {
    EstimatorDesign d;
    d.share_policy_ref = shared;
    std::vector<double> a, b;
    for (int s = 0; s < 5000; ++s) {
      const auto [x, y] = elbo_pair(policy, ref, seq, d, mix_seed(77, s));
      a.push_back(x.value);
      b.push_back(y.value);
    }
    const double cov = covariance(a, b);
    const double se = std::sqrt(variance(a) * variance(b) / a.size());
    if (shared)
      EXPECT_GT(cov, 4.0 * se);
    else
      EXPECT_LE(std::abs(cov), 4.0 * se);
  }
}

Minibatch batch_of(const std::vector<TokenSeq>& seqs) {
  Minibatch b;
  int k = 0;
  for (const auto& s : seqs) b.items.push_back({s, (k++ % 2) ? -1 : +1, 1.0});
  return b;
}

TEST(MarginVariance, DegenerateBatches) {
  const auto cfg = small_config(3);
  const auto policy = ModelParams::random(cfg, 1.0, 1);
  const auto ref = ModelParams::random(cfg, 1.0, 2);
  const auto seq = random_seq(cfg.vocab, 2, 5, 3);
  EstimatorDesign d;
  d.n_t = 2;

  const auto single = margin_variance_stats(policy, ref, batch_of({seq}), d, 200, 4);
  EXPECT_EQ(single.psi, 0.0);
  EXPECT_EQ(single.c, 0.0);
  EXPECT_GT(single.v, 0.0);

  d.share_across_items = true;
  const auto same = margin_variance_stats(policy, ref, batch_of({seq, seq, seq}), d, 200, 5);
  EXPECT_GT(same.v, 0.0);
  EXPECT_NEAR(same.c, same.v, 1e-12 * same.v);
  EXPECT_NEAR(same.psi, 0.0, 1e-12 * same.v);

  EXPECT_THROW(margin_variance_stats(policy, ref, batch_of({seq}), d, 50, 4), ContractError);
}

TEST(MarginVariance, AggregatorFormula) {
  const auto s = VarianceStats::from(1.0, 0.3, 2);
  EXPECT_NEAR(s.psi, 0.35, 1e-15);
  const auto m4 = VarianceStats::from(2.0, 0.5, 4);
  EXPECT_NEAR(m4.psi, 0.75 * 1.5, 1e-15);
}

}  // namespace
}  // namespace mdkto
