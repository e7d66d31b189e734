#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mdkto/checkpoint.hpp"
#include "mdkto/dataset.hpp"
#include "mdkto/imbalance.hpp"
#include "mdkto/synth.hpp"
#include "mdkto/train.hpp"
#include "test_util.hpp"

using namespace mdkto;
using mdkto::testing::small_config;

namespace {

// Desirable responses repeat token 0, undesirable ones repeat token 1.
Dataset separable_dataset(int n, std::uint64_t seed, int K = 4) {
  Rng rng(seed);
  Dataset ds;
  for (int i = 0; i < n; ++i) {
    const bool good = i % 2 == 0;
    DatasetRecord r;
    r.id = "r" + std::to_string(i);
    for (int j = 0; j < 2; ++j) r.prompt.push_back(static_cast<TokenId>(rng.below(K)));
    r.response.assign(3 + i % 3, good ? 0 : 1);
    r.label = good;
    ds.records.push_back(std::move(r));
  }
  return ds;
}

double mean_exact_margin(const ModelParams& policy, const ModelParams& ref, const Dataset& ds, bool label) {
  double s = 0.0;
  int n = 0;
  for (const auto& r : ds.records) {
    if (r.label != label) continue;
    s += elbo_exact(policy, r.seq(), MaskForm::l_form) - elbo_exact(ref, r.seq(), MaskForm::l_form);
    ++n;
  }
  return s / n;
}

TrainConfig small_train_config() {
  TrainConfig c;
  c.batch_size = 4;
  c.peak_lr = 1e-2;
  c.kto.beta = 1.0;
  c.design = EstimatorDesign{MaskForm::l_form, 2, 1, true, false, false};
  c.seed = 3;
  return c;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("mdkto_test_" + name)).string();
}

}  // namespace

TEST(Schedule, Endpoints) {
  TrainConfig c;
  c.peak_lr = 0.5;
  c.warmup_frac = 0.03;
  EXPECT_EQ(lr_at(0, 100, c), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(3, 100, c), 0.5);
  EXPECT_NEAR(lr_at(100, 100, c), 0.0, 1e-12);
  EXPECT_DOUBLE_EQ(lr_at(1, 100, c), 0.5 / 3.0);
  // Halfway through the decay the cosine sits at peak / 2.
  c.warmup_frac = 0.2;
  EXPECT_NEAR(lr_at(60, 100, c), 0.25, 1e-12);
  EXPECT_THROW(lr_at(101, 100, c), ContractError);
  EXPECT_THROW(lr_at(-1, 100, c), ContractError);
}

TEST(Schedule, ContinuousSinglePeak) {
  TrainConfig c;
  c.peak_lr = 1.0;
  const long T = 1000;
  int direction_changes = 0;
  double prev = lr_at(0, T, c), prev_diff = 0.0;
  for (long s = 1; s <= T; ++s) {
    const double v = lr_at(s, T, c);
    EXPECT_LE(std::abs(v - prev), 1.0 / (0.03 * T) + 1e-12);
    const double d = v - prev;
    if (prev_diff > 0.0 && d < 0.0) ++direction_changes;
    if (d != 0.0) prev_diff = d;
    EXPECT_LE(v, 1.0);
    prev = v;
  }
  EXPECT_EQ(direction_changes, 1);
}

TEST(Config, Validation) {
  TrainConfig c;
  c.warmup_frac = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.warmup_frac = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(AdamW, FirstStepMatchesHandComputation) {
  const auto cfg = small_config(2, 4, 2);
  auto p = ModelParams::random(cfg, 1.0, 1);
  const auto before = p;
  auto g = ModelParams::random(cfg, 1.0, 2);
  auto st = OptimizerState::for_params(p);
  TrainConfig tc;
  tc.weight_decay = 0.1;
  adamw_update(p, g, st, 0.01, tc);
  // After one step the bias-corrected moments are g and g^2.
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double expect = before[k] - 0.01 * (g[k] / (std::abs(g[k]) + tc.adam_eps) + 0.1 * before[k]);
    EXPECT_NEAR(p[k], expect, 1e-15);
  }
  EXPECT_EQ(st.step, 1);
}

TEST(Rebalance, Examples) {
  EXPECT_EQ(rebalance_weights(50, 50), std::make_pair(1.0, 1.0));
  const auto [d, u] = rebalance_weights(100, 300);
  EXPECT_EQ(d, 1.0);
  EXPECT_DOUBLE_EQ(u, 1.0 / 3.0);
  const auto [d2, u2] = rebalance_weights(300, 100);
  EXPECT_DOUBLE_EQ(d2, 1.0 / 3.0);
  EXPECT_EQ(u2, 1.0);
  EXPECT_THROW(rebalance_weights(0, 10), ContractError);
  EXPECT_THROW(rebalance_weights(10, 0), ContractError);
}

TEST(Rebalance, Property) {
  for (long nd : {1L, 7L, 40L, 999L})
    for (long nu : {1L, 3L, 40L, 1000L}) {
      const auto [d, u] = rebalance_weights(nd, nu);
      EXPECT_NEAR(d * nd, u * nu, 1e-9 * std::max(nd, nu));
      EXPECT_EQ(std::max(d, u), 1.0);
    }
}

TEST(RefCache, RecomputationIsIdentical) {
  const auto cfg = small_config(4, 10, 8);
  const auto ref = ModelParams::random(cfg, 0.5, 4, Role::reference);
  const auto ds = separable_dataset(12, 5);
  const EstimatorDesign d{MaskForm::l_form, 3, 1, true, false, false};
  const auto cache = precompute_ref(ref, ds.records, d, 9);
  for (const auto& r : ds.records) {
    const auto* e = cache.find(r.id);
    ASSERT_NE(e, nullptr);
    EXPECT_EQ(evaluate_draw(ref, r.seq(), e->draw), e->value);
  }
}

TEST(RefCache, RefusesMismatchedDesign) {
  const auto cfg = small_config(4, 10, 8);
  const auto ref = ModelParams::random(cfg, 0.5, 4, Role::reference);
  const auto ds = separable_dataset(12, 5);
  auto tc = small_train_config();
  const auto cache = precompute_ref(ref, ds.records, tc.design, tc.seed);
  auto other = tc;
  other.design.n_t = 5;
  EXPECT_THROW(train(ref, ref, ds, other, &cache), ContractError);
  other = tc;
  other.seed = tc.seed + 1;
  EXPECT_THROW(train(ref, ref, ds, other, &cache), ContractError);
  auto fewer = ds;
  fewer.records.pop_back();
  EXPECT_THROW(train(ref, ref, fewer, tc, &cache), ContractError);
}

TEST(RefCache, CachedTrainingEqualsOnTheFly) {
  const auto cfg = small_config(4, 10, 8);
  const auto ref = ModelParams::random(cfg, 0.5, 4, Role::reference);
  const auto ds = separable_dataset(40, 6);
  const auto tc = small_train_config();
  const auto cache = precompute_ref(ref, ds.records, tc.design, tc.seed);
  const auto a = train(ref, ref, ds, tc, &cache);
  const auto b = train(ref, ref, ds, tc);
  ASSERT_EQ(a.metrics.size(), 10u);
  double worst = 0.0;
  for (std::size_t k = 0; k < a.params.size(); ++k) worst = std::max(worst, std::abs(a.params[k] - b.params[k]));
  EXPECT_EQ(worst, 0.0);
}

TEST(RefCache, FileRoundTrip) {
  const auto cfg = small_config(4, 10, 8);
  const auto ref = ModelParams::random(cfg, 0.5, 4, Role::reference);
  const auto ds = separable_dataset(10, 7);
  const auto tc = small_train_config();
  const auto cache = precompute_ref(ref, ds.records, tc.design, tc.seed);
  const auto path = temp_path("refcache.jsonl");
  save_ref_cache(path, cache);
  const auto back = load_ref_cache(path);
  EXPECT_EQ(back.config_hash, cache.config_hash);
  ASSERT_EQ(back.entries.size(), cache.entries.size());
  for (std::size_t k = 0; k < back.entries.size(); ++k) {
    EXPECT_EQ(back.entries[k].value, cache.entries[k].value);
    EXPECT_EQ(back.entries[k].draw, cache.entries[k].draw);
    EXPECT_EQ(back.entries[k].terms, cache.entries[k].terms);
  }
  std::filesystem::remove(path);
}

TEST(Train, ZeroLearningRateIsNullUpdate) {
  const auto cfg = small_config(4, 10, 8);
  const auto init = ModelParams::random(cfg, 0.5, 8);
  auto tc = small_train_config();
  tc.peak_lr = 0.0;
  const auto res = train(init, init, separable_dataset(20, 9), tc);
  EXPECT_TRUE(res.params == init);
}

TEST(Train, Deterministic) {
  const auto cfg = small_config(4, 10, 8);
  const auto init = ModelParams::random(cfg, 0.5, 8);
  const auto ds = separable_dataset(24, 10);
  const auto a = train(init, init, ds, small_train_config());
  const auto b = train(init, init, ds, small_train_config());
  EXPECT_TRUE(a.params == b.params);
  ASSERT_EQ(a.metrics.size(), b.metrics.size());
  for (std::size_t k = 0; k < a.metrics.size(); ++k) {
    EXPECT_EQ(a.metrics[k].loss, b.metrics[k].loss);
    EXPECT_EQ(a.metrics[k].grad_norm, b.metrics[k].grad_norm);
    EXPECT_EQ(a.metrics[k].psi_proxy, b.metrics[k].psi_proxy);
  }
}

TEST(Train, MarginsMoveWithLabels) {
  const auto cfg = small_config(4, 10, 8);
  const auto init = ModelParams::random(cfg, 0.3, 11);
  const auto ds = separable_dataset(200, 12);
  auto tc = small_train_config();
  tc.epochs = 2;
  const auto res = train(init, init, ds, tc);
  EXPECT_EQ(mean_exact_margin(init, init, ds, true), 0.0);
  EXPECT_GT(mean_exact_margin(res.params, init, ds, true), 0.0);
  EXPECT_LT(mean_exact_margin(res.params, init, ds, false), 0.0);
  for (const auto& m : res.metrics) {
    EXPECT_TRUE(std::isfinite(m.loss));
    EXPECT_GE(m.psi_proxy, 0.0);
  }
}

TEST(Train, NoBaselineVariantAlsoTrains) {
  const auto cfg = small_config(4, 10, 8);
  const auto init = ModelParams::random(cfg, 0.3, 11);
  const auto ds = separable_dataset(100, 13);
  auto tc = small_train_config();
  tc.objective = Objective::kto_no_baseline;
  const auto res = train(init, init, ds, tc);
  EXPECT_GT(mean_exact_margin(res.params, init, ds, true), mean_exact_margin(res.params, init, ds, false));
}

TEST(Train, DivergenceAborts) {
  const auto cfg = small_config(4, 10, 8);
  auto init = ModelParams::random(cfg, 0.3, 11);
  init[0] = std::nan("");
  try {
    train(init, ModelParams::random(cfg, 0.3, 11), separable_dataset(8, 13), small_train_config());
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
  }
}

TEST(Train, RefusesSingleClass) {
  const auto cfg = small_config(4, 10, 8);
  const auto init = ModelParams::random(cfg, 0.3, 11);
  auto ds = separable_dataset(10, 13);
  std::erase_if(ds.records, [](const DatasetRecord& r) { return r.label; });
  EXPECT_THROW(train(init, init, ds, small_train_config()), DataError);
}

TEST(Train, RebalanceSetsEffectiveWeights) {
  const auto cfg = small_config(4, 10, 8);
  const auto init = ModelParams::random(cfg, 0.3, 11);
  auto ds = separable_dataset(40, 13);
  ds = subsample_class(ds, true, 0.25, 1);
  auto tc = small_train_config();
  tc.rebalance = true;
  const auto res = train(init, init, ds, tc);
  EXPECT_NEAR(res.kto.lambda_D * ds.n_desirable(), res.kto.lambda_U * ds.n_undesirable(), 1e-12);
}

TEST(TrainVrpo, RaisesPairMargins) {
  const auto cfg = small_config(4, 10, 8);
  const auto init = ModelParams::random(cfg, 0.3, 14);
  std::vector<PairRecord> pairs;
  for (int i = 0; i < 60; ++i) pairs.push_back({"q" + std::to_string(i), {i % 4, 1}, {0, 0, 0}, {1, 1, 1}});
  auto tc = small_train_config();
  tc.objective = Objective::vrpo;
  const auto res = train_vrpo(init, init, pairs, tc);
  double margin = 0.0;
  for (const auto& p : pairs) {
    const TokenSeq w{p.prompt, p.chosen}, l{p.prompt, p.rejected};
    margin += (elbo_exact(res.params, w, MaskForm::l_form) - elbo_exact(init, w, MaskForm::l_form)) -
              (elbo_exact(res.params, l, MaskForm::l_form) - elbo_exact(init, l, MaskForm::l_form));
  }
  EXPECT_GT(margin, 0.0);
  EXPECT_THROW(train(init, init, Dataset{}, tc), ConfigError);
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto cfg = small_config(5, 9, 6);
  const auto p = ModelParams::random(cfg, 0.7, 15);
  const auto path = temp_path("ckpt.json");
  save_checkpoint(path, p, {kCheckpointVersion, 0xABCDEF0123456789ull, 42, 17});
  CheckpointHeader h;
  const auto back = load_checkpoint(path, &h);
  EXPECT_TRUE(back == p);
  EXPECT_EQ(back.config(), p.config());
  EXPECT_EQ(h.config_hash, 0xABCDEF0123456789ull);
  EXPECT_EQ(h.seed, 42u);
  EXPECT_EQ(h.step, 17);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto path = temp_path("bad.json");
  std::ofstream(path) << "{\"format\": \"other\"}";
  EXPECT_THROW(load_checkpoint(path), DataError);
  std::ofstream(path) << "{not json";
  EXPECT_THROW(load_checkpoint(path), DataError);
  std::filesystem::remove(path);
}

TEST(Dataset, PairedExpansion) {
  std::istringstream in(
      "{\"id\":\"a\",\"prompt\":[1],\"chosen\":[2,3],\"rejected\":[0]}\n"
      "{\"id\":\"b\",\"prompt\":[0],\"chosen\":[1],\"rejected\":[2,2]}\n");
  const auto ds = parse_dataset(in, DataFormat::paired);
  EXPECT_EQ(ds.pairs.size(), 2u);
  EXPECT_EQ(ds.records.size(), 4u);
  EXPECT_EQ(ds.n_desirable(), 2);
  EXPECT_EQ(ds.records[0].response, (std::vector<TokenId>{2, 3}));
  EXPECT_TRUE(ds.records[0].label);
  EXPECT_FALSE(ds.records[1].label);
}

TEST(Dataset, ErrorsNameLineAndRecord) {
  std::istringstream bad("{\"id\":\"a\",\"prompt\":[1],\"response\":[2],\"label\":true}\n{oops\n");
  try {
    parse_dataset(bad, DataFormat::unpaired, "f.jsonl");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("f.jsonl:2"), std::string::npos);
  }
  std::istringstream dup(
      "{\"id\":\"a\",\"prompt\":[1],\"response\":[2],\"label\":true}\n"
      "{\"id\":\"a\",\"prompt\":[1],\"response\":[2],\"label\":false}\n");
  EXPECT_THROW(parse_dataset(dup, DataFormat::unpaired), DataError);
  std::istringstream tok("{\"id\":\"zz9\",\"prompt\":[1],\"response\":[7],\"label\":true}\n");
  const auto ds = parse_dataset(tok, DataFormat::unpaired);
  try {
    validate_tokens(ds.records, Vocab::make(4));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("zz9"), std::string::npos);
  }
}

TEST(Dataset, ReserializationIsLossless) {
  SynthConfig sc;
  sc.n_prompts = 30;
  sc.eval_prompts = 1;
  const auto task = make_synth_task(sc);
  for (auto fmt : {DataFormat::unpaired, DataFormat::paired}) {
    std::ostringstream first;
    if (fmt == DataFormat::paired)
      write_jsonl(first, task.pairs);
    else
      write_jsonl(first, task.unpaired.records);
    std::istringstream in(first.str());
    const auto ds = parse_dataset(in, fmt);
    std::ostringstream second;
    if (fmt == DataFormat::paired)
      write_jsonl(second, ds.pairs);
    else
      write_jsonl(second, ds.records);
    EXPECT_EQ(first.str(), second.str());
  }
}

TEST(Synth, PairsRankedByGold) {
  SynthConfig sc;
  sc.n_prompts = 40;
  sc.eval_prompts = 3;
  const auto task = make_synth_task(sc);
  ASSERT_EQ(task.unpaired.records.size(), 80u);
  for (const auto& p : task.pairs)
    EXPECT_GE(gold_score(task.gold, p.prompt, p.chosen), gold_score(task.gold, p.prompt, p.rejected));
}

TEST(Imbalance, SubsampleKeepsOrderAndCounts) {
  const auto ds = separable_dataset(40, 16);
  const auto half = subsample_class(ds, true, 0.5, 3);
  EXPECT_EQ(half.n_desirable(), 10);
  EXPECT_EQ(half.n_undesirable(), 20);
  const auto full = subsample_class(ds, false, 1.0, 3);
  EXPECT_EQ(full.records, ds.records);
  EXPECT_THROW(subsample_class(ds, true, 0.0, 3), ConfigError);
}

TEST(Imbalance, TrendSummary) {
  ImbalanceSweep sw;
  sw.desirable.awr = {0.8, 0.7, 0.72, 0.6};
  sw.undesirable.awr = {0.8, 0.78, 0.77, 0.75};
  EXPECT_EQ(sw.desirable.increases(), 1);
  EXPECT_TRUE(sw.trend_ok());
  EXPECT_TRUE(sw.desirable_steeper());
  sw.undesirable.awr = {0.8, 0.81, 0.77, 0.78};
  EXPECT_FALSE(sw.trend_ok());
}
