#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdkto/dataset.hpp"
#include "mdkto/elbo.hpp"
#include "mdkto/judge.hpp"
#include "mdkto/model.hpp"
#include "mdkto/rng.hpp"
#include "mdkto/sampler.hpp"

namespace mdkto {

// A gold model scores completions by exact ELBO; candidates are uniform random responses. The
// best candidate is chosen; the rejected one is another candidate (or the worst).
struct SynthConfig {
  int vocab = 8;
  int prompt_len = 3;
  int response_len = 6;
  int n_prompts = 1000;
  int candidates = 4;
  int eval_prompts = 200;
  int embed_dim = 16;
  double gold_scale = 1.5;
  double ref_scale = 0.5;
  double ref_mix = 0.5;  // reference = ref_mix * gold + N(0, ref_scale^2)
  bool rejected_worst = false;  // false: rejected is a uniformly chosen non-best candidate
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab < 2) throw ConfigError("synthetic vocab must be >= 2");
    if (prompt_len < 1 || response_len < 1) throw ConfigError("synthetic lengths must be positive");
    if (response_len > kMaxExactLength) throw ConfigError("gold scoring enumerates masks; response_len <= 12");
    if (n_prompts < 1 || candidates < 2 || eval_prompts < 1) throw ConfigError("synthetic counts too small");
    if (embed_dim < 1 || !(gold_scale > 0.0) || !(ref_scale >= 0.0)) throw ConfigError("bad synthetic model scale");
  }

  ModelConfig model_config() const { return {Vocab::make(vocab), embed_dim, prompt_len + response_len}; }
  DecodeConfig decode() const { return {response_len, response_len, response_len}; }
};

inline double gold_score(const ModelParams& gold, const std::vector<TokenId>& prompt,
                         const std::vector<TokenId>& response) {
  return elbo_exact(gold, TokenSeq{prompt, response}, MaskForm::l_form);
}

inline JudgeOracle gold_judge(const ModelParams& gold, std::string tag = "gold") {
  JudgeOracle j;
  j.tag = std::move(tag);
  j.score = [gold](const std::vector<TokenId>& p, const std::vector<TokenId>& y) { return gold_score(gold, p, y); };
  return j;
}

struct SynthTask {
  SynthConfig config;
  ModelParams gold;
  ModelParams ref;  // also the initial policy
  std::vector<PairRecord> pairs;
  Dataset unpaired;
  std::vector<EvalPrompt> eval;
};

inline std::string synth_id(const char* prefix, int i) {
  std::string n = std::to_string(i);
  return prefix + std::string(n.size() < 6 ? 6 - n.size() : 0, '0') + n;
}

inline SynthTask make_synth_task(const SynthConfig& cfg) {
  cfg.validate();
  const auto mc = cfg.model_config();
  SynthTask task;
  task.config = cfg;
  task.gold = ModelParams::random(mc, cfg.gold_scale, mix_seed(cfg.seed, 1), Role::reference);
  task.ref = ModelParams::random(mc, cfg.ref_scale, mix_seed(cfg.seed, 2), Role::reference);
  task.ref.axpy(cfg.ref_mix, task.gold);
  Rng rng(mix_seed(cfg.seed, 3));
  auto tokens = [&](int n) {
    std::vector<TokenId> v(static_cast<std::size_t>(n));
    for (auto& t : v) t = static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(cfg.vocab)));
    return v;
  };
  for (int i = 0; i < cfg.n_prompts; ++i) {
    PairRecord p;
    p.id = synth_id("p", i);
    p.prompt = tokens(cfg.prompt_len);
    std::vector<std::vector<TokenId>> cand;
    std::vector<double> score;
    for (int c = 0; c < cfg.candidates; ++c) {
      cand.push_back(tokens(cfg.response_len));
      score.push_back(gold_score(task.gold, p.prompt, cand.back()));
    }
    std::size_t best = 0, worst = 0;
    for (std::size_t c = 1; c < cand.size(); ++c) {
      if (score[c] > score[best]) best = c;
      if (score[c] < score[worst]) worst = c;
    }
    std::size_t rej = worst;
    if (!cfg.rejected_worst) {
      rej = rng.below(cand.size() - 1);
      if (rej >= best) ++rej;
    }
    p.chosen = cand[best];
    p.rejected = cand[rej];
    task.pairs.push_back(std::move(p));
  }
  task.unpaired.pairs = task.pairs;
  task.unpaired.records = expand_pairs(task.pairs);
  for (int i = 0; i < cfg.eval_prompts; ++i) task.eval.push_back({synth_id("e", i), tokens(cfg.prompt_len)});
  return task;
}

}  // namespace mdkto
