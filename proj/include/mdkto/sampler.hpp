#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "mdkto/error.hpp"
#include "mdkto/model.hpp"
#include "mdkto/predictor.hpp"
#include "mdkto/tokens.hpp"

namespace mdkto {

struct DecodeConfig {
  int gen_len = 8;
  int block_len = 8;
  int steps = 8;
};

// Tokens committed in each of `rounds` rounds for one block: an even split with the
// remainder going to the earliest rounds.
inline std::vector<int> commit_schedule(int block_len, int rounds) {
  std::vector<int> per_round(rounds, block_len / rounds);
  for (int r = 0; r < block_len % rounds; ++r) ++per_round[r];
  return per_round;
}

// Greedy low-confidence-remasking sampler. Starts from a fully masked response and, block by
// block, commits the most confident argmax predictions each round while the rest stay masked.
// Greedy selection consumes no randomness; `seed` is accepted so stochastic variants keep the
// same signature.
inline TokenSeq reverse_sample(const ModelParams& params, const std::vector<TokenId>& prompt, int gen_len,
                               int block_len, int steps, std::uint64_t seed = 0) {
  (void)seed;
  if (gen_len < 1 || block_len < 1 || gen_len % block_len != 0)
    throw ConfigError("block_len must divide gen_len");
  if (steps < 1) throw ConfigError("steps must be at least 1");
  const Vocab& vocab = params.config().vocab;
  const int blocks = gen_len / block_len;
  const int rounds = std::max(1, steps / blocks);

  TokenSeq out{prompt, std::vector<TokenId>(gen_len, vocab.mask_id())};
  std::vector<std::uint8_t> mask(gen_len, 1);

  for (int b = 0; b < blocks; ++b) {
    const int lo = b * block_len;
    const int hi = lo + block_len;
    for (int quota : commit_schedule(block_len, rounds)) {
      if (quota == 0) continue;
      std::vector<PositionLogProbs> rows;
      detail::predictor_pass(params, out.prompt, out.response, mask, {}, {}, nullptr, &rows);

      struct Candidate {
        int position;
        TokenId token;
        double confidence;
      };
      std::vector<Candidate> cands;
      for (const auto& row : rows) {
        if (row.position < lo || row.position >= hi) continue;
        // argmax, lowest token id on ties
        const auto best = std::max_element(row.logp.begin(), row.logp.end());
        cands.push_back({row.position, static_cast<TokenId>(best - row.logp.begin()), *best});
      }
      std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& c) {
        return a.confidence > c.confidence;
      });
      const int take = std::min<int>(quota, static_cast<int>(cands.size()));
      for (int k = 0; k < take; ++k) {
        out.response[cands[k].position] = cands[k].token;
        mask[cands[k].position] = 0;
      }
    }
  }
  return out;
}

inline TokenSeq reverse_sample(const ModelParams& params, const std::vector<TokenId>& prompt,
                               const DecodeConfig& dc, std::uint64_t seed = 0) {
  return reverse_sample(params, prompt, dc.gen_len, dc.block_len, dc.steps, seed);
}

}  // namespace mdkto
