#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include "mdkto/error.hpp"
#include "mdkto/rng.hpp"
#include "mdkto/tokens.hpp"

namespace mdkto {

// Each of L flags set independently with probability t.
inline std::vector<std::uint8_t> bernoulli_mask(int L, double t, Rng& rng) {
  std::vector<std::uint8_t> mask(L, 0);
  for (auto& f : mask) f = rng.uniform() < t ? 1 : 0;
  return mask;
}

// Exactly l of L flags set, uniformly without replacement (partial Fisher-Yates).
inline std::vector<std::uint8_t> subset_mask(int L, int l, Rng& rng) {
  std::vector<int> idx(L);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<std::uint8_t> mask(L, 0);
  for (int k = 0; k < l; ++k) {
    const int j = k + static_cast<int>(rng.below(static_cast<std::uint64_t>(L - k)));
    std::swap(idx[k], idx[j]);
    mask[idx[k]] = 1;
  }
  return mask;
}

inline MaskedSeq forward_mask_t(const TokenSeq& seq, double t, std::uint64_t seed, const Vocab& vocab) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("mask level t must lie in [0, 1]");
  Rng rng(seed);
  auto out = apply_mask(seq, bernoulli_mask(seq.length(), t, rng), vocab.mask_id());
  out.form = MaskForm::t_form;
  out.t = t;
  return out;
}

inline MaskedSeq forward_mask_l(const TokenSeq& seq, int l, std::uint64_t seed, const Vocab& vocab) {
  if (l < 1 || l > seq.length()) throw DomainError("mask count l must lie in [1, L]");
  Rng rng(seed);
  auto out = apply_mask(seq, subset_mask(seq.length(), l, rng), vocab.mask_id());
  out.form = MaskForm::l_form;
  out.l = l;
  return out;
}

}  // namespace mdkto
