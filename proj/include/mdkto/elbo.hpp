#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mdkto/error.hpp"
#include "mdkto/masking.hpp"
#include "mdkto/model.hpp"
#include "mdkto/predictor.hpp"
#include "mdkto/rng.hpp"
#include "mdkto/stats.hpp"
#include "mdkto/tokens.hpp"

namespace mdkto {

// Monte Carlo budget and randomness sharing for ELBO estimates.
struct EstimatorDesign {
  MaskForm form = MaskForm::l_form;
  int n_t = 4;   // outer draws (t or l)
  int n_yt = 1;  // masks per outer draw
  bool share_policy_ref = true;     // policy and reference see identical masks
  bool share_across_items = false;  // every item in a batch sees the same noise stream
  // Replace sampling by the full enumeration of mask subsets; the estimate then equals
  // the exact ELBO. Only for small L.
  bool exhaustive = false;

  int budget() const noexcept { return n_t * n_yt; }

  void validate() const {
    if (n_t < 1 || n_yt < 1) throw ConfigError("estimator budget needs n_t >= 1 and n_yt >= 1");
  }

  std::uint64_t hash() const {
    Fnv1a h;
    h.value(static_cast<std::uint8_t>(form)).value(n_t).value(n_yt);
    h.value(share_policy_ref).value(share_across_items).value(exhaustive);
    return h.digest();
  }

  std::string describe() const {
    std::string s = std::string(to_string(form)) + "-form n_t=" + std::to_string(n_t) +
                    " n_yt=" + std::to_string(n_yt);
    if (share_policy_ref) s += " shared-ref";
    if (share_across_items) s += " shared-items";
    if (exhaustive) s += " exhaustive";
    return s;
  }

  friend bool operator==(const EstimatorDesign&, const EstimatorDesign&) = default;
};

// One realized mask. `coef` multiplies sum_{masked i} log p(y_i | ...) in the estimate, and
// already folds in the 1/(n_t n_yt) averaging (or the exact subset weight when enumerating).
struct MaskDraw {
  double level = 0.0;  // t, or l stored as a double
  std::vector<std::uint8_t> mask;
  double coef = 0.0;
};

// Realized noise for one ELBO estimate, stored by value so it can be replayed exactly.
struct NoiseDraw {
  MaskForm form = MaskForm::l_form;
  int length = 0;
  bool exhaustive = false;
  std::vector<MaskDraw> samples;  // outer-major: index j * n_yt + i

  friend bool operator==(const NoiseDraw& a, const NoiseDraw& b) {
    if (a.form != b.form || a.length != b.length || a.exhaustive != b.exhaustive ||
        a.samples.size() != b.samples.size())
      return false;
    for (std::size_t k = 0; k < a.samples.size(); ++k) {
      const auto& x = a.samples[k];
      const auto& y = b.samples[k];
      if (x.level != y.level || x.mask != y.mask || x.coef != y.coef) return false;
    }
    return true;
  }
};

struct ElboEstimate {
  double value = 0.0;  // nats
  EstimatorDesign design;
  int draw_count = 0;
  std::vector<double> terms;  // per-sample contributions; value is their sum
};

inline constexpr int kMaxExactLength = 12;

inline double binomial(int n, int k) {
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

// Exact enumeration of every nonempty mask subset with its weight in the expectation.
//
// l-form: l ~ U{1..L}, then a uniform size-l subset, scaled by L/l:
//     weight(S) = (1/L) * (1/C(L,|S|)) * (L/|S|)
// t-form: t ~ U[0,1], independent Bernoulli(t) flags, scaled by 1/t:
//     weight(S) = int_0^1 t^k (1-t)^(L-k) / t dt = B(k, L-k+1),  k = |S| >= 1
// The empty subset contributes nothing in either form. Expanding B(k, L-k+1) =
// (k-1)!(L-k)!/L! shows the two weights coincide, which is why the forms agree in expectation.
inline NoiseDraw exact_draw(MaskForm form, int L) {
  if (L < 1) throw DomainError("response length must be positive");
  if (L > kMaxExactLength)
    throw DomainError("exact ELBO enumeration is limited to L <= " + std::to_string(kMaxExactLength));
  NoiseDraw draw{form, L, true, {}};
  const unsigned subsets = 1u << L;
  draw.samples.reserve(subsets - 1);
  for (unsigned bits = 1; bits < subsets; ++bits) {
    MaskDraw md;
    md.mask.resize(L);
    int k = 0;
    for (int i = 0; i < L; ++i) {
      md.mask[i] = (bits >> i) & 1u;
      k += md.mask[i];
    }
    if (form == MaskForm::l_form) {
      md.level = k;
      md.coef = (1.0 / L) * (1.0 / binomial(L, k)) * (static_cast<double>(L) / k);
    } else {
      md.level = static_cast<double>(k) / L;
      md.coef = std::beta(static_cast<double>(k), static_cast<double>(L - k + 1));
    }
    draw.samples.push_back(std::move(md));
  }
  return draw;
}

inline NoiseDraw draw_noise(const EstimatorDesign& design, int L, std::uint64_t seed) {
  design.validate();
  if (design.exhaustive) return exact_draw(design.form, L);
  if (L < 1) throw DomainError("response length must be positive");
  NoiseDraw draw{design.form, L, false, {}};
  const double inv_n = 1.0 / design.budget();
  Rng rng(seed);
  draw.samples.reserve(design.budget());
  for (int j = 0; j < design.n_t; ++j) {
    if (design.form == MaskForm::t_form) {
      // 1 - U lies in (0, 1], so the 1/t weight is always finite.
      const double t = 1.0 - rng.uniform();
      for (int i = 0; i < design.n_yt; ++i)
        draw.samples.push_back({t, bernoulli_mask(L, t, rng), inv_n / t});
    } else {
      const int l = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(L)));
      for (int i = 0; i < design.n_yt; ++i)
        draw.samples.push_back({static_cast<double>(l), subset_mask(L, l, rng),
                                inv_n * static_cast<double>(L) / l});
    }
  }
  return draw;
}

// (1/t) sum_i 1[masked i] log p(y_i | y_t, x)
inline double per_step_loss_t(const ModelParams& params, const MaskedSeq& masked, const TokenSeq& target) {
  const int count = masked.masked_count();
  if (count == 0) return 0.0;
  if (!(masked.t > 0.0)) throw DomainError("t-form loss is singular at t = 0 with masked positions");
  std::vector<double> w(masked.length(), 1.0 / masked.t);
  return weighted_loglik(params, masked, target, w);
}

// (L/l) sum_i 1[masked i] log p(y_i | y_l, x)
inline double per_step_loss_l(const ModelParams& params, const MaskedSeq& masked, const TokenSeq& target) {
  const int L = masked.length();
  if (masked.l < 1 || masked.l > L) throw DomainError("l-form level must lie in [1, L]");
  if (masked.masked_count() != masked.l) throw ContractError("l-form mask must flag exactly l positions");
  std::vector<double> w(L, static_cast<double>(L) / masked.l);
  return weighted_loglik(params, masked, target, w);
}

// Sum of coef * weighted log-likelihood over the draw. Accumulates the gradient into `grad`
// when given, and per-sample terms into `terms`.
inline double evaluate_draw(const ModelParams& params, const TokenSeq& seq, const NoiseDraw& draw,
                            Gradient* grad = nullptr, std::vector<double>* terms = nullptr) {
  if (draw.length != seq.length()) throw ContractError("noise draw was realized for a different length");
  const TokenId mask_id = params.config().vocab.mask_id();
  std::vector<double> w(seq.length());
  CompensatedSum total;
  if (terms) terms->clear();
  for (const auto& s : draw.samples) {
    double term = 0.0;
    bool any = false;
    for (auto f : s.mask) any = any || f;
    if (any) {
      std::fill(w.begin(), w.end(), s.coef);
      const MaskedSeq masked = apply_mask(seq, s.mask, mask_id);
      term = weighted_loglik(params, masked, seq, w, grad);
    }
    total.add(term);
    if (terms) terms->push_back(term);
  }
  return total.value();
}

inline ElboEstimate elbo_with_draw(const ModelParams& params, const TokenSeq& seq,
                                   const EstimatorDesign& design, const NoiseDraw& draw,
                                   Gradient* grad = nullptr) {
  ElboEstimate est;
  est.design = design;
  est.draw_count = static_cast<int>(draw.samples.size());
  est.value = evaluate_draw(params, seq, draw, grad, &est.terms);
  return est;
}

// Monte Carlo ELBO: the average of n_t * n_yt per-step losses.
inline ElboEstimate elbo_mc(const ModelParams& params, const TokenSeq& seq, const EstimatorDesign& design,
                            std::uint64_t seed, NoiseDraw* realized = nullptr) {
  NoiseDraw draw = draw_noise(design, seq.length(), seed);
  auto est = elbo_with_draw(params, seq, design, draw);
  if (realized) *realized = std::move(draw);
  return est;
}

// Exact ELBO by enumerating all mask subsets (oracle; L <= 12).
inline double elbo_exact(const ModelParams& params, const TokenSeq& seq, MaskForm form) {
  return evaluate_draw(params, seq, exact_draw(form, seq.length()));
}

inline Gradient elbo_exact_grad(const ModelParams& params, const TokenSeq& seq, MaskForm form) {
  Gradient g = params.zeros_like();
  evaluate_draw(params, seq, exact_draw(form, seq.length()), &g);
  return g;
}

// Noise for one item: the policy draw, and the reference draw (identical when shared).
struct DrawPair {
  NoiseDraw policy;
  NoiseDraw reference;
};

inline std::uint64_t item_seed(const EstimatorDesign& design, std::uint64_t seed, std::uint64_t key) {
  return design.share_across_items ? mix_seed(seed, 0xC0FFEEull) : mix_seed(seed, key);
}

inline DrawPair draw_pair(const EstimatorDesign& design, int L, std::uint64_t seed) {
  DrawPair p;
  p.policy = draw_noise(design, L, mix_seed(seed, 1));
  p.reference = design.share_policy_ref ? p.policy : draw_noise(design, L, mix_seed(seed, 2));
  return p;
}

inline std::pair<ElboEstimate, ElboEstimate> elbo_pair(const ModelParams& policy, const ModelParams& ref,
                                                       const TokenSeq& seq, const EstimatorDesign& design,
                                                       std::uint64_t seed, DrawPair* realized = nullptr) {
  DrawPair draws = draw_pair(design, seq.length(), seed);
  auto a = elbo_with_draw(policy, seq, design, draws.policy);
  auto b = elbo_with_draw(ref, seq, design, draws.reference);
  if (realized) *realized = std::move(draws);
  return {std::move(a), std::move(b)};
}

}  // namespace mdkto
