#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mdkto/elbo.hpp"
#include "mdkto/error.hpp"
#include "mdkto/model.hpp"
#include "mdkto/stats.hpp"
#include "mdkto/tokens.hpp"

namespace mdkto {

struct KtoConfig {
  double beta = 0.1;
  double lambda_D = 1.0;
  double lambda_U = 1.0;

  double lambda_max() const noexcept { return std::max(lambda_D, lambda_U); }
  double lambda_for(int sign) const noexcept { return sign > 0 ? lambda_D : lambda_U; }

  void validate() const {
    if (!(beta > 0.0)) throw ConfigError("beta must be positive");
    if (!(lambda_D > 0.0) || !(lambda_U > 0.0)) throw ConfigError("class weights must be positive");
  }
};

struct PreferenceItem {
  TokenSeq seq;
  int s = +1;           // +1 desirable, -1 undesirable
  double lambda = 1.0;  // lambda_D or lambda_U according to s
};

inline PreferenceItem make_item(TokenSeq seq, bool desirable, const KtoConfig& cfg) {
  const int s = desirable ? +1 : -1;
  return {std::move(seq), s, cfg.lambda_for(s)};
}

struct Minibatch {
  std::vector<PreferenceItem> items;
  int size() const noexcept { return static_cast<int>(items.size()); }
};

// Logistic link g(u) = sigma(beta u). Saturates to exactly 0 or 1 for |beta u| > 700.
inline double sigmoid(double z) {
  if (z > 700.0) return 1.0;
  if (z < -700.0) return 0.0;
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}
inline double link(double u, double beta) { return sigmoid(beta * u); }
inline double link_deriv(double u, double beta) {
  const double g = link(u, beta);
  return beta * g * (1.0 - g);
}
inline double link_second(double u, double beta) {
  const double g = link(u, beta);
  return beta * beta * g * (1.0 - g) * (1.0 - 2.0 * g);
}
// log sigma(z), stable for large |z|
inline double log_sigmoid(double z) {
  return z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}

// Lipschitz constants of g and g'.
inline double link_lipschitz(double beta) { return beta / 4.0; }
inline double link_deriv_lipschitz(double beta) { return beta * beta / (6.0 * std::sqrt(3.0)); }

// Stop-gradient batch mean of the margins.
inline double global_baseline(std::span<const double> margins) {
  if (margins.empty()) throw ContractError("global baseline needs at least one margin");
  return mean(margins);
}

enum class BaselineMode : std::uint8_t { global_mean, none };

struct MarginSet {
  std::vector<int> s;
  std::vector<double> r_hat;
  double b0_hat = 0.0;
  std::vector<double> delta_hat;  // s_i (r_hat_i - b0_hat)
  // Noise-free twins, filled in oracle mode.
  std::optional<std::vector<double>> r;
  std::optional<double> b0;
  std::optional<std::vector<double>> delta;
};

inline MarginSet make_margins(std::vector<double> r_hat, std::vector<int> s,
                              BaselineMode mode = BaselineMode::global_mean) {
  if (r_hat.size() != s.size()) throw ContractError("one sign per margin required");
  MarginSet ms;
  ms.b0_hat = mode == BaselineMode::global_mean ? global_baseline(r_hat) : 0.0;
  ms.delta_hat.resize(r_hat.size());
  for (std::size_t i = 0; i < r_hat.size(); ++i) ms.delta_hat[i] = s[i] * (r_hat[i] - ms.b0_hat);
  ms.r_hat = std::move(r_hat);
  ms.s = std::move(s);
  return ms;
}

struct LossReport {
  double loss = 0.0;
  std::vector<double> per_item;  // lambda_i (1 - g(delta_i))
  std::vector<double> link_values;
};

struct GradReport {
  Gradient grad;
  std::vector<double> a_hat;  // -lambda_i s_i g'(delta_i)
};

inline LossReport kto_loss_from_margins(const MarginSet& ms, std::span<const double> lambdas,
                                        const KtoConfig& cfg) {
  const std::size_t m = ms.delta_hat.size();
  if (lambdas.size() != m) throw ContractError("one class weight per item required");
  LossReport rep;
  rep.per_item.resize(m);
  rep.link_values.resize(m);
  CompensatedSum total;
  for (std::size_t i = 0; i < m; ++i) {
    rep.link_values[i] = link(ms.delta_hat[i], cfg.beta);
    rep.per_item[i] = lambdas[i] * (1.0 - rep.link_values[i]);
    total.add(rep.per_item[i]);
  }
  rep.loss = total.value() / static_cast<double>(m);
  return rep;
}

inline std::vector<double> kto_weights(const MarginSet& ms, std::span<const double> lambdas,
                                       const KtoConfig& cfg) {
  std::vector<double> a(ms.delta_hat.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    a[i] = -lambdas[i] * ms.s[i] * link_deriv(ms.delta_hat[i], cfg.beta);
  return a;
}

// G = (1/m) sum_i a_i grad(policy ELBO_i). The baseline and reference terms are constants.
inline GradReport kto_grad_from(const MarginSet& ms, std::span<const double> lambdas,
                                std::span<const Gradient> policy_grads, const KtoConfig& cfg) {
  if (policy_grads.size() != ms.delta_hat.size()) throw ContractError("one gradient per item required");
  GradReport rep;
  rep.a_hat = kto_weights(ms, lambdas, cfg);
  rep.grad = policy_grads.front().zeros_like();
  const double inv_m = 1.0 / static_cast<double>(policy_grads.size());
  for (std::size_t i = 0; i < policy_grads.size(); ++i) rep.grad.axpy(rep.a_hat[i] * inv_m, policy_grads[i]);
  return rep;
}

// Per-item ELBO evaluations behind one batch objective.
struct BatchEval {
  std::vector<double> policy_elbo;
  std::vector<double> ref_elbo;
  std::vector<Gradient> policy_grad;  // empty unless requested
  std::vector<DrawPair> draws;
};

inline BatchEval evaluate_batch(const ModelParams& policy, const ModelParams& ref, const Minibatch& batch,
                                const EstimatorDesign& design, std::uint64_t seed, bool with_grad) {
  if (batch.items.empty()) throw ContractError("minibatch must hold at least one item");
  BatchEval ev;
  const int m = batch.size();
  ev.policy_elbo.resize(m);
  ev.ref_elbo.resize(m);
  ev.draws.reserve(m);
  if (with_grad) ev.policy_grad.reserve(m);
  for (int i = 0; i < m; ++i) {
    const auto& seq = batch.items[i].seq;
    ev.draws.push_back(draw_pair(design, seq.length(), item_seed(design, seed, i)));
    if (with_grad) {
      ev.policy_grad.push_back(policy.zeros_like());
      ev.policy_elbo[i] = evaluate_draw(policy, seq, ev.draws[i].policy, &ev.policy_grad.back());
    } else {
      ev.policy_elbo[i] = evaluate_draw(policy, seq, ev.draws[i].policy);
    }
    ev.ref_elbo[i] = evaluate_draw(ref, seq, ev.draws[i].reference);
  }
  return ev;
}

struct KtoStep {
  LossReport loss;
  MarginSet margins;
  std::optional<GradReport> grad;
};

inline std::vector<double> batch_lambdas(const Minibatch& batch) {
  std::vector<double> l;
  for (const auto& it : batch.items) l.push_back(it.lambda);
  return l;
}
inline std::vector<int> batch_signs(const Minibatch& batch) {
  std::vector<int> s;
  for (const auto& it : batch.items) s.push_back(it.s);
  return s;
}

inline KtoStep kto_from_eval(const BatchEval& ev, const Minibatch& batch, const KtoConfig& cfg,
                             BaselineMode mode) {
  std::vector<double> r(ev.policy_elbo.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = ev.policy_elbo[i] - ev.ref_elbo[i];
  KtoStep step;
  step.margins = make_margins(std::move(r), batch_signs(batch), mode);
  const auto lambdas = batch_lambdas(batch);
  step.loss = kto_loss_from_margins(step.margins, lambdas, cfg);
  if (!ev.policy_grad.empty()) step.grad = kto_grad_from(step.margins, lambdas, ev.policy_grad, cfg);
  return step;
}

// Loss and (optionally) gradient from one shared set of noise draws.
inline KtoStep kto_step(const ModelParams& policy, const ModelParams& ref, const Minibatch& batch,
                        const KtoConfig& cfg, const EstimatorDesign& design, std::uint64_t seed,
                        bool with_grad, BaselineMode mode = BaselineMode::global_mean) {
  cfg.validate();
  return kto_from_eval(evaluate_batch(policy, ref, batch, design, seed, with_grad), batch, cfg, mode);
}

// L(S) = (1/m) sum_i lambda_i (1 - g(s_i (r_i - b0)))
inline std::pair<LossReport, MarginSet> kto_loss(const ModelParams& policy, const ModelParams& ref,
                                                 const Minibatch& batch, const KtoConfig& cfg,
                                                 const EstimatorDesign& design, std::uint64_t seed,
                                                 BaselineMode mode = BaselineMode::global_mean) {
  auto step = kto_step(policy, ref, batch, cfg, design, seed, false, mode);
  return {std::move(step.loss), std::move(step.margins)};
}

inline GradReport kto_grad(const ModelParams& policy, const ModelParams& ref, const Minibatch& batch,
                           const KtoConfig& cfg, const EstimatorDesign& design, std::uint64_t seed,
                           BaselineMode mode = BaselineMode::global_mean) {
  return std::move(*kto_step(policy, ref, batch, cfg, design, seed, true, mode).grad);
}

// Attaches noise-free margins (exact ELBOs by enumeration) to a margin set.
inline void attach_exact(MarginSet& ms, const ModelParams& policy, const ModelParams& ref,
                         const Minibatch& batch, MaskForm form = MaskForm::l_form) {
  std::vector<double> r;
  for (const auto& it : batch.items) r.push_back(elbo_exact(policy, it.seq, form) - elbo_exact(ref, it.seq, form));
  const double b0 = mean(r);
  std::vector<double> d(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) d[i] = ms.s[i] * (r[i] - b0);
  ms.r = std::move(r);
  ms.b0 = b0;
  ms.delta = std::move(d);
}

// Paired preference (chosen y_w, rejected y_l) for the pairwise baseline objective.
struct PreferencePair {
  std::vector<TokenId> prompt;
  std::vector<TokenId> chosen;
  std::vector<TokenId> rejected;
};

struct VrpoStep {
  double loss = 0.0;
  double margin = 0.0;
  std::optional<Gradient> grad;
};

// Pairwise logistic loss -log sigma(beta m) on the reference-adjusted ELBO margin
//   m = [B_theta(y_w) - B_theta(y_l)] - [B_ref(y_w) - B_ref(y_l)].
// The two responses use item keys 0 and 1, so they share noise under share_across_items.
inline VrpoStep vrpo_step(const ModelParams& policy, const ModelParams& ref, const PreferencePair& pair,
                          double beta, const EstimatorDesign& design, std::uint64_t seed, bool with_grad) {
  if (!(beta > 0.0)) throw ConfigError("beta must be positive");
  const TokenSeq win{pair.prompt, pair.chosen};
  const TokenSeq lose{pair.prompt, pair.rejected};
  const auto dw = draw_pair(design, win.length(), item_seed(design, seed, 0));
  const auto dl = draw_pair(design, lose.length(), item_seed(design, seed, 1));
  VrpoStep out;
  Gradient gw, gl;
  if (with_grad) {
    gw = policy.zeros_like();
    gl = policy.zeros_like();
  }
  const double pw = evaluate_draw(policy, win, dw.policy, with_grad ? &gw : nullptr);
  const double pl = evaluate_draw(policy, lose, dl.policy, with_grad ? &gl : nullptr);
  const double rw = evaluate_draw(ref, win, dw.reference);
  const double rl = evaluate_draw(ref, lose, dl.reference);
  out.margin = (pw - pl) - (rw - rl);
  out.loss = -log_sigmoid(beta * out.margin);
  if (with_grad) {
    // d/dm [-log sigma(beta m)] = -beta (1 - sigma(beta m))
    const double c = -beta * (1.0 - sigmoid(beta * out.margin));
    gw.axpy(-1.0, gl).scale(c);
    out.grad = std::move(gw);
  }
  return out;
}

inline double vrpo_loss(const ModelParams& policy, const ModelParams& ref, const PreferencePair& pair,
                        double beta, const EstimatorDesign& design, std::uint64_t seed) {
  return vrpo_step(policy, ref, pair, beta, design, seed, false).loss;
}

}  // namespace mdkto
