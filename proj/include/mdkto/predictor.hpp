#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "mdkto/error.hpp"
#include "mdkto/model.hpp"
#include "mdkto/tokens.hpp"

namespace mdkto {

struct PositionLogProbs {
  int position = 0;             // response index
  std::vector<double> logp;     // over the K real tokens
};

// One entry per masked response position, in position order.
struct PredictorOutput {
  std::vector<PositionLogProbs> rows;
};

namespace detail {

inline void check_input(const ModelConfig& cfg, std::span<const TokenId> prompt,
                        std::span<const TokenId> response, std::span<const std::uint8_t> mask) {
  if (mask.size() != response.size()) throw ConfigError("mask length does not match response");
  if (static_cast<int>(prompt.size() + response.size()) > cfg.max_len)
    throw ConfigError("sequence longer than the model's max_len");
  const Vocab& v = cfg.vocab;
  for (TokenId id : prompt)
    if (!v.is_real(id)) throw ConfigError("prompt token outside vocab");
  for (std::size_t i = 0; i < response.size(); ++i) {
    if (mask[i] ? response[i] != v.mask_id() : !v.is_real(response[i]))
      throw ConfigError("masked sequence inconsistent with its mask flags");
  }
}

inline double log_softmax_inplace(std::span<double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double z : logits) s += std::exp(z - mx);
  const double lse = mx + std::log(s);
  for (double& z : logits) z -= lse;
  return lse;
}

// Fused forward (and optional backward) pass. Returns sum_i weights[i] * log p(target_i)
// over masked positions i. When `grad` is set, the gradient of that sum is accumulated
// into it; when `rows` is set, the full log-probability rows are emitted.
inline double predictor_pass(const ModelParams& params, std::span<const TokenId> prompt,
                             std::span<const TokenId> response, std::span<const std::uint8_t> mask,
                             std::span<const TokenId> target, std::span<const double> weights,
                             Gradient* grad, std::vector<PositionLogProbs>* rows) {
  const ModelConfig& cfg = params.config();
  check_input(cfg, prompt, response, mask);
  const int K = cfg.vocab.size;
  const int D = cfg.embed_dim;
  const int P = static_cast<int>(prompt.size());
  const int n = P + static_cast<int>(response.size());

  const auto tok = params.block(Block::tok_emb);
  const auto pos = params.block(Block::pos_emb);
  const auto w_self = params.block(Block::w_self);
  const auto w_ctx = params.block(Block::w_ctx);
  const auto b_hidden = params.block(Block::b_hidden);
  const auto w_out = params.block(Block::w_out);
  const auto b_out = params.block(Block::b_out);

  auto token_at = [&](int j) { return j < P ? prompt[j] : response[j - P]; };

  std::vector<double> h(static_cast<std::size_t>(n) * D);
  std::vector<double> ctx(D, 0.0);
  for (int j = 0; j < n; ++j) {
    const TokenId id = token_at(j);
    for (int d = 0; d < D; ++d) {
      const double v = tok[id * D + d] + pos[j * D + d];
      h[j * D + d] = v;
      ctx[d] += v;
    }
  }
  for (double& c : ctx) c /= n;

  // w_ctx ctx + b_hidden is shared by every masked position.
  std::vector<double> shared(D);
  for (int r = 0; r < D; ++r) {
    double s = b_hidden[r];
    for (int c = 0; c < D; ++c) s += w_ctx[r * D + c] * ctx[c];
    shared[r] = s;
  }

  std::vector<double> hidden(D), logits(K), dlogits(K), dhidden(D), dpre(D);
  std::vector<double> dctx;
  std::vector<double> dh;
  if (grad) {
    dctx.assign(D, 0.0);
    dh.assign(static_cast<std::size_t>(n) * D, 0.0);
  }

  double total = 0.0;
  for (int i = 0; i < static_cast<int>(response.size()); ++i) {
    if (!mask[i]) continue;
    const int j = P + i;
    const double* hj = &h[j * D];
    for (int r = 0; r < D; ++r) {
      double s = shared[r];
      for (int c = 0; c < D; ++c) s += w_self[r * D + c] * hj[c];
      hidden[r] = std::tanh(s);
    }
    for (int k = 0; k < K; ++k) {
      double s = b_out[k];
      for (int c = 0; c < D; ++c) s += w_out[k * D + c] * hidden[c];
      logits[k] = s;
    }
    log_softmax_inplace(logits);
    if (rows) rows->push_back({i, logits});

    if (target.empty()) continue;
    const double w = weights.empty() ? 1.0 : weights[i];
    const TokenId y = target[i];
    total += w * logits[y];
    if (!grad || w == 0.0) continue;

    // d/dlogits of w * log softmax(logits)[y]
    for (int k = 0; k < K; ++k) dlogits[k] = -w * std::exp(logits[k]);
    dlogits[y] += w;

    auto g_w_out = grad->block(Block::w_out);
    auto g_b_out = grad->block(Block::b_out);
    std::fill(dhidden.begin(), dhidden.end(), 0.0);
    for (int k = 0; k < K; ++k) {
      g_b_out[k] += dlogits[k];
      for (int c = 0; c < D; ++c) {
        g_w_out[k * D + c] += dlogits[k] * hidden[c];
        dhidden[c] += w_out[k * D + c] * dlogits[k];
      }
    }
    for (int r = 0; r < D; ++r) dpre[r] = dhidden[r] * (1.0 - hidden[r] * hidden[r]);

    auto g_w_self = grad->block(Block::w_self);
    auto g_w_ctx = grad->block(Block::w_ctx);
    auto g_b_hidden = grad->block(Block::b_hidden);
    double* dhj = &dh[j * D];
    for (int r = 0; r < D; ++r) {
      const double dr = dpre[r];
      g_b_hidden[r] += dr;
      for (int c = 0; c < D; ++c) {
        g_w_self[r * D + c] += dr * hj[c];
        g_w_ctx[r * D + c] += dr * ctx[c];
        dhj[c] += w_self[r * D + c] * dr;
        dctx[c] += w_ctx[r * D + c] * dr;
      }
    }
  }

  if (grad) {
    auto g_tok = grad->block(Block::tok_emb);
    auto g_pos = grad->block(Block::pos_emb);
    for (int j = 0; j < n; ++j) {
      const TokenId id = token_at(j);
      for (int d = 0; d < D; ++d) {
        const double v = dh[j * D + d] + dctx[d] / n;
        g_tok[id * D + d] += v;
        g_pos[j * D + d] += v;
      }
    }
  }
  return total;
}

}  // namespace detail

inline PredictorOutput predict_logprobs(const ModelParams& params, const MaskedSeq& masked) {
  PredictorOutput out;
  detail::predictor_pass(params, masked.prompt, masked.response, masked.mask, {}, {}, nullptr,
                         &out.rows);
  return out;
}

// Gradient of sum_i weights[i] * log p(target_i | masked) over masked positions i.
inline Gradient predict_grad(const ModelParams& params, const MaskedSeq& masked, const TokenSeq& target,
                             std::span<const double> weights) {
  if (target.response.size() != masked.response.size())
    throw ConfigError("target length does not match masked sequence");
  if (weights.size() != masked.response.size())
    throw ConfigError("one weight per response position required");
  for (double w : weights)
    if (!std::isfinite(w)) throw DomainError("weights must be finite");
  Gradient g = params.zeros_like();
  detail::predictor_pass(params, masked.prompt, masked.response, masked.mask, target.response, weights,
                         &g, nullptr);
  return g;
}

// Weighted log-likelihood and its gradient accumulated into `grad` (may be null).
inline double weighted_loglik(const ModelParams& params, const MaskedSeq& masked, const TokenSeq& target,
                              std::span<const double> weights, Gradient* grad = nullptr) {
  return detail::predictor_pass(params, masked.prompt, masked.response, masked.mask, target.response,
                                weights, grad, nullptr);
}

}  // namespace mdkto
