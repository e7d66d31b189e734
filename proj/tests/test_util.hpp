#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "mdkto/model.hpp"
#include "mdkto/rng.hpp"
#include "mdkto/tokens.hpp"

namespace mdkto::testing {

inline ModelConfig small_config(int K = 3, int max_len = 10, int dim = 16) {
  return ModelConfig{Vocab::make(K), dim, max_len};
}

inline TokenSeq random_seq(const Vocab& v, int prompt_len, int L, std::uint64_t seed) {
  Rng rng(seed);
  TokenSeq s;
  for (int i = 0; i < prompt_len; ++i) s.prompt.push_back(static_cast<TokenId>(rng.below(v.size)));
  for (int i = 0; i < L; ++i) s.response.push_back(static_cast<TokenId>(rng.below(v.size)));
  return s;
}

// Central finite differences of f at params, one coordinate at a time.
inline std::vector<double> finite_difference(const std::function<double(const ModelParams&)>& f,
                                             const ModelParams& params, double step = 1e-5) {
  std::vector<double> out(params.size());
  ModelParams p = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double x = p[i];
    p[i] = x + step;
    const double up = f(p);
    p[i] = x - step;
    const double down = f(p);
    p[i] = x;
    out[i] = (up - down) / (2.0 * step);
  }
  return out;
}

// |a - b| / max(|a|, |b|, floor); the floor keeps exact zeros from dividing by zero.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_relative_error(const ModelParams& analytic, const std::vector<double>& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) worst = std::max(worst, relative_error(analytic[i], numeric[i]));
  return worst;
}

// A predictor whose output puts essentially all mass on `token` at every masked position.
inline ModelParams constant_predictor(const ModelConfig& cfg, TokenId token, double logit = 1000.0) {
  auto p = ModelParams::zeros(cfg);
  p.block(Block::b_out)[token] = logit;
  return p;
}

}  // namespace mdkto::testing
