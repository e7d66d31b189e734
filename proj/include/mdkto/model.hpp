#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mdkto/error.hpp"
#include "mdkto/rng.hpp"
#include "mdkto/tokens.hpp"

namespace mdkto {

struct ModelConfig {
  Vocab vocab;
  int embed_dim = 16;
  int max_len = 16;  // prompt + response positions

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Role : std::uint8_t { policy, reference };

inline const char* to_string(Role r) { return r == Role::policy ? "policy" : "reference"; }

// Named parameter blocks of the mask predictor:
//
//   h_j      = tok_emb[token_j] + pos_emb[j]          for every visible or masked position j
//   ctx      = mean_j h_j                              (bidirectional context)
//   hidden_i = tanh(w_self h_i + w_ctx ctx + b_hidden) for each masked response position i
//   logits_i = w_out hidden_i + b_out                  (K real tokens; the mask symbol is never predicted)
enum class Block : int { tok_emb, pos_emb, w_self, w_ctx, b_hidden, w_out, b_out };
inline constexpr int kBlockCount = 7;

inline constexpr std::array<std::string_view, kBlockCount> kBlockNames = {
    "tok_emb", "pos_emb", "w_self", "w_ctx", "b_hidden", "w_out", "b_out"};

class ModelParams {
 public:
  ModelParams() = default;

  static ModelParams zeros(const ModelConfig& cfg, Role role = Role::policy) {
    if (cfg.embed_dim < 1 || cfg.max_len < 1) throw ConfigError("model dims must be positive");
    ModelParams p;
    p.cfg_ = cfg;
    p.role_ = role;
    std::size_t offset = 0;
    for (int b = 0; b < kBlockCount; ++b) {
      p.offsets_[b] = offset;
      const auto s = p.shape(static_cast<Block>(b));
      offset += s[0] * s[1];
    }
    p.offsets_[kBlockCount] = offset;
    p.values_.assign(offset, 0.0);
    return p;
  }

  // Entries drawn i.i.d. N(0, scale^2).
  static ModelParams random(const ModelConfig& cfg, double scale, std::uint64_t seed,
                            Role role = Role::policy) {
    auto p = zeros(cfg, role);
    Rng rng(seed);
    for (double& v : p.values_) v = scale * rng.normal();
    return p;
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  Role role() const noexcept { return role_; }
  void set_role(Role r) noexcept { role_ = r; }

  // {rows, cols}; vectors are {n, 1}.
  std::array<std::size_t, 2> shape(Block b) const {
    const auto K = static_cast<std::size_t>(cfg_.vocab.size);
    const auto D = static_cast<std::size_t>(cfg_.embed_dim);
    switch (b) {
      case Block::tok_emb: return {K + 1, D};
      case Block::pos_emb: return {static_cast<std::size_t>(cfg_.max_len), D};
      case Block::w_self:
      case Block::w_ctx: return {D, D};
      case Block::b_hidden: return {D, 1};
      case Block::w_out: return {K, D};
      case Block::b_out: return {K, 1};
    }
    return {0, 0};
  }

  std::span<double> block(Block b) {
    const auto i = static_cast<int>(b);
    return {values_.data() + offsets_[i], offsets_[i + 1] - offsets_[i]};
  }
  std::span<const double> block(Block b) const {
    const auto i = static_cast<int>(b);
    return {values_.data() + offsets_[i], offsets_[i + 1] - offsets_[i]};
  }

  std::size_t size() const noexcept { return values_.size(); }
  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  bool same_shape(const ModelParams& o) const noexcept { return cfg_ == o.cfg_; }

  bool all_finite() const noexcept {
    for (double v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // this += alpha * other
  ModelParams& axpy(double alpha, const ModelParams& other) {
    if (!same_shape(other)) throw ConfigError("parameter shape mismatch");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += alpha * other.values_[i];
    return *this;
  }
  ModelParams& scale(double alpha) {
    for (double& v : values_) v *= alpha;
    return *this;
  }
  double dot(const ModelParams& other) const {
    double s = 0.0;
    for (std::size_t i = 0; i < values_.size(); ++i) s += values_[i] * other.values_[i];
    return s;
  }
  double norm() const { return std::sqrt(dot(*this)); }

  // Zero-valued parameters of the same shape; the type doubles as a gradient container.
  ModelParams zeros_like() const {
    ModelParams g = *this;
    std::fill(g.values_.begin(), g.values_.end(), 0.0);
    return g;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.cfg_ == b.cfg_ && a.values_ == b.values_;
  }

 private:
  ModelConfig cfg_{};
  Role role_ = Role::policy;
  std::array<std::size_t, kBlockCount + 1> offsets_{};
  std::vector<double> values_;
};

using Gradient = ModelParams;

}  // namespace mdkto
