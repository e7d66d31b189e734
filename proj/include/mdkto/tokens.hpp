#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdkto/error.hpp"

namespace mdkto {

using TokenId = int;

// K real tokens occupy [0, K); the mask symbol sits just past them.
struct Vocab {
  int size = 0;
  TokenId eos_id = 0;

  constexpr TokenId mask_id() const noexcept { return size; }
  constexpr bool is_real(TokenId id) const noexcept { return id >= 0 && id < size; }

  static Vocab make(int size) { return make(size, size - 1); }
  static Vocab make(int size, TokenId eos) {
    if (size < 2) throw ConfigError("vocab needs at least 2 real tokens");
    if (eos < 0 || eos >= size) throw ConfigError("eos id must be a real token");
    return Vocab{size, eos};
  }

  friend bool operator==(const Vocab&, const Vocab&) = default;
};

// A clean prompt/response pair.
struct TokenSeq {
  std::vector<TokenId> prompt;
  std::vector<TokenId> response;

  int length() const noexcept { return static_cast<int>(response.size()); }

  void validate(const Vocab& vocab) const {
    if (response.empty()) throw ConfigError("response must hold at least one token");
    for (TokenId id : prompt)
      if (!vocab.is_real(id)) throw ConfigError("prompt token " + std::to_string(id) + " outside vocab");
    for (TokenId id : response)
      if (!vocab.is_real(id)) throw ConfigError("response token " + std::to_string(id) + " outside vocab");
  }

  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

enum class MaskForm : std::uint8_t { t_form, l_form };

inline const char* to_string(MaskForm f) { return f == MaskForm::t_form ? "t" : "l"; }

// Response with a subset of positions replaced by the mask symbol. The prompt is never masked.
struct MaskedSeq {
  std::vector<TokenId> prompt;
  std::vector<TokenId> response;     // mask_id at masked positions
  std::vector<std::uint8_t> mask;    // 1 where masked
  MaskForm form = MaskForm::l_form;
  double t = 0.0;                    // t-form level
  int l = 0;                         // l-form level

  int length() const noexcept { return static_cast<int>(response.size()); }
  int masked_count() const noexcept {
    int n = 0;
    for (auto f : mask) n += f;
    return n;
  }
};

inline MaskedSeq apply_mask(const TokenSeq& seq, std::vector<std::uint8_t> mask, TokenId mask_id) {
  if (mask.size() != seq.response.size()) throw ConfigError("mask length does not match response");
  MaskedSeq out;
  out.prompt = seq.prompt;
  out.response = seq.response;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out.response[i] = mask_id;
  out.mask = std::move(mask);
  return out;
}

}  // namespace mdkto
