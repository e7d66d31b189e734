#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mdkto/error.hpp"
#include "mdkto/model.hpp"
#include "mdkto/rng.hpp"
#include "mdkto/sampler.hpp"
#include "mdkto/stats.hpp"
#include "mdkto/tokens.hpp"

namespace mdkto {

// Verdict within one ordering, expressed in terms of the two models (not positions).
enum class Verdict : std::uint8_t { A, B, tie };
enum class Outcome : std::uint8_t { win, loss, tie };

inline const char* to_string(Verdict v) { return v == Verdict::A ? "A" : v == Verdict::B ? "B" : "tie"; }
inline const char* to_string(Outcome o) { return o == Outcome::win ? "win" : o == Outcome::loss ? "loss" : "tie"; }

inline Outcome parse_outcome(const std::string& s) {
  if (s == "win") return Outcome::win;
  if (s == "loss") return Outcome::loss;
  if (s == "tie") return Outcome::tie;
  throw ConfigError("unknown outcome '" + s + "'");
}

// Preference between the first- and second-listed completion.
enum class Position : std::uint8_t { first, second, tie };

struct JudgeOracle {
  using ScoreFn = std::function<double(const std::vector<TokenId>& prompt, const std::vector<TokenId>& completion)>;

  std::string tag = "judge";
  ScoreFn score;
  double position_bias = 0.0;  // added to the first-listed completion
  double noise = 0.0;          // std-dev of Gaussian noise on the score gap
  double tie_band = 1e-9;
  std::uint64_t seed = 0;

  Position compare(const std::vector<TokenId>& prompt, const std::vector<TokenId>& first,
                   const std::vector<TokenId>& second) const {
    if (!score) throw ConfigError("judge '" + tag + "' has no scoring rule");
    const double s1 = score(prompt, first), s2 = score(prompt, second);
    if (!std::isfinite(s1) || !std::isfinite(s2)) throw DomainError("judge '" + tag + "' produced a non-finite score");
    double gap = s1 + position_bias - s2;
    if (noise > 0.0) {
      Fnv1a h;
      h.value(seed);
      for (const auto* v : {&prompt, &first, &second}) {
        h.value(v->size());
        h.bytes(v->data(), v->size() * sizeof(TokenId));
      }
      gap += noise * Rng(h.digest()).normal();
    }
    if (std::abs(gap) < tie_band) return Position::tie;
    return gap > 0.0 ? Position::first : Position::second;
  }
};

struct MatchRecord {
  std::string prompt_id;
  Verdict order_ab = Verdict::tie;  // A listed first
  Verdict order_ba = Verdict::tie;  // B listed first
  Outcome outcome = Outcome::tie;

  friend bool operator==(const MatchRecord&, const MatchRecord&) = default;
};

inline Outcome combine(Verdict ab, Verdict ba) {
  if (ab == Verdict::A && ba == Verdict::A) return Outcome::win;
  if (ab == Verdict::B && ba == Verdict::B) return Outcome::loss;
  return Outcome::tie;
}

inline MatchRecord dual_order_judge(const JudgeOracle& judge, const std::vector<TokenId>& prompt,
                                    const std::vector<TokenId>& completion_a, const std::vector<TokenId>& completion_b,
                                    std::string prompt_id = {}) {
  const auto p1 = judge.compare(prompt, completion_a, completion_b);
  const auto p2 = judge.compare(prompt, completion_b, completion_a);
  MatchRecord r;
  r.prompt_id = std::move(prompt_id);
  r.order_ab = p1 == Position::first ? Verdict::A : p1 == Position::second ? Verdict::B : Verdict::tie;
  r.order_ba = p2 == Position::first ? Verdict::B : p2 == Position::second ? Verdict::A : Verdict::tie;
  r.outcome = combine(r.order_ab, r.order_ba);
  return r;
}

struct OutcomeCounts {
  long wins = 0, losses = 0, ties = 0;
  long total() const { return wins + losses + ties; }
};

inline OutcomeCounts count_outcomes(const std::vector<MatchRecord>& records) {
  OutcomeCounts c;
  for (const auto& r : records) {
    if (r.outcome == Outcome::win) ++c.wins;
    else if (r.outcome == Outcome::loss) ++c.losses;
    else ++c.ties;
  }
  return c;
}

inline double awr(const OutcomeCounts& c) {
  if (c.total() == 0) throw ContractError("adjusted win rate needs at least one record");
  return (static_cast<double>(c.wins) + 0.5 * static_cast<double>(c.ties)) / static_cast<double>(c.total());
}

inline double awr(const std::vector<MatchRecord>& records) { return awr(count_outcomes(records)); }

inline void require_aligned(const std::vector<MatchRecord>& a, const std::vector<MatchRecord>& b) {
  if (a.size() != b.size()) throw ContractError("judge record lists differ in length");
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].prompt_id != b[i].prompt_id)
      throw ContractError("judge records misaligned at index " + std::to_string(i) + ": '" + a[i].prompt_id +
                          "' vs '" + b[i].prompt_id + "'");
}

// Ensemble win only if both judges say win, loss only if both say loss.
inline std::vector<MatchRecord> majority_vote(const std::vector<MatchRecord>& j1, const std::vector<MatchRecord>& j2) {
  require_aligned(j1, j2);
  std::vector<MatchRecord> out;
  out.reserve(j1.size());
  for (std::size_t i = 0; i < j1.size(); ++i) {
    MatchRecord r;
    r.prompt_id = j1[i].prompt_id;
    r.outcome = j1[i].outcome == j2[i].outcome ? j1[i].outcome : Outcome::tie;
    r.order_ab = r.outcome == Outcome::win ? Verdict::A : r.outcome == Outcome::loss ? Verdict::B : Verdict::tie;
    r.order_ba = r.order_ab;
    out.push_back(std::move(r));
  }
  return out;
}

struct KappaReport {
  double p_o = 0.0;
  double p_e = 0.0;
  std::optional<double> kappa;  // undefined when p_e = 1
};

inline KappaReport kappa_report(const std::vector<Outcome>& a, const std::vector<Outcome>& b) {
  if (a.size() != b.size() || a.empty()) throw ContractError("kappa needs two aligned, non-empty label lists");
  std::array<std::array<long, 3>, 3> confusion{};
  for (std::size_t i = 0; i < a.size(); ++i) ++confusion[static_cast<int>(a[i])][static_cast<int>(b[i])];
  const double n = static_cast<double>(a.size());
  KappaReport rep;
  for (int k = 0; k < 3; ++k) {
    long row = 0, col = 0;
    for (int j = 0; j < 3; ++j) {
      row += confusion[k][j];
      col += confusion[j][k];
    }
    rep.p_o += static_cast<double>(confusion[k][k]);
    rep.p_e += static_cast<double>(row) * static_cast<double>(col);
  }
  rep.p_o /= n;
  rep.p_e /= n * n;
  if (rep.p_e < 1.0) rep.kappa = (rep.p_o - rep.p_e) / (1.0 - rep.p_e);
  return rep;
}

inline std::optional<double> cohens_kappa(const std::vector<MatchRecord>& j1, const std::vector<MatchRecord>& j2) {
  require_aligned(j1, j2);
  std::vector<Outcome> a, b;
  for (const auto& r : j1) a.push_back(r.outcome);
  for (const auto& r : j2) b.push_back(r.outcome);
  return kappa_report(a, b).kappa;
}

// Percentile bootstrap over prompts.
inline std::pair<double, double> bootstrap_ci(const std::vector<MatchRecord>& records, int n_resamples = 5000,
                                              double level = 0.90, std::uint64_t seed = 0) {
  if (records.empty()) throw ContractError("bootstrap needs at least one record");
  if (n_resamples < 1) throw ConfigError("n_resamples must be positive");
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("level must lie in (0, 1)");
  std::vector<double> score(records.size());
  for (std::size_t i = 0; i < records.size(); ++i)
    score[i] = records[i].outcome == Outcome::win ? 1.0 : records[i].outcome == Outcome::tie ? 0.5 : 0.0;
  Rng rng(seed);
  const std::size_t n = records.size();
  std::vector<double> stats(static_cast<std::size_t>(n_resamples));
  for (auto& s : stats) {
    double total = 0.0;  // multiples of 0.5, exact in double
    for (std::size_t k = 0; k < n; ++k) total += score[rng.below(n)];
    s = total / static_cast<double>(n);
  }
  const double tail = 0.5 * (1.0 - level);
  return {percentile(stats, tail), percentile(stats, 1.0 - tail)};
}

struct EvalSummary {
  double awr = 0.5;
  OutcomeCounts counts;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::optional<double> kappa;
  std::vector<std::vector<MatchRecord>> per_judge;
  std::vector<MatchRecord> final_records;  // majority vote when two judges are present
};

inline EvalSummary summarize_eval(std::vector<std::vector<MatchRecord>> per_judge, int n_resamples, double level,
                             std::uint64_t seed) {
  if (per_judge.empty()) throw ConfigError("evaluation needs at least one judge");
  EvalSummary s;
  if (per_judge.size() >= 2) {
    s.final_records = majority_vote(per_judge[0], per_judge[1]);
    s.kappa = cohens_kappa(per_judge[0], per_judge[1]);
  } else {
    s.final_records = per_judge[0];
  }
  s.counts = count_outcomes(s.final_records);
  s.awr = awr(s.counts);
  std::tie(s.ci_low, s.ci_high) = bootstrap_ci(s.final_records, n_resamples, level, seed);
  s.per_judge = std::move(per_judge);
  return s;
}

struct EvalPrompt {
  std::string id;
  std::vector<TokenId> prompt;
};

// Both models decode every prompt with the same config and seed; each judge rules in both orders.
inline EvalSummary evaluate_pair(const ModelParams& model_a, const ModelParams& model_b,
                                 const std::vector<EvalPrompt>& prompts, const DecodeConfig& decode,
                                 const std::vector<JudgeOracle>& judges, std::uint64_t seed,
                                 int n_resamples = 5000, double level = 0.90) {
  if (prompts.empty()) throw ContractError("evaluation needs at least one prompt");
  std::vector<std::vector<MatchRecord>> per_judge(judges.size());
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    const auto gen_seed = mix_seed(seed, p);
    const auto ya = reverse_sample(model_a, prompts[p].prompt, decode, gen_seed).response;
    const auto yb = reverse_sample(model_b, prompts[p].prompt, decode, gen_seed).response;
    for (std::size_t j = 0; j < judges.size(); ++j)
      per_judge[j].push_back(dual_order_judge(judges[j], prompts[p].prompt, ya, yb, prompts[p].id));
  }
  return summarize_eval(std::move(per_judge), n_resamples, level, mix_seed(seed, 0xB007));
}

}  // namespace mdkto
