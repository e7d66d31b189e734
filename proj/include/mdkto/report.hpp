#pragma once

#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdkto/dataset.hpp"
#include "mdkto/judge.hpp"
#include "mdkto/theory.hpp"
#include "mdkto/train.hpp"

namespace mdkto {

inline const char* to_string(CheckKind k) { return k == CheckKind::upper_bound ? "upper_bound" : "equality"; }

inline nlohmann::json to_json(const BoundCheck& c) {
  return {{"name", c.name},
          {"instance", c.instance},
          {"kind", to_string(c.kind)},
          {"lhs", c.lhs_estimate},
          {"ci", c.lhs_ci_halfwidth},
          {"rhs", c.rhs},
          {"replicates", c.replicates},
          {"enforced", c.enforced},
          {"pass", c.pass}};
}

inline void write_bounds_jsonl(std::ostream& out, const SuiteReport& rep) {
  for (const auto& c : rep.checks) out << to_json(c).dump() << '\n';
}

inline void write_bounds_table(std::ostream& out, const SuiteReport& rep, double min_pass_rate) {
  char line[160];
  std::snprintf(line, sizeof line, "%-36s %8s %8s %8s\n", "group", "passed", "total", "rate");
  out << line;
  for (const auto& g : rep.groups) {
    std::snprintf(line, sizeof line, "%-36s %8d %8d %8.4f\n", g.group.c_str(), g.passed, g.total, g.rate());
    out << line;
  }
  long informational = 0, info_pass = 0;
  for (const auto& c : rep.checks)
    if (!c.enforced) {
      ++informational;
      info_pass += c.pass;
    }
  if (informational)
    out << "informational (not enforced): " << info_pass << '/' << informational << " within bound\n";
  std::snprintf(line, sizeof line, "required rate %.2f (lipschitz groups 1.00)\n", min_pass_rate);
  out << line;
  out << "overall: " << (rep.passed ? "PASS" : "FAIL") << '\n';
}

inline nlohmann::json to_json(const StepMetrics& m) {
  return {{"step", m.step},
          {"epoch", m.epoch},
          {"lr", m.lr},
          {"loss", m.loss},
          {"psi_proxy", m.psi_proxy},
          {"grad_norm", m.grad_norm},
          {"margin_desirable", m.mean_margin_desirable},
          {"margin_undesirable", m.mean_margin_undesirable}};
}

inline nlohmann::json to_json(const MatchRecord& r) {
  return {{"prompt_id", r.prompt_id},
          {"order_ab", to_string(r.order_ab)},
          {"order_ba", to_string(r.order_ba)},
          {"outcome", to_string(r.outcome)}};
}

inline nlohmann::json to_json(const EvalSummary& s) {
  nlohmann::json j{{"awr", s.awr},
                   {"wins", s.counts.wins},
                   {"losses", s.counts.losses},
                   {"ties", s.counts.ties},
                   {"ci_low", s.ci_low},
                   {"ci_high", s.ci_high},
                   {"judges", s.per_judge.size()}};
  j["kappa"] = s.kappa ? nlohmann::json(*s.kappa) : nlohmann::json(nullptr);
  return j;
}

// Prompt files: one {"id", "prompt"} object per line.
inline std::vector<EvalPrompt> parse_prompts(std::istream& in, const std::string& source = "<input>") {
  std::vector<EvalPrompt> out;
  std::string line;
  long n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({detail::id_field(j), detail::token_list(j, "prompt")});
    } catch (const std::exception& e) {
      throw DataError(source + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<EvalPrompt> read_prompts(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return parse_prompts(in, path);
}

inline void write_prompts(std::ostream& out, const std::vector<EvalPrompt>& prompts) {
  for (const auto& p : prompts) out << nlohmann::json{{"id", p.id}, {"prompt", p.prompt}}.dump() << '\n';
}

}  // namespace mdkto
