#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "mdkto/elbo.hpp"
#include "mdkto/error.hpp"
#include "mdkto/imbalance.hpp"
#include "mdkto/synth.hpp"
#include "mdkto/theory.hpp"
#include "mdkto/train.hpp"

namespace mdkto {

// Flat key-value settings grouped in [sections]; keys are addressed as "section.key".
class RunConfig {
 public:
  static RunConfig parse(const std::string& text) {
    RunConfig c;
    std::istringstream in(text);
    try {
      boost::property_tree::read_ini(in, c.tree_);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(std::string("bad config: ") + e.what());
    }
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    try {
      return parse(ss.str());
    } catch (const ConfigError& e) {
      throw ConfigError(path + ": " + e.what());
    }
  }

  bool has(const std::string& key) const { return tree_.get_optional<std::string>(key).has_value(); }

  template <typename T>
  T get(const std::string& key, const T& fallback) const {
    const auto raw = tree_.get_optional<std::string>(key);
    return raw ? convert<T>(key, *raw) : fallback;
  }

  template <typename T>
  T require(const std::string& key) const {
    const auto raw = tree_.get_optional<std::string>(key);
    if (!raw) throw ConfigError("missing config key '" + key + "'");
    return convert<T>(key, *raw);
  }

  // "section.key=value"
  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like section.key=value");
    const auto key = assignment.substr(0, eq);
    if (key.find('.') == std::string::npos) throw ConfigError("override key needs a section: '" + key + "'");
    tree_.put(key, assignment.substr(eq + 1));
  }

  // Sections and keys sorted, so equal settings give equal text.
  std::string canonical() const {
    std::vector<std::string> sections;
    for (const auto& [name, _] : tree_) sections.push_back(name);
    std::sort(sections.begin(), sections.end());
    std::ostringstream os;
    for (const auto& s : sections) {
      std::vector<std::pair<std::string, std::string>> kv;
      for (const auto& [k, v] : tree_.get_child(s)) kv.emplace_back(k, v.data());
      std::sort(kv.begin(), kv.end());
      os << '[' << s << "]\n";
      for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
    }
    return os.str();
  }

  std::uint64_t hash() const {
    const auto text = canonical();
    Fnv1a h;
    h.bytes(text.data(), text.size());
    return h.digest();
  }

 private:
  template <typename T>
  static T convert(const std::string& key, const std::string& raw) {
    if constexpr (std::is_same_v<T, std::string>) {
      return raw;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (raw == "true" || raw == "1" || raw == "yes") return true;
      if (raw == "false" || raw == "0" || raw == "no") return false;
      throw ConfigError("config key '" + key + "' expects a boolean, got '" + raw + "'");
    } else {
      std::istringstream in(raw);
      T v{};
      in >> v;
      if (in.fail() || !(in >> std::ws).eof())
        throw ConfigError("config key '" + key + "' has invalid value '" + raw + "'");
      return v;
    }
  }

  boost::property_tree::ptree tree_;
};

inline std::vector<double> parse_list(const std::string& key, const std::string& raw) {
  std::vector<double> out;
  std::istringstream in(raw);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::istringstream one(item);
    double v = 0.0;
    one >> v;
    if (one.fail()) throw ConfigError("config key '" + key + "' has invalid list item '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("config key '" + key + "' must list at least one value");
  return out;
}

inline EstimatorDesign design_from(const RunConfig& c, const std::string& section = "design") {
  EstimatorDesign d;
  const auto form = c.get<std::string>(section + ".form", "l");
  if (form != "l" && form != "t") throw ConfigError("config key '" + section + ".form' must be l or t");
  d.form = form == "t" ? MaskForm::t_form : MaskForm::l_form;
  d.n_t = c.get(section + ".n_t", d.n_t);
  d.n_yt = c.get(section + ".n_yt", d.n_yt);
  d.share_policy_ref = c.get(section + ".share_policy_ref", d.share_policy_ref);
  d.share_across_items = c.get(section + ".share_across_items", d.share_across_items);
  d.validate();
  return d;
}

inline KtoConfig kto_from(const RunConfig& c) {
  KtoConfig k;
  k.beta = c.get("kto.beta", k.beta);
  k.lambda_D = c.get("kto.lambda_D", k.lambda_D);
  k.lambda_U = c.get("kto.lambda_U", k.lambda_U);
  k.validate();
  return k;
}

inline TrainConfig train_config_from(const RunConfig& c, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = c.get("train.epochs", t.epochs);
  t.batch_size = c.get("train.batch_size", t.batch_size);
  t.peak_lr = c.get("train.peak_lr", t.peak_lr);
  t.warmup_frac = c.get("train.warmup_frac", t.warmup_frac);
  t.weight_decay = c.get("train.weight_decay", t.weight_decay);
  t.adam_beta1 = c.get("train.adam_beta1", t.adam_beta1);
  t.adam_beta2 = c.get("train.adam_beta2", t.adam_beta2);
  t.objective = parse_objective(c.get<std::string>("train.objective", "kto"));
  t.rebalance = c.get("train.rebalance", t.rebalance);
  t.kto = kto_from(c);
  t.design = design_from(c);
  t.seed = seed;
  t.validate();
  return t;
}

inline SynthConfig synth_config_from(const RunConfig& c, std::uint64_t seed) {
  SynthConfig s;
  s.vocab = c.get("synth.vocab", s.vocab);
  s.prompt_len = c.get("synth.prompt_len", s.prompt_len);
  s.response_len = c.get("synth.response_len", s.response_len);
  s.n_prompts = c.get("synth.n_prompts", s.n_prompts);
  s.candidates = c.get("synth.candidates", s.candidates);
  s.eval_prompts = c.get("synth.eval_prompts", s.eval_prompts);
  s.embed_dim = c.get("synth.embed_dim", s.embed_dim);
  s.gold_scale = c.get("synth.gold_scale", s.gold_scale);
  s.ref_scale = c.get("synth.ref_scale", s.ref_scale);
  s.ref_mix = c.get("synth.ref_mix", s.ref_mix);
  s.rejected_worst = c.get("synth.rejected_worst", s.rejected_worst);
  s.seed = seed;
  s.validate();
  return s;
}

inline SuiteConfig suite_config_from(const RunConfig& c, std::uint64_t seed) {
  SuiteConfig s;
  s.instances = c.get("bounds.instances", s.instances);
  s.batches = c.get("bounds.batches", s.batches);
  s.batch_size = c.get("bounds.batch_size", s.batch_size);
  s.reps = c.get("bounds.replicates", s.reps);
  s.dataset_size = c.get("bounds.dataset_size", s.dataset_size);
  s.min_len = c.get("bounds.min_len", s.min_len);
  s.max_len = c.get("bounds.max_len", s.max_len);
  s.min_vocab = c.get("bounds.min_vocab", s.min_vocab);
  s.max_vocab = c.get("bounds.max_vocab", s.max_vocab);
  s.z = c.get("bounds.z", s.z);
  s.min_pass_rate = c.get("bounds.min_pass_rate", s.min_pass_rate);
  s.lipschitz_grid = c.get("bounds.lipschitz_grid", s.lipschitz_grid);
  if (c.has("bounds.betas")) s.betas = parse_list("bounds.betas", c.require<std::string>("bounds.betas"));
  if (c.has("bounds.lipschitz_betas"))
    s.lipschitz_betas = parse_list("bounds.lipschitz_betas", c.require<std::string>("bounds.lipschitz_betas"));
  if (c.has("design.n_t") || c.has("design.form") || c.has("design.n_yt") || c.has("design.share_policy_ref") ||
      c.has("design.share_across_items"))
    s.design = design_from(c);
  s.seed = seed;
  s.validate();
  return s;
}

}  // namespace mdkto
