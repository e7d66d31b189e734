#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include <json.hpp>

#include "mdkto/dataset.hpp"
#include "mdkto/model.hpp"
#include "mdkto/train.hpp"

namespace mdkto {

inline constexpr int kCheckpointVersion = 1;

struct CheckpointHeader {
  int version = kCheckpointVersion;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  long step = 0;
};

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xF];
  return s;
}

inline std::uint64_t parse_hex64(const std::string& s) {
  std::size_t used = 0;
  const auto v = std::stoull(s, &used, 16);
  if (used != s.size()) throw DataError("bad hex digest '" + s + "'");
  return v;
}

inline nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab.size}, {"eos_id", c.vocab.eos_id}, {"embed_dim", c.embed_dim},
          {"max_len", c.max_len}};
}

inline ModelConfig model_config_from(const nlohmann::json& j) {
  return {Vocab::make(j.at("vocab_size").get<int>(), j.at("eos_id").get<TokenId>()), j.at("embed_dim").get<int>(),
          j.at("max_len").get<int>()};
}

inline nlohmann::json checkpoint_json(const ModelParams& p, const CheckpointHeader& h) {
  nlohmann::json params = nlohmann::json::object();
  for (int b = 0; b < kBlockCount; ++b) {
    const auto blk = static_cast<Block>(b);
    const auto shape = p.shape(blk);
    const auto vals = p.block(blk);
    params[std::string(kBlockNames[b])] = {{"shape", {shape[0], shape[1]}},
                              {"values", std::vector<double>(vals.begin(), vals.end())}};
  }
  return {{"format", "mdkto-checkpoint"},
          {"version", h.version},
          {"config_hash", hex64(h.config_hash)},
          {"seed", h.seed},
          {"step", h.step},
          {"role", p.role() == Role::policy ? "policy" : "reference"},
          {"model", model_config_json(p.config())},
          {"params", params}};
}

inline ModelParams params_from_checkpoint(const nlohmann::json& j, CheckpointHeader* header = nullptr) {
  try {
    if (j.at("format") != "mdkto-checkpoint") throw DataError("not a checkpoint document");
    if (j.at("version").get<int>() != kCheckpointVersion) throw DataError("unsupported checkpoint version");
    const auto role = j.at("role") == "reference" ? Role::reference : Role::policy;
    auto p = ModelParams::zeros(model_config_from(j.at("model")), role);
    for (int b = 0; b < kBlockCount; ++b) {
      const auto blk = static_cast<Block>(b);
      const auto& entry = j.at("params").at(std::string(kBlockNames[b]));
      const auto shape = p.shape(blk);
      if (entry.at("shape") != nlohmann::json{shape[0], shape[1]})
        throw DataError(std::string("shape mismatch in block ") + std::string(kBlockNames[b]));
      const auto vals = entry.at("values").get<std::vector<double>>();
      auto dst = p.block(blk);
      if (vals.size() != dst.size()) throw DataError(std::string("value count mismatch in block ") + std::string(kBlockNames[b]));
      std::copy(vals.begin(), vals.end(), dst.begin());
    }
    if (header) *header = {j.at("version").get<int>(), parse_hex64(j.at("config_hash").get<std::string>()),
                           j.at("seed").get<std::uint64_t>(), j.at("step").get<long>()};
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::string& path, const ModelParams& p, const CheckpointHeader& h) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << checkpoint_json(p, h).dump(1) << '\n';
}

inline ModelParams load_checkpoint(const std::string& path, CheckpointHeader* header = nullptr) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint '" + path + "': " + e.what());
  }
  return params_from_checkpoint(j, header);
}

// ---------------------------------------------------------------------------------------------
// Reference cache: a header line, then one line per example.

inline nlohmann::json draw_json(const NoiseDraw& d) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : d.samples) {
    std::string bits;
    for (auto b : s.mask) bits.push_back(b ? '1' : '0');
    samples.push_back({{"level", s.level}, {"mask", bits}, {"coef", s.coef}});
  }
  return {{"form", to_string(d.form)}, {"length", d.length}, {"exhaustive", d.exhaustive}, {"samples", samples}};
}

inline NoiseDraw draw_from_json(const nlohmann::json& j) {
  NoiseDraw d;
  d.form = j.at("form") == "t" ? MaskForm::t_form : MaskForm::l_form;
  d.length = j.at("length").get<int>();
  d.exhaustive = j.at("exhaustive").get<bool>();
  for (const auto& s : j.at("samples")) {
    MaskDraw md;
    md.level = s.at("level").get<double>();
    md.coef = s.at("coef").get<double>();
    for (char c : s.at("mask").get<std::string>()) md.mask.push_back(c == '1' ? 1 : 0);
    d.samples.push_back(std::move(md));
  }
  return d;
}

inline void save_ref_cache(const std::string& path, const RefCache& cache) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << nlohmann::json{{"format", "mdkto-refcache"}, {"config_hash", hex64(cache.config_hash)},
                        {"entries", cache.entries.size()}}.dump()
      << '\n';
  for (const auto& e : cache.entries)
    out << nlohmann::json{{"id", e.id}, {"value", e.value}, {"terms", e.terms}, {"draw", draw_json(e.draw)}}.dump()
        << '\n';
}

inline RefCache load_ref_cache(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open reference cache '" + path + "'");
  RefCache cache;
  std::string line;
  int lineno = 0;
  std::size_t expected = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (lineno == 1) {
        if (j.at("format") != "mdkto-refcache") throw DataError("not a reference cache");
        cache.config_hash = parse_hex64(j.at("config_hash").get<std::string>());
        expected = j.at("entries").get<std::size_t>();
        continue;
      }
      cache.entries.push_back({j.at("id").get<std::string>(), j.at("value").get<double>(),
                               draw_from_json(j.at("draw")), j.at("terms").get<std::vector<double>>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (cache.entries.size() != expected) throw DataError("reference cache '" + path + "' is truncated");
  return cache;
}

}  // namespace mdkto
