#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdkto/checkpoint.hpp"
#include "mdkto/error.hpp"
#include "mdkto/rng.hpp"

namespace mdkto {

inline constexpr const char* kToolVersion = "0.1.0";

inline std::uint64_t file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path + "' for digest");
  Fnv1a h;
  char buf[1 << 14];
  while (in) {
    in.read(buf, sizeof buf);
    h.bytes(buf, static_cast<std::size_t>(in.gcount()));
  }
  return h.digest();
}

struct FileDigest {
  std::string path;
  std::string digest;
};

// Everything needed to rerun a command: argv, resolved config text and its hash, seeds, and
// digests of what went in and came out.
struct RunManifest {
  std::string tool = "mdkto";
  std::string version = kToolVersion;
  std::string command;
  std::vector<std::string> argv;
  std::string config_hash;
  std::string config_text;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<FileDigest> inputs;
  std::vector<FileDigest> outputs;

  void add_input(const std::string& path) { inputs.push_back({path, hex64(file_digest(path))}); }

  // Output paths are recorded relative to the output directory so two runs compare equal.
  void add_output(const std::filesystem::path& dir, const std::string& name) {
    outputs.push_back({name, hex64(file_digest((dir / name).string()))});
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["tool"] = tool;
    j["version"] = version;
    j["command"] = command;
    j["argv"] = argv;
    j["config_hash"] = config_hash;
    j["config"] = config_text;
    j["seeds"] = seeds;
    auto files = [](const std::vector<FileDigest>& v) {
      nlohmann::json a = nlohmann::json::array();
      for (const auto& f : v) a.push_back({{"path", f.path}, {"digest", f.digest}});
      return a;
    };
    j["inputs"] = files(inputs);
    j["outputs"] = files(outputs);
    return j;
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    try {
      m.tool = j.at("tool");
      m.version = j.at("version");
      m.command = j.at("command");
      m.argv = j.at("argv").get<std::vector<std::string>>();
      m.config_hash = j.at("config_hash");
      m.config_text = j.at("config");
      m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
      for (const auto& f : j.at("inputs")) m.inputs.push_back({f.at("path"), f.at("digest")});
      for (const auto& f : j.at("outputs")) m.outputs.push_back({f.at("path"), f.at("digest")});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed manifest: ") + e.what());
    }
    return m;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write manifest '" + path + "'");
    out << to_json().dump(1) << '\n';
  }

  static RunManifest load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open manifest '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ": " + e.what());
    }
    return from_json(j);
  }
};

// Inputs whose current digest no longer matches the manifest.
inline std::vector<std::string> stale_inputs(const RunManifest& m) {
  std::vector<std::string> out;
  for (const auto& f : m.inputs) {
    std::error_code ec;
    if (!std::filesystem::exists(f.path, ec) || hex64(file_digest(f.path)) != f.digest) out.push_back(f.path);
  }
  return out;
}

}  // namespace mdkto
