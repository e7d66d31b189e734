#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "mdkto/error.hpp"
#include "mdkto/objective.hpp"
#include "mdkto/tokens.hpp"

namespace mdkto {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetRecord {
  std::string id;
  std::vector<TokenId> prompt;
  std::vector<TokenId> response;
  bool label = false;  // desirable

  TokenSeq seq() const { return {prompt, response}; }
  friend bool operator==(const DatasetRecord&, const DatasetRecord&) = default;
};

struct PairRecord {
  std::string id;
  std::vector<TokenId> prompt;
  std::vector<TokenId> chosen;
  std::vector<TokenId> rejected;

  PreferencePair pair() const { return {prompt, chosen, rejected}; }
  friend bool operator==(const PairRecord&, const PairRecord&) = default;
};

enum class DataFormat : std::uint8_t { unpaired, paired };

inline DataFormat parse_format(const std::string& s) {
  if (s == "unpaired") return DataFormat::unpaired;
  if (s == "paired") return DataFormat::paired;
  throw ConfigError("unknown dataset format '" + s + "' (expected unpaired or paired)");
}

struct Dataset {
  std::vector<DatasetRecord> records;
  std::vector<PairRecord> pairs;  // only for paired input

  int count(bool label) const {
    int n = 0;
    for (const auto& r : records) n += r.label == label ? 1 : 0;
    return n;
  }
  int n_desirable() const { return count(true); }
  int n_undesirable() const { return count(false); }
};

// Chosen responses become desirable records, rejected ones undesirable.
inline std::vector<DatasetRecord> expand_pairs(const std::vector<PairRecord>& pairs) {
  std::vector<DatasetRecord> out;
  out.reserve(2 * pairs.size());
  for (const auto& p : pairs) {
    out.push_back({p.id + "/chosen", p.prompt, p.chosen, true});
    out.push_back({p.id + "/rejected", p.prompt, p.rejected, false});
  }
  return out;
}

inline void validate_tokens(const std::vector<DatasetRecord>& records, const Vocab& vocab) {
  for (const auto& r : records) {
    for (TokenId t : r.prompt)
      if (!vocab.is_real(t)) throw DataError("record '" + r.id + "': prompt token " + std::to_string(t) +
                                             " outside vocabulary of size " + std::to_string(vocab.size));
    for (TokenId t : r.response)
      if (!vocab.is_real(t)) throw DataError("record '" + r.id + "': response token " + std::to_string(t) +
                                             " outside vocabulary of size " + std::to_string(vocab.size));
  }
}

inline void require_both_classes(const Dataset& ds) {
  if (ds.n_desirable() == 0) throw DataError("dataset has no desirable records; class weights are undefined");
  if (ds.n_undesirable() == 0) throw DataError("dataset has no undesirable records; class weights are undefined");
}

namespace detail {

inline std::vector<TokenId> token_list(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw DataError(std::string("missing field '") + key + "'");
  const auto& a = j.at(key);
  if (!a.is_array()) throw DataError(std::string("field '") + key + "' must be an array of token ids");
  std::vector<TokenId> out;
  for (const auto& v : a) {
    if (!v.is_number_integer()) throw DataError(std::string("field '") + key + "' must hold integers");
    out.push_back(v.get<TokenId>());
  }
  return out;
}

inline std::string id_field(const nlohmann::json& j) {
  if (!j.contains("id")) throw DataError("missing field 'id'");
  const auto& v = j.at("id");
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  throw DataError("field 'id' must be a string or integer");
}

}  // namespace detail

inline Dataset parse_dataset(std::istream& in, DataFormat format, const std::string& source = "<input>") {
  Dataset ds;
  std::unordered_set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object()) throw DataError("record must be an object");
      const auto id = detail::id_field(j);
      if (!seen.insert(id).second) throw DataError("duplicate id '" + id + "'");
      if (format == DataFormat::unpaired) {
        if (!j.contains("label") || !j.at("label").is_boolean()) throw DataError("field 'label' must be boolean");
        ds.records.push_back(
            {id, detail::token_list(j, "prompt"), detail::token_list(j, "response"), j.at("label").get<bool>()});
      } else {
        ds.pairs.push_back(
            {id, detail::token_list(j, "prompt"), detail::token_list(j, "chosen"), detail::token_list(j, "rejected")});
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(source + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    } catch (const DataError& e) {
      throw DataError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (format == DataFormat::paired) ds.records = expand_pairs(ds.pairs);
  return ds;
}

inline Dataset ingest(const std::string& path, DataFormat format) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path + "'");
  return parse_dataset(in, format, path);
}

inline Dataset ingest(const std::string& path, DataFormat format, const Vocab& vocab) {
  auto ds = ingest(path, format);
  validate_tokens(ds.records, vocab);
  return ds;
}

inline nlohmann::json to_json(const DatasetRecord& r) {
  return {{"id", r.id}, {"prompt", r.prompt}, {"response", r.response}, {"label", r.label}};
}
inline nlohmann::json to_json(const PairRecord& p) {
  return {{"id", p.id}, {"prompt", p.prompt}, {"chosen", p.chosen}, {"rejected", p.rejected}};
}

// One compact object per line, keys sorted.
inline void write_jsonl(std::ostream& out, const std::vector<DatasetRecord>& records) {
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}
inline void write_jsonl(std::ostream& out, const std::vector<PairRecord>& pairs) {
  for (const auto& p : pairs) out << to_json(p).dump() << '\n';
}

inline void write_dataset(const std::string& path, const Dataset& ds, DataFormat format) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  if (format == DataFormat::paired)
    write_jsonl(out, ds.pairs);
  else
    write_jsonl(out, ds.records);
}

inline std::string dataset_summary(const Dataset& ds) {
  std::ostringstream os;
  os << ds.records.size() << " records (" << ds.n_desirable() << " desirable, " << ds.n_undesirable()
     << " undesirable)";
  if (!ds.pairs.empty()) os << " from " << ds.pairs.size() << " pairs";
  return os.str();
}

}  // namespace mdkto
