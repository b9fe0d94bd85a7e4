#include "mpjudge/manifest.hpp"

#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "mpjudge/errors.hpp"

namespace mpjudge::manifest {

using nlohmann::json;

namespace {

const json& field(const json& j, const char* name) {
  if (!j.is_object() || !j.contains(name)) throw FormatError(std::string("missing field '") + name + "'");
  return j.at(name);
}

std::string string_field(const json& j, const char* name) {
  const json& v = field(j, name);
  if (!v.is_string()) throw FormatError(std::string("field '") + name + "' must be a string");
  return v.get<std::string>();
}

char choice_from(const json& v, const char* name) {
  if (!v.is_string() || (v != "A" && v != "B"))
    throw FormatError(std::string("field '") + name + "' must be \"A\" or \"B\"");
  return v.get<std::string>()[0];
}

template <typename R, typename F>
std::vector<R> parse_lines(const std::string& text, const std::string& what, F parse) {
  std::vector<R> out;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse(json::parse(line)));
    } catch (const json::exception& e) {
      throw FormatError(what + ":" + std::to_string(number) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(what + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

template <typename R>
std::string join_lines(const std::vector<R>& records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

}  // namespace

json to_json(const PairRecord& r) {
  json j;
  j["pair_id"] = r.pair_id;
  j["painting_id"] = r.painting_id;
  j["music_id"] = r.music_id;
  j["raw_scores"] = r.raw_scores;
  j["score"] = r.score ? json(*r.score) : json(nullptr);
  j["painting_path"] = r.painting_path;
  j["music_path"] = r.music_path;
  return j;
}

json to_json(const PreferenceRecord& r) {
  json j;
  j["task_id"] = r.task_id;
  j["query"] = {{"modality", modality_name(r.query_modality)}, {"id", r.query_id}};
  j["candidate_a"] = r.candidate_a;
  j["candidate_b"] = r.candidate_b;
  j["votes"] = json::array();
  for (const auto& v : r.votes) j["votes"].push_back({{"annotator", v.annotator}, {"choice", std::string(1, v.choice)}});
  j["consensus"] = r.consensus ? json(std::string(1, *r.consensus)) : json(nullptr);
  return j;
}

PairRecord pair_from_json(const json& j) {
  PairRecord r;
  r.pair_id = string_field(j, "pair_id");
  r.painting_id = string_field(j, "painting_id");
  r.music_id = string_field(j, "music_id");
  const json& raw = field(j, "raw_scores");
  if (!raw.is_array()) throw FormatError("field 'raw_scores' must be an array");
  for (const auto& s : raw) {
    if (!s.is_number()) throw FormatError("field 'raw_scores' must hold numbers");
    r.raw_scores.push_back(s.get<double>());
  }
  const json& score = field(j, "score");
  if (score.is_number())
    r.score = score.get<double>();
  else if (!score.is_null())
    throw FormatError("field 'score' must be a number or null");
  r.painting_path = string_field(j, "painting_path");
  r.music_path = string_field(j, "music_path");
  return r;
}

PreferenceRecord preference_from_json(const json& j) {
  PreferenceRecord r;
  r.task_id = string_field(j, "task_id");
  const json& q = field(j, "query");
  r.query_modality = parse_modality(string_field(q, "modality"));
  r.query_id = string_field(q, "id");
  r.candidate_a = string_field(j, "candidate_a");
  r.candidate_b = string_field(j, "candidate_b");
  const json& votes = field(j, "votes");
  if (!votes.is_array()) throw FormatError("field 'votes' must be an array");
  for (const auto& v : votes) r.votes.push_back({string_field(v, "annotator"), choice_from(field(v, "choice"), "choice")});
  const json& c = field(j, "consensus");
  if (!c.is_null()) r.consensus = choice_from(c, "consensus");
  return r;
}

std::string pairs_to_jsonl(const std::vector<PairRecord>& records) { return join_lines(records); }
std::string preferences_to_jsonl(const std::vector<PreferenceRecord>& records) { return join_lines(records); }

std::vector<PairRecord> pairs_from_jsonl(const std::string& text, const std::string& what) {
  return parse_lines<PairRecord>(text, what, pair_from_json);
}

std::vector<PreferenceRecord> preferences_from_jsonl(const std::string& text, const std::string& what) {
  return parse_lines<PreferenceRecord>(text, what, preference_from_json);
}

std::string read_text(const std::filesystem::path& path) {
  const auto bytes = detail::read_file<FormatError>(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  detail::write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void save_pairs(const std::filesystem::path& path, const std::vector<PairRecord>& records) {
  write_text(path, pairs_to_jsonl(records));
}

void save_preferences(const std::filesystem::path& path, const std::vector<PreferenceRecord>& records) {
  write_text(path, preferences_to_jsonl(records));
}

std::vector<PairRecord> load_pairs(const std::filesystem::path& path) {
  return pairs_from_jsonl(read_text(path), path.string());
}

std::vector<PreferenceRecord> load_preferences(const std::filesystem::path& path) {
  return preferences_from_jsonl(read_text(path), path.string());
}

}  // namespace mpjudge::manifest
