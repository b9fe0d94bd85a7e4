#pragma once

// JSON Lines manifests shared by the trainer, the generator and the
// annotation service.
//
// pairs:       {"pair_id","painting_id","music_id","raw_scores":[..],"score":x|null,
//               "painting_path","music_path"}
// preferences: {"task_id","query":{"modality","id"},"candidate_a","candidate_b",
//               "votes":[{"annotator","choice"}],"consensus":"A"|"B"|null}

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "mpjudge/annotation.hpp"

namespace mpjudge::manifest {

nlohmann::json to_json(const PairRecord& record);
nlohmann::json to_json(const PreferenceRecord& record);
// FormatError naming the missing or mistyped field.
PairRecord pair_from_json(const nlohmann::json& j);
PreferenceRecord preference_from_json(const nlohmann::json& j);

std::string pairs_to_jsonl(const std::vector<PairRecord>& records);
std::string preferences_to_jsonl(const std::vector<PreferenceRecord>& records);
// Blank lines are ignored; errors carry `what` and the line number.
std::vector<PairRecord> pairs_from_jsonl(const std::string& text, const std::string& what = "pairs");
std::vector<PreferenceRecord> preferences_from_jsonl(const std::string& text,
                                                     const std::string& what = "preferences");

void save_pairs(const std::filesystem::path& path, const std::vector<PairRecord>& records);
void save_preferences(const std::filesystem::path& path, const std::vector<PreferenceRecord>& records);
std::vector<PairRecord> load_pairs(const std::filesystem::path& path);
std::vector<PreferenceRecord> load_preferences(const std::filesystem::path& path);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace mpjudge::manifest
