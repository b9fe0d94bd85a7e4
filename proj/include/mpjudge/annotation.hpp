#pragma once

// Rating aggregation, agreement analysis and preference-task mechanics.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mpjudge {

struct PairRecord {
  std::string pair_id;
  std::string painting_id;
  std::string music_id;
  std::vector<double> raw_scores;
  std::optional<double> score;  // trimmed mean once all ratings are in
  std::string painting_path;     // relative to the dataset root
  std::string music_path;
};

enum class Modality { kPainting, kMusic };

std::string modality_name(Modality m);
Modality parse_modality(const std::string& s);  // FormatError when unknown

struct Vote {
  std::string annotator;
  char choice = 'A';  // 'A' or 'B'
};

// A query item and two candidates of the other modality.
struct PreferenceRecord {
  std::string task_id;
  Modality query_modality = Modality::kPainting;
  std::string query_id;
  std::string candidate_a;
  std::string candidate_b;
  std::vector<Vote> votes;
  std::optional<char> consensus;

  const std::string& preferred() const { return *consensus == 'A' ? candidate_a : candidate_b; }
  const std::string& rejected() const { return *consensus == 'A' ? candidate_b : candidate_a; }
};

inline constexpr std::size_t kRatingsPerPair = 5;

// Drops one copy of the maximum and one of the minimum of exactly five
// scores in [0,1] and averages the remaining three.
double aggregate_scores(const std::vector<double>& raw);

// Population standard deviation.
double population_stddev(const std::vector<double>& values);

struct DispersionReport {
  std::size_t records = 0;
  std::size_t skipped = 0;  // incomplete records
  double mean_stddev = 0.0;
  double fraction_below_009 = 0.0;
  double fraction_below_011 = 0.0;
};

DispersionReport dispersion_stats(const std::vector<PairRecord>& records);

struct AlphaResult {
  double alpha = 1.0;
  double observed = 0.0;  // D_o
  double expected = 0.0;  // D_e
  bool degenerate = false;  // every rating identical; alpha defined as 1
  std::size_t items = 0;
  std::size_t ratings = 0;
};

// Interval-metric alpha; items may have different rater counts. Needs at
// least two items each rated at least twice (ContractError otherwise).
AlphaResult krippendorff_alpha(const std::vector<std::vector<double>>& ratings);

struct Band {
  double lo = 0.4;
  double hi = 0.6;
  bool contains(double s) const { return s >= lo && s <= hi; }
};

// "p:<modality>:<query>:<a>:<b>"
std::string preference_task_id(Modality query, const std::string& query_id, const std::string& a,
                               const std::string& b);

// For every query item with at least two in-band partners, shuffles the
// partners under `seed` and pairs them off without replacement, emitting
// both task forms (music candidates for a painting, painting candidates
// for a music clip).
std::vector<PreferenceRecord> build_preference_tasks(const std::vector<PairRecord>& pairs, Band band,
                                                     std::uint64_t seed);

// Strict majority among at least `min_votes` votes.
std::optional<char> majority(const std::vector<Vote>& votes, std::size_t min_votes = 3);

// Keeps tasks with a strict majority and sets their consensus.
std::vector<PreferenceRecord> consensus_filter(const std::vector<PreferenceRecord>& tasks,
                                               std::size_t min_votes = 3);

}  // namespace mpjudge
