#include "mpjudge/annotation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "mpjudge/errors.hpp"

namespace mpjudge {

std::string modality_name(Modality m) { return m == Modality::kPainting ? "painting" : "music"; }

Modality parse_modality(const std::string& s) {
  if (s == "painting") return Modality::kPainting;
  if (s == "music") return Modality::kMusic;
  throw FormatError("unknown modality '" + s + "'");
}

double aggregate_scores(const std::vector<double>& raw) {
  if (raw.size() != kRatingsPerPair)
    throw ContractError("aggregate_scores: expected 5 scores, got " + std::to_string(raw.size()));
  for (double s : raw)
    if (!(s >= 0.0 && s <= 1.0))
      throw ContractError("aggregate_scores: score " + std::to_string(s) + " is outside [0, 1]");
  std::vector<double> sorted = raw;
  std::sort(sorted.begin(), sorted.end());
  return (sorted[1] + sorted[2] + sorted[3]) / 3.0;
}

namespace {

double squared_deviation_sum(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return ss;
}

}  // namespace

double population_stddev(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::sqrt(squared_deviation_sum(v) / static_cast<double>(v.size()));
}

DispersionReport dispersion_stats(const std::vector<PairRecord>& records) {
  DispersionReport r;
  std::size_t below9 = 0, below11 = 0;
  double total = 0.0;
  for (const auto& rec : records) {
    if (rec.raw_scores.size() != kRatingsPerPair) {
      ++r.skipped;
      continue;
    }
    const double s = population_stddev(rec.raw_scores);
    total += s;
    below9 += s < 0.09;
    below11 += s < 0.11;
    ++r.records;
  }
  if (r.records > 0) {
    const auto n = static_cast<double>(r.records);
    r.mean_stddev = total / n;
    r.fraction_below_009 = static_cast<double>(below9) / n;
    r.fraction_below_011 = static_cast<double>(below11) / n;
  }
  return r;
}

AlphaResult krippendorff_alpha(const std::vector<std::vector<double>>& ratings) {
  AlphaResult r;
  std::vector<double> all;
  double observed_sum = 0.0, observed_pairs = 0.0;
  for (const auto& item : ratings) {
    if (item.size() < 2) throw ContractError("krippendorff_alpha: every item needs at least two ratings");
    // sum over j<k of (s_j - s_k)^2 equals n * sum (s_j - mean)^2
    const auto n = static_cast<double>(item.size());
    observed_sum += n * squared_deviation_sum(item);
    observed_pairs += n * (n - 1) / 2;
    all.insert(all.end(), item.begin(), item.end());
  }
  if (ratings.size() < 2) throw ContractError("krippendorff_alpha: at least two rated items are required");
  const auto total = static_cast<double>(all.size());
  r.items = ratings.size();
  r.ratings = all.size();
  r.observed = observed_sum / observed_pairs;
  r.expected = total * squared_deviation_sum(all) / (total * (total - 1) / 2);
  if (r.expected == 0.0) {
    r.degenerate = true;
    r.alpha = 1.0;
    return r;
  }
  r.alpha = 1.0 - r.observed / r.expected;
  return r;
}

std::string preference_task_id(Modality query, const std::string& query_id, const std::string& a,
                               const std::string& b) {
  return "p:" + modality_name(query) + ":" + query_id + ":" + a + ":" + b;
}

std::vector<PreferenceRecord> build_preference_tasks(const std::vector<PairRecord>& pairs, Band band,
                                                     std::uint64_t seed) {
  // query id -> in-band partners, ordered by id for seed stability
  std::map<std::string, std::vector<std::string>> by_painting, by_music;
  for (const auto& p : pairs) {
    if (!p.score || !band.contains(*p.score)) continue;
    by_painting[p.painting_id].push_back(p.music_id);
    by_music[p.music_id].push_back(p.painting_id);
  }
  std::mt19937_64 rng(seed);
  std::vector<PreferenceRecord> out;
  auto emit = [&](Modality modality, std::map<std::string, std::vector<std::string>>& groups) {
    for (auto& [query, partners] : groups) {
      std::sort(partners.begin(), partners.end());
      partners.erase(std::unique(partners.begin(), partners.end()), partners.end());
      if (partners.size() < 2) continue;
      std::shuffle(partners.begin(), partners.end(), rng);
      for (std::size_t i = 0; i + 1 < partners.size(); i += 2) {
        PreferenceRecord t;
        t.query_modality = modality;
        t.query_id = query;
        t.candidate_a = partners[i];
        t.candidate_b = partners[i + 1];
        t.task_id = preference_task_id(modality, query, t.candidate_a, t.candidate_b);
        out.push_back(std::move(t));
      }
    }
  };
  emit(Modality::kPainting, by_painting);
  emit(Modality::kMusic, by_music);
  return out;
}

std::optional<char> majority(const std::vector<Vote>& votes, std::size_t min_votes) {
  if (votes.size() < min_votes) return std::nullopt;
  std::size_t a = 0, b = 0;
  for (const auto& v : votes) {
    if (v.choice == 'A')
      ++a;
    else if (v.choice == 'B')
      ++b;
  }
  if (2 * a > votes.size()) return 'A';
  if (2 * b > votes.size()) return 'B';
  return std::nullopt;
}

std::vector<PreferenceRecord> consensus_filter(const std::vector<PreferenceRecord>& tasks, std::size_t min_votes) {
  std::vector<PreferenceRecord> kept;
  for (const auto& t : tasks) {
    if (auto winner = majority(t.votes, min_votes)) {
      PreferenceRecord k = t;
      k.consensus = winner;
      kept.push_back(std::move(k));
    }
  }
  return kept;
}

}  // namespace mpjudge
