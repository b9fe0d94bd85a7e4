#include <cmath>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "mpjudge/annotation.hpp"
#include "mpjudge/errors.hpp"
#include "mpjudge/manifest.hpp"
#include "oracles.hpp"

using namespace mpjudge;

namespace {

PairRecord scored(const std::string& painting, const std::string& music, double score) {
  PairRecord r;
  r.pair_id = painting + "_" + music;
  r.painting_id = painting;
  r.music_id = music;
  r.raw_scores = {score, score, score, score, score};
  r.score = score;
  r.painting_path = "paintings/" + painting + ".png";
  r.music_path = "music/" + music + ".wav";
  return r;
}

std::vector<Vote> votes(const std::string& choices) {
  std::vector<Vote> v;
  for (std::size_t i = 0; i < choices.size(); ++i) v.push_back({"a" + std::to_string(i), choices[i]});
  return v;
}

}  // namespace

TEST_CASE("aggregate scores examples") {
  CHECK(std::abs(aggregate_scores({0.2, 0.5, 0.6, 0.7, 0.9}) - 0.6) < 1e-15);
  CHECK(aggregate_scores({0.5, 0.5, 0.5, 0.5, 0.5}) == 0.5);
  CHECK(std::abs(aggregate_scores({0.9, 0.9, 0.5, 0.4, 0.1}) - 0.6) < 1e-15);
  CHECK_THROWS_AS(aggregate_scores({0.1, 0.2, 0.3, 0.4}), ContractError);
  CHECK_THROWS_AS(aggregate_scores({0.1, 0.2, 0.3, 0.4, 1.1}), ContractError);
  CHECK_THROWS_AS(aggregate_scores({0.1, 0.2, NAN, 0.4, 0.5}), ContractError);
}

TEST_CASE("aggregate scores agrees with the oracle and is permutation invariant") {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> coarse(0, 4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(5);
    // half the instances use a coarse grid so ties are common
    for (auto& x : v) x = trial % 2 ? u(rng) : coarse(rng) / 4.0;
    const double got = aggregate_scores(v);
    CHECK(std::abs(got - oracle::trimmed_mean(v)) < 1e-9);
    std::vector<double> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    CHECK(got >= sorted[1]);
    CHECK(got <= sorted[3]);
    std::shuffle(v.begin(), v.end(), rng);
    CHECK(aggregate_scores(v) == doctest::Approx(got).epsilon(1e-15));
  }
}

TEST_CASE("dispersion examples and thresholds") {
  CHECK(std::abs(population_stddev({0.4, 0.5, 0.5, 0.5, 0.6}) - std::sqrt(0.004)) < 1e-12);

  std::vector<PairRecord> constant{scored("p1", "m1", 0.3), scored("p2", "m2", 0.7)};
  auto r = dispersion_stats(constant);
  CHECK(r.records == 2);
  CHECK(r.mean_stddev == 0.0);
  CHECK(r.fraction_below_009 == 1.0);
  CHECK(r.fraction_below_011 == 1.0);

  // {0.5-a, 0.5-a, 0.5, 0.5+a, 0.5+a} has variance 4a^2/5, so sigma = 0.10
  // at a = 0.1 * sqrt(5/4)
  const double a = 0.1 * std::sqrt(1.25);
  PairRecord edge = scored("p3", "m3", 0.5);
  edge.raw_scores = {0.5 - a, 0.5 - a, 0.5, 0.5 + a, 0.5 + a};
  CHECK(population_stddev(edge.raw_scores) == doctest::Approx(0.10).epsilon(1e-12));
  auto e = dispersion_stats({edge});
  CHECK(e.fraction_below_009 == 0.0);
  CHECK(e.fraction_below_011 == 1.0);

  PairRecord partial = scored("p4", "m4", 0.5);
  partial.raw_scores.pop_back();
  auto s = dispersion_stats({partial, edge});
  CHECK(s.skipped == 1);
  CHECK(s.records == 1);
}

TEST_CASE("dispersion agrees with the pairwise oracle") {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<PairRecord> recs;
    const int n = 1 + trial % 6;
    double mean = 0;
    int below9 = 0, below11 = 0;
    for (int i = 0; i < n; ++i) {
      PairRecord r = scored("p" + std::to_string(i), "m", 0.5);
      const double centre = u(rng), spread = 0.3 * u(rng);
      for (auto& s : r.raw_scores) s = std::clamp(centre + spread * (u(rng) - 0.5), 0.0, 1.0);
      const double sd = oracle::population_stddev(r.raw_scores);
      CHECK(std::abs(population_stddev(r.raw_scores) - sd) < 1e-9);
      mean += sd / n;
      below9 += sd < 0.09;
      below11 += sd < 0.11;
      recs.push_back(r);
    }
    auto rep = dispersion_stats(recs);
    CHECK(std::abs(rep.mean_stddev - mean) < 1e-9);
    CHECK(rep.fraction_below_009 == doctest::Approx(double(below9) / n));
    CHECK(rep.fraction_below_011 == doctest::Approx(double(below11) / n));
  }
}

TEST_CASE("krippendorff alpha examples") {
  auto worked = krippendorff_alpha({{0.4, 0.6}, {0.1, 0.9}});
  CHECK(std::abs(worked.observed - 0.34) < 1e-15);
  CHECK(std::abs(worked.expected - 1.36 / 6) < 1e-15);
  CHECK(std::abs(worked.alpha - (-0.5)) < 1e-12);

  auto perfect = krippendorff_alpha({{0.2, 0.2}, {0.8, 0.8}});
  CHECK(perfect.alpha == 1.0);
  CHECK_FALSE(perfect.degenerate);

  auto flat = krippendorff_alpha({{0.5, 0.5}, {0.5, 0.5, 0.5}});
  CHECK(flat.degenerate);
  CHECK(flat.alpha == 1.0);

  CHECK_THROWS_AS(krippendorff_alpha({{0.1, 0.2}}), ContractError);
  CHECK_THROWS_AS(krippendorff_alpha({{0.1, 0.2}, {0.3}}), ContractError);
}

TEST_CASE("krippendorff alpha agrees with the pair-loop oracle") {
  std::mt19937_64 rng(43);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> raters(2, 6), items(2, 8);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<double>> data(items(rng));
    for (auto& it : data) {
      it.resize(raters(rng));
      const double centre = u(rng);
      for (auto& s : it) s = centre + 0.3 * (u(rng) - 0.5);
    }
    const double alpha = krippendorff_alpha(data).alpha;
    CHECK(std::abs(alpha - oracle::krippendorff_alpha(data)) < 1e-9);
    CHECK(alpha <= 1.0);

    // shift and scale invariance
    auto moved = data;
    for (auto& it : moved)
      for (auto& s : it) s = -3.5 * s + 11.0;
    CHECK(std::abs(krippendorff_alpha(moved).alpha - alpha) < 1e-9);
  }
}

TEST_CASE("preference tasks respect the band and pair off partners") {
  CHECK(build_preference_tasks({scored("p", "m1", 0.1), scored("p", "m2", 0.9)}, Band{}, 1).empty());

  auto forced = build_preference_tasks({scored("P", "M1", 0.4), scored("P", "M2", 0.6)}, Band{}, 7);
  REQUIRE(forced.size() == 1);
  CHECK(forced[0].query_modality == Modality::kPainting);
  CHECK(forced[0].query_id == "P");
  CHECK(std::set<std::string>{forced[0].candidate_a, forced[0].candidate_b} == std::set<std::string>{"M1", "M2"});
  CHECK(forced[0].task_id == preference_task_id(Modality::kPainting, "P", forced[0].candidate_a, forced[0].candidate_b));

  // music clip with two in-band paintings yields the mirrored form
  auto mirrored = build_preference_tasks({scored("P1", "M", 0.5), scored("P2", "M", 0.45)}, Band{}, 7);
  REQUIRE(mirrored.size() == 1);
  CHECK(mirrored[0].query_modality == Modality::kMusic);

  std::mt19937_64 rng(44);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> pick(0, 6);
  std::vector<PairRecord> corpus;
  std::map<std::pair<std::string, std::string>, double> score_of;
  for (int i = 0; i < 50; ++i) {
    auto r = scored("P" + std::to_string(pick(rng)), "M" + std::to_string(pick(rng)), u(rng));
    if (score_of.count({r.painting_id, r.music_id})) continue;
    score_of[{r.painting_id, r.music_id}] = *r.score;
    corpus.push_back(r);
  }
  auto first = build_preference_tasks(corpus, Band{}, 99);
  auto second = build_preference_tasks(corpus, Band{}, 99);
  CHECK(manifest::preferences_to_jsonl(first) == manifest::preferences_to_jsonl(second));
  CHECK_FALSE(first.empty());
  std::set<std::string> ids;
  for (const auto& t : first) {
    CHECK(ids.insert(t.task_id).second);
    CHECK(t.candidate_a != t.candidate_b);
    for (const auto& c : {t.candidate_a, t.candidate_b}) {
      const auto key = t.query_modality == Modality::kPainting ? std::make_pair(t.query_id, c)
                                                               : std::make_pair(c, t.query_id);
      const double s = score_of.at(key);
      CHECK(s >= 0.4);
      CHECK(s <= 0.6);
    }
  }
}

TEST_CASE("consensus filter keeps strict majorities only") {
  PreferenceRecord t;
  t.task_id = "t";
  t.candidate_a = "x";
  t.candidate_b = "y";
  auto with = [&](const std::string& c) {
    PreferenceRecord r = t;
    r.votes = votes(c);
    return r;
  };
  auto kept = consensus_filter({with("AAB"), with("AB"), with("AABB"), with("BBA"), with("BBBBA")});
  REQUIRE(kept.size() == 3);
  CHECK(kept[0].consensus == 'A');
  CHECK(kept[0].preferred() == "x");
  CHECK(kept[1].consensus == 'B');
  CHECK(kept[1].rejected() == "x");
  CHECK(majority(votes("AB"), 2) == std::nullopt);
  CHECK(majority(votes("AA"), 2) == 'A');
}

TEST_CASE("manifests round trip and report bad lines") {
  PairRecord p = scored("p1", "m1", 0.25);
  p.raw_scores = {0.1, 0.2, 0.25, 0.3, 0.9};
  PairRecord unscored = scored("p2", "m2", 0.5);
  unscored.score.reset();
  unscored.raw_scores = {0.5, 0.6};
  const auto text = manifest::pairs_to_jsonl({p, unscored});
  auto back = manifest::pairs_from_jsonl(text);
  REQUIRE(back.size() == 2);
  CHECK(back[0].raw_scores == p.raw_scores);
  CHECK(back[0].score == p.score);
  CHECK_FALSE(back[1].score.has_value());
  CHECK(back[1].music_path == "music/m2.wav");
  CHECK(manifest::pairs_to_jsonl(back) == text);

  PreferenceRecord t;
  t.task_id = preference_task_id(Modality::kMusic, "m1", "p1", "p2");
  t.query_modality = Modality::kMusic;
  t.query_id = "m1";
  t.candidate_a = "p1";
  t.candidate_b = "p2";
  t.votes = votes("BAB");
  t.consensus = 'B';
  const auto ptext = manifest::preferences_to_jsonl({t});
  auto pback = manifest::preferences_from_jsonl(ptext);
  REQUIRE(pback.size() == 1);
  CHECK(pback[0].query_modality == Modality::kMusic);
  CHECK(pback[0].votes.size() == 3);
  CHECK(pback[0].consensus == 'B');
  CHECK(manifest::preferences_to_jsonl(pback) == ptext);

  CHECK(manifest::pairs_from_jsonl("\n\n").empty());
  try {
    manifest::pairs_from_jsonl(text + "{\"pair_id\": 3}\n", "pairs.jsonl");
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("pairs.jsonl:3") != std::string::npos);
  }
  CHECK_THROWS_AS(manifest::pairs_from_jsonl("{not json\n"), FormatError);
  auto bad_choice = ptext;
  bad_choice.replace(bad_choice.find("\"choice\":\"B\""), 12, "\"choice\":\"C\"");
  CHECK_THROWS_AS(manifest::preferences_from_jsonl(bad_choice), FormatError);
}
