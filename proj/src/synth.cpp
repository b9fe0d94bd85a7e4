#include "mpjudge/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <set>

#include "json.hpp"
#include "mpjudge/errors.hpp"
#include "mpjudge/manifest.hpp"

namespace mpjudge::synth {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::string padded(char prefix, int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%c%04d", prefix, index);
  return buf;
}

// h in degrees, s and v in [0,1].
void hsv_to_rgb(double h, double s, double v, float* rgb) {
  const double c = v * s;
  const double hp = std::fmod(h / 60.0, 6.0);
  const double x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = v - c;
  rgb[0] = static_cast<float>(r + m);
  rgb[1] = static_cast<float>(g + m);
  rgb[2] = static_cast<float>(b + m);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

double planted_score(const PaintingLatent& p, const MusicLatent& m) {
  return 1.0 - 0.5 * (std::abs(p.hue - m.pitch) + std::abs(p.texture - m.tempo));
}

image::Image render_painting(const PaintingLatent& latent, int size, double phase, std::uint64_t noise_seed) {
  if (size <= 0) throw ContractError("render_painting: size must be positive");
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> jitter(0.0, 0.02);
  const double freq = 2.0 + 6.0 * latent.texture;
  image::Image img{size, size, 3, std::vector<float>(static_cast<std::size_t>(size) * size * 3)};
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = (x + y) / (2.0 * size);
      const double stripe = std::sin(kTwoPi * (freq * u + phase));
      float* px = &img.at(y, x, 0);
      hsv_to_rgb(240.0 * latent.hue, 0.85, 0.6 + 0.35 * stripe, px);
      for (int c = 0; c < 3; ++c) px[c] = static_cast<float>(std::clamp(px[c] + jitter(rng), 0.0, 1.0));
    }
  }
  return img;
}

audio::AudioClip render_music(const MusicLatent& latent, double seconds, double phase, std::uint64_t noise_seed) {
  if (!(seconds > 0)) throw ContractError("render_music: duration must be positive");
  std::mt19937_64 rng(noise_seed);
  std::uniform_real_distribution<double> hiss(-0.01, 0.01);
  const double tone = 220.0 * std::pow(4.0, latent.pitch);
  const double rate = 1.0 + 5.0 * latent.tempo;
  audio::AudioClip clip;
  clip.samples.resize(static_cast<std::size_t>(std::llround(seconds * audio::kSampleRate)));
  for (std::size_t i = 0; i < clip.samples.size(); ++i) {
    const double t = static_cast<double>(i) / audio::kSampleRate;
    const double envelope = 0.55 + 0.45 * std::sin(kTwoPi * (rate * t + phase));
    clip.samples[i] = static_cast<float>(0.6 * envelope * std::sin(kTwoPi * tone * t) + hiss(rng));
  }
  return clip;
}

std::string painting_id(int index) { return padded('p', index); }
std::string music_id(int index) { return padded('m', index); }
std::string pair_id(int painting, int music) { return painting_id(painting) + "_" + music_id(music); }

SynthDataset generate(const SynthSpec& spec) {
  if (spec.n_paintings < 2 || spec.n_music < 2 || spec.n_pairs < 2)
    throw ContractError("synth: need at least two paintings, two clips and two pairs");
  if (static_cast<long>(spec.n_pairs) > static_cast<long>(spec.n_paintings) * spec.n_music)
    throw ContractError("synth: more pairs requested than painting/music combinations");
  if (spec.min_votes < 1 || spec.max_votes < spec.min_votes) throw ContractError("synth: bad vote counts");
  if (!(spec.ambiguous_squash >= 0.0 && spec.ambiguous_squash <= 1.0))
    throw ContractError("synth: ambiguous_squash must lie in [0, 1]");

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  SynthDataset ds;
  for (int i = 0; i < spec.n_paintings; ++i) ds.paintings.push_back({u01(rng), u01(rng)});
  for (int j = 0; j < spec.n_music; ++j) ds.music.push_back({u01(rng), u01(rng)});
  // anchors: p0/m0 coincide, p1/m1 sit at opposite corners
  ds.music[0] = {ds.paintings[0].hue, ds.paintings[0].texture};
  ds.paintings[1] = {0.0, 0.0};
  ds.music[1] = {1.0, 1.0};

  std::set<std::pair<int, int>> used;
  auto add_pair = [&](int i, int j) {
    used.insert({i, j});
    PairRecord r;
    r.pair_id = pair_id(i, j);
    r.painting_id = painting_id(i);
    r.music_id = music_id(j);
    r.painting_path = "paintings/" + r.painting_id + ".png";
    r.music_path = "music/" + r.music_id + ".wav";
    const double planted = planted_score(ds.paintings[i], ds.music[j]);
    // raters hedge toward 0.5 on ambiguous pairs
    const double perceived = planted >= 0.4 && planted <= 0.6 ? 0.5 + (1.0 - spec.ambiguous_squash) * (planted - 0.5)
                                                              : planted;
    std::uniform_real_distribution<double> noise(-spec.rater_noise, spec.rater_noise);
    for (std::size_t k = 0; k < kRatingsPerPair; ++k)
      r.raw_scores.push_back(std::clamp(perceived + noise(rng), 0.0, 1.0));
    r.score = aggregate_scores(r.raw_scores);
    ds.planted[r.pair_id] = planted;
    ds.pairs.push_back(std::move(r));
  };
  add_pair(0, 0);
  add_pair(1, 1);

  // Each remaining pair aims at a drawn target score and takes the unused
  // partner closest to it, which keeps the score distribution broad.
  std::uniform_real_distribution<double> band(0.4, 0.6);
  for (int k = 2; k < spec.n_pairs; ++k) {
    int i = k % spec.n_paintings;
    const double target = u01(rng) < spec.ambiguous_fraction ? band(rng) : u01(rng);
    int best = -1;
    double best_gap = 2.0;
    // a painting with every partner used hands over to the next one
    for (;; i = (i + 1) % spec.n_paintings) {
      for (int j = 0; j < spec.n_music; ++j) {
        if (used.count({i, j})) continue;
        const double gap = std::abs(planted_score(ds.paintings[i], ds.music[j]) - target);
        if (gap < best_gap) best_gap = gap, best = j;
      }
      if (best >= 0) break;
    }
    add_pair(i, best);
  }

  std::uniform_int_distribution<int> vote_count(spec.min_votes, spec.max_votes);
  auto pair_of = [](const std::string& painting, const std::string& music) { return painting + "_" + music; };
  for (auto& task : build_preference_tasks(ds.pairs, Band{}, spec.seed ^ 0x9e3779b97f4a7c15ULL)) {
    const bool painting_query = task.query_modality == Modality::kPainting;
    const auto id_a = painting_query ? pair_of(task.query_id, task.candidate_a) : pair_of(task.candidate_a, task.query_id);
    const auto id_b = painting_query ? pair_of(task.query_id, task.candidate_b) : pair_of(task.candidate_b, task.query_id);
    const double p_a = sigmoid((ds.planted.at(id_a) - ds.planted.at(id_b)) / spec.vote_temperature);
    const int n = vote_count(rng);
    for (int v = 0; v < n; ++v) task.votes.push_back({"sim" + std::to_string(v), u01(rng) < p_a ? 'A' : 'B'});
    task.consensus = majority(task.votes, static_cast<std::size_t>(spec.min_votes));
    ds.preferences.push_back(std::move(task));
  }
  return ds;
}

SynthDataset write_dataset(const std::filesystem::path& root, const SynthSpec& spec) {
  SynthDataset ds = generate(spec);
  std::filesystem::create_directories(root / "paintings");
  std::filesystem::create_directories(root / "music");
  // media noise and phases come from their own stream so the manifests do
  // not depend on rendering
  std::mt19937_64 media_rng(spec.seed * 0x2545f4914f6cdd1dULL + 17);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::size_t i = 0; i < ds.paintings.size(); ++i) {
    const double phase = u01(media_rng);
    const auto img = render_painting(ds.paintings[i], spec.image_size, phase, media_rng());
    image::save_png(root / "paintings" / (painting_id(static_cast<int>(i)) + ".png"), img);
  }
  for (std::size_t j = 0; j < ds.music.size(); ++j) {
    const double phase = u01(media_rng);
    const auto clip = render_music(ds.music[j], spec.clip_seconds, phase, media_rng());
    audio::save_wav(root / "music" / (music_id(static_cast<int>(j)) + ".wav"), clip);
  }
  manifest::save_pairs(root / "pairs.jsonl", ds.pairs);
  manifest::save_preferences(root / "preferences.jsonl", ds.preferences);
  std::string planted;
  for (const auto& p : ds.pairs) planted += nlohmann::json{{"pair_id", p.pair_id}, {"planted", ds.planted.at(p.pair_id)}}.dump() + "\n";
  manifest::write_text(root / "planted.jsonl", planted);
  return ds;
}

}  // namespace mpjudge::synth
