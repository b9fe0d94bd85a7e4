#pragma once

// Planted-coherence corpus generator. Paintings encode (hue, texture) and
// music encodes (pitch, tempo); pitch maps to hue and tempo to texture, so
// the coherence of a pair is a known function of its latents.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mpjudge/annotation.hpp"
#include "mpjudge/audio.hpp"
#include "mpjudge/image.hpp"

namespace mpjudge::synth {

struct PaintingLatent {
  double hue = 0.0;      // [0,1], rendered as hue angle 240 * hue degrees
  double texture = 0.0;  // [0,1], stripe frequency 2 + 6 * texture cycles per side
};

struct MusicLatent {
  double pitch = 0.0;  // [0,1], tone at 220 * 4^pitch Hz
  double tempo = 0.0;  // [0,1], amplitude modulation at 1 + 5 * tempo Hz
};

// 1 - (|hue - pitch| + |texture - tempo|) / 2.
double planted_score(const PaintingLatent& p, const MusicLatent& m);

// `phase` in [0,1) shifts the stripes; `noise_seed` drives pixel jitter.
image::Image render_painting(const PaintingLatent& latent, int size, double phase, std::uint64_t noise_seed);
audio::AudioClip render_music(const MusicLatent& latent, double seconds, double phase, std::uint64_t noise_seed);

struct SynthSpec {
  int n_paintings = 120;
  int n_music = 120;
  int n_pairs = 1500;
  std::uint64_t seed = 1;
  int image_size = 64;
  double clip_seconds = 2.0;
  double rater_noise = 0.1;           // raw score = planted + U(-noise, noise), clipped
  double ambiguous_fraction = 0.4;    // share of pairs aimed at the [0.4, 0.6] band
  double ambiguous_squash = 0.0;      // planted in [0.4, 0.6]: ratings center on 0.5 + (1 - squash) * (planted - 0.5)
  double vote_temperature = 0.05;     // P(A) = sigmoid((planted_a - planted_b) / T)
  int min_votes = 3;
  int max_votes = 5;
};

struct SynthDataset {
  std::vector<PaintingLatent> paintings;  // id "p<index>"
  std::vector<MusicLatent> music;         // id "m<index>"
  std::vector<PairRecord> pairs;
  std::vector<PreferenceRecord> preferences;  // all voted tasks, consensus set where it exists
  std::map<std::string, double> planted;      // pair_id -> planted score
};

std::string painting_id(int index);
std::string music_id(int index);
std::string pair_id(int painting, int music);

// Latents, pairs, raw scores and votes; no media.
SynthDataset generate(const SynthSpec& spec);

// Writes paintings/*.png, music/*.wav, pairs.jsonl, preferences.jsonl and
// planted.jsonl under `root`. Output is byte-identical for equal specs.
SynthDataset write_dataset(const std::filesystem::path& root, const SynthSpec& spec);

}  // namespace mpjudge::synth
