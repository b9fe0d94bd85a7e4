#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mpjudge::audio {

inline constexpr int kSampleRate = 16000;

struct AudioClip {
  std::vector<float> samples;  // mono, in [-1, 1]
  int sample_rate = kSampleRate;
  std::string source_id;

  double duration_seconds() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
  }
};

// RIFF/WAVE PCM16 (mono or stereo). Stereo is averaged to mono and the
// result is linearly resampled to `target_rate` when needed.
AudioClip load_audio(const std::filesystem::path& path, int target_rate = kSampleRate);
AudioClip decode_wav(std::span<const std::uint8_t> bytes, int target_rate = kSampleRate,
                     std::string source_id = {});

// Mono PCM16.
std::vector<std::uint8_t> encode_wav(const AudioClip& clip);
void save_wav(const std::filesystem::path& path, const AudioClip& clip);

std::vector<float> resample_linear(std::span<const float> samples, int from_rate, int to_rate);

// Consecutive non-overlapping windows; a trailing partial window is dropped.
std::vector<AudioClip> segment_clips(const AudioClip& clip, double seconds = 15.0);

struct MelParams {
  int n_fft = 1024;
  int hop = 512;
  int sample_rate = kSampleRate;
  int n_mels = 128;
  double f_min = 0.0;
  double f_max = 8000.0;
  double log_floor = 1e-6;
  bool log_compress = true;
};

struct MelSpectrogram {
  std::vector<float> values;  // n_frames x n_mels, row-major (time-major)
  std::size_t n_frames = 0;
  std::size_t n_mels = 0;
  MelParams params;

  float at(std::size_t frame, std::size_t mel) const { return values[frame * n_mels + mel]; }
};

// HTK mel scale.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Unit-peak triangular filters over the one-sided power spectrum.
class MelFilterbank {
 public:
  explicit MelFilterbank(const MelParams& params = {});

  std::size_t n_mels() const { return n_mels_; }
  std::size_t n_bins() const { return n_bins_; }
  double center_frequency(std::size_t mel) const { return edges_hz_[mel + 1]; }
  std::span<const double> row(std::size_t mel) const {
    return std::span<const double>(weights_).subspan(mel * n_bins_, n_bins_);
  }

 private:
  std::size_t n_mels_;
  std::size_t n_bins_;
  std::vector<double> edges_hz_;  // n_mels + 2 band edges
  std::vector<double> weights_;
};

std::size_t frame_count(std::size_t n_samples, int hop = 512);

MelSpectrogram mel_spectrogram(const AudioClip& clip, const MelParams& params = {});

// "MELS" magic, uint32 n_frames, uint32 n_mels, then little-endian float32.
void save_mels(const std::filesystem::path& path, const MelSpectrogram& spec);
MelSpectrogram load_mels(const std::filesystem::path& path);

}  // namespace mpjudge::audio
