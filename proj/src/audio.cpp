#include "mpjudge/audio.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>

#include "binary_io.hpp"
#include "mpjudge/errors.hpp"

namespace mpjudge::audio {

namespace {

using Reader = detail::ByteReader<FormatError>;

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

// FFTW's planner is not thread-safe; execution with new arrays is.
std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

class RealFft {
 public:
  explicit RealFft(int n) : n_(n) {
    in_ = static_cast<double*>(fftw_malloc(sizeof(double) * n));
    out_ = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1)));
    std::lock_guard lock(fftw_planner_mutex());
    plan_ = fftw_plan_dft_r2c_1d(n, in_, out_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    {
      std::lock_guard lock(fftw_planner_mutex());
      fftw_destroy_plan(plan_);
    }
    fftw_free(in_);
    fftw_free(out_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_; }
  // Power |X_k|^2 for k = 0..n/2.
  void power(std::vector<double>& out) {
    fftw_execute(plan_);
    out.resize(static_cast<std::size_t>(n_ / 2 + 1));
    for (int k = 0; k <= n_ / 2; ++k) out[k] = out_[k][0] * out_[k][0] + out_[k][1] * out_[k][1];
  }

 private:
  int n_;
  double* in_;
  fftw_complex* out_;
  fftw_plan plan_;
};

// numpy "reflect" padding index (edge sample not repeated).
std::ptrdiff_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

AudioClip decode_wav(std::span<const std::uint8_t> bytes, int target_rate, std::string source_id) {
  const std::string what = source_id.empty() ? std::string("wav") : source_id;
  if (bytes.empty()) throw FormatError(what + ": empty file");
  Reader r(bytes.data(), bytes.size(), what);
  if (r.tag(4) != "RIFF") throw FormatError(what + ": not a RIFF file");
  r.u32();
  if (r.tag(4) != "WAVE") throw FormatError(what + ": not a WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  const std::uint8_t* data = nullptr;
  std::size_t data_size = 0;
  while (r.remaining() >= 8) {
    const std::string id = r.tag(4);
    const std::uint32_t size = r.u32();
    if (id == "fmt ") {
      Reader f(r.cursor(), std::min<std::size_t>(size, r.remaining()), what);
      format = f.u16();
      channels = f.u16();
      rate = f.u32();
      f.u32();
      f.u16();
      bits = f.u16();
      if (format == kFormatExtensible && size >= 26) {
        f.u16();
        f.u16();
        f.u32();
        format = f.u16();  // first two bytes of the sub-format GUID
      }
      have_fmt = true;
    } else if (id == "data") {
      data = r.cursor();
      data_size = std::min<std::size_t>(size, r.remaining());
    }
    r.skip(std::min<std::size_t>(size + (size & 1u), r.remaining()));
    if (data && have_fmt) break;
  }
  if (!have_fmt) throw FormatError(what + ": missing fmt chunk");
  if (format != kFormatPcm || bits != 16) {
    throw FormatError(what + ": unsupported codec (format " + std::to_string(format) + ", " +
                      std::to_string(bits) + "-bit); only PCM16 is supported");
  }
  if (channels != 1 && channels != 2) {
    throw FormatError(what + ": unsupported channel count " + std::to_string(channels));
  }
  if (rate == 0) throw FormatError(what + ": zero sample rate");
  const std::size_t frames = data ? data_size / (2u * channels) : 0;
  if (frames == 0) throw FormatError(what + ": no audio samples");

  std::vector<float> mono(frames);
  Reader d(data, frames * 2u * channels, what);
  for (std::size_t i = 0; i < frames; ++i) {
    float acc = 0.0f;
    for (std::uint16_t c = 0; c < channels; ++c) {
      acc += static_cast<float>(static_cast<std::int16_t>(d.u16())) / 32768.0f;
    }
    mono[i] = acc / static_cast<float>(channels);
  }

  AudioClip clip;
  clip.source_id = std::move(source_id);
  clip.sample_rate = target_rate;
  clip.samples = static_cast<int>(rate) == target_rate
                     ? std::move(mono)
                     : resample_linear(mono, static_cast<int>(rate), target_rate);
  return clip;
}

AudioClip load_audio(const std::filesystem::path& path, int target_rate) {
  const auto bytes = detail::read_file<FormatError>(path);
  return decode_wav(bytes, target_rate, path.string());
}

std::vector<std::uint8_t> encode_wav(const AudioClip& clip) {
  detail::ByteWriter w;
  const auto n = static_cast<std::uint32_t>(clip.samples.size());
  w.tag("RIFF");
  w.u32(36 + 2 * n);
  w.tag("WAVE");
  w.tag("fmt ");
  w.u32(16);
  w.u16(kFormatPcm);
  w.u16(1);
  w.u32(static_cast<std::uint32_t>(clip.sample_rate));
  w.u32(static_cast<std::uint32_t>(clip.sample_rate) * 2);
  w.u16(2);
  w.u16(16);
  w.tag("data");
  w.u32(2 * n);
  for (float s : clip.samples) {
    const float c = std::clamp(s, -1.0f, 1.0f);
    const long q = std::lround(c * 32767.0f);
    w.u16(static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return std::move(w.buffer());
}

void save_wav(const std::filesystem::path& path, const AudioClip& clip) {
  detail::write_file_atomic(path, encode_wav(clip));
}

std::vector<float> resample_linear(std::span<const float> samples, int from_rate, int to_rate) {
  if (from_rate <= 0 || to_rate <= 0) throw ContractError("resample_linear: rates must be positive");
  if (samples.empty()) return {};
  const std::size_t out_len = static_cast<std::size_t>(
      static_cast<std::uint64_t>(samples.size()) * static_cast<std::uint64_t>(to_rate) /
      static_cast<std::uint64_t>(from_rate));
  std::vector<float> out(out_len);
  const double step = static_cast<double>(from_rate) / static_cast<double>(to_rate);
  for (std::size_t i = 0; i < out_len; ++i) {
    const double pos = static_cast<double>(i) * step;
    const auto i0 = static_cast<std::size_t>(pos);
    const std::size_t i1 = std::min(i0 + 1, samples.size() - 1);
    const double frac = pos - static_cast<double>(i0);
    out[i] = static_cast<float>((1.0 - frac) * samples[std::min(i0, samples.size() - 1)] +
                                frac * samples[i1]);
  }
  return out;
}

std::vector<AudioClip> segment_clips(const AudioClip& clip, double seconds) {
  if (seconds <= 0) throw ContractError("segment_clips: window length must be positive");
  const auto window = static_cast<std::size_t>(std::llround(seconds * clip.sample_rate));
  std::vector<AudioClip> out;
  for (std::size_t start = 0; start + window <= clip.samples.size(); start += window) {
    AudioClip seg;
    seg.sample_rate = clip.sample_rate;
    seg.source_id = clip.source_id + "#" + std::to_string(out.size());
    seg.samples.assign(clip.samples.begin() + start, clip.samples.begin() + start + window);
    out.push_back(std::move(seg));
  }
  return out;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank::MelFilterbank(const MelParams& p)
    : n_mels_(static_cast<std::size_t>(p.n_mels)), n_bins_(static_cast<std::size_t>(p.n_fft / 2 + 1)) {
  if (p.n_mels <= 0 || p.n_fft <= 0 || p.f_max <= p.f_min) {
    throw ContractError("MelFilterbank: invalid parameters");
  }
  const double lo = hz_to_mel(p.f_min), hi = hz_to_mel(p.f_max);
  edges_hz_.resize(n_mels_ + 2);
  for (std::size_t i = 0; i < edges_hz_.size(); ++i) {
    edges_hz_[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_mels_ + 1));
  }
  weights_.assign(n_mels_ * n_bins_, 0.0);
  for (std::size_t m = 0; m < n_mels_; ++m) {
    const double left = edges_hz_[m], center = edges_hz_[m + 1], right = edges_hz_[m + 2];
    for (std::size_t k = 0; k < n_bins_; ++k) {
      const double f = static_cast<double>(k) * p.sample_rate / p.n_fft;
      const double up = (f - left) / (center - left);
      const double down = (right - f) / (right - center);
      weights_[m * n_bins_ + k] = std::max(0.0, std::min(up, down));
    }
  }
}

std::size_t frame_count(std::size_t n_samples, int hop) {
  return 1 + n_samples / static_cast<std::size_t>(hop);
}

MelSpectrogram mel_spectrogram(const AudioClip& clip, const MelParams& p) {
  if (clip.sample_rate != p.sample_rate) {
    throw ContractError("mel_spectrogram: clip sample rate " + std::to_string(clip.sample_rate) +
                        " Hz, expected " + std::to_string(p.sample_rate) + " Hz");
  }
  if (clip.samples.empty()) throw ContractError("mel_spectrogram: empty clip");
  const MelFilterbank bank(p);
  const std::size_t frames = frame_count(clip.samples.size(), p.hop);
  const auto n = static_cast<std::ptrdiff_t>(clip.samples.size());
  const std::ptrdiff_t half = p.n_fft / 2;

  std::vector<double> window(static_cast<std::size_t>(p.n_fft));
  for (int i = 0; i < p.n_fft; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / p.n_fft);  // periodic Hann
  }

  MelSpectrogram out;
  out.params = p;
  out.n_frames = frames;
  out.n_mels = bank.n_mels();
  out.values.resize(frames * out.n_mels);

  RealFft fft(p.n_fft);
  std::vector<double> power;
  for (std::size_t t = 0; t < frames; ++t) {
    const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(t) * p.hop - half;
    double* in = fft.input();
    for (int i = 0; i < p.n_fft; ++i) {
      in[i] = window[i] * clip.samples[static_cast<std::size_t>(reflect_index(start + i, n))];
    }
    fft.power(power);
    for (std::size_t m = 0; m < out.n_mels; ++m) {
      const auto row = bank.row(m);
      double e = 0.0;
      for (std::size_t k = 0; k < power.size(); ++k) e += row[k] * power[k];
      out.values[t * out.n_mels + m] =
          static_cast<float>(p.log_compress ? std::log(e + p.log_floor) : e);
    }
  }
  return out;
}

void save_mels(const std::filesystem::path& path, const MelSpectrogram& spec) {
  detail::ByteWriter w;
  w.tag("MELS");
  w.u32(static_cast<std::uint32_t>(spec.n_frames));
  w.u32(static_cast<std::uint32_t>(spec.n_mels));
  for (float v : spec.values) w.f32(v);
  detail::write_file_atomic(path, w.buffer());
}

MelSpectrogram load_mels(const std::filesystem::path& path) {
  const auto bytes = detail::read_file<FormatError>(path);
  Reader r(bytes.data(), bytes.size(), path.string());
  if (r.tag(4) != "MELS") throw FormatError(path.string() + ": bad magic, expected MELS");
  MelSpectrogram spec;
  spec.n_frames = r.u32();
  spec.n_mels = r.u32();
  if (r.remaining() != spec.n_frames * spec.n_mels * 4) {
    throw FormatError(path.string() + ": payload size does not match header");
  }
  spec.values.resize(spec.n_frames * spec.n_mels);
  for (auto& v : spec.values) v = r.f32();
  spec.params.n_mels = static_cast<int>(spec.n_mels);
  return spec;
}

}  // namespace mpjudge::audio
