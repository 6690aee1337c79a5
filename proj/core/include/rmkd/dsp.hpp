#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "rmkd/tensor.hpp"

namespace rmkd::dsp {

using Complex = std::complex<double>;

// Natural-log floor applied to mel energies.
inline constexpr double kMelFloor = 1e-5;

struct AudioSignal {
  std::vector<double> samples;
  std::uint32_t sample_rate = 22050;

  double duration_seconds() const { return static_cast<double>(samples.size()) / sample_rate; }
};

// Analysis settings. fmax <= 0 means sample_rate / 2.
struct MelConfig {
  std::uint32_t sample_rate = 22050;
  std::size_t n_fft = 1024;
  std::size_t hop = 256;
  std::size_t n_mels = 80;
  double fmin = 0.0;
  double fmax = 0.0;

  double resolved_fmax() const { return fmax > 0.0 ? fmax : sample_rate / 2.0; }
  void validate() const;
};

// frames: [T x n_mels] log-mel values.
struct MelSpectrogram {
  Tensor frames;
  std::uint32_t hop = 256;
  std::uint32_t sample_rate = 22050;

  std::size_t num_frames() const { return frames.empty() ? 0 : frames.rows(); }
  std::size_t num_mels() const { return frames.empty() ? 0 : frames.cols(); }
  bool operator==(const MelSpectrogram&) const = default;
};

struct MelFilterbank {
  Tensor weights;  // [n_mels x (n_fft/2 + 1)]
  std::vector<double> center_hz;
  double fmin = 0.0;
  double fmax = 0.0;
};

// Radix-2 FFT plan for a fixed power-of-two size.
class Fft {
 public:
  explicit Fft(std::size_t n);
  std::size_t size() const { return n_; }
  void forward(std::span<Complex> data) const { transform(data, false); }
  // Inverse includes the 1/n normalization.
  void inverse(std::span<Complex> data) const { transform(data, true); }

 private:
  void transform(std::span<Complex> data, bool inverse) const;

  std::size_t n_;
  std::vector<std::size_t> bit_reverse_;
  std::vector<Complex> twiddles_;
};

bool is_power_of_two(std::size_t n);

// Periodic Hann window.
std::vector<double> hann_window(std::size_t n);

// [frames x bins] complex STFT, bins = n_fft/2 + 1.
struct Spectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<Complex> values;

  Complex& at(std::size_t t, std::size_t k) { return values[t * bins + k]; }
  const Complex& at(std::size_t t, std::size_t k) const { return values[t * bins + k]; }
  std::vector<double> magnitudes() const;
};

// Hann-windowed, reflect-centred STFT: floor(len / hop) + 1 frames.
Spectrogram stft(std::span<const double> signal, std::size_t n_fft, std::size_t hop);

// Weighted overlap-add inverse of stft() (least-squares window normalization);
// returns `length` samples.
std::vector<double> istft(const Spectrogram& spec, std::size_t n_fft, std::size_t hop, std::size_t length);

// HTK mel scale.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

MelFilterbank mel_filterbank(std::size_t n_fft, std::size_t n_mels, double sample_rate, double fmin = 0.0,
                             double fmax = 0.0);

// log(max(filterbank * |stft|, 1e-5)).
MelSpectrogram mel_spectrogram(const AudioSignal& signal, const MelConfig& config = {});

struct GriffinLimResult {
  AudioSignal audio;
  // Spectral convergence ||(|STFT(x_i)| - S)||_F / ||S||_F after each iteration.
  std::vector<double> convergence;
  // Peak before normalization.
  double raw_peak = 0.0;
};

// Output peaks are normalized to this value unless the raw peak is below
// kSilencePeak, in which case the signal is left as is.
inline constexpr double kOutputPeak = 0.95;
inline constexpr double kSilencePeak = 1e-2;

GriffinLimResult griffin_lim(const MelSpectrogram& mel, const MelConfig& config = {}, int iterations = 60,
                             std::uint64_t seed = 0);

// MEL1 files: "MEL1", u32 T, u32 n_mels, u32 sample_rate, u32 hop, then
// T*n_mels f32 row-major (little-endian).
std::vector<std::uint8_t> encode_mel(const MelSpectrogram& mel);
MelSpectrogram decode_mel(std::span<const std::uint8_t> bytes);
void write_mel_file(const std::filesystem::path& path, const MelSpectrogram& mel);
MelSpectrogram read_mel_file(const std::filesystem::path& path);

// 16-bit PCM mono RIFF.
std::vector<std::uint8_t> encode_wav(const AudioSignal& audio);
void write_wav(const std::filesystem::path& path, const AudioSignal& audio);

}  // namespace rmkd::dsp
