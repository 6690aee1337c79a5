#include "rmkd/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "rmkd/binary_io.hpp"
#include "rmkd/error.hpp"
#include "rmkd/rng.hpp"

namespace rmkd::dsp {

bool is_power_of_two(std::size_t n) { return n >= 1 && (n & (n - 1)) == 0; }

void MelConfig::validate() const {
  if (!is_power_of_two(n_fft) || n_fft < 2) throw ConfigError("n_fft must be a power of two, got " + std::to_string(n_fft));
  if (hop == 0 || hop > n_fft) throw ConfigError("hop must lie in (0, n_fft]");
  if (n_mels < 2) throw ConfigError("n_mels must be at least 2");
  if (sample_rate == 0) throw ConfigError("sample rate must be positive");
  if (resolved_fmax() <= fmin) throw ConfigError("fmax must exceed fmin");
}

Fft::Fft(std::size_t n) : n_(n) {
  if (!is_power_of_two(n)) throw ConfigError("FFT size must be a power of two, got " + std::to_string(n));
  bit_reverse_.resize(n);
  std::size_t bits = 0;
  while ((std::size_t{1} << bits) < n) ++bits;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t r = 0;
    for (std::size_t b = 0; b < bits; ++b) r |= ((i >> b) & 1) << (bits - 1 - b);
    bit_reverse_[i] = r;
  }
  twiddles_.resize(n / 2);
  for (std::size_t k = 0; k < n / 2; ++k) {
    twiddles_[k] = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n));
  }
}

void Fft::transform(std::span<Complex> data, bool inverse) const {
  if (data.size() != n_) throw DimensionError("FFT input length does not match plan size");
  for (std::size_t i = 0; i < n_; ++i) {
    if (i < bit_reverse_[i]) std::swap(data[i], data[bit_reverse_[i]]);
  }
  for (std::size_t len = 2; len <= n_; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t step = n_ / len;
    for (std::size_t start = 0; start < n_; start += len) {
      for (std::size_t k = 0; k < half; ++k) {
        Complex w = twiddles_[k * step];
        if (inverse) w = std::conj(w);
        const Complex u = data[start + k];
        const Complex v = data[start + k + half] * w;
        data[start + k] = u + v;
        data[start + k + half] = u - v;
      }
    }
  }
  if (inverse) {
    const double s = 1.0 / static_cast<double>(n_);
    for (auto& x : data) x *= s;
  }
}

std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  }
  return w;
}

std::vector<double> Spectrogram::magnitudes() const {
  std::vector<double> m(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) m[i] = std::abs(values[i]);
  return m;
}

namespace {

// Mirror index into [0, n) the way numpy's "reflect" padding does, repeating
// the reflection for pads longer than the signal.
std::size_t reflect_index(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * (static_cast<long>(n) - 1);
  long m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<long>(n)) m = period - m;
  return static_cast<std::size_t>(m);
}

void check_stft_args(std::size_t n_fft, std::size_t hop) {
  if (!is_power_of_two(n_fft) || n_fft < 2) throw ConfigError("n_fft must be a power of two, got " + std::to_string(n_fft));
  if (hop == 0 || hop > n_fft) throw ConfigError("hop must lie in (0, n_fft]");
}

}  // namespace

Spectrogram stft(std::span<const double> signal, std::size_t n_fft, std::size_t hop) {
  check_stft_args(n_fft, hop);
  if (signal.empty()) throw InputError("stft of an empty signal");
  const Fft fft(n_fft);
  const auto window = hann_window(n_fft);
  const long pad = static_cast<long>(n_fft / 2);
  Spectrogram spec;
  spec.frames = signal.size() / hop + 1;
  spec.bins = n_fft / 2 + 1;
  spec.values.resize(spec.frames * spec.bins);
  std::vector<Complex> buf(n_fft);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    const long start = static_cast<long>(t * hop) - pad;
    for (std::size_t i = 0; i < n_fft; ++i) {
      buf[i] = Complex(signal[reflect_index(start + static_cast<long>(i), signal.size())] * window[i], 0.0);
    }
    fft.forward(buf);
    std::copy_n(buf.begin(), spec.bins, spec.values.begin() + static_cast<long>(t * spec.bins));
  }
  return spec;
}

std::vector<double> istft(const Spectrogram& spec, std::size_t n_fft, std::size_t hop, std::size_t length) {
  check_stft_args(n_fft, hop);
  if (spec.bins != n_fft / 2 + 1) throw DimensionError("istft: bin count does not match n_fft");
  const Fft fft(n_fft);
  const auto window = hann_window(n_fft);
  const std::size_t pad = n_fft / 2;
  const std::size_t total = (spec.frames - 1) * hop + n_fft;
  std::vector<double> acc(total, 0.0), norm(total, 0.0);
  std::vector<Complex> buf(n_fft);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    for (std::size_t k = 0; k < spec.bins; ++k) buf[k] = spec.at(t, k);
    for (std::size_t k = spec.bins; k < n_fft; ++k) buf[k] = std::conj(buf[n_fft - k]);
    fft.inverse(buf);
    for (std::size_t i = 0; i < n_fft; ++i) {
      acc[t * hop + i] += buf[i].real() * window[i];
      norm[t * hop + i] += window[i] * window[i];
    }
  }
  std::vector<double> out(length, 0.0);
  for (std::size_t n = 0; n < length && n + pad < total; ++n) {
    const double w = norm[n + pad];
    out[n] = w > 1e-11 ? acc[n + pad] / w : acc[n + pad];
  }
  return out;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank mel_filterbank(std::size_t n_fft, std::size_t n_mels, double sample_rate, double fmin, double fmax) {
  if (n_mels < 2) throw ConfigError("n_mels must be at least 2");
  if (fmax <= 0.0) fmax = sample_rate / 2.0;
  if (fmax <= fmin) throw ConfigError("fmax must exceed fmin");
  const std::size_t bins = n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(fmin), mel_hi = hz_to_mel(fmax);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  }
  MelFilterbank fb;
  fb.fmin = fmin;
  fb.fmax = fmax;
  fb.weights = Tensor({n_mels, bins}, 0.0);
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    fb.center_hz.push_back(mid);
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(n_fft);
      const double rise = (f - lo) / (mid - lo);
      const double fall = (hi - f) / (hi - mid);
      fb.weights.at(m, k) = std::max(0.0, std::min(rise, fall));
    }
  }
  return fb;
}

MelSpectrogram mel_spectrogram(const AudioSignal& signal, const MelConfig& config) {
  config.validate();
  const Spectrogram spec = stft(signal.samples, config.n_fft, config.hop);
  const MelFilterbank fb =
      mel_filterbank(config.n_fft, config.n_mels, config.sample_rate, config.fmin, config.resolved_fmax());
  const auto mags = spec.magnitudes();
  MelSpectrogram mel;
  mel.hop = static_cast<std::uint32_t>(config.hop);
  mel.sample_rate = config.sample_rate;
  mel.frames = Tensor({spec.frames, config.n_mels}, 0.0);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    for (std::size_t m = 0; m < config.n_mels; ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < spec.bins; ++k) e += fb.weights.at(m, k) * mags[t * spec.bins + k];
      mel.frames.at(t, m) = std::log(std::max(e, kMelFloor));
    }
  }
  return mel;
}

namespace {

// Minimum-norm right inverse of the filterbank: W^T (W W^T)^{-1}, applied per
// frame through a Cholesky factor of W W^T.
class FilterbankInverse {
 public:
  explicit FilterbankInverse(const Tensor& w) : w_(w), n_(w.rows()), bins_(w.cols()), chol_(n_ * n_, 0.0) {
    std::vector<double> gram(n_ * n_, 0.0);
    double trace = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < bins_; ++k) s += w.at(i, k) * w.at(j, k);
        gram[i * n_ + j] = gram[j * n_ + i] = s;
      }
      trace += gram[i * n_ + i];
    }
    // Tiny ridge keeps the factorization defined for nearly collinear filters.
    const double ridge = 1e-10 * trace / static_cast<double>(n_);
    for (std::size_t i = 0; i < n_; ++i) gram[i * n_ + i] += ridge;
    for (std::size_t j = 0; j < n_; ++j) {
      double d = gram[j * n_ + j];
      for (std::size_t k = 0; k < j; ++k) d -= chol_[j * n_ + k] * chol_[j * n_ + k];
      chol_[j * n_ + j] = std::sqrt(std::max(d, 1e-300));
      for (std::size_t i = j + 1; i < n_; ++i) {
        double s = gram[i * n_ + j];
        for (std::size_t k = 0; k < j; ++k) s -= chol_[i * n_ + k] * chol_[j * n_ + k];
        chol_[i * n_ + j] = s / chol_[j * n_ + j];
      }
    }
  }

  // Linear magnitudes for one frame of mel energies, clamped at zero.
  void apply(std::span<const double> mel, std::span<double> out) const {
    std::vector<double> y(mel.begin(), mel.end());
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t k = 0; k < i; ++k) y[i] -= chol_[i * n_ + k] * y[k];
      y[i] /= chol_[i * n_ + i];
    }
    for (std::size_t i = n_; i-- > 0;) {
      for (std::size_t k = i + 1; k < n_; ++k) y[i] -= chol_[k * n_ + i] * y[k];
      y[i] /= chol_[i * n_ + i];
    }
    for (std::size_t k = 0; k < bins_; ++k) {
      double s = 0.0;
      for (std::size_t i = 0; i < n_; ++i) s += w_.at(i, k) * y[i];
      out[k] = std::max(0.0, s);
    }
  }

 private:
  const Tensor& w_;
  std::size_t n_, bins_;
  std::vector<double> chol_;
};

double spectral_convergence(const Spectrogram& estimate, std::span<const double> target) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double diff = std::abs(estimate.values[i]) - target[i];
    num += diff * diff;
    den += target[i] * target[i];
  }
  return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

}  // namespace

GriffinLimResult griffin_lim(const MelSpectrogram& mel, const MelConfig& config, int iterations, std::uint64_t seed) {
  config.validate();
  if (iterations < 1) throw ConfigError("griffin_lim needs at least one iteration");
  if (mel.num_mels() != config.n_mels) throw DimensionError("griffin_lim: mel channel count does not match config");
  const MelFilterbank fb =
      mel_filterbank(config.n_fft, config.n_mels, config.sample_rate, config.fmin, config.resolved_fmax());
  const FilterbankInverse inverse(fb.weights);
  const std::size_t frames = mel.num_frames();
  const std::size_t bins = config.n_fft / 2 + 1;

  std::vector<double> target(frames * bins);
  std::vector<double> energies(config.n_mels);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t m = 0; m < config.n_mels; ++m) energies[m] = std::exp(mel.frames.at(t, m));
    inverse.apply(energies, std::span<double>(target).subspan(t * bins, bins));
  }

  const std::size_t length = std::max<std::size_t>(1, (frames - 1) * config.hop);
  Spectrogram spec;
  spec.frames = frames;
  spec.bins = bins;
  spec.values.resize(frames * bins);
  Rng rng(seed);
  for (std::size_t i = 0; i < spec.values.size(); ++i) {
    spec.values[i] = std::polar(target[i], 2.0 * std::numbers::pi * rng.uniform());
  }

  GriffinLimResult result;
  std::vector<double> signal;
  for (int it = 0; it < iterations; ++it) {
    signal = istft(spec, config.n_fft, config.hop, length);
    const Spectrogram rebuilt = stft(signal, config.n_fft, config.hop);
    result.convergence.push_back(spectral_convergence(rebuilt, target));
    for (std::size_t i = 0; i < spec.values.size(); ++i) {
      const double mag = std::abs(rebuilt.values[i]);
      const Complex phase = mag > 0.0 ? rebuilt.values[i] / mag : Complex(1.0, 0.0);
      spec.values[i] = target[i] * phase;
    }
  }
  signal = istft(spec, config.n_fft, config.hop, length);

  double peak = 0.0;
  for (double s : signal) peak = std::max(peak, std::abs(s));
  result.raw_peak = peak;
  if (peak >= kSilencePeak) {
    for (double& s : signal) s *= kOutputPeak / peak;
  }
  result.audio.samples = std::move(signal);
  result.audio.sample_rate = config.sample_rate;
  return result;
}

std::vector<std::uint8_t> encode_mel(const MelSpectrogram& mel) {
  ByteWriter w;
  w.raw("MEL1");
  w.u32(static_cast<std::uint32_t>(mel.num_frames()));
  w.u32(static_cast<std::uint32_t>(mel.num_mels()));
  w.u32(mel.sample_rate);
  w.u32(mel.hop);
  for (double v : mel.frames.data()) w.f32(static_cast<float>(v));
  return w.take();
}

MelSpectrogram decode_mel(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("MEL1");
  const std::uint32_t frames = r.u32();
  const std::uint32_t mels = r.u32();
  MelSpectrogram mel;
  mel.sample_rate = r.u32();
  mel.hop = r.u32();
  if (frames == 0 || mels == 0) r.fail("empty mel spectrogram");
  if (r.remaining() / 4 < static_cast<std::size_t>(frames) * mels) r.fail("truncated mel payload");
  std::vector<double> data(static_cast<std::size_t>(frames) * mels);
  for (double& v : data) v = r.f32();
  r.expect_end();
  mel.frames = Tensor({frames, mels}, std::move(data));
  return mel;
}

void write_mel_file(const std::filesystem::path& path, const MelSpectrogram& mel) { write_file(path, encode_mel(mel)); }

MelSpectrogram read_mel_file(const std::filesystem::path& path) { return decode_mel(read_file(path)); }

std::vector<std::uint8_t> encode_wav(const AudioSignal& audio) {
  const auto n = static_cast<std::uint32_t>(audio.samples.size());
  ByteWriter w;
  w.raw("RIFF");
  w.u32(36 + 2 * n);
  w.raw("WAVE");
  w.raw("fmt ");
  w.u32(16);
  w.u8(1);  // PCM
  w.u8(0);
  w.u8(1);  // mono
  w.u8(0);
  w.u32(audio.sample_rate);
  w.u32(audio.sample_rate * 2);
  w.u8(2);  // block align
  w.u8(0);
  w.u8(16);  // bits per sample
  w.u8(0);
  w.raw("data");
  w.u32(2 * n);
  for (double s : audio.samples) {
    const double c = std::clamp(s, -1.0, 1.0);
    const auto q = static_cast<std::int16_t>(std::lround(c * 32767.0));
    const auto u = static_cast<std::uint16_t>(q);
    w.u8(static_cast<std::uint8_t>(u & 0xff));
    w.u8(static_cast<std::uint8_t>(u >> 8));
  }
  return w.take();
}

void write_wav(const std::filesystem::path& path, const AudioSignal& audio) { write_file(path, encode_wav(audio)); }

}  // namespace rmkd::dsp
