#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rmkd/autodiff.hpp"
#include "rmkd/error.hpp"

namespace rmkd {

// Inference-mode durations beyond this cap per phoneme are clamped.
inline constexpr std::uint32_t kMaxPhonemeFrames = 50;

struct ModelConfig {
  std::size_t vocab_size = 32;
  std::size_t d_model = 32;
  std::size_t n_heads = 2;
  std::size_t ffn_channels = 64;
  std::size_t encoder_blocks = 3;
  std::size_t decoder_blocks = 4;
  std::size_t conv_kernel = 3;
  std::size_t n_speakers = 2;
  std::size_t n_mels = 80;
  std::size_t max_frames = 2000;
  double dropout = 0.0;
  // Initial value of the mel projection bias (the log-mel floor).
  double mel_bias_init = -11.512925464970229;
  // Affine normalization of pitch/energy scalars. Fit on the pretraining data
  // and carried unchanged into fine-tuning.
  double pitch_mean = 0.0;
  double pitch_scale = 1.0;
  double energy_mean = 0.0;
  double energy_scale = 1.0;

  static ModelConfig desk();
  static ModelConfig paper();

  void validate() const;

  double normalize_pitch(double hz) const { return (hz - pitch_mean) / pitch_scale; }
  double normalize_energy(double e) const { return (e - energy_mean) / energy_scale; }
  double denormalize_pitch(double v) const { return v * pitch_scale + pitch_mean; }
  double denormalize_energy(double v) const { return v * energy_scale + energy_mean; }

  // Stable key=value form used in checkpoint metadata ("model." prefix).
  std::map<std::string, std::string> to_metadata() const;
  static ModelConfig from_metadata(const std::map<std::string, std::string>& meta);

  bool operator==(const ModelConfig&) const = default;
};

// Ordered, uniquely named parameter arrays.
class ParameterStore {
 public:
  void add(std::string name, Tensor value);

  std::size_t size() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& tensor(std::size_t i) { return tensors_[i]; }
  const Tensor& tensor(std::size_t i) const { return tensors_[i]; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t index_of(const std::string& name) const;

  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  const std::vector<std::string>& names() const { return names_; }

  std::size_t parameter_count() const;
  // Hash of names and shapes only.
  std::uint64_t structural_hash() const;
  // Hash of names, shapes and bit patterns of every value.
  std::uint64_t content_hash() const;

  bool operator==(const ParameterStore& other) const {
    return names_ == other.names_ && tensors_ == other.tensors_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Names and shapes of every parameter; a pure function of the config.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config);

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; unit gains, zero norm
// biases.
ParameterStore init_parameters(const ModelConfig& config, std::uint64_t seed);

// Appends randomly initialized speaker rows until the table has `count` rows.
void extend_speaker_table(ParameterStore& params, ModelConfig& config, std::size_t count, std::uint64_t seed);

// PE(p, 2i) = sin(p / 10000^(2i/d)), PE(p, 2i+1) = cos(...). d must be even.
Tensor positional_encoding(std::size_t length, std::size_t d_model);

// Parameters placed on a graph, either as trainable leaves or as constants.
class BoundParams {
 public:
  BoundParams(Graph& graph, const ParameterStore& store, bool trainable);
  // Uses caller-provided nodes, one per store entry in store order.
  BoundParams(const ParameterStore& store, std::vector<Var> vars);

  Var operator[](const std::string& name) const { return vars_[store_->index_of(name)]; }
  const std::vector<Var>& vars() const { return vars_; }
  Graph& graph() const { return *graph_; }

 private:
  Graph* graph_;
  const ParameterStore* store_;
  std::vector<Var> vars_;
};

// Either one speaker row or the mean of several rows.
struct SpeakerSelector {
  std::vector<std::uint32_t> ids;

  static SpeakerSelector single(std::uint32_t id) { return {{id}}; }
  static SpeakerSelector mean_of(std::vector<std::uint32_t> ids) { return {std::move(ids)}; }
};

// Per-position validity; empty means every position is valid.
using Mask = std::vector<double>;

// Multi-head self-attention + residual + layer norm, then conv FFN
// (conv -> relu -> conv) + residual + layer norm. Padded keys are masked to
// -1e9 before the softmax and padded rows are zeroed after every sublayer.
// When `attention` is given, per-head attention weights are appended to it.
Var fft_block(Var x, const Mask& mask, const BoundParams& params, const std::string& prefix,
              const ModelConfig& config, std::vector<Tensor>* attention = nullptr);

Var encode(std::span<const std::uint32_t> phonemes, const SpeakerSelector& speaker, const BoundParams& params,
           const ModelConfig& config, const Mask& mask = {});

struct VariancePrediction {
  Var log_duration;  // [T_ph]
  Var pitch;         // [T_ph], normalized units
  Var energy;        // [T_ph], normalized units
};

VariancePrediction predict_variances(Var hidden, const BoundParams& params, const ModelConfig& config,
                                     const Mask& mask = {});

// Row i repeated durations[i] times; zero-duration rows are dropped.
Var length_regulate(Var hidden, std::span<const std::uint32_t> durations);

// pitch/energy are per-frame normalized values for the valid frames.
Var decode(Var regulated, const SpeakerSelector& speaker, std::span<const double> pitch_frames,
           std::span<const double> energy_frames, const BoundParams& params, const ModelConfig& config,
           const Mask& mask = {});

enum class ForwardMode { kTeacherForced, kInference };

struct ForwardRequest {
  std::span<const std::uint32_t> phonemes;
  SpeakerSelector speaker;
  // Ground-truth per-phoneme targets in raw units; required for teacher forcing.
  std::span<const std::uint32_t> durations;
  std::span<const double> pitch;
  std::span<const double> energy;
  // Number of leading phonemes that are real; the rest are padding.
  // 0 means all of them.
  std::size_t valid_phonemes = 0;
  // Pads the frame axis with masked rows up to this length when larger than
  // the regulated length.
  std::size_t pad_frames_to = 0;
};

struct ForwardOutput {
  Var mel;  // [T x n_mels]
  VariancePrediction variances;
  std::vector<std::uint32_t> durations;  // durations used for regulation
  std::size_t frames = 0;                // valid (unpadded) frames
  Mask phoneme_mask;
  Mask frame_mask;
};

class RunawayDurationError : public Error {
 public:
  using Error::Error;
};

ForwardOutput forward(const BoundParams& params, const ModelConfig& config, const ForwardRequest& request,
                      ForwardMode mode);

// Inference duration rule: round(exp(log_duration)) clamped to [1, 50].
std::uint32_t duration_from_log(double log_duration);

}  // namespace rmkd
