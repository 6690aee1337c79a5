#include "rmkd/model.hpp"

#include <cmath>
#include <cstdio>
#include <functional>

#include "rmkd/binary_io.hpp"
#include "rmkd/kv.hpp"
#include "rmkd/rng.hpp"

namespace rmkd {

namespace {

constexpr double kMaskedScore = -1e9;
const char* const kPredictors[] = {"duration", "pitch", "energy"};

enum class InitKind { kUniform, kOnes, kZeros, kMelBias };

struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind init;
  std::size_t fan_in;
};

void add_block_specs(std::vector<ParamSpec>& out, const std::string& prefix, const ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.ffn_channels, k = c.conv_kernel;
  for (const char* proj : {"query", "key", "value", "out"}) {
    out.push_back({prefix + ".attn." + proj, {d, d}, InitKind::kUniform, d});
  }
  out.push_back({prefix + ".attn_norm.gain", {d}, InitKind::kOnes, 0});
  out.push_back({prefix + ".attn_norm.bias", {d}, InitKind::kZeros, 0});
  out.push_back({prefix + ".ffn.conv1", {k, d, f}, InitKind::kUniform, k * d});
  out.push_back({prefix + ".ffn.conv1_bias", {1, f}, InitKind::kUniform, k * d});
  out.push_back({prefix + ".ffn.conv2", {k, f, d}, InitKind::kUniform, k * f});
  out.push_back({prefix + ".ffn.conv2_bias", {1, d}, InitKind::kUniform, k * f});
  out.push_back({prefix + ".ffn_norm.gain", {d}, InitKind::kOnes, 0});
  out.push_back({prefix + ".ffn_norm.bias", {d}, InitKind::kZeros, 0});
}

std::vector<ParamSpec> specs(const ModelConfig& c) {
  const std::size_t d = c.d_model, k = c.conv_kernel;
  std::vector<ParamSpec> out;
  out.push_back({"phoneme_embedding", {c.vocab_size, d}, InitKind::kUniform, d});
  out.push_back({"speaker_embedding", {c.n_speakers, d}, InitKind::kUniform, d});
  for (std::size_t i = 0; i < c.encoder_blocks; ++i) add_block_specs(out, "encoder." + std::to_string(i), c);
  for (const char* name : kPredictors) {
    const std::string p = std::string("predictor.") + name;
    out.push_back({p + ".conv1", {k, d, d}, InitKind::kUniform, k * d});
    out.push_back({p + ".conv1_bias", {1, d}, InitKind::kUniform, k * d});
    out.push_back({p + ".norm1.gain", {d}, InitKind::kOnes, 0});
    out.push_back({p + ".norm1.bias", {d}, InitKind::kZeros, 0});
    out.push_back({p + ".conv2", {k, d, d}, InitKind::kUniform, k * d});
    out.push_back({p + ".conv2_bias", {1, d}, InitKind::kUniform, k * d});
    out.push_back({p + ".norm2.gain", {d}, InitKind::kOnes, 0});
    out.push_back({p + ".norm2.bias", {d}, InitKind::kZeros, 0});
    out.push_back({p + ".proj.weight", {d, 1}, InitKind::kUniform, d});
    out.push_back({p + ".proj.bias", {1, 1}, InitKind::kUniform, d});
  }
  for (const char* name : {"pitch_embedding", "energy_embedding"}) {
    out.push_back({std::string(name) + ".weight", {1, d}, InitKind::kUniform, 1});
    out.push_back({std::string(name) + ".bias", {1, d}, InitKind::kUniform, 1});
  }
  for (std::size_t i = 0; i < c.decoder_blocks; ++i) add_block_specs(out, "decoder." + std::to_string(i), c);
  out.push_back({"mel_linear.weight", {d, c.n_mels}, InitKind::kUniform, d});
  out.push_back({"mel_linear.bias", {1, c.n_mels}, InitKind::kMelBias, 0});
  return out;
}

bool has_padding(const Mask& mask) {
  for (double m : mask) {
    if (m == 0.0) return true;
  }
  return false;
}

Var apply_mask(Var x, const Mask& mask) {
  if (!has_padding(mask)) return x;
  return mul(x, x.graph().constant(Tensor({mask.size(), 1}, mask)));
}

Var linear(Var x, Var weight, Var bias) { return add(matmul(x, weight), bias); }

Var speaker_row(const SpeakerSelector& speaker, const BoundParams& params) {
  if (speaker.ids.empty()) throw InputError("speaker selector is empty");
  Var rows = embedding(params["speaker_embedding"], speaker.ids);
  return speaker.ids.size() == 1 ? rows : mean_rows(rows);
}

std::uint64_t dropout_seed(const std::string& prefix, std::size_t node) {
  Fnv1a h;
  h.update(prefix);
  h.update_u64(node);
  return h.digest();
}

}  // namespace

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.d_model = 512;
  c.n_heads = 8;
  c.ffn_channels = 1024;
  c.encoder_blocks = 3;
  c.decoder_blocks = 4;
  c.conv_kernel = 3;
  c.dropout = 0.1;
  return c;
}

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_heads == 0 || ffn_channels == 0 || n_speakers == 0 || n_mels == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (d_model % 2 != 0) throw ConfigError("d_model must be even for the positional encoding");
  if (encoder_blocks < 1 || decoder_blocks < 1) throw ConfigError("encoder and decoder need at least one block");
  if (conv_kernel % 2 == 0) throw ConfigError("conv kernel width must be odd");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
  if (!(pitch_scale > 0.0) || !(energy_scale > 0.0)) throw ConfigError("normalization scales must be positive");
}

std::map<std::string, std::string> ModelConfig::to_metadata() const {
  return {
      {"model.vocab_size", std::to_string(vocab_size)},
      {"model.d_model", std::to_string(d_model)},
      {"model.n_heads", std::to_string(n_heads)},
      {"model.ffn_channels", std::to_string(ffn_channels)},
      {"model.encoder_blocks", std::to_string(encoder_blocks)},
      {"model.decoder_blocks", std::to_string(decoder_blocks)},
      {"model.conv_kernel", std::to_string(conv_kernel)},
      {"model.n_speakers", std::to_string(n_speakers)},
      {"model.n_mels", std::to_string(n_mels)},
      {"model.max_frames", std::to_string(max_frames)},
      {"model.dropout", format_double(dropout)},
      {"model.mel_bias_init", format_double(mel_bias_init)},
      {"model.pitch_mean", format_double(pitch_mean)},
      {"model.pitch_scale", format_double(pitch_scale)},
      {"model.energy_mean", format_double(energy_mean)},
      {"model.energy_scale", format_double(energy_scale)},
  };
}

ModelConfig ModelConfig::from_metadata(const std::map<std::string, std::string>& meta) {
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = meta.find("model." + key);
    if (it == meta.end()) throw ConfigError("checkpoint metadata lacks model." + key);
    return it->second;
  };
  auto size = [&](const std::string& key) { return static_cast<std::size_t>(parse_u64("model." + key, get(key))); };
  auto real = [&](const std::string& key) { return parse_double("model." + key, get(key)); };
  ModelConfig c;
  c.vocab_size = size("vocab_size");
  c.d_model = size("d_model");
  c.n_heads = size("n_heads");
  c.ffn_channels = size("ffn_channels");
  c.encoder_blocks = size("encoder_blocks");
  c.decoder_blocks = size("decoder_blocks");
  c.conv_kernel = size("conv_kernel");
  c.n_speakers = size("n_speakers");
  c.n_mels = size("n_mels");
  c.max_frames = size("max_frames");
  c.dropout = real("dropout");
  c.mel_bias_init = real("mel_bias_init");
  c.pitch_mean = real("pitch_mean");
  c.pitch_scale = real("pitch_scale");
  c.energy_mean = real("energy_mean");
  c.energy_scale = real("energy_scale");
  c.validate();
  return c;
}

void ParameterStore::add(std::string name, Tensor value) {
  if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
  index_.emplace(name, names_.size());
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(value));
}

std::size_t ParameterStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InputError("unknown parameter " + name);
  return it->second;
}

const Tensor& ParameterStore::at(const std::string& name) const { return tensors_[index_of(name)]; }
Tensor& ParameterStore::at(const std::string& name) { return tensors_[index_of(name)]; }

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

std::uint64_t ParameterStore::structural_hash() const {
  Fnv1a h;
  for (std::size_t i = 0; i < size(); ++i) {
    h.update(names_[i]);
    h.update_u64(tensors_[i].rank());
    for (auto d : tensors_[i].shape()) h.update_u64(d);
  }
  return h.digest();
}

std::uint64_t ParameterStore::content_hash() const {
  Fnv1a h;
  h.update_u64(structural_hash());
  for (const auto& t : tensors_) h.update_doubles(t.data());
  return h.digest();
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config) {
  config.validate();
  std::vector<std::pair<std::string, Shape>> out;
  for (auto& s : specs(config)) out.emplace_back(std::move(s.name), std::move(s.shape));
  return out;
}

ParameterStore init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ParameterStore store;
  for (auto& spec : specs(config)) {
    Tensor t(spec.shape, 0.0);
    switch (spec.init) {
      case InitKind::kUniform: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
        for (double& v : t.storage()) v = rng.uniform(-bound, bound);
        break;
      }
      case InitKind::kOnes:
        for (double& v : t.storage()) v = 1.0;
        break;
      case InitKind::kZeros:
        break;
      case InitKind::kMelBias:
        for (double& v : t.storage()) v = config.mel_bias_init;
        break;
    }
    store.add(std::move(spec.name), std::move(t));
  }
  return store;
}

void extend_speaker_table(ParameterStore& params, ModelConfig& config, std::size_t count, std::uint64_t seed) {
  Tensor& table = params.at("speaker_embedding");
  const std::size_t have = table.rows(), d = table.cols();
  if (count <= have) return;
  std::vector<double> data(table.data().begin(), table.data().end());
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t row = have; row < count; ++row) {
    Rng rng(Rng::mix(seed, row));
    for (std::size_t c = 0; c < d; ++c) data.push_back(rng.uniform(-bound, bound));
  }
  table = Tensor({count, d}, std::move(data));
  config.n_speakers = count;
}

Tensor positional_encoding(std::size_t length, std::size_t d_model) {
  if (d_model % 2 != 0) throw ConfigError("positional encoding needs an even d_model, got " + std::to_string(d_model));
  Tensor pe({length, d_model});
  for (std::size_t p = 0; p < length; ++p) {
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double angle =
          static_cast<double>(p) / std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d_model));
      pe.at(p, 2 * i) = std::sin(angle);
      pe.at(p, 2 * i + 1) = std::cos(angle);
    }
  }
  return pe;
}

BoundParams::BoundParams(Graph& graph, const ParameterStore& store, bool trainable) : graph_(&graph), store_(&store) {
  vars_.reserve(store.size());
  for (const Tensor& t : store.tensors()) vars_.push_back(trainable ? graph.parameter(t) : graph.constant(t));
}

BoundParams::BoundParams(const ParameterStore& store, std::vector<Var> vars)
    : graph_(nullptr), store_(&store), vars_(std::move(vars)) {
  if (vars_.size() != store.size() || vars_.empty()) {
    throw ContractError("BoundParams: expected " + std::to_string(store.size()) + " nodes, got " +
                        std::to_string(vars_.size()));
  }
  graph_ = &vars_.front().graph();
}

Var fft_block(Var x, const Mask& mask, const BoundParams& params, const std::string& prefix,
              const ModelConfig& config, std::vector<Tensor>* attention) {
  Graph& g = x.graph();
  const std::size_t len = x.shape().at(0);
  const std::size_t d = config.d_model, heads = config.n_heads, dh = d / heads;
  if (!mask.empty() && mask.size() != len) throw DimensionError("fft_block: mask length does not match sequence");

  Var q = matmul(x, params[prefix + ".attn.query"]);
  Var k = matmul(x, params[prefix + ".attn.key"]);
  Var v = matmul(x, params[prefix + ".attn.value"]);
  Var key_bias;
  if (has_padding(mask)) {
    Tensor bias({1, len}, 0.0);
    for (std::size_t i = 0; i < len; ++i) bias[i] = mask[i] == 0.0 ? kMaskedScore : 0.0;
    key_bias = g.constant(std::move(bias));
  }
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> head_out;
  head_out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = slice_cols(v, h * dh, (h + 1) * dh);
    Var scores = scale(matmul(qh, transpose(kh)), score_scale);
    if (key_bias.valid()) scores = add(scores, key_bias);
    Var weights = softmax(scores);
    if (attention) attention->push_back(weights.value());
    head_out.push_back(matmul(weights, vh));
  }
  Var attended = matmul(concat_cols(head_out), params[prefix + ".attn.out"]);
  attended = dropout(attended, config.dropout, dropout_seed(prefix + ".attn", attended.id()));
  Var h1 = layer_norm(add(x, attended), params[prefix + ".attn_norm.gain"], params[prefix + ".attn_norm.bias"]);
  h1 = apply_mask(h1, mask);

  Var hidden = relu(add(conv1d(h1, params[prefix + ".ffn.conv1"]), params[prefix + ".ffn.conv1_bias"]));
  hidden = apply_mask(hidden, mask);
  Var ffn = add(conv1d(hidden, params[prefix + ".ffn.conv2"]), params[prefix + ".ffn.conv2_bias"]);
  ffn = dropout(ffn, config.dropout, dropout_seed(prefix + ".ffn", ffn.id()));
  Var out = layer_norm(add(h1, ffn), params[prefix + ".ffn_norm.gain"], params[prefix + ".ffn_norm.bias"]);
  return apply_mask(out, mask);
}

Var encode(std::span<const std::uint32_t> phonemes, const SpeakerSelector& speaker, const BoundParams& params,
           const ModelConfig& config, const Mask& mask) {
  Graph& g = params.graph();
  for (auto id : phonemes) {
    if (id >= config.vocab_size) {
      throw InputError("phoneme id " + std::to_string(id) + " out of range for vocabulary of " +
                       std::to_string(config.vocab_size));
    }
  }
  for (auto id : speaker.ids) {
    if (id >= config.n_speakers) {
      throw InputError("speaker id " + std::to_string(id) + " out of range for " + std::to_string(config.n_speakers) +
                       " speakers");
    }
  }
  Var x = scale(embedding(params["phoneme_embedding"], phonemes), std::sqrt(static_cast<double>(config.d_model)));
  x = add(x, g.constant(positional_encoding(phonemes.size(), config.d_model)));
  x = add(x, speaker_row(speaker, params));
  x = apply_mask(x, mask);
  for (std::size_t i = 0; i < config.encoder_blocks; ++i) {
    x = fft_block(x, mask, params, "encoder." + std::to_string(i), config);
  }
  return x;
}

VariancePrediction predict_variances(Var hidden, const BoundParams& params, const ModelConfig& config,
                                     const Mask& mask) {
  (void)config;
  const std::size_t len = hidden.shape().at(0);
  Var outputs[3];
  for (int i = 0; i < 3; ++i) {
    const std::string p = std::string("predictor.") + kPredictors[i];
    Var y = relu(add(conv1d(hidden, params[p + ".conv1"]), params[p + ".conv1_bias"]));
    y = apply_mask(layer_norm(y, params[p + ".norm1.gain"], params[p + ".norm1.bias"]), mask);
    y = relu(add(conv1d(y, params[p + ".conv2"]), params[p + ".conv2_bias"]));
    y = apply_mask(layer_norm(y, params[p + ".norm2.gain"], params[p + ".norm2.bias"]), mask);
    y = linear(y, params[p + ".proj.weight"], params[p + ".proj.bias"]);
    outputs[i] = reshape(y, {len});
  }
  return {outputs[0], outputs[1], outputs[2]};
}

Var length_regulate(Var hidden, std::span<const std::uint32_t> durations) { return repeat_rows(hidden, durations); }

Var decode(Var regulated, const SpeakerSelector& speaker, std::span<const double> pitch_frames,
           std::span<const double> energy_frames, const BoundParams& params, const ModelConfig& config,
           const Mask& mask) {
  Graph& g = params.graph();
  const std::size_t len = regulated.shape().at(0);
  if (pitch_frames.size() > len || energy_frames.size() > len) {
    throw DimensionError("decode: more pitch/energy frames than regulated frames");
  }
  Tensor pitch({len, 1}, 0.0), energy({len, 1}, 0.0);
  std::copy(pitch_frames.begin(), pitch_frames.end(), pitch.data().begin());
  std::copy(energy_frames.begin(), energy_frames.end(), energy.data().begin());
  Var x = add(regulated, g.constant(positional_encoding(len, config.d_model)));
  x = add(x, speaker_row(speaker, params));
  x = add(x, linear(g.constant(std::move(pitch)), params["pitch_embedding.weight"], params["pitch_embedding.bias"]));
  x = add(x, linear(g.constant(std::move(energy)), params["energy_embedding.weight"], params["energy_embedding.bias"]));
  x = apply_mask(x, mask);
  for (std::size_t i = 0; i < config.decoder_blocks; ++i) {
    x = fft_block(x, mask, params, "decoder." + std::to_string(i), config);
  }
  return apply_mask(linear(x, params["mel_linear.weight"], params["mel_linear.bias"]), mask);
}

std::uint32_t duration_from_log(double log_duration) {
  const double frames = std::round(std::exp(std::min(log_duration, 20.0)));
  if (!(frames >= 1.0)) return 1;
  return static_cast<std::uint32_t>(std::min(frames, static_cast<double>(kMaxPhonemeFrames)));
}

ForwardOutput forward(const BoundParams& params, const ModelConfig& config, const ForwardRequest& request,
                      ForwardMode mode) {
  const std::size_t count = request.phonemes.size();
  if (count == 0) throw InputError("forward: empty phoneme sequence");
  const std::size_t valid = request.valid_phonemes ? request.valid_phonemes : count;
  if (valid > count) throw DimensionError("forward: valid_phonemes exceeds sequence length");

  ForwardOutput out;
  if (valid < count) {
    out.phoneme_mask.assign(count, 0.0);
    std::fill_n(out.phoneme_mask.begin(), valid, 1.0);
  }
  Var hidden = encode(request.phonemes, request.speaker, params, config, out.phoneme_mask);
  out.variances = predict_variances(hidden, params, config, out.phoneme_mask);

  std::vector<double> pitch(count, 0.0), energy(count, 0.0);
  out.durations.assign(count, 0);
  if (mode == ForwardMode::kTeacherForced) {
    if (request.durations.size() < valid || request.pitch.size() < valid || request.energy.size() < valid) {
      throw InputError("teacher forcing requires duration, pitch and energy targets for every phoneme");
    }
    for (std::size_t i = 0; i < valid; ++i) {
      out.durations[i] = request.durations[i];
      pitch[i] = config.normalize_pitch(request.pitch[i]);
      energy[i] = config.normalize_energy(request.energy[i]);
    }
  } else {
    const Tensor& log_dur = out.variances.log_duration.value();
    for (std::size_t i = 0; i < valid; ++i) {
      out.durations[i] = duration_from_log(log_dur[i]);
      pitch[i] = out.variances.pitch.value()[i];
      energy[i] = out.variances.energy.value()[i];
    }
  }

  std::size_t frames = 0;
  for (auto d : out.durations) frames += d;
  if (frames > config.max_frames) {
    throw RunawayDurationError("utterance needs " + std::to_string(frames) + " frames, cap is " +
                               std::to_string(config.max_frames));
  }
  out.frames = frames;
  std::vector<double> pitch_frames, energy_frames;
  pitch_frames.reserve(frames);
  energy_frames.reserve(frames);
  for (std::size_t i = 0; i < count; ++i) {
    pitch_frames.insert(pitch_frames.end(), out.durations[i], pitch[i]);
    energy_frames.insert(energy_frames.end(), out.durations[i], energy[i]);
  }

  Var regulated = length_regulate(hidden, out.durations);
  if (request.pad_frames_to > frames) {
    regulated = pad_rows(regulated, request.pad_frames_to);
    out.frame_mask.assign(request.pad_frames_to, 0.0);
    std::fill_n(out.frame_mask.begin(), frames, 1.0);
  }
  out.mel = decode(regulated, request.speaker, pitch_frames, energy_frames, params, config, out.frame_mask);
  return out;
}

}  // namespace rmkd
