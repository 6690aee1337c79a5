#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "rmkd/gradcheck.hpp"
#include "rmkd/model.hpp"
#include "rmkd/rng.hpp"

using namespace rmkd;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 10;
  c.d_model = 8;
  c.n_heads = 2;
  c.ffn_channels = 8;
  c.encoder_blocks = 1;
  c.decoder_blocks = 1;
  c.n_mels = 6;
  return c;
}

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(-1.0, 1.0);
  return t;
}

// Sum of outputs weighted by fixed pseudo-random coefficients.
Var probe(Var y, std::uint64_t seed) {
  return sum(mul(y, y.graph().constant(random_tensor(y.shape(), seed))));
}

const std::vector<std::uint32_t> kPhonemes = {1, 4, 2, 7, 3};
const std::vector<std::uint32_t> kDurations = {2, 1, 3, 2, 1};
const std::vector<double> kPitch = {110, 130, 120, 140, 100};
const std::vector<double> kEnergy = {0.5, 0.6, 0.55, 0.7, 0.52};

}  // namespace

TEST(PositionalEncoding, RowZeroAlternatesZeroOne) {
  Tensor pe = positional_encoding(4, 8);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(pe.at(0, j), j % 2 == 0 ? 0.0 : 1.0);
}

TEST(PositionalEncoding, KnownValueAndRange) {
  Tensor pe = positional_encoding(50, 16);
  EXPECT_NEAR(pe.at(1, 0), 0.8414709848078965, 1e-15);
  EXPECT_NEAR(pe.at(3, 5), std::cos(3.0 / std::pow(10000.0, 4.0 / 16.0)), 1e-15);
  for (double v : pe.data()) {
    EXPECT_LE(v, 1.0);
    EXPECT_GE(v, -1.0);
  }
}

TEST(PositionalEncoding, OddWidthRejected) { EXPECT_THROW(positional_encoding(3, 7), ConfigError); }

TEST(ModelConfig, Validation) {
  ModelConfig c = tiny_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.encoder_blocks = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(ModelConfig::desk().validate());
  EXPECT_NO_THROW(ModelConfig::paper().validate());
}

TEST(ModelConfig, MetadataRoundTrip) {
  ModelConfig c = ModelConfig::desk();
  c.pitch_mean = 123.456789012345678;
  c.energy_scale = 0.1;
  EXPECT_EQ(ModelConfig::from_metadata(c.to_metadata()), c);
}

TEST(Parameters, LayoutIsPureFunctionOfConfig) {
  const ModelConfig c = ModelConfig::desk();
  ParameterStore a = init_parameters(c, 1), b = init_parameters(c, 2);
  EXPECT_EQ(a.structural_hash(), b.structural_hash());
  EXPECT_NE(a.content_hash(), b.content_hash());
  EXPECT_EQ(a.names(), b.names());
  std::size_t count = 0;
  for (const auto& [name, shape] : parameter_layout(c)) count += shape_numel(shape);
  EXPECT_EQ(count, a.parameter_count());
}

TEST(Parameters, SameSeedBitIdentical) {
  EXPECT_EQ(init_parameters(ModelConfig::desk(), 7), init_parameters(ModelConfig::desk(), 7));
}

TEST(Parameters, PaperPresetLayout) {
  const ModelConfig c = ModelConfig::paper();
  std::size_t count = 0;
  std::size_t encoder_blocks = 0, decoder_blocks = 0;
  for (const auto& [name, shape] : parameter_layout(c)) {
    count += shape_numel(shape);
    if (name.ends_with(".attn.query")) (name.starts_with("encoder.") ? encoder_blocks : decoder_blocks)++;
    if (name == "phoneme_embedding") EXPECT_EQ(shape, (Shape{c.vocab_size, 512}));
    if (name == "mel_linear.weight") EXPECT_EQ(shape, (Shape{512, 80}));
  }
  EXPECT_EQ(encoder_blocks, 3u);
  EXPECT_EQ(decoder_blocks, 4u);
  // Attention 4*d^2 and FFN 2*k*d*f dominate each of the 7 blocks.
  EXPECT_GT(count, 7u * (4u * 512 * 512 + 2u * 3 * 512 * 1024));
}

TEST(Parameters, NamesUniqueAndDuplicateRejected) {
  ParameterStore p = init_parameters(tiny_config(), 3);
  std::set<std::string> names(p.names().begin(), p.names().end());
  EXPECT_EQ(names.size(), p.size());
  EXPECT_THROW(p.add("mel_linear.bias", Tensor({1}, 0.0)), ContractError);
  EXPECT_THROW(p.index_of("nope"), InputError);
}

TEST(Parameters, MelBiasStartsAtLogFloor) {
  ParameterStore p = init_parameters(tiny_config(), 3);
  for (double v : p.at("mel_linear.bias").data()) EXPECT_DOUBLE_EQ(v, std::log(1e-5));
}

TEST(Parameters, ExtendSpeakerTable) {
  ModelConfig c = tiny_config();
  ParameterStore p = init_parameters(c, 3);
  const Tensor before = p.at("speaker_embedding");
  extend_speaker_table(p, c, 3, 9);
  EXPECT_EQ(c.n_speakers, 3u);
  const Tensor& after = p.at("speaker_embedding");
  ASSERT_EQ(after.shape(), (Shape{3, c.d_model}));
  for (std::size_t i = 0; i < before.numel(); ++i) EXPECT_EQ(after[i], before[i]);
  double row_norm = 0;
  for (std::size_t j = 0; j < c.d_model; ++j) row_norm += std::abs(after.at(2, j));
  EXPECT_GT(row_norm, 0.0);
}

TEST(FftBlock, ShapeAndPaddedAttentionZero) {
  ModelConfig c = tiny_config();
  ParameterStore store = init_parameters(c, 5);
  Graph g;
  BoundParams params(g, store, false);
  Var x = g.constant(random_tensor({5, c.d_model}, 11));
  Mask mask = {1, 1, 1, 0, 0};
  std::vector<Tensor> attention;
  Var y = fft_block(x, mask, params, "encoder.0", c, &attention);
  EXPECT_EQ(y.shape(), x.shape());
  ASSERT_EQ(attention.size(), c.n_heads);
  for (const Tensor& w : attention) {
    for (std::size_t r = 0; r < 5; ++r) {
      EXPECT_LE(w.at(r, 3), 1e-30);
      EXPECT_LE(w.at(r, 4), 1e-30);
    }
  }
  for (std::size_t j = 0; j < c.d_model; ++j) EXPECT_EQ(y.value().at(4, j), 0.0);
}

TEST(FftBlock, GradientCheck) {
  ModelConfig c = tiny_config();
  const ParameterStore store = init_parameters(c, 5);
  std::vector<Tensor> leaves = store.tensors();
  leaves.push_back(random_tensor({5, c.d_model}, 12));
  const Mask mask = {1, 1, 1, 1, 0};
  ScalarFn f = [&](Graph&, std::span<const Var> p) {
    BoundParams bound(store, std::vector<Var>(p.begin(), p.end() - 1));
    return probe(fft_block(p.back(), mask, bound, "encoder.0", c), 99);
  };
  GradCheckOptions opts;
  opts.jitter = 1e-3;
  opts.seed = 3;
  opts.max_coords_per_param = 6;
  EXPECT_LT(grad_check(f, leaves, 1e-6, opts).max_rel_error, 1e-4);
}

TEST(Encode, DeterministicAndSpeakerSensitive) {
  ModelConfig c = tiny_config();
  ParameterStore store = init_parameters(c, 5);
  Graph g;
  BoundParams params(g, store, false);
  Tensor a = encode(kPhonemes, SpeakerSelector::single(0), params, c).value();
  Tensor b = encode(kPhonemes, SpeakerSelector::single(0), params, c).value();
  Tensor s = encode(kPhonemes, SpeakerSelector::single(1), params, c).value();
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.shape(), (Shape{kPhonemes.size(), c.d_model}));
  EXPECT_GT(max_abs_diff(a, s), 0.0);
}

TEST(Encode, OutOfRangeIdsRejected) {
  ModelConfig c = tiny_config();
  ParameterStore store = init_parameters(c, 5);
  Graph g;
  BoundParams params(g, store, false);
  std::vector<std::uint32_t> bad = {1, 10};
  EXPECT_THROW(encode(bad, SpeakerSelector::single(0), params, c), InputError);
  EXPECT_THROW(encode(kPhonemes, SpeakerSelector::single(2), params, c), InputError);
}

TEST(Encode, MeanSpeakerIsAverageOfRows) {
  ModelConfig c = tiny_config();
  c.encoder_blocks = 1;
  ParameterStore store = init_parameters(c, 5);
  // With both rows set equal the mean selector must match a single row.
  Tensor& table = store.at("speaker_embedding");
  for (std::size_t j = 0; j < c.d_model; ++j) table.at(1, j) = table.at(0, j);
  Graph g;
  BoundParams params(g, store, false);
  Tensor single = encode(kPhonemes, SpeakerSelector::single(0), params, c).value();
  Tensor mean = encode(kPhonemes, SpeakerSelector::mean_of({0, 1}), params, c).value();
  EXPECT_LT(max_abs_diff(single, mean), 1e-12);
}

TEST(Variances, ShapesAndZeroWeights) {
  ModelConfig c = tiny_config();
  ParameterStore store = init_parameters(c, 5);
  for (const char* p : {"duration", "pitch", "energy"}) {
    for (double& v : store.at(std::string("predictor.") + p + ".proj.weight").storage()) v = 0.0;
    for (double& v : store.at(std::string("predictor.") + p + ".proj.bias").storage()) v = 0.0;
  }
  Graph g;
  BoundParams params(g, store, false);
  Var h = encode(kPhonemes, SpeakerSelector::single(0), params, c);
  VariancePrediction v = predict_variances(h, params, c);
  for (Var out : {v.log_duration, v.pitch, v.energy}) {
    EXPECT_EQ(out.shape(), (Shape{kPhonemes.size()}));
    for (double x : out.value().data()) EXPECT_EQ(x, 0.0);
  }
}

TEST(LengthRegulate, RepeatsRows) {
  Graph g;
  Var h = g.constant(Tensor::matrix({{1, 2}, {3, 4}, {5, 6}}));
  std::vector<std::uint32_t> d = {2, 0, 3};
  Tensor y = length_regulate(h, d).value();
  EXPECT_EQ(y, Tensor::matrix({{1, 2}, {1, 2}, {5, 6}, {5, 6}, {5, 6}}));
  std::vector<std::uint32_t> ones = {1, 1, 1};
  EXPECT_EQ(length_regulate(h, ones).value(), h.value());
  std::vector<std::uint32_t> zeros = {0, 0, 0};
  EXPECT_THROW(length_regulate(h, zeros), InputError);
}

TEST(LengthRegulate, GradientSumsCopies) {
  Graph g;
  Var h = g.parameter(random_tensor({3, 2}, 4));
  std::vector<std::uint32_t> d = {2, 0, 3};
  Tensor w = random_tensor({5, 2}, 8);
  g.backward(sum(mul(length_regulate(h, d), g.constant(w))));
  Tensor grad = g.grad(h);
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_DOUBLE_EQ(grad.at(0, j), w.at(0, j) + w.at(1, j));
    EXPECT_EQ(grad.at(1, j), 0.0);
    EXPECT_DOUBLE_EQ(grad.at(2, j), w.at(2, j) + w.at(3, j) + w.at(4, j));
  }
}

TEST(Forward, TeacherForcedFramesMatchTargets) {
  ModelConfig c = tiny_config();
  ParameterStore store = init_parameters(c, 5);
  Graph g;
  BoundParams params(g, store, false);
  ForwardRequest req{kPhonemes, SpeakerSelector::single(1), kDurations, kPitch, kEnergy};
  ForwardOutput out = forward(params, c, req, ForwardMode::kTeacherForced);
  EXPECT_EQ(out.frames, 9u);
  EXPECT_EQ(out.mel.shape(), (Shape{9, c.n_mels}));
  EXPECT_EQ(out.variances.log_duration.shape(), (Shape{kPhonemes.size()}));
}

TEST(Forward, TeacherForcingNeedsTargets) {
  ModelConfig c = tiny_config();
  ParameterStore store = init_parameters(c, 5);
  Graph g;
  BoundParams params(g, store, false);
  ForwardRequest req{kPhonemes, SpeakerSelector::single(0)};
  EXPECT_THROW(forward(params, c, req, ForwardMode::kTeacherForced), InputError);
}

TEST(Forward, InferenceDurationsClamped) {
  ModelConfig c = tiny_config();
  ParameterStore store = init_parameters(c, 5);
  for (double& v : store.at("predictor.duration.proj.bias").storage()) v = -30.0;
  Graph g;
  BoundParams params(g, store, false);
  ForwardOutput out = forward(params, c, {kPhonemes, SpeakerSelector::single(0)}, ForwardMode::kInference);
  for (auto d : out.durations) EXPECT_EQ(d, 1u);
  EXPECT_EQ(out.frames, kPhonemes.size());
}

TEST(Forward, RunawayDurationsRaise) {
  ModelConfig c = tiny_config();
  c.max_frames = 100;
  ParameterStore store = init_parameters(c, 5);
  for (double& v : store.at("predictor.duration.proj.bias").storage()) v = 30.0;
  Graph g;
  BoundParams params(g, store, false);
  EXPECT_THROW(forward(params, c, {kPhonemes, SpeakerSelector::single(0)}, ForwardMode::kInference),
               RunawayDurationError);
}

TEST(Forward, DurationRule) {
  EXPECT_EQ(duration_from_log(std::log(3.4)), 3u);
  EXPECT_EQ(duration_from_log(std::log(3.6)), 4u);
  EXPECT_EQ(duration_from_log(-5.0), 1u);
  EXPECT_EQ(duration_from_log(100.0), kMaxPhonemeFrames);
  EXPECT_EQ(duration_from_log(std::nan("")), 1u);
}

TEST(Forward, PaddingDoesNotChangeValidOutputs) {
  ModelConfig c = tiny_config();
  c.encoder_blocks = 2;
  c.decoder_blocks = 2;
  ParameterStore store = init_parameters(c, 5);
  Graph g;
  BoundParams params(g, store, false);
  ForwardOutput plain = forward(params, c, {kPhonemes, SpeakerSelector::single(0), kDurations, kPitch, kEnergy},
                                ForwardMode::kTeacherForced);

  std::vector<std::uint32_t> ph = kPhonemes, dur = kDurations;
  std::vector<double> pitch = kPitch, energy = kEnergy;
  ph.insert(ph.end(), {9, 9});
  dur.insert(dur.end(), {0, 0});
  pitch.insert(pitch.end(), {0, 0});
  energy.insert(energy.end(), {0, 0});
  ForwardRequest padded{ph, SpeakerSelector::single(0), dur, pitch, energy};
  padded.valid_phonemes = kPhonemes.size();
  padded.pad_frames_to = 13;
  ForwardOutput out = forward(params, c, padded, ForwardMode::kTeacherForced);
  ASSERT_EQ(out.mel.shape(), (Shape{13, c.n_mels}));
  for (std::size_t t = 0; t < 9; ++t)
    for (std::size_t b = 0; b < c.n_mels; ++b) EXPECT_NEAR(out.mel.value().at(t, b), plain.mel.value().at(t, b), 1e-12);
  for (std::size_t t = 9; t < 13; ++t)
    for (std::size_t b = 0; b < c.n_mels; ++b) EXPECT_EQ(out.mel.value().at(t, b), 0.0);
  for (std::size_t i = 0; i < kPhonemes.size(); ++i)
    EXPECT_NEAR(out.variances.pitch.value()[i], plain.variances.pitch.value()[i], 1e-12);
}

TEST(Forward, EndToEndGradientCheck) {
  ModelConfig c = tiny_config();
  c.d_model = 4;
  c.ffn_channels = 4;
  c.n_mels = 3;
  const ParameterStore store = init_parameters(c, 21);
  Tensor target = random_tensor({9, c.n_mels}, 31);
  for (double& v : target.storage()) v += std::log(1e-5);
  ScalarFn f = [&](Graph& g, std::span<const Var> p) {
    BoundParams bound(store, std::vector<Var>(p.begin(), p.end()));
    ForwardOutput out = forward(bound, c, {kPhonemes, SpeakerSelector::single(1), kDurations, kPitch, kEnergy},
                                ForwardMode::kTeacherForced);
    return add(mse(out.mel, g.constant(target)), probe(out.variances.log_duration, 5));
  };
  GradCheckOptions opts;
  opts.jitter = 1e-3;
  opts.seed = 8;
  opts.max_coords_per_param = 4;
  const GradCheckResult r = grad_check(f, store.tensors(), 1e-6, opts);
  EXPECT_LT(r.max_rel_error, 1e-4) << store.name(r.worst_param) << "[" << r.worst_index << "] analytic " << r.analytic
                                   << " numeric " << r.numeric;
}
