#include "rmkd/data.hpp"

#include <algorithm>
#include <cmath>

#include "rmkd/binary_io.hpp"
#include "rmkd/error.hpp"
#include "rmkd/rng.hpp"

namespace rmkd {

namespace {

constexpr std::size_t kOracleMels = 80;
constexpr double kBumpSigma = 3.0;

double as_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

std::vector<std::size_t> Corpus::select(SpeakerRole role, Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    const auto& u = utterances[i];
    if (u.speaker < speakers.size() && speakers[u.speaker] == role && u.split == split) out.push_back(i);
  }
  return out;
}

std::vector<std::uint32_t> Corpus::speakers_with(SpeakerRole role) const {
  std::vector<std::uint32_t> out;
  for (std::uint32_t s = 0; s < speakers.size(); ++s) {
    if (speakers[s] == role) out.push_back(s);
  }
  return out;
}

void Corpus::validate() const {
  std::vector<bool> seen(speakers.size(), false);
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    const Utterance& u = utterances[i];
    const std::string where = "utterance " + std::to_string(i) + ": ";
    if (u.speaker >= speakers.size()) throw InputError(where + "speaker outside roster");
    seen[u.speaker] = true;
    if (u.phonemes.empty()) throw InputError(where + "no phonemes");
    for (auto p : u.phonemes) {
      if (p >= vocab_size) throw InputError(where + "phoneme id outside vocabulary");
    }
    const auto& v = u.variances;
    if (v.duration.size() != u.phonemes.size() || v.pitch.size() != u.phonemes.size() ||
        v.energy.size() != u.phonemes.size()) {
      throw InputError(where + "variance targets do not match phoneme count");
    }
    std::size_t total = 0;
    for (auto d : v.duration) total += d;
    if (total != u.frames()) {
      throw InputError(where + "durations sum to " + std::to_string(total) + " but mel has " +
                       std::to_string(u.frames()) + " frames");
    }
  }
  for (std::size_t s = 0; s < seen.size(); ++s) {
    if (!seen[s]) throw InputError("speaker " + std::to_string(s) + " has no utterances");
  }
}

std::pair<dsp::MelSpectrogram, VarianceTargets> oracle_mel(std::span<const std::uint32_t> phonemes,
                                                           std::uint32_t speaker) {
  VarianceTargets targets;
  std::size_t frames = 0;
  for (auto p : phonemes) {
    targets.duration.push_back(2 + p % 4);
    targets.pitch.push_back(as_f32(100.0 + 5.0 * p));
    targets.energy.push_back(as_f32(0.5 + 0.01 * p));
    frames += targets.duration.back();
  }
  if (frames == 0) throw InputError("oracle_mel: empty phoneme sequence");
  const double floor = std::log(dsp::kMelFloor);
  const double speaker_gain = 1.0 + 0.1 * speaker;
  const double shift = static_cast<double>(speaker % 5);
  dsp::MelSpectrogram mel;
  mel.frames = Tensor({frames, kOracleMels}, 0.0);
  std::size_t t = 0;
  for (std::size_t i = 0; i < phonemes.size(); ++i) {
    const double center = 4.0 + static_cast<double>(phonemes[i] % 72) + shift;
    const double amplitude = 10.0 * targets.energy[i] * speaker_gain;
    for (std::uint32_t rep = 0; rep < targets.duration[i]; ++rep, ++t) {
      for (std::size_t b = 0; b < kOracleMels; ++b) {
        const double z = (static_cast<double>(b) - center) / kBumpSigma;
        mel.frames.at(t, b) = as_f32(floor + amplitude * std::exp(-0.5 * z * z));
      }
    }
  }
  return {std::move(mel), std::move(targets)};
}

Corpus gen_synthetic_corpus(const SyntheticCorpusConfig& config) {
  if (config.vocab_size < 8) throw ConfigError("synthetic corpus needs vocab_size >= 8");
  if (config.n_speakers < 3) throw ConfigError("synthetic corpus needs at least 3 speakers");
  if (config.min_length < 1 || config.max_length < config.min_length) {
    throw ConfigError("invalid utterance length range");
  }
  const std::size_t target = config.n_speakers - 1;
  const std::size_t target_count = config.n_utterances / config.n_speakers +
                                   (config.n_utterances % config.n_speakers > target ? 1 : 0);
  if (target_count <= config.test_size) {
    throw ConfigError("synthetic corpus needs more than " + std::to_string(config.test_size) +
                      " target utterances to hold out a test split");
  }
  Rng rng(config.seed);
  Corpus corpus;
  corpus.vocab_size = config.vocab_size;
  corpus.speakers.assign(config.n_speakers, SpeakerRole::kSource);
  corpus.speakers[target] = SpeakerRole::kTarget;
  std::vector<std::size_t> target_items;
  for (std::size_t u = 0; u < config.n_utterances; ++u) {
    Utterance utt;
    utt.speaker = static_cast<std::uint32_t>(u % config.n_speakers);
    const std::size_t len = config.min_length + rng.below(config.max_length - config.min_length + 1);
    for (std::size_t i = 0; i < len; ++i) utt.phonemes.push_back(static_cast<std::uint32_t>(rng.below(config.vocab_size)));
    auto [mel, targets] = oracle_mel(utt.phonemes, utt.speaker);
    utt.mel = std::move(mel);
    utt.variances = std::move(targets);
    if (utt.speaker == target) target_items.push_back(u);
    corpus.utterances.push_back(std::move(utt));
  }
  Rng split_rng(Rng::mix(config.seed, 0x7e57));
  split_rng.shuffle(target_items);
  for (std::size_t i = 0; i < config.test_size; ++i) corpus.utterances[target_items[i]].split = Split::kTest;
  return corpus;
}

std::size_t Batch::phoneme_count(std::size_t b) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < max_phonemes; ++i) n += phoneme_mask[b * max_phonemes + i] != 0.0;
  return n;
}

std::size_t Batch::frame_count(std::size_t b) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < max_frames; ++i) n += frame_mask[b * max_frames + i] != 0.0;
  return n;
}

std::span<const std::uint32_t> Batch::item_phonemes(std::size_t b) const {
  return {phonemes.data() + b * max_phonemes, phoneme_count(b)};
}
std::span<const std::uint32_t> Batch::item_durations(std::size_t b) const {
  return {durations.data() + b * max_phonemes, phoneme_count(b)};
}
std::span<const double> Batch::item_pitch(std::size_t b) const {
  return {pitch.data() + b * max_phonemes, phoneme_count(b)};
}
std::span<const double> Batch::item_energy(std::size_t b) const {
  return {energy.data() + b * max_phonemes, phoneme_count(b)};
}

Tensor Batch::item_mel(std::size_t b) const {
  const std::size_t n_mels = mel.cols();
  const std::size_t frames = frame_count(b);
  const double* start = mel.data().data() + b * max_frames * n_mels;
  return Tensor({frames, n_mels}, std::vector<double>(start, start + frames * n_mels));
}

std::vector<Batch> make_batches(const Corpus& corpus, std::span<const std::size_t> indices, std::size_t batch_size,
                                std::uint64_t seed, std::uint64_t epoch) {
  if (indices.empty()) throw InputError("make_batches: empty split");
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  std::vector<std::size_t> order(indices.begin(), indices.end());
  Rng rng(Rng::mix(seed, epoch));
  rng.shuffle(order);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    Batch batch;
    batch.items.assign(order.begin() + static_cast<long>(start),
                       order.begin() + static_cast<long>(std::min(order.size(), start + batch_size)));
    std::size_t n_mels = 0;
    for (auto i : batch.items) {
      const Utterance& u = corpus.utterances.at(i);
      batch.max_phonemes = std::max(batch.max_phonemes, u.phonemes.size());
      batch.max_frames = std::max(batch.max_frames, u.frames());
      n_mels = u.mel.num_mels();
    }
    const std::size_t bsz = batch.items.size(), P = batch.max_phonemes, T = batch.max_frames;
    batch.phonemes.assign(bsz * P, 0);
    batch.phoneme_mask.assign(bsz * P, 0.0);
    batch.durations.assign(bsz * P, 0);
    batch.pitch.assign(bsz * P, 0.0);
    batch.energy.assign(bsz * P, 0.0);
    batch.frame_mask.assign(bsz * T, 0.0);
    batch.mel = Tensor({bsz, T, n_mels}, 0.0);
    for (std::size_t b = 0; b < bsz; ++b) {
      const Utterance& u = corpus.utterances[batch.items[b]];
      batch.speakers.push_back(u.speaker);
      for (std::size_t i = 0; i < u.phonemes.size(); ++i) {
        batch.phonemes[b * P + i] = u.phonemes[i];
        batch.phoneme_mask[b * P + i] = 1.0;
        batch.durations[b * P + i] = u.variances.duration[i];
        batch.pitch[b * P + i] = u.variances.pitch[i];
        batch.energy[b * P + i] = u.variances.energy[i];
      }
      std::fill_n(batch.frame_mask.begin() + static_cast<long>(b * T), u.frames(), 1.0);
      std::copy(u.mel.frames.data().begin(), u.mel.frames.data().end(),
                batch.mel.data().begin() + static_cast<long>(b * T * n_mels));
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

std::vector<std::size_t> nested_subset(std::span<const std::size_t> pool, std::size_t size, std::uint64_t seed) {
  if (size > pool.size()) {
    throw ConfigError("requested " + std::to_string(size) + " utterances but only " + std::to_string(pool.size()) +
                      " are available");
  }
  std::vector<std::size_t> order(pool.begin(), pool.end());
  Rng rng(Rng::mix(seed, 0x5b5e7));
  rng.shuffle(order);
  order.resize(size);
  return order;
}

std::vector<std::uint8_t> encode_corpus(const Corpus& corpus) {
  ByteWriter w;
  w.raw("CORP");
  w.u32(kCorpusVersion);
  w.u32(corpus.vocab_size);
  w.u32(static_cast<std::uint32_t>(corpus.speakers.size()));
  for (auto role : corpus.speakers) w.u8(static_cast<std::uint8_t>(role));
  w.u32(static_cast<std::uint32_t>(corpus.utterances.size()));
  const dsp::MelSpectrogram* first = corpus.utterances.empty() ? nullptr : &corpus.utterances.front().mel;
  w.u32(first ? static_cast<std::uint32_t>(first->num_mels()) : 80);
  w.u32(first ? first->sample_rate : 22050);
  w.u32(first ? first->hop : 256);
  for (const Utterance& u : corpus.utterances) {
    if (first && (u.mel.num_mels() != first->num_mels() || u.mel.hop != first->hop ||
                  u.mel.sample_rate != first->sample_rate)) {
      throw InputError("corpus utterances disagree on mel layout");
    }
    w.u32(u.speaker);
    w.u8(static_cast<std::uint8_t>(u.split));
    w.u32(static_cast<std::uint32_t>(u.phonemes.size()));
    for (auto p : u.phonemes) w.u32(p);
    for (auto d : u.variances.duration) w.u32(d);
    for (double p : u.variances.pitch) w.f32(static_cast<float>(p));
    for (double e : u.variances.energy) w.f32(static_cast<float>(e));
    w.u32(static_cast<std::uint32_t>(u.frames()));
    for (double v : u.mel.frames.data()) w.f32(static_cast<float>(v));
  }
  return w.take();
}

Corpus decode_corpus(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("CORP");
  const std::uint32_t version = r.u32();
  if (version != kCorpusVersion) r.fail("unsupported corpus version " + std::to_string(version));
  Corpus corpus;
  corpus.vocab_size = r.u32();
  const std::uint32_t n_speakers = r.u32();
  if (n_speakers > r.remaining()) r.fail("speaker count exceeds file size");
  for (std::uint32_t s = 0; s < n_speakers; ++s) {
    const std::uint8_t role = r.u8();
    if (role > 1) r.fail("unknown speaker role " + std::to_string(role));
    corpus.speakers.push_back(static_cast<SpeakerRole>(role));
  }
  const std::uint32_t count = r.u32();
  const std::uint32_t n_mels = r.u32();
  const std::uint32_t sample_rate = r.u32();
  const std::uint32_t hop = r.u32();
  if (n_mels == 0) r.fail("zero mel channels");
  for (std::uint32_t i = 0; i < count; ++i) {
    Utterance u;
    u.speaker = r.u32();
    const std::uint8_t split = r.u8();
    if (split > 1) r.fail("unknown split tag " + std::to_string(split));
    u.split = static_cast<Split>(split);
    const std::uint32_t len = r.u32();
    if (len == 0 || len > r.remaining() / 16) r.fail("implausible phoneme count " + std::to_string(len));
    u.phonemes.resize(len);
    for (auto& p : u.phonemes) p = r.u32();
    u.variances.duration.resize(len);
    for (auto& d : u.variances.duration) d = r.u32();
    u.variances.pitch.resize(len);
    for (auto& p : u.variances.pitch) p = r.f32();
    u.variances.energy.resize(len);
    for (auto& e : u.variances.energy) e = r.f32();
    const std::uint32_t frames = r.u32();
    if (frames == 0 || r.remaining() / 4 / n_mels < frames) r.fail("truncated mel data");
    std::vector<double> data(static_cast<std::size_t>(frames) * n_mels);
    for (double& v : data) v = r.f32();
    u.mel.frames = Tensor({frames, n_mels}, std::move(data));
    u.mel.hop = hop;
    u.mel.sample_rate = sample_rate;
    corpus.utterances.push_back(std::move(u));
  }
  r.expect_end();
  try {
    corpus.validate();
  } catch (const InputError& e) {
    throw FormatError(std::string("invalid corpus: ") + e.what(), r.offset());
  }
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) { write_file(path, encode_corpus(corpus)); }

Corpus load_corpus(const std::filesystem::path& path) { return decode_corpus(read_file(path)); }

}  // namespace rmkd
