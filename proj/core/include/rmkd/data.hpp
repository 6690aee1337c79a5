#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "rmkd/dsp.hpp"
#include "rmkd/model.hpp"

namespace rmkd {

inline constexpr std::uint32_t kCorpusVersion = 1;

struct VarianceTargets {
  std::vector<std::uint32_t> duration;  // frames per phoneme
  std::vector<double> pitch;            // Hz
  std::vector<double> energy;

  bool operator==(const VarianceTargets&) const = default;
};

enum class SpeakerRole : std::uint8_t { kSource = 0, kTarget = 1 };
enum class Split : std::uint8_t { kTrain = 0, kTest = 1 };

struct Utterance {
  std::vector<std::uint32_t> phonemes;
  std::uint32_t speaker = 0;
  Split split = Split::kTrain;
  dsp::MelSpectrogram mel;
  VarianceTargets variances;

  std::size_t frames() const { return mel.num_frames(); }
  bool operator==(const Utterance&) const = default;
};

struct Corpus {
  std::uint32_t vocab_size = 0;
  std::vector<SpeakerRole> speakers;
  std::vector<Utterance> utterances;

  // Indices of utterances whose speaker has `role` and whose split is `split`.
  std::vector<std::size_t> select(SpeakerRole role, Split split) const;
  std::vector<std::uint32_t> speakers_with(SpeakerRole role) const;
  // Throws InputError if an invariant is broken.
  void validate() const;

  bool operator==(const Corpus&) const = default;
};

struct SyntheticCorpusConfig {
  std::uint64_t seed = 1;
  std::size_t n_speakers = 3;
  std::size_t n_utterances = 660;
  std::uint32_t vocab_size = 32;
  std::size_t min_length = 5;
  std::size_t max_length = 15;
  // Held-out target utterances.
  std::size_t test_size = 20;
};

// Deterministic rule turning a phoneme sequence into a log-mel target:
// phoneme p lasts 2 + (p mod 4) frames, has pitch 100 + 5p Hz and energy
// 0.5 + 0.01p. Each of its frames is the log floor plus a Gaussian bump
// (sigma 3 bins) centred at bin 4 + (p mod 72) + (speaker mod 5), with
// amplitude 10 * energy * (1 + 0.1 * speaker). Values are rounded to f32.
std::pair<dsp::MelSpectrogram, VarianceTargets> oracle_mel(std::span<const std::uint32_t> phonemes,
                                                           std::uint32_t speaker);

// The last speaker is the target, the rest are source speakers; `test_size`
// target utterances are held out at random.
Corpus gen_synthetic_corpus(const SyntheticCorpusConfig& config);

// Padded mini-batch. Per-item arrays are padded with zeros to the batch
// maxima; masks mark the real positions.
struct Batch {
  std::vector<std::size_t> items;  // corpus indices
  std::size_t max_phonemes = 0;
  std::size_t max_frames = 0;
  std::vector<std::uint32_t> phonemes;  // [B x max_phonemes]
  std::vector<double> phoneme_mask;     // [B x max_phonemes]
  std::vector<std::uint32_t> durations;
  std::vector<double> pitch;
  std::vector<double> energy;
  Tensor mel;                         // [B x max_frames x n_mels]
  std::vector<double> frame_mask;     // [B x max_frames]
  std::vector<std::uint32_t> speakers;

  std::size_t size() const { return items.size(); }
  std::size_t phoneme_count(std::size_t b) const;
  std::size_t frame_count(std::size_t b) const;

  // Unpadded views of item b.
  std::span<const std::uint32_t> item_phonemes(std::size_t b) const;
  std::span<const std::uint32_t> item_durations(std::size_t b) const;
  std::span<const double> item_pitch(std::size_t b) const;
  std::span<const double> item_energy(std::size_t b) const;
  Tensor item_mel(std::size_t b) const;
};

// Seeded shuffle of `indices` (schedule depends only on seed and epoch),
// chunked into batches of at most `batch_size`.
std::vector<Batch> make_batches(const Corpus& corpus, std::span<const std::size_t> indices, std::size_t batch_size,
                                std::uint64_t seed, std::uint64_t epoch);

// First `size` entries of a seeded permutation of `pool`, so that subsets for
// smaller sizes are contained in those for larger sizes under the same seed.
std::vector<std::size_t> nested_subset(std::span<const std::size_t> pool, std::size_t size, std::uint64_t seed);

// "CORP", u32 version, u32 vocab, u32 speaker count, u8 role per speaker,
// u32 utterance count, u32 n_mels, u32 sample rate, u32 hop; per utterance:
// u32 speaker, u8 split, u32 phoneme count, phonemes (u32), durations (u32),
// pitch (f32), energy (f32), u32 frame count, frames * n_mels f32 row-major.
std::vector<std::uint8_t> encode_corpus(const Corpus& corpus);
Corpus decode_corpus(std::span<const std::uint8_t> bytes);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

}  // namespace rmkd
