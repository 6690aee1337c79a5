#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "rmkd/checkpoint.hpp"
#include "rmkd/data.hpp"
#include "rmkd/optim.hpp"

namespace rmkd {

struct TrainConfig {
  double omega = 0.0;
  std::size_t batch_size = 8;
  double grad_clip = 1.0;
  std::size_t steps = 1000;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
  std::string preset = "desk";
  // Reuse pseudo labels across epochs instead of recomputing them.
  bool cache_pseudo_labels = true;

  static TrainConfig pretrain_defaults();
  static TrainConfig finetune_defaults();

  void validate() const;
  // Applies one key=value override; unknown keys and bad values throw ConfigError.
  void set(const std::string& key, const std::string& value);
  std::map<std::string, std::string> to_map() const;
};

// Mel terms plus the three variance-predictor terms of one step.
struct LossBreakdown {
  double hard = 0.0;
  double ref = 0.0;
  double omega = 0.0;
  double duration = 0.0;
  double pitch = 0.0;
  double energy = 0.0;
  double total = 0.0;

  double variance() const { return duration + pitch + energy; }
};

// Masked mean squared error over unpadded rows of mel_ft against mel_gt.
Var hard_loss(Var mel_ft, const Tensor& mel_gt, const Mask& mask = {});
// Same reduction against the frozen reference output; mel_ref enters the
// graph as a constant.
Var reference_loss(Var mel_ft, const Tensor& mel_ref, const Mask& mask = {});

struct LossTerms {
  Var hard, ref, duration, pitch, energy;
};

// total = hard + omega * ref + duration + pitch + energy. A missing ref term
// (reference-free training) is skipped. Fills `breakdown` from the node values.
Var total_loss(const LossTerms& terms, double omega, LossBreakdown* breakdown = nullptr);

struct StepRecord {
  std::size_t step = 0;
  LossBreakdown loss;
  double grad_norm = 0.0;  // after clipping
};

// One line per step: step, hard, ref, total, dur, pitch, energy, grad norm.
std::string format_log(const std::vector<StepRecord>& log);

// Everything a batch needs to build its loss: corpus items, the row of each
// item in the student speaker table, and (optionally) pseudo labels.
struct BatchLoss {
  Var total;
  LossBreakdown breakdown;
};

// Element-weighted losses over a batch: each mel term is the sum of squared
// errors over every valid cell divided by the number of valid cells, and each
// variance term is the mean over every valid phoneme.
BatchLoss batch_loss(const BoundParams& params, const ModelConfig& config, const Corpus& corpus, const Batch& batch,
                     const std::vector<const Tensor*>& pseudo_labels, double omega);

// Fits the pitch/energy normalization on `items` and stores it in `config`.
void fit_variance_normalization(ModelConfig& config, const Corpus& corpus, std::span<const std::size_t> items);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepRecord> log;
};

// Supervised training of the reference model on source-speaker training
// utterances. The speaker table covers exactly the source speakers.
TrainResult pretrain(const Corpus& corpus, const ModelConfig& model_config, const TrainConfig& config);

// Teacher-forced reference output for one utterance. The target speaker is
// unseen by the reference, so it conditions on the mean of its speaker rows.
Tensor generate_pseudo_label(const ParameterStore& reference, const ModelConfig& config, const Utterance& utterance);

class FinetuneSession {
 public:
  // `items` are the target-speaker training utterances to use.
  FinetuneSession(const Checkpoint& reference, const Corpus& corpus, std::vector<std::size_t> items,
                  TrainConfig config);

  // One optimizer step over the next batch of the seeded schedule.
  StepRecord step();
  // Runs the remaining steps and returns the fine-tuned checkpoint.
  TrainResult run();

  const ParameterStore& student() const { return student_; }
  const ModelConfig& student_config() const { return student_config_; }
  const ParameterStore& reference() const { return reference_; }
  std::uint64_t reference_hash() const { return reference_hash_; }
  // Throws ReferenceMutationError if the frozen parameters changed.
  void verify_reference() const;
  std::size_t pseudo_label_evaluations() const { return pseudo_evaluations_; }
  Checkpoint checkpoint() const;

 private:
  const Tensor& pseudo_label(std::size_t item);

  const Corpus* corpus_;
  std::vector<std::size_t> items_;
  TrainConfig config_;
  ParameterStore reference_;
  ModelConfig reference_config_;
  std::map<std::string, std::string> reference_meta_;
  std::uint64_t reference_hash_ = 0;
  ParameterStore student_;
  ModelConfig student_config_;
  AdamState adam_;
  std::vector<Batch> schedule_;
  std::size_t next_batch_ = 0;
  std::uint64_t epoch_ = 0;
  std::size_t steps_done_ = 0;
  std::unordered_map<std::size_t, Tensor> cache_;
  Tensor scratch_;
  std::size_t pseudo_evaluations_ = 0;
  std::vector<StepRecord> log_;
};

TrainResult finetune(const Checkpoint& reference, const Corpus& corpus, std::vector<std::size_t> items,
                     const TrainConfig& config);

// Adds a new speaker row for every target speaker the reference has not seen.
// Row seeds derive from `seed`.
void prepare_student(ParameterStore& params, ModelConfig& config, const Corpus& corpus, std::uint64_t seed);

}  // namespace rmkd
