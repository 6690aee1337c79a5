#include "rmkd/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rmkd/binary_io.hpp"
#include "rmkd/kv.hpp"
#include "rmkd/rng.hpp"

namespace rmkd {

namespace {

std::size_t valid_rows(const Mask& mask, std::size_t rows) {
  if (mask.empty()) return rows;
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](double m) { return m != 0.0; }));
}

Var masked_mse(Var pred, const Tensor& target, const Mask& mask, const char* what) {
  if (pred.shape().size() != 2 || target.rank() != 2 || pred.shape()[0] != target.dim(0) ||
      pred.shape()[1] != target.dim(1)) {
    throw AlignmentError(std::string(what) + ": prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
  }
  if (!mask.empty() && mask.size() != target.dim(0)) throw DimensionError(std::string(what) + ": mask length");
  const std::size_t cells = valid_rows(mask, target.dim(0)) * target.dim(1);
  if (cells == 0) throw InputError(std::string(what) + ": no valid frames");
  Var sse = squared_error_sum(pred, pred.graph().constant(target), mask);
  return scale(sse, 1.0 / static_cast<double>(cells));
}

Var column(Graph& g, std::vector<double> values) {
  const std::size_t n = values.size();
  return g.constant(Tensor({n, 1}, std::move(values)));
}

// Speaker rows of the reference model used when it labels `speaker`.
SpeakerSelector reference_speaker(const ModelConfig& config, std::uint32_t speaker) {
  if (speaker < config.n_speakers) return SpeakerSelector::single(speaker);
  std::vector<std::uint32_t> rows(config.n_speakers);
  std::iota(rows.begin(), rows.end(), 0u);
  return SpeakerSelector::mean_of(std::move(rows));
}

void check_finite(const LossBreakdown& loss, double grad_norm, std::size_t step) {
  if (!std::isfinite(loss.total)) throw DivergenceError("non-finite training loss", static_cast<long>(step));
  if (!std::isfinite(grad_norm)) throw DivergenceError("non-finite gradient norm", static_cast<long>(step));
}

// Backward, clip and Adam update over every parameter of `store`.
double optimizer_step(Graph& g, Var total, const BoundParams& bound, ParameterStore& store, AdamState& adam,
                      double clip) {
  g.backward(total);
  std::vector<Tensor> grads;
  grads.reserve(store.size());
  for (const Var& v : bound.vars()) grads.push_back(g.grad(v));
  const double norm = clip_grad_norm(grads, clip);
  if (std::isfinite(norm)) adam_step(store.tensors(), grads, adam);
  return norm;
}

AdamConfig adam_config(const TrainConfig& config) {
  AdamConfig a;
  a.learning_rate = config.learning_rate;
  return a;
}

}  // namespace

TrainConfig TrainConfig::pretrain_defaults() {
  TrainConfig c;
  c.steps = 2000;
  c.learning_rate = 1e-3;
  return c;
}

TrainConfig TrainConfig::finetune_defaults() {
  TrainConfig c;
  c.steps = 400;
  c.learning_rate = 3e-4;
  return c;
}

void TrainConfig::validate() const {
  if (!(omega >= 0.0 && omega <= 10.0)) throw ConfigError("omega must lie in [0, 10]");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (steps < 1) throw ConfigError("steps must be at least 1");
  if (preset != "desk" && preset != "paper") throw ConfigError("preset must be desk or paper");
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "omega") {
    omega = parse_double(key, value);
  } else if (key == "batch_size") {
    batch_size = parse_u64(key, value);
  } else if (key == "grad_clip") {
    grad_clip = parse_double(key, value);
  } else if (key == "steps") {
    steps = parse_u64(key, value);
  } else if (key == "learning_rate" || key == "lr") {
    learning_rate = parse_double(key, value);
  } else if (key == "seed") {
    seed = parse_u64(key, value);
  } else if (key == "preset") {
    preset = value;
  } else if (key == "cache_pseudo_labels") {
    cache_pseudo_labels = parse_bool(key, value);
  } else {
    throw ConfigError("unknown training key '" + key + "'");
  }
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  return {{"omega", format_double(omega)},
          {"batch_size", std::to_string(batch_size)},
          {"grad_clip", format_double(grad_clip)},
          {"steps", std::to_string(steps)},
          {"learning_rate", format_double(learning_rate)},
          {"seed", std::to_string(seed)},
          {"preset", preset},
          {"cache_pseudo_labels", cache_pseudo_labels ? "true" : "false"}};
}

Var hard_loss(Var mel_ft, const Tensor& mel_gt, const Mask& mask) { return masked_mse(mel_ft, mel_gt, mask, "hard_loss"); }

Var reference_loss(Var mel_ft, const Tensor& mel_ref, const Mask& mask) {
  return masked_mse(mel_ft, mel_ref, mask, "reference_loss");
}

Var total_loss(const LossTerms& terms, double omega, LossBreakdown* breakdown) {
  if (!(omega >= 0.0)) throw ConfigError("omega must be non-negative");
  Var mel = terms.hard;
  if (terms.ref.valid()) mel = add(mel, scale(terms.ref, omega));
  Var total = add(add(add(mel, terms.duration), terms.pitch), terms.energy);
  if (breakdown) {
    breakdown->hard = terms.hard.value().item();
    breakdown->ref = terms.ref.valid() ? terms.ref.value().item() : 0.0;
    breakdown->omega = omega;
    breakdown->duration = terms.duration.value().item();
    breakdown->pitch = terms.pitch.value().item();
    breakdown->energy = terms.energy.value().item();
    breakdown->total = total.value().item();
  }
  return total;
}

std::string format_log(const std::vector<StepRecord>& log) {
  std::string out;
  for (const StepRecord& r : log) {
    const LossBreakdown& l = r.loss;
    out += std::to_string(r.step);
    for (double v : {l.hard, l.ref, l.total, l.duration, l.pitch, l.energy, r.grad_norm}) {
      out += '\t';
      out += format_double(v);
    }
    out += '\n';
  }
  return out;
}

BatchLoss batch_loss(const BoundParams& params, const ModelConfig& config, const Corpus& corpus, const Batch& batch,
                     const std::vector<const Tensor*>& pseudo_labels, double omega) {
  Graph& g = params.graph();
  const bool with_ref = !pseudo_labels.empty();
  if (with_ref && pseudo_labels.size() != batch.size()) throw ContractError("one pseudo label per batch item");
  std::vector<Var> hard, ref, dur, pitch, energy;
  std::size_t cells = 0, phonemes = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Utterance& u = corpus.utterances.at(batch.items[b]);
    const VarianceTargets& v = u.variances;
    ForwardRequest req{u.phonemes, SpeakerSelector::single(u.speaker), v.duration, v.pitch, v.energy};
    ForwardOutput out = forward(params, config, req, ForwardMode::kTeacherForced);
    if (out.frames != u.frames()) {
      throw AlignmentError("utterance " + std::to_string(batch.items[b]) + ": regulated " +
                           std::to_string(out.frames) + " frames, target has " + std::to_string(u.frames()));
    }
    hard.push_back(squared_error_sum(out.mel, g.constant(u.mel.frames)));
    if (with_ref) {
      const Tensor& label = *pseudo_labels[b];
      if (label.rank() != 2 || label.dim(0) != out.frames || label.dim(1) != config.n_mels) {
        throw AlignmentError("pseudo label " + shape_str(label.shape()) + " does not match student output " +
                             shape_str(out.mel.shape()));
      }
      ref.push_back(squared_error_sum(out.mel, g.constant(label)));
    }
    const std::size_t n = u.phonemes.size();
    std::vector<double> log_d(n), p(n), e(n);
    for (std::size_t i = 0; i < n; ++i) {
      log_d[i] = std::log(static_cast<double>(v.duration[i]));
      p[i] = config.normalize_pitch(v.pitch[i]);
      e[i] = config.normalize_energy(v.energy[i]);
    }
    dur.push_back(squared_error_sum(reshape(out.variances.log_duration, {n, 1}), column(g, std::move(log_d))));
    pitch.push_back(squared_error_sum(reshape(out.variances.pitch, {n, 1}), column(g, std::move(p))));
    energy.push_back(squared_error_sum(reshape(out.variances.energy, {n, 1}), column(g, std::move(e))));
    cells += u.frames() * config.n_mels;
    phonemes += n;
  }
  auto mean_of = [](const std::vector<Var>& parts, std::size_t count) {
    Var acc = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
    return scale(acc, 1.0 / static_cast<double>(count));
  };
  LossTerms terms;
  terms.hard = mean_of(hard, cells);
  if (with_ref) terms.ref = mean_of(ref, cells);
  terms.duration = mean_of(dur, phonemes);
  terms.pitch = mean_of(pitch, phonemes);
  terms.energy = mean_of(energy, phonemes);
  BatchLoss out;
  out.total = total_loss(terms, omega, &out.breakdown);
  return out;
}

void fit_variance_normalization(ModelConfig& config, const Corpus& corpus, std::span<const std::size_t> items) {
  double n = 0, sp = 0, spp = 0, se = 0, see = 0;
  for (auto i : items) {
    const VarianceTargets& v = corpus.utterances.at(i).variances;
    for (std::size_t k = 0; k < v.pitch.size(); ++k) {
      n += 1;
      sp += v.pitch[k];
      spp += v.pitch[k] * v.pitch[k];
      se += v.energy[k];
      see += v.energy[k] * v.energy[k];
    }
  }
  if (n == 0) throw InputError("cannot fit normalization on an empty set");
  auto stdev = [n](double s, double ss) {
    const double var = ss / n - (s / n) * (s / n);
    return var > 1e-12 ? std::sqrt(var) : 1.0;
  };
  config.pitch_mean = sp / n;
  config.pitch_scale = stdev(sp, spp);
  config.energy_mean = se / n;
  config.energy_scale = stdev(se, see);
}

TrainResult pretrain(const Corpus& corpus, const ModelConfig& model_config, const TrainConfig& config) {
  config.validate();
  const auto items = corpus.select(SpeakerRole::kSource, Split::kTrain);
  if (items.empty()) throw InputError("pretraining needs source-speaker training utterances");
  const auto sources = corpus.speakers_with(SpeakerRole::kSource);
  if (sources.size() < 2) throw InputError("pretraining needs at least two source speakers");
  for (std::size_t i = 0; i < sources.size(); ++i) {
    if (sources[i] != i) throw InputError("source speakers must occupy the first speaker ids");
  }

  ModelConfig mc = model_config;
  mc.vocab_size = corpus.vocab_size;
  mc.n_speakers = sources.size();
  mc.n_mels = corpus.utterances.front().mel.num_mels();
  fit_variance_normalization(mc, corpus, items);
  mc.validate();

  TrainResult result;
  result.checkpoint.config = mc;
  ParameterStore& params = result.checkpoint.params;
  params = init_parameters(mc, config.seed);
  AdamState adam(params.tensors(), adam_config(config));
  std::vector<Batch> schedule;
  std::size_t next = 0;
  std::uint64_t epoch = 0;
  for (std::size_t step = 0; step < config.steps; ++step) {
    if (next == schedule.size()) {
      schedule = make_batches(corpus, items, config.batch_size, config.seed, epoch++);
      next = 0;
    }
    Graph g;
    BoundParams bound(g, params, true);
    BatchLoss loss = batch_loss(bound, mc, corpus, schedule[next++], {}, 0.0);
    if (!std::isfinite(loss.breakdown.total)) throw DivergenceError("non-finite training loss", static_cast<long>(step));
    const double norm = optimizer_step(g, loss.total, bound, params, adam, config.grad_clip);
    check_finite(loss.breakdown, norm, step);
    result.log.push_back({step, loss.breakdown, norm});
  }
  auto& meta = result.checkpoint.metadata;
  meta["stage"] = "reference";
  for (const auto& [k, v] : config.to_map()) meta["train." + k] = v;
  meta.erase("train.omega");
  meta.erase("train.cache_pseudo_labels");
  meta["train.utterances"] = std::to_string(items.size());
  meta["seed"] = std::to_string(config.seed);
  meta["steps"] = std::to_string(config.steps);
  return result;
}

Tensor generate_pseudo_label(const ParameterStore& reference, const ModelConfig& config, const Utterance& utterance) {
  Graph g;
  BoundParams bound(g, reference, false);
  const VarianceTargets& v = utterance.variances;
  ForwardRequest req{utterance.phonemes, reference_speaker(config, utterance.speaker), v.duration, v.pitch, v.energy};
  return forward(bound, config, req, ForwardMode::kTeacherForced).mel.value();
}

void prepare_student(ParameterStore& params, ModelConfig& config, const Corpus& corpus, std::uint64_t seed) {
  std::size_t needed = config.n_speakers;
  for (auto s : corpus.speakers_with(SpeakerRole::kTarget)) needed = std::max<std::size_t>(needed, s + 1);
  if (needed > config.n_speakers) extend_speaker_table(params, config, needed, Rng::mix(seed, 0x5b));
}

FinetuneSession::FinetuneSession(const Checkpoint& reference, const Corpus& corpus, std::vector<std::size_t> items,
                                 TrainConfig config)
    : corpus_(&corpus),
      items_(std::move(items)),
      config_(std::move(config)),
      reference_(reference.params),
      reference_config_(reference.config),
      reference_meta_(reference.metadata) {
  config_.validate();
  if (reference.stage() != "reference") {
    throw ConfigError("fine-tuning needs a reference checkpoint, got stage '" + reference.stage() + "'");
  }
  if (items_.empty()) throw InputError("fine-tuning needs at least one target utterance");
  std::uint32_t speaker = corpus.utterances.at(items_.front()).speaker;
  for (auto i : items_) {
    const Utterance& u = corpus.utterances.at(i);
    if (u.speaker != speaker) throw InputError("fine-tuning data must come from a single speaker");
    if (u.phonemes.empty()) throw InputError("empty utterance in fine-tuning data");
  }
  if (corpus.vocab_size > reference_config_.vocab_size) throw InputError("corpus vocabulary exceeds the model's");
  reference_hash_ = reference_.content_hash();
  student_ = reference_;
  student_config_ = reference_config_;
  prepare_student(student_, student_config_, corpus, config_.seed);
  if (speaker >= student_config_.n_speakers) throw InputError("target speaker has no embedding row");
  adam_ = AdamState(student_.tensors(), adam_config(config_));
}

const Tensor& FinetuneSession::pseudo_label(std::size_t item) {
  if (config_.cache_pseudo_labels) {
    auto it = cache_.find(item);
    if (it != cache_.end()) return it->second;
  }
  ++pseudo_evaluations_;
  Tensor label = generate_pseudo_label(reference_, reference_config_, corpus_->utterances.at(item));
  if (!config_.cache_pseudo_labels) {
    scratch_ = std::move(label);
    return scratch_;
  }
  return cache_.emplace(item, std::move(label)).first->second;
}

StepRecord FinetuneSession::step() {
  if (next_batch_ == schedule_.size()) {
    schedule_ = make_batches(*corpus_, items_, config_.batch_size, config_.seed, epoch_++);
    next_batch_ = 0;
  }
  const Batch& batch = schedule_[next_batch_++];
  std::vector<Tensor> owned;
  std::vector<const Tensor*> labels;
  owned.reserve(batch.size());
  for (auto item : batch.items) owned.push_back(pseudo_label(item));
  for (const Tensor& t : owned) labels.push_back(&t);

  Graph g;
  BoundParams bound(g, student_, true);
  BatchLoss loss = batch_loss(bound, student_config_, *corpus_, batch, labels, config_.omega);
  const std::size_t step = steps_done_++;
  if (!std::isfinite(loss.breakdown.total)) throw DivergenceError("non-finite training loss", static_cast<long>(step));
  const double norm = optimizer_step(g, loss.total, bound, student_, adam_, config_.grad_clip);
  check_finite(loss.breakdown, norm, step);
  StepRecord record{step, loss.breakdown, norm};
  log_.push_back(record);
  return record;
}

void FinetuneSession::verify_reference() const {
  const std::uint64_t now = reference_.content_hash();
  if (now != reference_hash_) {
    throw ReferenceMutationError("reference parameters changed during fine-tuning: " + hex64(reference_hash_) +
                                 " -> " + hex64(now));
  }
}

Checkpoint FinetuneSession::checkpoint() const {
  Checkpoint ck;
  ck.params = student_;
  ck.config = student_config_;
  for (const auto& [k, v] : reference_meta_) {
    if (k.starts_with("train.")) ck.metadata["reference." + k.substr(6)] = v;
  }
  ck.metadata["stage"] = "finetuned";
  for (const auto& [k, v] : config_.to_map()) {
    if (k != "cache_pseudo_labels") ck.metadata["train." + k] = v;
  }
  ck.metadata["omega"] = format_double(config_.omega);
  ck.metadata["size"] = std::to_string(items_.size());
  ck.metadata["seed"] = std::to_string(config_.seed);
  ck.metadata["steps"] = std::to_string(steps_done_);
  ck.metadata["reference_hash"] = hex64(reference_hash_);
  return ck;
}

TrainResult FinetuneSession::run() {
  while (steps_done_ < config_.steps) step();
  verify_reference();
  return {checkpoint(), log_};
}

TrainResult finetune(const Checkpoint& reference, const Corpus& corpus, std::vector<std::size_t> items,
                     const TrainConfig& config) {
  FinetuneSession session(reference, corpus, std::move(items), config);
  return session.run();
}

}  // namespace rmkd
