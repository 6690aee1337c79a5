#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "rmkd/train.hpp"

namespace rmkd {

// Grid spec file: key=value lines.
//   omegas=0,0.1,0.5,1.0   sizes=10,30   seeds=1,2,3,4,5
//   reference=ref.rmkd     data=corpus.corp   workers=1
// Any TrainConfig key (steps, learning_rate, batch_size, ...) sets the base
// fine-tuning config shared by every cell.
struct GridSpec {
  std::vector<double> omegas = {0.0, 0.1, 0.5, 1.0};
  std::vector<std::size_t> sizes = {10, 30, 50, 100, 200};
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  TrainConfig train = TrainConfig::finetune_defaults();
  std::string reference;
  std::string data;
  std::size_t workers = 1;

  static GridSpec parse(std::string_view text);
  void set(const std::string& key, const std::string& value);
  // Omegas must include 0, sizes ascend strictly, seeds are non-empty.
  void validate() const;
  std::map<std::string, std::string> to_map() const;
  std::size_t cell_count() const { return omegas.size() * sizes.size() * seeds.size(); }
};

struct Metrics {
  double mel_mse = 0.0;  // teacher-forced, averaged over every mel cell
  double mel_l2 = 0.0;   // mean over frames of the per-frame Euclidean distance
  double dur_mae = 0.0;  // inference-mode durations vs targets, frames per phoneme
};

// Teacher-forced mel error and inference duration error on `items`.
Metrics eval_objective(const Checkpoint& checkpoint, const Corpus& corpus, std::span<const std::size_t> items);

// mel_mse and mel_l2 between two aligned mels; dur_mae is left at 0.
Metrics compare_mels(const Tensor& predicted, const Tensor& target);

struct CellResult {
  double omega = 0.0;
  std::size_t size = 0;
  std::uint64_t seed = 0;
  Metrics metrics;
  LossBreakdown final_loss;
  double wall_s = 0.0;
  // "ok", or "diverged" / "failed" with `error` holding the message.
  std::string status = "ok";
  std::string error;
  std::vector<StepRecord> log;

  bool ok() const { return status == "ok"; }
  std::string id() const;
};

struct GridResult {
  std::vector<CellResult> cells;  // omega-major, then size, then seed

  std::vector<std::string> failed_cells() const;
  // Median test mel-MSE over the successful seeds of each (omega, size).
  std::map<std::pair<double, std::size_t>, double> median_mse() const;
};

using CellCallback = std::function<void(const CellResult&)>;

// Fine-tunes and evaluates every (omega, size, seed) cell. The training set of
// a cell is nested_subset(target train split, size, seed); evaluation uses the
// whole target test split. Cell failures are recorded and the grid continues.
GridResult run_grid(const GridSpec& spec, const Checkpoint& reference, const Corpus& corpus,
                    const CellCallback& on_cell = {});

// CSV with columns omega,size,seed,mel_mse,mel_l2,dur_mae,status. Contains no
// timing, so reruns are byte-identical.
std::string emit_table(const GridResult& result);
// CSV with columns omega,size,seed,wall_s.
std::string emit_timing(const GridResult& result);
// One polyline per omega over sizes (median across seeds).
std::string emit_trend_chart(const GridResult& result);
// Binary PGM (P5), one row per mel bin with the highest bin on top. Values in
// [log 1e-5, max] map linearly onto [0, 255].
std::vector<std::uint8_t> emit_spectrogram_image(const Tensor& mel);

// Writes results.csv, timing.csv, trend.svg, summary.txt and logs/<cell>.tsv.
void write_grid_outputs(const GridSpec& spec, const GridResult& result, const std::filesystem::path& dir);

}  // namespace rmkd
