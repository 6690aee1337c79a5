#include "rmkd/exper.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <thread>

#include "rmkd/binary_io.hpp"
#include "rmkd/kv.hpp"

namespace rmkd {

namespace {

// Desk sizes stand in for the paper's target-set sizes.
const std::map<std::size_t, std::size_t> kPaperSize = {{10, 30}, {30, 300}, {50, 500}, {100, 1000}, {200, 2000}};

std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
  return out;
}

template <typename T>
std::string join_ints(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&') out += "&amp;";
    else if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else out += c;
  }
  return out;
}

}  // namespace

GridSpec GridSpec::parse(std::string_view text) {
  GridSpec spec;
  for (const auto& [k, v] : parse_kv_text(text)) spec.set(k, v);
  spec.validate();
  return spec;
}

void GridSpec::set(const std::string& key, const std::string& value) {
  if (key == "omegas") {
    omegas = parse_double_list(key, value);
  } else if (key == "sizes") {
    sizes.clear();
    for (auto s : parse_u64_list(key, value)) sizes.push_back(s);
  } else if (key == "seeds") {
    seeds = parse_u64_list(key, value);
  } else if (key == "reference") {
    reference = value;
  } else if (key == "data") {
    data = value;
  } else if (key == "workers") {
    workers = parse_u64(key, value);
  } else {
    train.set(key, value);
  }
}

void GridSpec::validate() const {
  if (omegas.empty() || std::find(omegas.begin(), omegas.end(), 0.0) == omegas.end()) {
    throw ConfigError("grid omegas must include the baseline 0");
  }
  for (double w : omegas) {
    if (!(w >= 0.0 && w <= 10.0)) throw ConfigError("grid omega " + format_double(w) + " outside [0, 10]");
  }
  if (sizes.empty()) throw ConfigError("grid sizes must not be empty");
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] == 0) throw ConfigError("grid sizes must be positive");
    if (i && sizes[i] <= sizes[i - 1]) throw ConfigError("grid sizes must be strictly ascending");
  }
  if (seeds.empty()) throw ConfigError("grid seeds must not be empty");
  if (workers < 1) throw ConfigError("workers must be at least 1");
  TrainConfig probe = train;
  probe.omega = 0.0;
  probe.validate();
}

std::map<std::string, std::string> GridSpec::to_map() const {
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : train.to_map()) {
    if (k != "omega" && k != "seed") out[k] = v;
  }
  out["omegas"] = join_doubles(omegas);
  out["sizes"] = join_ints(sizes);
  out["seeds"] = join_ints(seeds);
  out["reference"] = reference;
  out["data"] = data;
  out["workers"] = std::to_string(workers);
  return out;
}

Metrics compare_mels(const Tensor& predicted, const Tensor& target) {
  if (predicted.rank() != 2 || predicted.shape() != target.shape()) {
    throw AlignmentError("cannot compare mels " + shape_str(predicted.shape()) + " and " + shape_str(target.shape()));
  }
  Metrics m;
  const std::size_t frames = target.dim(0), bins = target.dim(1);
  for (std::size_t t = 0; t < frames; ++t) {
    double frame = 0;
    for (std::size_t b = 0; b < bins; ++b) {
      const double d = predicted.at(t, b) - target.at(t, b);
      frame += d * d;
    }
    m.mel_mse += frame;
    m.mel_l2 += std::sqrt(frame);
  }
  m.mel_mse /= static_cast<double>(frames * bins);
  m.mel_l2 /= static_cast<double>(frames);
  return m;
}

Metrics eval_objective(const Checkpoint& checkpoint, const Corpus& corpus, std::span<const std::size_t> items) {
  if (items.empty()) throw InputError("evaluation split is empty");
  Metrics total;
  double cells = 0, frames = 0, phonemes = 0;
  for (auto i : items) {
    const Utterance& u = corpus.utterances.at(i);
    const VarianceTargets& v = u.variances;
    Graph g;
    BoundParams bound(g, checkpoint.params, false);
    const SpeakerSelector speaker = SpeakerSelector::single(u.speaker);
    ForwardOutput tf = forward(bound, checkpoint.config, {u.phonemes, speaker, v.duration, v.pitch, v.energy},
                               ForwardMode::kTeacherForced);
    const Metrics m = compare_mels(tf.mel.value(), u.mel.frames);
    const double n = static_cast<double>(u.mel.frames.numel());
    total.mel_mse += m.mel_mse * n;
    total.mel_l2 += m.mel_l2 * static_cast<double>(u.frames());
    cells += n;
    frames += static_cast<double>(u.frames());
    // Inference durations come from the same encoder pass: the predictor
    // output does not depend on the mode.
    const Tensor& log_d = tf.variances.log_duration.value();
    for (std::size_t k = 0; k < v.duration.size(); ++k) {
      total.dur_mae += std::abs(static_cast<double>(duration_from_log(log_d[k])) - static_cast<double>(v.duration[k]));
      phonemes += 1;
    }
  }
  total.mel_mse /= cells;
  total.mel_l2 /= frames;
  total.dur_mae /= phonemes;
  return total;
}

std::string CellResult::id() const {
  return "omega" + format_double(omega) + "_size" + std::to_string(size) + "_seed" + std::to_string(seed);
}

std::vector<std::string> GridResult::failed_cells() const {
  std::vector<std::string> out;
  for (const auto& c : cells) {
    if (!c.ok()) out.push_back(c.id() + ": " + c.error);
  }
  return out;
}

std::map<std::pair<double, std::size_t>, double> GridResult::median_mse() const {
  std::map<std::pair<double, std::size_t>, std::vector<double>> groups;
  for (const auto& c : cells) {
    if (c.ok()) groups[{c.omega, c.size}].push_back(c.metrics.mel_mse);
  }
  std::map<std::pair<double, std::size_t>, double> out;
  for (auto& [key, values] : groups) out[key] = median(std::move(values));
  return out;
}

GridResult run_grid(const GridSpec& spec, const Checkpoint& reference, const Corpus& corpus,
                    const CellCallback& on_cell) {
  spec.validate();
  const auto pool = corpus.select(SpeakerRole::kTarget, Split::kTrain);
  const auto test = corpus.select(SpeakerRole::kTarget, Split::kTest);
  if (test.empty()) throw InputError("corpus has no held-out target utterances");
  if (spec.sizes.back() > pool.size()) {
    throw ConfigError("grid size " + std::to_string(spec.sizes.back()) + " exceeds the " +
                      std::to_string(pool.size()) + " target training utterances");
  }
  GridResult result;
  for (double w : spec.omegas)
    for (std::size_t s : spec.sizes)
      for (std::uint64_t seed : spec.seeds) {
        CellResult c;
        c.omega = w;
        c.size = s;
        c.seed = seed;
        result.cells.push_back(c);
      }

  std::atomic<std::size_t> next{0};
  std::mutex callback_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < result.cells.size(); i = next++) {
      CellResult& cell = result.cells[i];
      const auto start = std::chrono::steady_clock::now();
      TrainConfig cfg = spec.train;
      cfg.omega = cell.omega;
      cfg.seed = cell.seed;
      try {
        FinetuneSession session(reference, corpus, nested_subset(pool, cell.size, cell.seed), cfg);
        TrainResult trained = session.run();
        cell.log = std::move(trained.log);
        cell.final_loss = cell.log.back().loss;
        cell.metrics = eval_objective(trained.checkpoint, corpus, test);
      } catch (const DivergenceError& e) {
        cell.status = "diverged";
        cell.error = e.what();
      } catch (const RunawayDurationError& e) {
        cell.status = "diverged";
        cell.error = e.what();
      }
      if (!cell.ok()) {
        const double nan = std::nan("");
        cell.metrics = {nan, nan, nan};
      }
      cell.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (on_cell) {
        std::lock_guard<std::mutex> lock(callback_mutex);
        on_cell(cell);
      }
    }
  };
  const std::size_t threads = std::min(spec.workers, result.cells.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool_threads;
    for (std::size_t t = 0; t < threads; ++t) pool_threads.emplace_back(worker);
    for (auto& t : pool_threads) t.join();
  }
  return result;
}

std::string emit_table(const GridResult& result) {
  std::string out = "omega,size,seed,mel_mse,mel_l2,dur_mae,status\n";
  for (const auto& c : result.cells) {
    out += format_double(c.omega) + "," + std::to_string(c.size) + "," + std::to_string(c.seed) + "," +
           format_double(c.metrics.mel_mse) + "," + format_double(c.metrics.mel_l2) + "," +
           format_double(c.metrics.dur_mae) + "," + c.status + "\n";
  }
  return out;
}

std::string emit_timing(const GridResult& result) {
  std::string out = "omega,size,seed,wall_s\n";
  for (const auto& c : result.cells) {
    out += format_double(c.omega) + "," + std::to_string(c.size) + "," + std::to_string(c.seed) + "," +
           fixed(c.wall_s, 3) + "\n";
  }
  return out;
}

std::string emit_trend_chart(const GridResult& result) {
  const auto medians = result.median_mse();
  std::vector<double> omegas;
  std::vector<std::size_t> sizes;
  for (const auto& c : result.cells) {
    if (std::find(omegas.begin(), omegas.end(), c.omega) == omegas.end()) omegas.push_back(c.omega);
    if (std::find(sizes.begin(), sizes.end(), c.size) == sizes.end()) sizes.push_back(c.size);
  }
  std::sort(sizes.begin(), sizes.end());
  double y_max = 0.0;
  for (const auto& [key, v] : medians) y_max = std::max(y_max, v);
  if (!(y_max > 0.0)) y_max = 1.0;
  y_max *= 1.1;

  const double width = 640, height = 420, left = 80, right = 150, top = 30, bottom = 60;
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  auto x_of = [&](std::size_t i) {
    return sizes.size() == 1 ? left + plot_w / 2 : left + plot_w * static_cast<double>(i) / (sizes.size() - 1);
  };
  auto y_of = [&](double v) { return top + plot_h * (1.0 - v / y_max); };
  static const char* const kColors[] = {"#1b6ca8", "#d1495b", "#edae49", "#00798c", "#66a182", "#8d6a9f"};

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fixed(width, 0) + "\" height=\"" +
                    fixed(height, 0) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<line x1=\"" + fixed(left, 1) + "\" y1=\"" + fixed(top + plot_h, 1) + "\" x2=\"" + fixed(left + plot_w, 1) +
         "\" y2=\"" + fixed(top + plot_h, 1) + "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + fixed(left, 1) + "\" y1=\"" + fixed(top, 1) + "\" x2=\"" + fixed(left, 1) + "\" y2=\"" +
         fixed(top + plot_h, 1) + "\" stroke=\"black\"/>\n";
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    svg += "<text x=\"" + fixed(x_of(i), 1) + "\" y=\"" + fixed(top + plot_h + 18, 1) +
           "\" text-anchor=\"middle\">" + std::to_string(sizes[i]) + "</text>\n";
  }
  for (int k = 0; k <= 4; ++k) {
    const double v = y_max * k / 4.0;
    svg += "<text x=\"" + fixed(left - 6, 1) + "\" y=\"" + fixed(y_of(v) + 4, 1) + "\" text-anchor=\"end\">" +
           fixed(v, 4) + "</text>\n";
  }
  svg += "<text x=\"" + fixed(left + plot_w / 2, 1) + "\" y=\"" + fixed(height - 15, 1) +
         "\" text-anchor=\"middle\">target training utterances</text>\n";
  svg += "<text x=\"18\" y=\"" + fixed(top + plot_h / 2, 1) + "\" text-anchor=\"middle\" transform=\"rotate(-90 18 " +
         fixed(top + plot_h / 2, 1) + ")\">median held-out mel MSE</text>\n";
  for (std::size_t w = 0; w < omegas.size(); ++w) {
    const char* color = kColors[w % 6];
    std::string points;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      auto it = medians.find({omegas[w], sizes[i]});
      if (it == medians.end()) continue;
      if (!points.empty()) points += ' ';
      points += fixed(x_of(i), 2) + "," + fixed(y_of(it->second), 2);
    }
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" + points +
           "\"/>\n";
    const double ly = top + 20.0 * static_cast<double>(w);
    svg += "<text x=\"" + fixed(left + plot_w + 20, 1) + "\" y=\"" + fixed(ly + 4, 1) + "\" fill=\"" + color + "\">" +
           xml_escape("omega = " + format_double(omegas[w]) + (omegas[w] == 0.0 ? " (baseline)" : "")) +
           "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

std::vector<std::uint8_t> emit_spectrogram_image(const Tensor& mel) {
  if (mel.rank() != 2) throw DimensionError("spectrogram image needs a [frames x bins] mel");
  const std::size_t frames = mel.dim(0), bins = mel.dim(1);
  const double lo = std::log(dsp::kMelFloor);
  double hi = lo;
  for (double v : mel.data()) hi = std::max(hi, v);
  const std::string header = "P5\n" + std::to_string(frames) + " " + std::to_string(bins) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(header.size() + frames * bins);
  for (std::size_t row = 0; row < bins; ++row) {
    const std::size_t bin = bins - 1 - row;
    for (std::size_t t = 0; t < frames; ++t) {
      double level = hi > lo ? (mel.at(t, bin) - lo) / (hi - lo) : 0.0;
      level = std::clamp(level, 0.0, 1.0);
      out.push_back(static_cast<std::uint8_t>(std::lround(level * 255.0)));
    }
  }
  return out;
}

void write_grid_outputs(const GridSpec& spec, const GridResult& result, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "logs", ec);
  if (ec) throw IoError("cannot create " + (dir / "logs").string() + ": " + ec.message());
  auto put = [&](const std::filesystem::path& path, const std::string& text) {
    write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  };
  put(dir / "results.csv", emit_table(result));
  put(dir / "timing.csv", emit_timing(result));
  put(dir / "trend.svg", emit_trend_chart(result));
  for (const auto& c : result.cells) put(dir / "logs" / (c.id() + ".tsv"), format_log(c.log));

  std::string summary;
  for (const auto& [k, v] : spec.to_map()) summary += k + "=" + v + "\n";
  std::string mapping;
  for (std::size_t s : spec.sizes) {
    auto it = kPaperSize.find(s);
    if (it != kPaperSize.end()) mapping += (mapping.empty() ? "" : ",") + std::to_string(s) + ":" + std::to_string(it->second);
  }
  if (!mapping.empty()) summary += "paper_size_map=" + mapping + "\n";
  for (const auto& [key, v] : result.median_mse()) {
    summary += "median_mel_mse.omega" + format_double(key.first) + ".size" + std::to_string(key.second) + "=" +
               format_double(v) + "\n";
  }
  std::map<std::pair<double, std::size_t>, std::pair<double, double>> spread;
  for (const auto& c : result.cells) {
    if (!c.ok()) continue;
    auto [it, fresh] = spread.try_emplace({c.omega, c.size}, c.metrics.mel_mse, c.metrics.mel_mse);
    if (!fresh) {
      it->second.first = std::min(it->second.first, c.metrics.mel_mse);
      it->second.second = std::max(it->second.second, c.metrics.mel_mse);
    }
  }
  for (const auto& [key, range] : spread) {
    summary += "seed_range_mel_mse.omega" + format_double(key.first) + ".size" + std::to_string(key.second) + "=" +
               format_double(range.first) + "," + format_double(range.second) + "\n";
  }
  const auto failed = result.failed_cells();
  summary += "failed_cells=" + std::to_string(failed.size()) + "\n";
  for (const auto& f : failed) summary += "failed=" + f + "\n";
  put(dir / "summary.txt", summary);
}

}  // namespace rmkd
