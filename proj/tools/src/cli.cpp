#include "rmkd/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "rmkd/binary_io.hpp"
#include "rmkd/checkpoint.hpp"
#include "rmkd/data.hpp"
#include "rmkd/dsp.hpp"
#include "rmkd/exper.hpp"
#include "rmkd/gradcheck.hpp"
#include "rmkd/kv.hpp"
#include "rmkd/train.hpp"

namespace rmkd {

namespace {

using Settings = std::map<std::string, std::string>;

struct Key {
  std::string name;  // underscore form; the flag is --name with dashes
  std::string help;
  std::string fallback;  // empty and required: must be supplied
  bool required = false;
};

struct Command {
  std::string name;
  std::string help;
  std::vector<Key> keys;
  std::function<int(const Settings&, std::ostream&)> action;
};

std::string flag_name(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

std::string canonical(std::string key) {
  std::replace(key.begin(), key.end(), '-', '_');
  return key;
}

std::string text_of(const std::vector<std::uint8_t>& bytes) { return std::string(bytes.begin(), bytes.end()); }

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::size_t get_size(const Settings& s, const std::string& key) { return parse_u64(key, s.at(key)); }
double get_double(const Settings& s, const std::string& key) { return parse_double(key, s.at(key)); }

const std::vector<Key> kModelKeys = {
    {"preset", "model/training preset: desk or paper", "desk"},
    {"d_model", "hidden width (preset default when empty)", ""},
    {"n_heads", "attention heads", ""},
    {"ffn_channels", "conv feed-forward channels", ""},
    {"encoder_blocks", "encoder blocks", ""},
    {"decoder_blocks", "decoder blocks", ""},
    {"conv_kernel", "odd conv kernel width", ""},
    {"dropout", "dropout rate", ""},
    {"max_frames", "inference frame cap", ""},
};

const std::vector<Key> kTrainKeys = {
    {"steps", "optimizer steps", ""},
    {"learning_rate", "Adam learning rate", ""},
    {"batch_size", "utterances per batch", ""},
    {"grad_clip", "global gradient-norm clip", "1"},
    {"seed", "random seed", "1"},
};

ModelConfig model_from(const Settings& s) {
  ModelConfig c = s.at("preset") == "paper" ? ModelConfig::paper() : ModelConfig::desk();
  if (s.at("preset") != "paper" && s.at("preset") != "desk") throw ConfigError("preset must be desk or paper");
  auto size = [&](const char* key, std::size_t& field) {
    if (!s.at(key).empty()) field = get_size(s, key);
  };
  size("d_model", c.d_model);
  size("n_heads", c.n_heads);
  size("ffn_channels", c.ffn_channels);
  size("encoder_blocks", c.encoder_blocks);
  size("decoder_blocks", c.decoder_blocks);
  size("conv_kernel", c.conv_kernel);
  size("max_frames", c.max_frames);
  if (!s.at("dropout").empty()) c.dropout = get_double(s, "dropout");
  c.validate();
  return c;
}

TrainConfig train_from(const Settings& s, TrainConfig base) {
  if (s.count("preset") && s.at("preset") == "paper") {
    base.preset = "paper";
    base.batch_size = 16;
  }
  for (const char* key : {"steps", "learning_rate", "batch_size", "grad_clip", "seed", "omega", "cache_pseudo_labels"}) {
    auto it = s.find(key);
    if (it != s.end() && !it->second.empty()) base.set(key, it->second);
  }
  base.validate();
  return base;
}

void print_resolved(const std::string& title, const std::map<std::string, std::string>& values, std::ostream& out) {
  out << title << ":\n";
  for (const auto& [k, v] : values) out << "  " << k << "=" << v << "\n";
}

void print_log_tail(const std::vector<StepRecord>& log, std::ostream& out) {
  const StepRecord& first = log.front();
  const StepRecord& last = log.back();
  out << "step 0 total " << format_double(first.loss.total) << "\n";
  out << "step " << last.step << " total " << format_double(last.loss.total) << " hard "
      << format_double(last.loss.hard) << " ref " << format_double(last.loss.ref) << "\n";
}

int cmd_gen_data(const Settings& s, std::ostream& out) {
  SyntheticCorpusConfig c;
  c.seed = parse_u64("seed", s.at("seed"));
  c.n_speakers = get_size(s, "speakers");
  c.n_utterances = get_size(s, "utterances");
  c.vocab_size = static_cast<std::uint32_t>(get_size(s, "vocab"));
  c.min_length = get_size(s, "min_length");
  c.max_length = get_size(s, "max_length");
  c.test_size = get_size(s, "test_size");
  const Corpus corpus = gen_synthetic_corpus(c);
  const auto bytes = encode_corpus(corpus);
  write_file(s.at("out"), bytes);
  out << "wrote " << corpus.utterances.size() << " utterances (" << bytes.size() << " bytes) to " << s.at("out")
      << "\n";
  return kExitOk;
}

int cmd_pretrain(const Settings& s, std::ostream& out) {
  const Corpus corpus = load_corpus(s.at("data"));
  const ModelConfig model = model_from(s);
  const TrainConfig train = train_from(s, TrainConfig::pretrain_defaults());
  print_resolved("model", model.to_metadata(), out);
  print_resolved("training", train.to_map(), out);
  TrainResult r = pretrain(corpus, model, train);
  save_checkpoint(s.at("out"), r.checkpoint);
  const std::string log_path = s.at("log").empty() ? s.at("out") + ".log" : s.at("log");
  write_text(log_path, format_log(r.log));
  print_log_tail(r.log, out);
  out << "reference checkpoint " << s.at("out") << " (" << r.checkpoint.params.parameter_count()
      << " parameters, hash " << hex64(r.checkpoint.params.content_hash()) << "), log " << log_path << "\n";
  return kExitOk;
}

int cmd_finetune(const Settings& s, std::ostream& out) {
  const Corpus corpus = load_corpus(s.at("data"));
  const Checkpoint ref = load_checkpoint(s.at("ref"));
  const TrainConfig train = train_from(s, TrainConfig::finetune_defaults());
  print_resolved("training", train.to_map(), out);
  const auto pool = corpus.select(SpeakerRole::kTarget, Split::kTrain);
  std::size_t size = get_size(s, "size");
  if (size == 0) size = pool.size();
  FinetuneSession session(ref, corpus, nested_subset(pool, size, train.seed), train);
  const std::uint64_t before = session.reference_hash();
  TrainResult r = session.run();
  save_checkpoint(s.at("out"), r.checkpoint);
  const std::string log_path = s.at("log").empty() ? s.at("out") + ".log" : s.at("log");
  write_text(log_path, format_log(r.log));
  print_log_tail(r.log, out);
  out << "reference hash " << hex64(before) << " unchanged\n";
  out << "fine-tuned checkpoint " << s.at("out") << " (omega " << format_double(train.omega) << ", size " << size
      << "), log " << log_path << "\n";
  return kExitOk;
}

int cmd_synthesize(const Settings& s, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(s.at("ckpt"));
  std::vector<std::uint32_t> phonemes;
  for (auto id : parse_u64_list("phonemes", s.at("phonemes"))) {
    if (id >= ck.config.vocab_size) throw InputError("phoneme id " + std::to_string(id) + " outside vocabulary");
    phonemes.push_back(static_cast<std::uint32_t>(id));
  }
  const std::uint32_t speaker = s.at("speaker").empty() ? static_cast<std::uint32_t>(ck.config.n_speakers - 1)
                                                        : static_cast<std::uint32_t>(get_size(s, "speaker"));
  Graph g;
  BoundParams bound(g, ck.params, false);
  ForwardRequest request;
  request.phonemes = phonemes;
  request.speaker = SpeakerSelector::single(speaker);
  ForwardOutput fo = forward(bound, ck.config, request, ForwardMode::kInference);
  dsp::MelSpectrogram mel;
  mel.frames = fo.mel.value();
  write_mel_file(s.at("out_mel"), mel);
  out << "mel " << s.at("out_mel") << ": " << mel.num_frames() << " frames x " << mel.num_mels() << " bins\n";
  if (!s.at("out_pgm").empty()) write_file(s.at("out_pgm"), emit_spectrogram_image(mel.frames));
  if (!s.at("out_wav").empty()) {
    dsp::MelConfig mc;
    mc.n_mels = mel.num_mels();
    const auto gl = dsp::griffin_lim(mel, mc, static_cast<int>(get_size(s, "iterations")),
                                     parse_u64("seed", s.at("seed")));
    dsp::write_wav(s.at("out_wav"), gl.audio);
    out << "wav " << s.at("out_wav") << ": " << gl.audio.samples.size() << " samples at " << gl.audio.sample_rate
        << " Hz, final spectral convergence " << format_double(gl.convergence.back()) << "\n";
  }
  return kExitOk;
}

int cmd_grid(const Settings& s, std::ostream& out) {
  GridSpec spec = GridSpec::parse(text_of(read_file(s.at("spec"))));
  for (const char* key : {"reference", "data", "workers"}) {
    if (!s.at(key).empty()) spec.set(key, s.at(key));
  }
  spec.validate();
  if (spec.reference.empty() || spec.data.empty()) throw ConfigError("grid needs reference= and data= paths");
  out << "grid spec:\n";
  for (const auto& [k, v] : spec.to_map()) out << "  " << k << "=" << v << "\n";
  const Corpus corpus = load_corpus(spec.data);
  const Checkpoint ref = load_checkpoint(spec.reference);
  GridResult r = run_grid(spec, ref, corpus, [&](const CellResult& c) {
    out << "cell " << c.id() << " mel_mse " << format_double(c.metrics.mel_mse) << " " << c.status << "\n";
    out.flush();
  });
  write_grid_outputs(spec, r, s.at("out_dir"));
  for (const auto& [key, v] : r.median_mse()) {
    out << "median mel_mse omega " << format_double(key.first) << " size " << key.second << ": " << format_double(v)
        << "\n";
  }
  const auto failed = r.failed_cells();
  for (const auto& f : failed) out << "failed " << f << "\n";
  out << "wrote " << s.at("out_dir") << "/results.csv (" << r.cells.size() << " cells, " << failed.size()
      << " failed)\n";
  return failed.empty() ? kExitOk : kExitNumerical;
}

int cmd_evaluate(const Settings& s, std::ostream& out) {
  Metrics m;
  std::string what;
  if (!s.at("mel").empty()) {
    if (s.at("target").empty()) throw ConfigError("--mel needs --target");
    m = compare_mels(dsp::read_mel_file(s.at("mel")).frames, dsp::read_mel_file(s.at("target")).frames);
    what = "mel_mse=" + format_double(m.mel_mse) + "\nmel_l2=" + format_double(m.mel_l2) + "\n";
  } else {
    if (s.at("ckpt").empty() || s.at("data").empty()) throw ConfigError("evaluate needs --ckpt and --data, or --mel");
    const Checkpoint ck = load_checkpoint(s.at("ckpt"));
    const Corpus corpus = load_corpus(s.at("data"));
    const std::string& split = s.at("split");
    if (split != "test" && split != "train") throw ConfigError("split must be test or train");
    const auto items = corpus.select(SpeakerRole::kTarget, split == "test" ? Split::kTest : Split::kTrain);
    m = eval_objective(ck, corpus, items);
    what = "mel_mse=" + format_double(m.mel_mse) + "\nmel_l2=" + format_double(m.mel_l2) +
           "\ndur_mae=" + format_double(m.dur_mae) + "\nutterances=" + std::to_string(items.size()) + "\n";
  }
  out << what;
  if (!s.at("out").empty()) write_text(s.at("out"), what);
  return kExitOk;
}

int cmd_gradcheck(const Settings& s, std::ostream& out) {
  const auto cases = run_gradcheck_suite(static_cast<int>(get_size(s, "seeds")), parse_u64("seed", s.at("seed")));
  bool ok = true;
  for (const auto& c : cases) {
    ok = ok && c.passed();
    char line[160];
    std::snprintf(line, sizeof(line), "%-32s max_rel_error %.3e threshold %.0e %s\n", c.name.c_str(),
                  c.result.max_rel_error, c.threshold, c.passed() ? "ok" : "FAIL");
    out << line;
  }
  out << (ok ? "all gradient checks passed\n" : "gradient check FAILED\n");
  return ok ? kExitOk : kExitNumerical;
}

std::vector<Key> concat(std::vector<Key> a, const std::vector<Key>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::vector<Command> commands() {
  return {
      {"gen-data",
       "Generate the synthetic multi-speaker corpus",
       {{"out", "output corpus file", "", true},
        {"seed", "generator seed", "1"},
        {"speakers", "speaker count (last one is the target)", "3"},
        {"utterances", "utterance count", "660"},
        {"vocab", "phoneme vocabulary size", "32"},
        {"min_length", "shortest utterance in phonemes", "5"},
        {"max_length", "longest utterance in phonemes", "15"},
        {"test_size", "held-out target utterances", "20"}},
       cmd_gen_data},
      {"pretrain",
       "Train the reference model on the source speakers",
       concat(concat({{"data", "corpus file", "", true},
                      {"out", "output checkpoint", "", true},
                      {"log", "training log path (default <out>.log)", ""}},
                     kModelKeys),
              kTrainKeys),
       cmd_pretrain},
      {"finetune",
       "Fine-tune a copy of the reference on target-speaker data",
       concat({{"ref", "reference checkpoint", "", true},
               {"data", "corpus file", "", true},
               {"out", "output checkpoint", "", true},
               {"omega", "weight of the reference loss", "0"},
               {"size", "target utterances to use (0 = all)", "0"},
               {"log", "training log path (default <out>.log)", ""},
               {"cache_pseudo_labels", "reuse reference outputs across epochs", "true"}},
              kTrainKeys),
       cmd_finetune},
      {"synthesize",
       "Synthesize a mel (and optionally a waveform) from phoneme ids",
       {{"ckpt", "checkpoint", "", true},
        {"phonemes", "comma-separated phoneme ids", "", true},
        {"speaker", "speaker row (default: last row)", ""},
        {"out_mel", "output MEL1 file", "", true},
        {"out_wav", "output WAV file", ""},
        {"out_pgm", "output spectrogram image (PGM)", ""},
        {"iterations", "Griffin-Lim iterations", "60"},
        {"seed", "Griffin-Lim phase seed", "0"}},
       cmd_synthesize},
      {"grid",
       "Run the omega x size x seed fine-tuning grid",
       {{"spec", "grid spec file (key=value lines)", "", true},
        {"out_dir", "output directory", "", true},
        {"reference", "reference checkpoint (overrides the spec)", ""},
        {"data", "corpus file (overrides the spec)", ""},
        {"workers", "parallel cells (overrides the spec)", ""}},
       cmd_grid},
      {"evaluate",
       "Objective metrics of a checkpoint on the target split, or of one mel against another",
       {{"ckpt", "checkpoint", ""},
        {"data", "corpus file", ""},
        {"split", "target split: test or train", "test"},
        {"mel", "predicted MEL1 file", ""},
        {"target", "reference MEL1 file", ""},
        {"out", "also write metrics to this file", ""}},
       cmd_evaluate},
      {"gradcheck",
       "Finite-difference check of every op and the full training loss",
       {{"seeds", "random draws per case", "10"}, {"seed", "base seed", "1"}},
       cmd_gradcheck},
  };
}

int exit_code_for(const std::exception_ptr& e, std::ostream& err) {
  try {
    std::rethrow_exception(e);
  } catch (const IoError& x) {
    err << "error: " << x.what() << "\n";
    return kExitIo;
  } catch (const FormatError& x) {
    err << "error: " << x.what() << "\n";
    return kExitIo;
  } catch (const DivergenceError& x) {
    err << "error: " << x.what() << "\n";
    return kExitNumerical;
  } catch (const RunawayDurationError& x) {
    err << "error: " << x.what() << "\n";
    return kExitNumerical;
  } catch (const ReferenceMutationError& x) {
    err << "error: " << x.what() << "\n";
    return kExitNumerical;
  } catch (const ConfigError& x) {
    err << "error: " << x.what() << "\n";
    return kExitUsage;
  } catch (const InputError& x) {
    err << "error: " << x.what() << "\n";
    return kExitUsage;
  } catch (const DimensionError& x) {
    err << "error: " << x.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& x) {
    err << "internal error: " << x.what() << "\n";
    return 1;
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Reference-model fine-tuning for low-resource TTS"};
  app.name("rmkd");
  app.require_subcommand(0, 1);
  bool version = false;
  app.add_flag("--version", version, "print format versions and exit");

  const auto table = commands();
  struct Bound {
    CLI::App* app;
    std::string config;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
  };
  std::vector<Bound> bound(table.size());
  for (std::size_t i = 0; i < table.size(); ++i) {
    const Command& cmd = table[i];
    Bound& b = bound[i];
    b.app = app.add_subcommand(cmd.name, cmd.help);
    b.app->add_option("--config", b.config, "key=value file; flags override it");
    for (const Key& key : cmd.keys) {
      std::string help = key.help;
      if (key.required) help += " (required)";
      else if (!key.fallback.empty()) help += " [default " + key.fallback + "]";
      b.options[key.name] = b.app->add_option(flag_name(key.name), b.values[key.name], help);
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    for (const Bound& b : bound) {
      if (b.app->parsed()) {
        err << b.app->help();
        return kExitUsage;
      }
    }
    err << app.help();
    return kExitUsage;
  }

  if (version) {
    out << "rmkd " << RMKD_VERSION << "\n"
        << "RMKD1 " << kCheckpointVersion << "\n"
        << "MEL1 1\n"
        << "CORP " << kCorpusVersion << "\n";
    return kExitOk;
  }

  for (std::size_t i = 0; i < table.size(); ++i) {
    Bound& b = bound[i];
    if (!b.app->parsed()) continue;
    const Command& cmd = table[i];
    try {
      Settings settings;
      for (const Key& key : cmd.keys) settings[key.name] = key.fallback;
      if (!b.config.empty()) {
        for (const auto& [k, v] : parse_kv_text(text_of(read_file(b.config)))) {
          const std::string key = canonical(k);
          if (!settings.count(key)) throw ConfigError("unknown key '" + k + "' in " + b.config);
          settings[key] = v;
        }
      }
      for (const Key& key : cmd.keys) {
        if (b.options[key.name]->count() > 0) settings[key.name] = b.values[key.name];
      }
      for (const Key& key : cmd.keys) {
        if (key.required && settings[key.name].empty()) {
          err << "error: " << flag_name(key.name) << " is required\n" << b.app->help();
          return kExitUsage;
        }
      }
      out << "rmkd " << cmd.name << "\n";
      for (const auto& [k, v] : settings) out << "  " << k << "=" << (v.empty() ? "(default)" : v) << "\n";
      out << "seed=" << (settings.count("seed") ? settings["seed"] : std::string("none")) << "\n";
      out.flush();
      return cmd.action(settings, out);
    } catch (...) {
      return exit_code_for(std::current_exception(), err);
    }
  }
  out << app.help();
  return kExitUsage;
}

}  // namespace rmkd
