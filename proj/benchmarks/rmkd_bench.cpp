#include <benchmark/benchmark.h>

#include <cmath>
#include <numbers>

#include "rmkd/dsp.hpp"
#include "rmkd/rng.hpp"
#include "rmkd/train.hpp"

using namespace rmkd;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (double& v : t.storage()) v = rng.uniform(-1, 1);
  return t;
}

void BM_MatmulForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor({n, n}, 1);
  const Tensor b = random_tensor({n, n}, 2);
  for (auto _ : state) {
    Graph g;
    Var x = g.parameter(a);
    Var y = g.parameter(b);
    Var loss = sum(matmul(x, y));
    g.backward(loss);
    benchmark::DoNotOptimize(g.grad(x).data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(3 * n * n * n));
}
BENCHMARK(BM_MatmulForwardBackward)->Arg(32)->Arg(64)->Arg(128);

void BM_Fft(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  dsp::Fft plan(n);
  Rng rng(3);
  std::vector<dsp::Complex> x(n);
  for (auto& c : x) c = dsp::Complex(rng.uniform(-1, 1), 0.0);
  for (auto _ : state) {
    plan.forward(x);
    benchmark::DoNotOptimize(x.data());
  }
}
BENCHMARK(BM_Fft)->Arg(256)->Arg(1024)->Arg(4096);

void BM_MelSpectrogramOneSecond(benchmark::State& state) {
  dsp::AudioSignal s;
  s.sample_rate = 22050;
  for (std::size_t i = 0; i < 22050; ++i) s.samples.push_back(0.5 * std::sin(2 * std::numbers::pi * 440 * i / 22050.0));
  for (auto _ : state) benchmark::DoNotOptimize(dsp::mel_spectrogram(s).frames.data().data());
}
BENCHMARK(BM_MelSpectrogramOneSecond)->Unit(benchmark::kMillisecond);

void BM_FinetuneStep(benchmark::State& state) {
  SyntheticCorpusConfig sc;
  sc.n_utterances = 90;
  sc.test_size = 5;
  const Corpus corpus = gen_synthetic_corpus(sc);
  TrainConfig pre = TrainConfig::pretrain_defaults();
  pre.steps = 1;
  const Checkpoint ref = pretrain(corpus, ModelConfig::desk(), pre).checkpoint;
  TrainConfig t = TrainConfig::finetune_defaults();
  t.omega = static_cast<double>(state.range(0)) / 10.0;
  t.steps = 1u << 30;
  FinetuneSession session(ref, corpus, corpus.select(SpeakerRole::kTarget, Split::kTrain), t);
  for (auto _ : state) benchmark::DoNotOptimize(session.step().loss.total);
}
BENCHMARK(BM_FinetuneStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
