#include <cmath>
#include <numeric>

#include "rmkd/gradcheck.hpp"
#include "rmkd/rng.hpp"
#include "rmkd/train.hpp"

namespace rmkd {

namespace {

constexpr double kOpThreshold = 1e-5;
constexpr double kCompositeThreshold = 1e-4;
constexpr double kEps = 1e-5;

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Reduces any output to a scalar with distinct fixed weights per element.
Var weighted(Var y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, y.graph().constant(random_tensor(y.shape(), rng))));
}

struct OpCase {
  const char* name;
  std::function<std::vector<Tensor>(Rng&)> inputs;
  std::function<Var(std::span<const Var>)> op;
};

std::vector<OpCase> op_cases() {
  static const std::vector<std::uint32_t> ids = {2, 0, 3, 2};
  static const std::vector<std::uint32_t> repeats = {2, 0, 3};
  static const std::vector<double> row_mask = {1, 0, 1, 1};
  auto mat = [](std::size_t r, std::size_t c) { return [=](Rng& g) { return std::vector<Tensor>{random_tensor({r, c}, g)}; }; };
  auto two = [](Shape a, Shape b) {
    return [=](Rng& g) { return std::vector<Tensor>{random_tensor(a, g), random_tensor(b, g)}; };
  };
  return {
      {"add", two({3, 4}, {1, 4}), [](auto p) { return add(p[0], p[1]); }},
      {"sub", two({3, 4}, {3, 1}), [](auto p) { return sub(p[0], p[1]); }},
      {"mul", two({3, 4}, {1, 4}), [](auto p) { return mul(p[0], p[1]); }},
      {"scale", mat(3, 4), [](auto p) { return scale(p[0], -1.7); }},
      {"relu", mat(4, 5), [](auto p) { return relu(p[0]); }},
      {"exp", mat(3, 4), [](auto p) { return exp(p[0]); }},
      {"matmul", two({3, 4}, {4, 5}), [](auto p) { return matmul(p[0], p[1]); }},
      {"transpose", mat(3, 5), [](auto p) { return transpose(p[0]); }},
      {"reshape", mat(3, 4), [](auto p) { return reshape(p[0], {2, 6}); }},
      {"softmax", mat(3, 5), [](auto p) { return softmax(p[0]); }},
      {"layer_norm", two({3, 6}, {1, 6}),
       [](auto p) { return layer_norm(p[0], p[1], scale(p[1], 0.5)); }},
      {"conv1d", two({6, 3}, {3, 3, 4}), [](auto p) { return conv1d(p[0], p[1]); }},
      {"sum", mat(3, 4), [](auto p) { return scale(sum(p[0]), 0.7); }},
      {"mean_rows", mat(4, 3), [](auto p) { return mean_rows(p[0]); }},
      {"mse", two({3, 4}, {3, 4}), [](auto p) { return mse(p[0], p[1]); }},
      {"squared_error_sum", two({4, 3}, {4, 3}),
       [](auto p) { return squared_error_sum(p[0], p[1], row_mask); }},
      {"embedding", mat(5, 3), [](auto p) { return embedding(p[0], ids); }},
      {"repeat_rows", mat(3, 4), [](auto p) { return repeat_rows(p[0], repeats); }},
      {"slice_cols", mat(3, 6), [](auto p) { return slice_cols(p[0], 1, 4); }},
      {"pad_rows", mat(3, 2), [](auto p) { return pad_rows(p[0], 5); }},
      {"concat_cols", two({3, 2}, {3, 4}),
       [](auto p) {
         std::vector<Var> parts = {p[0], p[1]};
         return concat_cols(parts);
       }},
      {"dropout", mat(4, 5), [](auto p) { return dropout(p[0], 0.3, 17); }},
  };
}

// Tiny two-utterance corpus drawn from the synthetic oracle.
Corpus composite_corpus(Rng& rng, std::size_t vocab) {
  Corpus c;
  c.vocab_size = static_cast<std::uint32_t>(vocab);
  c.speakers = {SpeakerRole::kSource, SpeakerRole::kSource, SpeakerRole::kTarget};
  for (std::uint32_t s : {2u, 2u}) {
    Utterance u;
    u.speaker = s;
    const std::size_t len = 3 + rng.below(3);
    for (std::size_t i = 0; i < len; ++i) u.phonemes.push_back(static_cast<std::uint32_t>(rng.below(vocab)));
    auto [mel, targets] = oracle_mel(u.phonemes, s);
    u.mel = std::move(mel);
    u.variances = std::move(targets);
    c.utterances.push_back(std::move(u));
  }
  return c;
}

GradCheckResult composite_check(std::uint64_t seed) {
  Rng rng(seed);
  ModelConfig config = ModelConfig::desk();
  config.n_speakers = 3;
  config.pitch_mean = 150.0;
  config.pitch_scale = 50.0;
  config.energy_mean = 0.65;
  config.energy_scale = 0.1;
  const Corpus corpus = composite_corpus(rng, config.vocab_size);
  const ParameterStore store = init_parameters(config, seed);
  std::vector<std::size_t> items = {0, 1};
  const Batch batch = make_batches(corpus, items, 2, seed, 0).front();
  // Pseudo labels near the student output scale, as a frozen reference would give.
  std::vector<Tensor> labels;
  for (auto i : batch.items) {
    Tensor t = random_tensor({corpus.utterances[i].frames(), config.n_mels}, rng, -0.5, 0.5);
    for (double& v : t.storage()) v += std::log(dsp::kMelFloor);
    labels.push_back(std::move(t));
  }
  const double omega = 0.1 + rng.uniform() * 0.9;
  ScalarFn f = [&](Graph&, std::span<const Var> p) {
    BoundParams bound(store, std::vector<Var>(p.begin(), p.end()));
    std::vector<const Tensor*> ptrs;
    for (const Tensor& t : labels) ptrs.push_back(&t);
    return batch_loss(bound, config, corpus, batch, ptrs, omega).total;
  };
  GradCheckOptions opts;
  opts.jitter = 1e-3;
  opts.seed = seed;
  opts.max_coords_per_param = 2;
  return grad_check(f, store.tensors(), kEps, opts);
}

void keep_worst(GradCheckCase& c, const GradCheckResult& r) {
  const std::size_t checked = c.result.checked + r.checked;
  if (r.max_rel_error >= c.result.max_rel_error) c.result = r;
  c.result.checked = checked;
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(int seeds, std::uint64_t base_seed) {
  std::vector<GradCheckCase> cases;
  std::uint64_t case_index = 0;
  for (const OpCase& op : op_cases()) {
    GradCheckCase c{std::string("op.") + op.name, kOpThreshold, {}};
    ++case_index;
    for (int s = 0; s < seeds; ++s) {
      const std::uint64_t seed = Rng::mix(Rng::mix(base_seed, case_index), static_cast<std::uint64_t>(s));
      Rng rng(seed);
      std::vector<Tensor> inputs = op.inputs(rng);
      ScalarFn f = [&](Graph&, std::span<const Var> p) { return weighted(op.op(p), seed ^ 0x9e37); };
      GradCheckOptions opts;
      opts.jitter = 1e-3;
      opts.seed = seed;
      keep_worst(c, grad_check(f, inputs, kEps, opts));
    }
    cases.push_back(c);
  }
  GradCheckCase composite{"composite.backbone_total_loss", kCompositeThreshold, {}};
  ++case_index;
  for (int s = 0; s < seeds; ++s) {
    keep_worst(composite, composite_check(Rng::mix(Rng::mix(base_seed, case_index), static_cast<std::uint64_t>(s))));
  }
  cases.push_back(composite);
  return cases;
}

}  // namespace rmkd
