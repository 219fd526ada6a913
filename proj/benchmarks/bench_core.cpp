#include <benchmark/benchmark.h>

#include "pill/data.hpp"
#include "pill/model.hpp"
#include "pill/rng.hpp"
#include "pill/tensor.hpp"
#include "pill/train.hpp"

namespace {

using namespace pill;

Tensor random_tensor(const Shape& shape, Rng& rng) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = rng.normal(0.0, 0.5);
  return Tensor::from(shape, std::move(v));
}

void BM_matmul(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(1);
  Tensor a = random_tensor({n, n}, rng);
  Tensor b = random_tensor({n, n}, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(matmul(a, b).values().data());
  }
  state.SetItemsProcessed(state.iterations() * 2ll * n * n * n);
}
BENCHMARK(BM_matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_softmax(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(2);
  Tensor x = random_tensor({n, n}, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(softmax_lastdim(x).values().data());
  }
}
BENCHMARK(BM_softmax)->Arg(16)->Arg(128);

ModelConfig desk_config(int vocab) {
  ModelConfig cfg;
  cfg.d_model = 64;
  cfg.n_layers = 4;
  cfg.n_heads = 4;
  cfg.d_ffn = 512;
  cfg.vocab_size = vocab;
  cfg.max_seq_len = 128;
  cfg.d_vis = 16;
  cfg.queries_per_image = 4;
  cfg.adapter_dim = 8;
  return cfg;
}

void BM_model_forward(benchmark::State& state) {
  Vocabulary vocab;
  DataConfig dcfg;
  Rng rng(3);
  PillModel model = PillModel::init(desk_config(vocab.size()), rng);
  const auto data = generate_dataset(4, 7, dcfg, vocab);
  const TokenSequence seq = encode_sample(data[0], vocab, dcfg, 128);
  for (auto _ : state) {
    benchmark::DoNotOptimize(model.forward(seq).values().data());
  }
}
BENCHMARK(BM_model_forward);

void BM_train_step(benchmark::State& state) {
  Vocabulary vocab;
  DataConfig dcfg;
  Rng rng(4);
  PillModel model = PillModel::init(desk_config(vocab.size()), rng);
  const auto data = generate_dataset(8, 7, dcfg, vocab);
  TrainStageSpec spec = TrainStageSpec::stage2();
  apply_stage_flags(model, spec);
  std::vector<ParamRef> trainable;
  for (ParamRef& p : enumerate_params(model))
    if (param_in_stage(p, spec, model.cfg.n_layers)) trainable.push_back(p);
  AdamW opt(trainable, {});
  for (auto _ : state) {
    Tensor acc;
    for (int i = 0; i < 4; ++i) {
      const TokenSequence seq = encode_sample(data[static_cast<size_t>(i)], vocab, dcfg, 128);
      Tensor l = autoregressive_loss(model.forward(seq), seq);
      acc = acc.defined() ? add(acc, l) : l;
    }
    Tensor loss = scale(acc, 0.25);
    backward(loss);
    opt.step(1e-3, 1.0);
    opt.zero_grads();
    benchmark::DoNotOptimize(loss.item());
  }
}
BENCHMARK(BM_train_step);

}  // namespace

BENCHMARK_MAIN();
