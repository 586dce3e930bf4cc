#include <benchmark/benchmark.h>

#include "latchkit/models.hpp"
#include "latchkit/world.hpp"

namespace lk = latchkit;

namespace {

lk::Tensor latent(uint64_t seed) {
  lk::Rng rng(seed);
  return rng.normal({lk::kFrames, lk::kLatentChannels});
}

void BM_Matmul(benchmark::State& state) {
  const int64_t n = state.range(0);
  lk::Rng rng(1);
  lk::Tensor a = rng.normal({n, n}), b = rng.normal({n, n});
  for (auto _ : state) benchmark::DoNotOptimize(lk::ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(128)->Arg(256);

void BM_DenoiserForward(benchmark::State& state) {
  lk::Denoiser den;
  lk::Tensor z = latent(2);
  for (auto _ : state) benchmark::DoNotOptimize(den.velocity(z, 0.5, 1));
}
BENCHMARK(BM_DenoiserForward)->Unit(benchmark::kMillisecond);

void BM_DenoiserBackward(benchmark::State& state) {
  lk::Denoiser den;
  lk::Tensor z = latent(3);
  z.set_requires_grad(true);
  for (auto _ : state) {
    lk::Graph g;
    g.backward(lk::ops::sum(lk::ops::square(den.velocity(z, 0.5, 1))));
  }
}
BENCHMARK(BM_DenoiserBackward)->Unit(benchmark::kMillisecond);

void BM_LatchBackward(benchmark::State& state) {
  lk::LatchHead head(lk::ControlKind::kBeats, lk::NoiseMode::kBackward);
  lk::Tensor z = latent(4);
  z.set_requires_grad(true);
  for (auto _ : state) {
    lk::Graph g;
    g.backward(lk::ops::sum(head.predict(z, 0.5)));
  }
}
BENCHMARK(BM_LatchBackward)->Unit(benchmark::kMillisecond);

void BM_DecoderForward(benchmark::State& state) {
  lk::Vae vae;
  lk::Tensor z = latent(5);
  for (auto _ : state) benchmark::DoNotOptimize(vae.decode_raw(z));
}
BENCHMARK(BM_DecoderForward)->Unit(benchmark::kMillisecond);

void BM_DecoderBackward(benchmark::State& state) {
  lk::Vae vae;
  lk::Tensor z = latent(6);
  z.set_requires_grad(true);
  for (auto _ : state) {
    lk::Graph g;
    g.backward(lk::ops::sum(lk::extract_beats(vae.decode_raw(z))));
  }
}
BENCHMARK(BM_DecoderBackward)->Unit(benchmark::kMillisecond);

void BM_Extractor(benchmark::State& state) {
  const auto kind = static_cast<lk::ControlKind>(state.range(0));
  lk::Clip clip = lk::synth(lk::WorldSpec{});
  lk::Tensor wave = lk::Tensor::from({lk::kSamples}, clip.samples);
  for (auto _ : state) benchmark::DoNotOptimize(lk::extract(kind, wave));
}
BENCHMARK(BM_Extractor)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
