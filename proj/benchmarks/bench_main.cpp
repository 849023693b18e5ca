#include <benchmark/benchmark.h>

#include "arcd/arch.hpp"
#include "arcd/data.hpp"
#include "arcd/loss.hpp"
#include "arcd/metrics.hpp"
#include "arcd/ops.hpp"

using namespace arcd;

namespace {

Tensor<float> random_tensor(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(static_cast<std::size_t>(numel(s)));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  return Tensor<float>(std::move(s), std::move(v));
}

}  // namespace

// 3x3 conv at the level-2 shape of a batch-4, 64x64 step.
static void BM_Conv2d3x3(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0)), hw = static_cast<int>(state.range(1));
  auto x = random_tensor({4, c, hw, hw}, 1), w = random_tensor({c, c, 3, 3}, 2);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, Tensor<float>{}, 1, 1).data().data());
  state.SetItemsProcessed(state.iterations() * 4LL * c * c * 9 * hw * hw);
}
BENCHMARK(BM_Conv2d3x3)->Args({16, 16})->Args({32, 8})->Args({128, 2})->Unit(benchmark::kMicrosecond);

static void BM_Conv3dTemporal(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0)), hw = static_cast<int>(state.range(1));
  auto x = random_tensor({4, c, 2, hw, hw}, 3), w = random_tensor({c, c, 2, 3, 3}, 4);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv3d(x, w, Tensor<float>{}, {0, 1, 1}).data().data());
}
BENCHMARK(BM_Conv3dTemporal)->Args({16, 16})->Args({64, 4})->Unit(benchmark::kMicrosecond);

static void BM_ForwardEval(benchmark::State& state) {
  ARCDNet<float> net(ArchConfig{}, AblationConfig{}, 0);
  auto a = random_tensor({1, 3, 64, 64}, 5), b = random_tensor({1, 3, 64, 64}, 6);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(a, b, false).change.data().data());
}
BENCHMARK(BM_ForwardEval)->Unit(benchmark::kMillisecond);

// One training step's worth of work minus the optimizer: forward, loss, backward.
static void BM_ForwardBackward(benchmark::State& state) {
  const int batch = static_cast<int>(state.range(0));
  ARCDNet<float> net(ArchConfig{}, AblationConfig{}, 0);
  SyntheticSceneSpec spec;
  auto batch_data = make_batch<float>(generate(spec, batch));
  for (auto _ : state) {
    auto out = net.forward(batch_data.t1, batch_data.t2, true);
    auto loss = total_loss(out, batch_data.gt, net.ablation());
    backward(loss.total);
  }
}
BENCHMARK(BM_ForwardBackward)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

static void BM_ConfusionScore(benchmark::State& state) {
  Rng rng(7);
  std::vector<std::uint8_t> p(512 * 512), g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = rng.bernoulli(0.3), g[i] = rng.bernoulli(0.3);
  for (auto _ : state) benchmark::DoNotOptimize(score(confusion(p, g)).kappa);
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(p.size()) * 2);
}
BENCHMARK(BM_ConfusionScore);

static void BM_GenerateScene(benchmark::State& state) {
  SyntheticSceneSpec spec;
  int i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(generate_one(spec, i++).gt.data.data());
}
BENCHMARK(BM_GenerateScene)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
