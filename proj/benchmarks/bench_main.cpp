#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "hpr/attacks.hpp"
#include "hpr/dataset.hpp"
#include "hpr/diagnostics.hpp"
#include "hpr/hyperopt.hpp"
#include "hpr/model.hpp"
#include "hpr/trainer.hpp"

using namespace hpr;

namespace {

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(gen);
  return v;
}

Classifier desk_model() { return Classifier::initialize(ModelSpec::mlp(32, 10, {64, 64}), 1); }

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = Tensor::from({n, n}, noise(n * n, 1));
  const Tensor b = Tensor::from({n, n}, noise(n * n, 2));
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_InputHvp(benchmark::State& state) {
  const Classifier model = desk_model();
  const std::vector<std::size_t> y{3};
  LossFn f = [&](const Tensor& x) { return model.loss(x, y); };
  const Tensor x = Tensor::from({1, 32}, noise(32, 3));
  const Tensor v = Tensor::from({1, 32}, noise(32, 4));
  for (auto _ : state) benchmark::DoNotOptimize(hvp(f, x, v));
}
BENCHMARK(BM_InputHvp);

void BM_ParamHvp(benchmark::State& state) {
  const Classifier model = desk_model();
  GeneratorConfig g;
  g.classes = 10;
  g.dims = 32;
  g.per_class = static_cast<std::size_t>(state.range(0)) / 10;
  const Dataset ds = generate(g);
  const Tensor x = ds.inputs();
  MultiLossFn f = [&](const std::vector<Tensor>& p) {
    return softmax_cross_entropy(forward(model.spec(), p, x), ds.labels);
  };
  const auto params = model.params().tensors();
  std::vector<Tensor> dir;
  for (const Tensor& p : params) dir.push_back(Tensor::from(p.shape(), noise(p.numel(), 5)));
  for (auto _ : state) benchmark::DoNotOptimize(hvp(f, params, dir));
}
BENCHMARK(BM_ParamHvp)->Arg(100)->Arg(1000);

void BM_SquareAttack(benchmark::State& state) {
  const Classifier model = desk_model();
  const auto x = noise(32, 6);
  const std::size_t y = model.predict(x);
  AttackBudget b;
  b.queries = static_cast<std::size_t>(state.range(0));
  LogitOracle f = [&](std::span<const double> p) { return model.logits(as_batch(p)).to_vector(); };
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(square_attack(f, x, y, b, ++seed));
}
BENCHMARK(BM_SquareAttack)->Arg(100)->Arg(500);

void BM_NondominatedSort(benchmark::State& state) {
  const auto v = noise(2 * static_cast<std::size_t>(state.range(0)), 7);
  std::vector<Objectives> pts;
  for (std::size_t i = 0; i + 1 < v.size(); i += 2) pts.push_back({v[i], v[i + 1]});
  for (auto _ : state) benchmark::DoNotOptimize(nondominated_sort(pts));
}
BENCHMARK(BM_NondominatedSort)->Arg(40)->Arg(200);

void BM_TrainEpoch(benchmark::State& state) {
  GeneratorConfig g;
  g.classes = 10;
  g.dims = 32;
  g.per_class = 100;
  const Dataset ds = generate(g);
  HyperParams hp;
  hp.epochs = 1;
  for (auto _ : state) benchmark::DoNotOptimize(train(ModelSpec::mlp(32, 10, {64, 64}), ds, hp, 1));
}
BENCHMARK(BM_TrainEpoch)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
