#include <benchmark/benchmark.h>

#include <xmodal/embedding_store.hpp>
#include <xmodal/evaluation.hpp>
#include <xmodal/losses.hpp>
#include <xmodal/student.hpp>
#include <xmodal/synthetic_teacher.hpp>
#include <xmodal/trainer.hpp>

#include <cstdlib>

using namespace xmodal;

namespace {

Matrix random_unit(Eigen::Index rows, Eigen::Index cols, unsigned seed) {
  std::srand(seed);
  return l2_normalize(Matrix(Matrix::Random(rows, cols)));
}

}  // namespace

// args: batch N, anchors M
static void BM_TotalLoss(benchmark::State& state) {
  const auto n = state.range(0);
  const auto m = state.range(1);
  const Matrix z = Matrix::Random(n, 512);
  const Matrix k = random_unit(n, 512, 1);
  const Matrix a = random_unit(m, 512, 2);
  LossConfig cfg;
  for (auto _ : state) {
    auto r = total_loss(z, k, a, cfg);
    benchmark::DoNotOptimize(r.total);
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_TotalLoss)->Args({256, 10})->Args({256, 100})->Args({256, 1000});

static void BM_ForwardBackward(benchmark::State& state) {
  const auto arch = state.range(0) == 0 ? Architecture::Linear : Architecture::Mlp;
  const auto model = StudentModel::create(arch, 1024, 512, 1024, 0);
  const Matrix x = Matrix::Random(256, 1024);
  const Matrix g = Matrix::Random(256, 512);
  for (auto _ : state) {
    ForwardCache cache;
    benchmark::DoNotOptimize(forward(model, x, cache).data());
    auto grads = backward(model, cache, g);
    benchmark::DoNotOptimize(grads.front().weight.data());
  }
  state.SetItemsProcessed(state.iterations() * 256);
}
BENCHMARK(BM_ForwardBackward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

static void BM_TransferEpoch(benchmark::State& state) {
  SynthSpec spec;
  spec.samples_per_class = static_cast<std::size_t>(state.range(0));
  const auto bundle = generate(spec).bundle;
  TrainConfig cfg;
  cfg.epochs = 1;
  for (auto _ : state) {
    auto r = run_transfer(bundle, cfg);
    benchmark::DoNotOptimize(r.state.step);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(bundle.size()));
}
BENCHMARK(BM_TransferEpoch)->Arg(200)->Arg(2000)->Unit(benchmark::kMillisecond);

static void BM_RetrieveTopK(benchmark::State& state) {
  EmbeddingSet gallery;
  gallery.data = random_unit(state.range(0), 512, 3);
  gallery.ids.assign(static_cast<std::size_t>(state.range(0)), "x");
  gallery.normalized = true;
  const RowVector query = random_unit(1, 512, 4).row(0);
  for (auto _ : state) {
    auto r = retrieve_topk(query, gallery, 10);
    benchmark::DoNotOptimize(r.rows.data());
  }
}
BENCHMARK(BM_RetrieveTopK)->Arg(1000)->Arg(100000);
BENCHMARK_MAIN();
