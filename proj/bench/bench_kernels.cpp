// OpenMP kernels against the serial reference loops.
//
//   bench_kernels --benchmark_filter=conv
//
// Shapes follow TinyRes-8 on 32x32 inputs at batch 32. Set OMP_NUM_THREADS
// to vary the parallel side.

#include <benchmark/benchmark.h>

#include <span>
#include <vector>

#include "dcm/common/random.hpp"
#include "dcm/kernels/kernels.hpp"

namespace {

namespace k = dcm::kernels;
namespace ref = dcm::kernels::reference;

std::vector<float> filled(std::size_t n, std::uint64_t seed) {
  dcm::Engine eng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(dcm::uniform(eng, -1.0, 1.0));
  return v;
}

// (channels, side, stride) of the stages: 16@32, 32@16 downsampling, 64@8.
k::ConvGeometry geometry(const benchmark::State& state) {
  k::ConvGeometry g;
  g.batch = 32;
  g.in_channels = static_cast<std::size_t>(state.range(0));
  g.out_channels = static_cast<std::size_t>(state.range(0) * state.range(2));
  g.height = g.width = static_cast<std::size_t>(state.range(1));
  g.stride = static_cast<std::size_t>(state.range(2));
  return g;
}

void conv_args(benchmark::internal::Benchmark* b) {
  b->Args({16, 32, 1})->Args({16, 32, 2})->Args({64, 8, 1})->Unit(benchmark::kMillisecond);
}

void set_flops(benchmark::State& state, const k::ConvGeometry& g) {
  const double flops = 2.0 * g.batch * g.out_channels * g.out_pixels() * g.patch_size();
  state.counters["GFLOP/s"] =
      benchmark::Counter(flops, benchmark::Counter::kIsIterationInvariantRate,
                         benchmark::Counter::kIs1000);
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = filled(n * n, 1);
  const auto b = filled(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::gemm<float>(false, false, n, n, n, a, b, c, false);
    } else {
      ref::gemm<float>(false, false, n, n, n, a, b, c, false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] =
      benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate,
                         benchmark::Counter::kIs1000);
}

template <bool Parallel>
void BM_ConvForward(benchmark::State& state) {
  const auto g = geometry(state);
  const auto x = filled(g.batch * g.in_channels * g.in_pixels(), 3);
  const auto w = filled(g.out_channels * g.patch_size(), 4);
  std::vector<float> y(g.batch * g.out_channels * g.out_pixels());
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::conv2d_forward<float>(x, w, {}, y, g);
    } else {
      ref::conv2d_forward<float>(x, w, {}, y, g);
    }
    benchmark::DoNotOptimize(y.data());
  }
  set_flops(state, g);
}

template <bool Parallel>
void BM_ConvBackwardInput(benchmark::State& state) {
  const auto g = geometry(state);
  const auto dy = filled(g.batch * g.out_channels * g.out_pixels(), 5);
  const auto w = filled(g.out_channels * g.patch_size(), 6);
  std::vector<float> dx(g.batch * g.in_channels * g.in_pixels());
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::conv2d_backward_input<float>(dy, w, dx, g);
    } else {
      ref::conv2d_backward_input<float>(dy, w, dx, g);
    }
    benchmark::DoNotOptimize(dx.data());
  }
  set_flops(state, g);
}

template <bool Parallel>
void BM_ConvBackwardWeight(benchmark::State& state) {
  const auto g = geometry(state);
  const auto x = filled(g.batch * g.in_channels * g.in_pixels(), 7);
  const auto dy = filled(g.batch * g.out_channels * g.out_pixels(), 8);
  std::vector<float> dw(g.out_channels * g.patch_size());
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::conv2d_backward_weight<float>(x, dy, dw, g);
    } else {
      ref::conv2d_backward_weight<float>(x, dy, dw, g);
    }
    benchmark::DoNotOptimize(dw.data());
  }
  set_flops(state, g);
}

template <bool Parallel>
void BM_BatchNorm(benchmark::State& state) {
  const std::size_t n = 32, hw = 32 * 32;
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = filled(n * c * hw, 9);
  const auto dy = filled(n * c * hw, 10);
  const auto gamma = filled(c, 11);
  const std::vector<float> inv_std(c, 1.0f);
  std::vector<float> mean(c), var(c), dx(x.size()), dgamma(c), dbeta(c);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::channel_moments<float>(x, n, c, hw, mean, var);
      k::batchnorm_backward<float>(dy, x, gamma, inv_std, dx, dgamma, dbeta, n, c, hw);
    } else {
      ref::channel_moments<float>(x, n, c, hw, mean, var);
      ref::batchnorm_backward<float>(dy, x, gamma, inv_std, dx, dgamma, dbeta, n, c, hw);
    }
    benchmark::DoNotOptimize(dx.data());
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * 3 * x.size() * sizeof(float)));
}

BENCHMARK(BM_Gemm<true>)->Name("gemm/openmp")->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Gemm<false>)->Name("gemm/reference")->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/openmp")->Apply(conv_args);
BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/reference")->Apply(conv_args);
BENCHMARK(BM_ConvBackwardInput<true>)->Name("conv_backward_input/openmp")->Apply(conv_args);
BENCHMARK(BM_ConvBackwardInput<false>)->Name("conv_backward_input/reference")->Apply(conv_args);
BENCHMARK(BM_ConvBackwardWeight<true>)->Name("conv_backward_weight/openmp")->Apply(conv_args);
BENCHMARK(BM_ConvBackwardWeight<false>)->Name("conv_backward_weight/reference")->Apply(conv_args);
BENCHMARK(BM_BatchNorm<true>)->Name("batchnorm/openmp")->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BatchNorm<false>)->Name("batchnorm/reference")->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
