// Serial reference kernels against the OpenMP/GEMM kernels, plus one full forward pass.
//   ./funet_bench --benchmark_filter=Conv

#include <benchmark/benchmark.h>

#include <vector>

#include "funet/kernels.hpp"
#include "funet/model.hpp"
#include "funet/random.hpp"

namespace k = funet::kernels;

namespace {

std::vector<float> noise(std::size_t n, std::uint64_t seed)
{
    funet::Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
    return v;
}

// decoder-like 3x3 conv: batch 10 (2 clips x 5 frames), C -> C at 64x112
k::ConvGeometry conv_geometry(std::int64_t channels)
{
    k::ConvGeometry g;
    g.batch = 10;
    g.in_channels = g.out_channels = channels;
    g.in_h = 64;
    g.in_w = 112;
    g.kernel_h = g.kernel_w = 3;
    g.pad_h = g.pad_w = 1;
    g.resolve();
    return g;
}

template <bool Parallel>
void BM_Conv3x3(benchmark::State& state)
{
    const auto g = conv_geometry(state.range(0));
    const auto x = noise(g.batch * g.in_channels * g.in_h * g.in_w, 1);
    const auto w = noise(g.out_channels * g.patch_size(), 2);
    const auto b = noise(g.out_channels, 3);
    std::vector<float> y(g.batch * g.out_channels * g.out_h * g.out_w);
    for (auto _ : state) {
        if constexpr (Parallel) k::parallel::conv2d_forward<float>(g, x, w, b, y);
        else k::reference::conv2d_forward<float>(g, x, w, b, y);
        benchmark::DoNotOptimize(y.data());
    }
    state.SetItemsProcessed(state.iterations() * g.batch * g.out_channels * g.out_h * g.out_w * g.patch_size());
}

template <bool Parallel>
void BM_Conv3x3Backward(benchmark::State& state)
{
    const auto g = conv_geometry(state.range(0));
    const auto x = noise(g.batch * g.in_channels * g.in_h * g.in_w, 1);
    const auto w = noise(g.out_channels * g.patch_size(), 2);
    const auto dy = noise(g.batch * g.out_channels * g.out_h * g.out_w, 3);
    std::vector<float> dx(x.size()), dw(w.size()), db(g.out_channels);
    for (auto _ : state) {
        if constexpr (Parallel) k::parallel::conv2d_backward<float>(g, x, w, dy, dx, dw, db);
        else k::reference::conv2d_backward<float>(g, x, w, dy, dx, dw, db);
        benchmark::DoNotOptimize(dx.data());
    }
}

// attention-like products: (heads*batch) x (N x d) * (d x N)
template <bool Parallel>
void BM_Matmul(benchmark::State& state)
{
    const std::int64_t batch = 20, m = state.range(0), kk = 16, n = state.range(0);
    const auto a = noise(batch * m * kk, 1);
    const auto b = noise(batch * kk * n, 2);
    std::vector<float> c(batch * m * n);
    for (auto _ : state) {
        if constexpr (Parallel) k::parallel::matmul_batched<float>(batch, m, kk, n, a, b, c);
        else k::reference::matmul_batched<float>(batch, m, kk, n, a, b, c);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * batch * m * kk * n);
}

template <bool Parallel>
void BM_Resize(benchmark::State& state)
{
    k::ResizeGeometry g;
    g.planes = 10 * 16;
    g.in_h = 32;
    g.in_w = 56;
    g.out_h = 64;
    g.out_w = 112;
    const auto x = noise(g.planes * g.in_h * g.in_w, 1);
    std::vector<float> y(g.planes * g.out_h * g.out_w);
    for (auto _ : state) {
        if constexpr (Parallel) k::parallel::resize_bilinear_forward<float>(g, x, y);
        else k::reference::resize_bilinear_forward<float>(g, x, y);
        benchmark::DoNotOptimize(y.data());
    }
}

void BM_FUnetForward(benchmark::State& state)
{
    funet::FUnetConfig cfg;
    cfg.base_channels = 8;
    cfg.depth = 3;
    cfg.csa_grid = 8;
    cfg.csa_heads = 2;
    cfg.input_h = static_cast<int>(state.range(0));
    cfg.input_w = static_cast<int>(state.range(1));
    const funet::FUnet<float> model(cfg, funet::Variant::Full, 0);
    const auto clip = funet::Tensor::from_vector({1, cfg.frames, 3, cfg.input_h, cfg.input_w},
                                                 noise(static_cast<std::size_t>(cfg.frames) * 3 * cfg.input_h * cfg.input_w, 4));
    for (auto _ : state) benchmark::DoNotOptimize(model.forward(clip));
    state.counters["fps"] = benchmark::Counter(static_cast<double>(state.iterations() * cfg.frames),
                                               benchmark::Counter::kIsRate);
}

}  // namespace

BENCHMARK(BM_Conv3x3<false>)->Name("Conv3x3/reference")->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv3x3<true>)->Name("Conv3x3/parallel")->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv3x3Backward<false>)->Name("Conv3x3Backward/reference")->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv3x3Backward<true>)->Name("Conv3x3Backward/parallel")->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Matmul<false>)->Name("Matmul/reference")->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Matmul<true>)->Name("Matmul/parallel")->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Resize<false>)->Name("Resize/reference")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Resize<true>)->Name("Resize/parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_FUnetForward)->Args({64, 112})->Args({256, 448})->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
