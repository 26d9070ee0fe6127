#include <algorithm>
#include <cmath>

#include "funet/kernels.hpp"
#include "funet/tensor.hpp"

namespace funet::kernels {

void ConvGeometry::resolve()
{
    const auto span_h = dilation_h * (kernel_h - 1) + 1;
    const auto span_w = dilation_w * (kernel_w - 1) + 1;
    if (stride_h < 1 || stride_w < 1 || dilation_h < 1 || dilation_w < 1 || pad_h < 0 || pad_w < 0) {
        throw ShapeError("conv2d: stride and dilation must be positive and padding nonnegative");
    }
    if (in_h + 2 * pad_h < span_h) {
        throw ShapeError("conv2d: height " + std::to_string(in_h) + " with padding " + std::to_string(pad_h) +
                         " is smaller than the dilated kernel height " + std::to_string(span_h));
    }
    if (in_w + 2 * pad_w < span_w) {
        throw ShapeError("conv2d: width " + std::to_string(in_w) + " with padding " + std::to_string(pad_w) +
                         " is smaller than the dilated kernel width " + std::to_string(span_w));
    }
    out_h = (in_h + 2 * pad_h - span_h) / stride_h + 1;
    out_w = (in_w + 2 * pad_w - span_w) / stride_w + 1;
}

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w, std::span<const T> bias,
                    std::span<T> y)
{
    for (std::int64_t b = 0; b < g.batch; ++b) {
        for (std::int64_t co = 0; co < g.out_channels; ++co) {
            for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
                for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
                    T acc = bias.empty() ? T(0) : bias[co];
                    for (std::int64_t ci = 0; ci < g.in_channels; ++ci) {
                        for (std::int64_t ky = 0; ky < g.kernel_h; ++ky) {
                            const auto iy = oy * g.stride_h - g.pad_h + ky * g.dilation_h;
                            if (iy < 0 || iy >= g.in_h) continue;
                            for (std::int64_t kx = 0; kx < g.kernel_w; ++kx) {
                                const auto ix = ox * g.stride_w - g.pad_w + kx * g.dilation_w;
                                if (ix < 0 || ix >= g.in_w) continue;
                                acc += x[((b * g.in_channels + ci) * g.in_h + iy) * g.in_w + ix] *
                                       w[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx];
                            }
                        }
                    }
                    y[((b * g.out_channels + co) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w, std::span<const T> dy,
                     std::span<T> dx, std::span<T> dw, std::span<T> dbias)
{
    for (std::int64_t b = 0; b < g.batch; ++b) {
        for (std::int64_t co = 0; co < g.out_channels; ++co) {
            for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
                for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
                    const T go = dy[((b * g.out_channels + co) * g.out_h + oy) * g.out_w + ox];
                    if (!dbias.empty()) dbias[co] += go;
                    for (std::int64_t ci = 0; ci < g.in_channels; ++ci) {
                        for (std::int64_t ky = 0; ky < g.kernel_h; ++ky) {
                            const auto iy = oy * g.stride_h - g.pad_h + ky * g.dilation_h;
                            if (iy < 0 || iy >= g.in_h) continue;
                            for (std::int64_t kx = 0; kx < g.kernel_w; ++kx) {
                                const auto ix = ox * g.stride_w - g.pad_w + kx * g.dilation_w;
                                if (ix < 0 || ix >= g.in_w) continue;
                                const auto xi = ((b * g.in_channels + ci) * g.in_h + iy) * g.in_w + ix;
                                const auto wi = ((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx;
                                if (!dx.empty()) dx[xi] += go * w[wi];
                                if (!dw.empty()) dw[wi] += go * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void matmul_batched(std::int64_t batch, std::int64_t m, std::int64_t k, std::int64_t n, std::span<const T> a,
                    std::span<const T> b, std::span<T> c)
{
    for (std::int64_t p = 0; p < batch; ++p) {
        for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t j = 0; j < n; ++j) {
                T acc = 0;
                for (std::int64_t q = 0; q < k; ++q) acc += a[(p * m + i) * k + q] * b[(p * k + q) * n + j];
                c[(p * m + i) * n + j] = acc;
            }
        }
    }
}

template <typename T>
void matmul_batched_backward(std::int64_t batch, std::int64_t m, std::int64_t k, std::int64_t n,
                             std::span<const T> a, std::span<const T> b, std::span<const T> dc, std::span<T> da,
                             std::span<T> db)
{
    for (std::int64_t p = 0; p < batch; ++p) {
        for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t j = 0; j < n; ++j) {
                const T g = dc[(p * m + i) * n + j];
                for (std::int64_t q = 0; q < k; ++q) {
                    if (!da.empty()) da[(p * m + i) * k + q] += g * b[(p * k + q) * n + j];
                    if (!db.empty()) db[(p * k + q) * n + j] += g * a[(p * m + i) * k + q];
                }
            }
        }
    }
}

namespace {

struct Tap {
    std::int64_t i0, i1;
    double frac;
};

Tap source_tap(std::int64_t dst, std::int64_t in, std::int64_t out)
{
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    double src = (static_cast<double>(dst) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const auto i1 = std::min(i0 + 1, in - 1);
    return {i0, i1, src - static_cast<double>(i0)};
}

}  // namespace

template <typename T>
void resize_bilinear_forward(const ResizeGeometry& g, std::span<const T> x, std::span<T> y)
{
    for (std::int64_t p = 0; p < g.planes; ++p) {
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
            const auto ty = source_tap(oy, g.in_h, g.out_h);
            for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
                const auto tx = source_tap(ox, g.in_w, g.out_w);
                const T* plane = x.data() + p * g.in_h * g.in_w;
                const T fy = static_cast<T>(ty.frac), fx = static_cast<T>(tx.frac);
                const T top = (T(1) - fx) * plane[ty.i0 * g.in_w + tx.i0] + fx * plane[ty.i0 * g.in_w + tx.i1];
                const T bot = (T(1) - fx) * plane[ty.i1 * g.in_w + tx.i0] + fx * plane[ty.i1 * g.in_w + tx.i1];
                y[(p * g.out_h + oy) * g.out_w + ox] = (T(1) - fy) * top + fy * bot;
            }
        }
    }
}

template <typename T>
void resize_bilinear_backward(const ResizeGeometry& g, std::span<const T> dy, std::span<T> dx)
{
    for (std::int64_t p = 0; p < g.planes; ++p) {
        T* plane = dx.data() + p * g.in_h * g.in_w;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
            const auto ty = source_tap(oy, g.in_h, g.out_h);
            for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
                const auto tx = source_tap(ox, g.in_w, g.out_w);
                const T go = dy[(p * g.out_h + oy) * g.out_w + ox];
                const T fy = static_cast<T>(ty.frac), fx = static_cast<T>(tx.frac);
                plane[ty.i0 * g.in_w + tx.i0] += go * (T(1) - fy) * (T(1) - fx);
                plane[ty.i0 * g.in_w + tx.i1] += go * (T(1) - fy) * fx;
                plane[ty.i1 * g.in_w + tx.i0] += go * fy * (T(1) - fx);
                plane[ty.i1 * g.in_w + tx.i1] += go * fy * fx;
            }
        }
    }
}

#define FUNET_INSTANTIATE_REFERENCE(T)                                                                           \
    template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,                 \
                                    std::span<const T>, std::span<T>);                                           \
    template void conv2d_backward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,                \
                                     std::span<const T>, std::span<T>, std::span<T>, std::span<T>);              \
    template void matmul_batched<T>(std::int64_t, std::int64_t, std::int64_t, std::int64_t, std::span<const T>, \
                                    std::span<const T>, std::span<T>);                                           \
    template void matmul_batched_backward<T>(std::int64_t, std::int64_t, std::int64_t, std::int64_t,            \
                                             std::span<const T>, std::span<const T>, std::span<const T>,         \
                                             std::span<T>, std::span<T>);                                        \
    template void resize_bilinear_forward<T>(const ResizeGeometry&, std::span<const T>, std::span<T>);           \
    template void resize_bilinear_backward<T>(const ResizeGeometry&, std::span<const T>, std::span<T>);

FUNET_INSTANTIATE_REFERENCE(float)
FUNET_INSTANTIATE_REFERENCE(double)

#undef FUNET_INSTANTIATE_REFERENCE

}  // namespace reference
}  // namespace funet::kernels
