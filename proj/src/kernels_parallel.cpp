#include <algorithm>
#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <Eigen/Core>

#include "funet/kernels.hpp"
#include "funet/tensor.hpp"

namespace funet::kernels {

int max_threads()
{
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

namespace parallel {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMat = Eigen::Map<RowMat<T>>;

// col is (patch_size x out_h*out_w); padded taps are zero.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col)
{
    const auto plane_out = g.out_h * g.out_w;
    for (std::int64_t ci = 0; ci < g.in_channels; ++ci) {
        const T* xc = x + ci * g.in_h * g.in_w;
        for (std::int64_t ky = 0; ky < g.kernel_h; ++ky) {
            for (std::int64_t kx = 0; kx < g.kernel_w; ++kx) {
                T* row = col + ((ci * g.kernel_h + ky) * g.kernel_w + kx) * plane_out;
                for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
                    const auto iy = oy * g.stride_h - g.pad_h + ky * g.dilation_h;
                    T* dst = row + oy * g.out_w;
                    if (iy < 0 || iy >= g.in_h) {
                        std::fill(dst, dst + g.out_w, T(0));
                        continue;
                    }
                    const T* src = xc + iy * g.in_w;
                    const auto x0 = kx * g.dilation_w - g.pad_w;
                    for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
                        const auto ix = ox * g.stride_w + x0;
                        dst[ox] = (ix >= 0 && ix < g.in_w) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* dx)
{
    const auto plane_out = g.out_h * g.out_w;
    for (std::int64_t ci = 0; ci < g.in_channels; ++ci) {
        T* xc = dx + ci * g.in_h * g.in_w;
        for (std::int64_t ky = 0; ky < g.kernel_h; ++ky) {
            for (std::int64_t kx = 0; kx < g.kernel_w; ++kx) {
                const T* row = col + ((ci * g.kernel_h + ky) * g.kernel_w + kx) * plane_out;
                for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
                    const auto iy = oy * g.stride_h - g.pad_h + ky * g.dilation_h;
                    if (iy < 0 || iy >= g.in_h) continue;
                    T* dst = xc + iy * g.in_w;
                    const T* src = row + oy * g.out_w;
                    const auto x0 = kx * g.dilation_w - g.pad_w;
                    for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
                        const auto ix = ox * g.stride_w + x0;
                        if (ix >= 0 && ix < g.in_w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w, std::span<const T> bias,
                    std::span<T> y)
{
    const auto k = g.patch_size();
    const auto hw_out = g.out_h * g.out_w;
    const auto in_stride = g.in_channels * g.in_h * g.in_w;
    const auto out_stride = g.out_channels * hw_out;
    const ConstMat<T> wm(w.data(), g.out_channels, k);

#pragma omp parallel
    {
        std::vector<T> col;
        if (!g.pointwise()) col.resize(static_cast<std::size_t>(k * hw_out));
#pragma omp for schedule(static)
        for (std::int64_t b = 0; b < g.batch; ++b) {
            const T* xb = x.data() + b * in_stride;
            if (!g.pointwise()) im2col(g, xb, col.data());
            const ConstMat<T> cm(g.pointwise() ? xb : col.data(), k, hw_out);
            MutMat<T> ym(y.data() + b * out_stride, g.out_channels, hw_out);
            ym.noalias() = wm * cm;
            if (!bias.empty()) {
                for (std::int64_t co = 0; co < g.out_channels; ++co) ym.row(co).array() += bias[co];
            }
        }
    }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w, std::span<const T> dy,
                     std::span<T> dx, std::span<T> dw, std::span<T> dbias)
{
    const auto k = g.patch_size();
    const auto hw_out = g.out_h * g.out_w;
    const auto in_stride = g.in_channels * g.in_h * g.in_w;
    const auto out_stride = g.out_channels * hw_out;
    const auto wsize = g.out_channels * k;
    const ConstMat<T> wm(w.data(), g.out_channels, k);
    const bool ordered = deterministic_mode();

    // Deterministic mode keeps one weight-gradient slice per sample and reduces them in sample order.
    std::vector<T> dw_partial;
    if (!dw.empty() && ordered) dw_partial.assign(static_cast<std::size_t>(g.batch * wsize), T(0));

#pragma omp parallel
    {
        std::vector<T> col;
        std::vector<T> dcol;
        std::vector<T> dw_local;
        if (!g.pointwise()) {
            col.resize(static_cast<std::size_t>(k * hw_out));
            if (!dx.empty()) dcol.resize(static_cast<std::size_t>(k * hw_out));
        }
        if (!dw.empty() && !ordered) dw_local.assign(static_cast<std::size_t>(wsize), T(0));

#pragma omp for schedule(static)
        for (std::int64_t b = 0; b < g.batch; ++b) {
            const T* xb = x.data() + b * in_stride;
            const ConstMat<T> dym(dy.data() + b * out_stride, g.out_channels, hw_out);
            if (!dw.empty()) {
                if (!g.pointwise()) im2col(g, xb, col.data());
                const ConstMat<T> cm(g.pointwise() ? xb : col.data(), k, hw_out);
                MutMat<T> dwm(ordered ? dw_partial.data() + b * wsize : dw_local.data(), g.out_channels, k);
                dwm.noalias() += dym * cm.transpose();
            }
            if (!dx.empty()) {
                if (g.pointwise()) {
                    MutMat<T> dxm(dx.data() + b * in_stride, k, hw_out);
                    dxm.noalias() += wm.transpose() * dym;
                } else {
                    MutMat<T> dcm(dcol.data(), k, hw_out);
                    dcm.noalias() = wm.transpose() * dym;
                    col2im_add(g, dcol.data(), dx.data() + b * in_stride);
                }
            }
        }

        if (!dw.empty() && !ordered) {
#pragma omp critical(funet_conv_dw)
            for (std::int64_t i = 0; i < wsize; ++i) dw[i] += dw_local[i];
        }
    }

    if (!dw.empty() && ordered) {
        for (std::int64_t b = 0; b < g.batch; ++b) {
            const T* part = dw_partial.data() + b * wsize;
            for (std::int64_t i = 0; i < wsize; ++i) dw[i] += part[i];
        }
    }
    if (!dbias.empty()) {
        for (std::int64_t b = 0; b < g.batch; ++b) {
            for (std::int64_t co = 0; co < g.out_channels; ++co) {
                const T* row = dy.data() + b * out_stride + co * hw_out;
                T acc = 0;
                for (std::int64_t i = 0; i < hw_out; ++i) acc += row[i];
                dbias[co] += acc;
            }
        }
    }
}

template <typename T>
void matmul_batched(std::int64_t batch, std::int64_t m, std::int64_t k, std::int64_t n, std::span<const T> a,
                    std::span<const T> b, std::span<T> c)
{
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < batch; ++p) {
        const ConstMat<T> am(a.data() + p * m * k, m, k);
        const ConstMat<T> bm(b.data() + p * k * n, k, n);
        MutMat<T> cm(c.data() + p * m * n, m, n);
        cm.noalias() = am * bm;
    }
}

template <typename T>
void matmul_batched_backward(std::int64_t batch, std::int64_t m, std::int64_t k, std::int64_t n,
                             std::span<const T> a, std::span<const T> b, std::span<const T> dc, std::span<T> da,
                             std::span<T> db)
{
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < batch; ++p) {
        const ConstMat<T> am(a.data() + p * m * k, m, k);
        const ConstMat<T> bm(b.data() + p * k * n, k, n);
        const ConstMat<T> dcm(dc.data() + p * m * n, m, n);
        if (!da.empty()) {
            MutMat<T> dam(da.data() + p * m * k, m, k);
            dam.noalias() += dcm * bm.transpose();
        }
        if (!db.empty()) {
            MutMat<T> dbm(db.data() + p * k * n, k, n);
            dbm.noalias() += am.transpose() * dcm;
        }
    }
}

namespace {

template <typename T>
struct AxisTaps {
    std::vector<std::int64_t> i0, i1;
    std::vector<T> frac;

    AxisTaps(std::int64_t in, std::int64_t out) : i0(out), i1(out), frac(out)
    {
        const double scale = static_cast<double>(in) / static_cast<double>(out);
        for (std::int64_t d = 0; d < out; ++d) {
            double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
            if (src < 0) src = 0;
            auto lo = static_cast<std::int64_t>(std::floor(src));
            if (lo > in - 1) lo = in - 1;
            i0[d] = lo;
            i1[d] = std::min(lo + 1, in - 1);
            frac[d] = static_cast<T>(src - static_cast<double>(lo));
        }
    }
};

}  // namespace

template <typename T>
void resize_bilinear_forward(const ResizeGeometry& g, std::span<const T> x, std::span<T> y)
{
    const AxisTaps<T> ty(g.in_h, g.out_h), tx(g.in_w, g.out_w);
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < g.planes; ++p) {
        const T* plane = x.data() + p * g.in_h * g.in_w;
        T* out = y.data() + p * g.out_h * g.out_w;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
            const T fy = ty.frac[oy];
            const T* r0 = plane + ty.i0[oy] * g.in_w;
            const T* r1 = plane + ty.i1[oy] * g.in_w;
            for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
                const T fx = tx.frac[ox];
                const T top = (T(1) - fx) * r0[tx.i0[ox]] + fx * r0[tx.i1[ox]];
                const T bot = (T(1) - fx) * r1[tx.i0[ox]] + fx * r1[tx.i1[ox]];
                out[oy * g.out_w + ox] = (T(1) - fy) * top + fy * bot;
            }
        }
    }
}

template <typename T>
void resize_bilinear_backward(const ResizeGeometry& g, std::span<const T> dy, std::span<T> dx)
{
    const AxisTaps<T> ty(g.in_h, g.out_h), tx(g.in_w, g.out_w);
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < g.planes; ++p) {
        T* plane = dx.data() + p * g.in_h * g.in_w;
        const T* go = dy.data() + p * g.out_h * g.out_w;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
            const T fy = ty.frac[oy];
            T* r0 = plane + ty.i0[oy] * g.in_w;
            T* r1 = plane + ty.i1[oy] * g.in_w;
            for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
                const T v = go[oy * g.out_w + ox];
                const T fx = tx.frac[ox];
                r0[tx.i0[ox]] += v * (T(1) - fy) * (T(1) - fx);
                r0[tx.i1[ox]] += v * (T(1) - fy) * fx;
                r1[tx.i0[ox]] += v * fy * (T(1) - fx);
                r1[tx.i1[ox]] += v * fy * fx;
            }
        }
    }
}

#define FUNET_INSTANTIATE_PARALLEL(T)                                                                            \
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

FUNET_INSTANTIATE_PARALLEL(float)
FUNET_INSTANTIATE_PARALLEL(double)

#undef FUNET_INSTANTIATE_PARALLEL

}  // namespace parallel
}  // namespace funet::kernels
