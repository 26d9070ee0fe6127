#pragma once

// Raw compute kernels behind the differentiable ops. Every kernel exists twice:
//   reference::  serial direct loops, kept as the oracle for tests and benchmarks
//   parallel::   OpenMP over independent outputs, GEMM-backed where it matters
// Backward kernels accumulate (+=) into their gradient outputs; an empty span skips that output.

#include <cstdint>
#include <span>

namespace funet::kernels {

struct ConvGeometry {
    std::int64_t batch = 1;
    std::int64_t in_channels = 1, in_h = 1, in_w = 1;
    std::int64_t out_channels = 1, kernel_h = 1, kernel_w = 1;
    std::int64_t stride_h = 1, stride_w = 1;
    std::int64_t pad_h = 0, pad_w = 0;
    std::int64_t dilation_h = 1, dilation_w = 1;
    std::int64_t out_h = 1, out_w = 1;

    /// Fills out_h/out_w; throws ShapeError when the dilated kernel does not fit the padded input.
    void resolve();
    std::int64_t patch_size() const { return in_channels * kernel_h * kernel_w; }
    bool pointwise() const
    {
        return kernel_h == 1 && kernel_w == 1 && stride_h == 1 && stride_w == 1 && pad_h == 0 && pad_w == 0;
    }
};

struct ResizeGeometry {
    std::int64_t planes = 1;  // batch * channels
    std::int64_t in_h = 1, in_w = 1, out_h = 1, out_w = 1;
};

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w, std::span<const T> bias,
                    std::span<T> y);
template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w, std::span<const T> dy,
                     std::span<T> dx, std::span<T> dw, std::span<T> dbias);

/// c[b] (M x N) = a[b] (M x K) * b[b] (K x N), row-major, overwriting c.
template <typename T>
void matmul_batched(std::int64_t batch, std::int64_t m, std::int64_t k, std::int64_t n, std::span<const T> a,
                    std::span<const T> b, std::span<T> c);
template <typename T>
void matmul_batched_backward(std::int64_t batch, std::int64_t m, std::int64_t k, std::int64_t n,
                             std::span<const T> a, std::span<const T> b, std::span<const T> dc, std::span<T> da,
                             std::span<T> db);

/// Bilinear resampling with half-pixel centres (align_corners = false).
template <typename T>
void resize_bilinear_forward(const ResizeGeometry& g, std::span<const T> x, std::span<T> y);
template <typename T>
void resize_bilinear_backward(const ResizeGeometry& g, std::span<const T> dy, std::span<T> dx);

}  // namespace reference

namespace parallel {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w, std::span<const T> bias,
                    std::span<T> y);
template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w, std::span<const T> dy,
                     std::span<T> dx, std::span<T> dw, std::span<T> dbias);

template <typename T>
void matmul_batched(std::int64_t batch, std::int64_t m, std::int64_t k, std::int64_t n, std::span<const T> a,
                    std::span<const T> b, std::span<T> c);
template <typename T>
void matmul_batched_backward(std::int64_t batch, std::int64_t m, std::int64_t k, std::int64_t n,
                             std::span<const T> a, std::span<const T> b, std::span<const T> dc, std::span<T> da,
                             std::span<T> db);

template <typename T>
void resize_bilinear_forward(const ResizeGeometry& g, std::span<const T> x, std::span<T> y);
template <typename T>
void resize_bilinear_backward(const ResizeGeometry& g, std::span<const T> dy, std::span<T> dx);

}  // namespace parallel

/// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace funet::kernels
