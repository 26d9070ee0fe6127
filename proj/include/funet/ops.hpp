#pragma once

#include <array>
#include <vector>

#include "funet/tensor.hpp"

// Differentiable ops. Each op records a backward rule on the calling thread's tape when one is
// active and at least one input requires a gradient. Shapes must match exactly; the only
// broadcasts are bias-add, per-sample scaling, the per-pixel spatial gate and the batch-shared
// positional table.
namespace funet {

struct Conv2dOptions {
    std::array<int, 2> stride{1, 1};
    std::array<int, 2> padding{0, 0};
    std::array<int, 2> dilation{1, 1};
};

/// x (B,Cin,H,W), weight (Cout,Cin,kh,kw), optional bias (Cout).
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias = {},
                      const Conv2dOptions& opt = {});

/// Affine map over the trailing axis: x (..., Din), weight (Dout, Din), bias (Dout).
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias = {});

/// a (B,M,K) x b (B,K,N) -> (B,M,N).
template <typename T>
BasicTensor<T> matmul_batched(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis);

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

/// Normalizes over the trailing axis of extent D, then gamma/beta (both (D)).
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          T eps = T(1e-5));

/// x (N,C,H,W) normalized per (sample, channel group), then per-channel gamma/beta.
template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, int groups, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(1e-5));

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor);
template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value);

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

/// out.shape[i] = x.shape[perm[i]].
template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<int>& perm);

/// Bilinear resampling of (N,C,H,W) to (N,C,out_h,out_w), half-pixel centres.
template <typename T>
BasicTensor<T> resize_bilinear(const BasicTensor<T>& x, std::int64_t out_h, std::int64_t out_w);

template <typename T>
BasicTensor<T> upsample2x(const BasicTensor<T>& x);

/// 2x2 average pooling with stride 2; H and W must be even.
template <typename T>
BasicTensor<T> avg_pool2x(const BasicTensor<T>& x);

/// (B,C,H,W) -> (B,C,1,1) mean over H x W.
template <typename T>
BasicTensor<T> adaptive_global_avg_pool(const BasicTensor<T>& x);

/// out[n, ...] = s[n] * x[n, ...]; s holds exactly x.dim(0) values (any shape).
template <typename T>
BasicTensor<T> scale_per_sample(const BasicTensor<T>& x, const BasicTensor<T>& s);

/// x (B,C,H,W) times gate (B,1,H,W) broadcast over channels.
template <typename T>
BasicTensor<T> mul_spatial_gate(const BasicTensor<T>& x, const BasicTensor<T>& gate);

/// x (B, ...rest) plus table (...rest) shared across the batch.
template <typename T>
BasicTensor<T> add_batch_shared(const BasicTensor<T>& x, const BasicTensor<T>& table);

/// Sum of all elements -> shape (1).
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x);

/// x (N, ...) -> (N): sum over everything but the leading axis.
template <typename T>
BasicTensor<T> sum_per_sample(const BasicTensor<T>& x);

/// Elementwise max(z,0) - z*y + log(1 + exp(-|z|)); targets receive no gradient.
template <typename T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits, const BasicTensor<T>& targets);

}  // namespace funet
