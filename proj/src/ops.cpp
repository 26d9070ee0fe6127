#include "funet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <Eigen/Core>

#include "funet/kernels.hpp"

namespace funet {
namespace {

template <typename T>
using Storage = detail::Storage<T>;
template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMat = Eigen::Map<RowMat<T>>;

template <typename T>
BasicTape<T>* tape_for(std::initializer_list<const BasicTensor<T>*> inputs)
{
    auto* tape = BasicTape<T>::current();
    if (tape == nullptr) return nullptr;
    for (const auto* t : inputs) {
        if (t != nullptr && t->defined() && t->requires_grad()) return tape;
    }
    return nullptr;
}

template <typename T>
BasicTensor<T> make_output(std::string_view op, Shape shape, std::vector<T> data)
{
    if (checked_mode()) {
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (!std::isfinite(data[i])) {
                throw NumericError(std::string(op) + ": non-finite value at flat index " + std::to_string(i) +
                                   " of output " + shape_str(shape));
            }
        }
    }
    return BasicTensor<T>::from_vector(std::move(shape), std::move(data));
}

template <typename T, typename Fn>
void record(BasicTape<T>* tape, std::string_view op, BasicTensor<T>& out, Fn&& fn)
{
    if (tape == nullptr) return;
    out.set_requires_grad(true);
    tape->record(op, out.storage(), std::forward<Fn>(fn));
}

[[noreturn]] void shape_fail(std::string_view op, const std::string& what)
{
    throw ShapeError(std::string(op) + ": " + what);
}

void require_rank(std::string_view op, const Shape& s, std::size_t rank, const char* name)
{
    if (s.size() != rank) {
        shape_fail(op, std::string(name) + " must have rank " + std::to_string(rank) + ", got " + shape_str(s));
    }
}

void require_same(std::string_view op, const Shape& a, const Shape& b)
{
    if (a != b) shape_fail(op, "shape " + shape_str(a) + " does not match " + shape_str(b));
}

int normalize_axis(std::string_view op, int axis, int rank)
{
    const int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) shape_fail(op, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    return a;
}

bool use_reference() { return kernel_backend() == KernelBackend::Reference; }

}  // namespace

// ---------------------------------------------------------------------------------------------

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      const Conv2dOptions& opt)
{
    constexpr std::string_view op = "conv2d";
    require_rank(op, x.shape(), 4, "input");
    require_rank(op, weight.shape(), 4, "weight");
    if (x.dim(1) != weight.dim(1)) {
        shape_fail(op, "input channels " + std::to_string(x.dim(1)) + " != weight in-channels " +
                           std::to_string(weight.dim(1)));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(0))) {
        shape_fail(op, "bias " + shape_str(bias.shape()) + " does not match out-channels " + std::to_string(weight.dim(0)));
    }
    kernels::ConvGeometry g;
    g.batch = x.dim(0);
    g.in_channels = x.dim(1);
    g.in_h = x.dim(2);
    g.in_w = x.dim(3);
    g.out_channels = weight.dim(0);
    g.kernel_h = weight.dim(2);
    g.kernel_w = weight.dim(3);
    g.stride_h = opt.stride[0];
    g.stride_w = opt.stride[1];
    g.pad_h = opt.padding[0];
    g.pad_w = opt.padding[1];
    g.dilation_h = opt.dilation[0];
    g.dilation_w = opt.dilation[1];
    g.resolve();

    std::vector<T> y(static_cast<std::size_t>(g.batch * g.out_channels * g.out_h * g.out_w));
    std::span<const T> b = bias.defined() ? bias.data() : std::span<const T>{};
    if (use_reference()) {
        kernels::reference::conv2d_forward<T>(g, x.data(), weight.data(), b, y);
    } else {
        kernels::parallel::conv2d_forward<T>(g, x.data(), weight.data(), b, y);
    }
    auto out = make_output<T>(op, {g.batch, g.out_channels, g.out_h, g.out_w}, std::move(y));
    auto* tape = tape_for<T>({&x, &weight, &bias});
    record(tape, op, out,
           [g, xs = x.storage(), ws = weight.storage(), bs = bias.storage(), os = out.storage()] {
               std::span<T> dx = xs->requires_grad ? xs->grad_buffer() : std::span<T>{};
               std::span<T> dw = ws->requires_grad ? ws->grad_buffer() : std::span<T>{};
               std::span<T> db = (bs && bs->requires_grad) ? bs->grad_buffer() : std::span<T>{};
               if (use_reference()) {
                   kernels::reference::conv2d_backward<T>(g, xs->data, ws->data, os->grad, dx, dw, db);
               } else {
                   kernels::parallel::conv2d_backward<T>(g, xs->data, ws->data, os->grad, dx, dw, db);
               }
           });
    return out;
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias)
{
    constexpr std::string_view op = "linear";
    require_rank(op, weight.shape(), 2, "weight");
    const auto din = weight.dim(1);
    const auto dout = weight.dim(0);
    if (x.dim(-1) != din) {
        shape_fail(op, "input trailing extent " + std::to_string(x.dim(-1)) + " != weight in-features " +
                           std::to_string(din));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != dout)) {
        shape_fail(op, "bias " + shape_str(bias.shape()) + " does not match out-features " + std::to_string(dout));
    }
    const auto rows = x.numel() / din;
    std::vector<T> y(static_cast<std::size_t>(rows * dout));
    const ConstMat<T> xm(x.data().data(), rows, din);
    const ConstMat<T> wm(weight.data().data(), dout, din);
    MutMat<T> ym(y.data(), rows, dout);
    ym.noalias() = xm * wm.transpose();
    if (bias.defined()) {
        for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t j = 0; j < dout; ++j) ym(r, j) += bias[j];
        }
    }
    Shape shape = x.shape();
    shape.back() = dout;
    auto out = make_output<T>(op, std::move(shape), std::move(y));
    record(tape_for<T>({&x, &weight, &bias}), op, out,
           [rows, din, dout, xs = x.storage(), ws = weight.storage(), bs = bias.storage(), os = out.storage()] {
               const ConstMat<T> gm(os->grad.data(), rows, dout);
               if (xs->requires_grad) {
                   MutMat<T> dx(xs->grad_buffer().data(), rows, din);
                   dx.noalias() += gm * ConstMat<T>(ws->data.data(), dout, din);
               }
               if (ws->requires_grad) {
                   MutMat<T> dw(ws->grad_buffer().data(), dout, din);
                   dw.noalias() += gm.transpose() * ConstMat<T>(xs->data.data(), rows, din);
               }
               if (bs && bs->requires_grad) {
                   auto db = bs->grad_buffer();
                   for (std::int64_t r = 0; r < rows; ++r) {
                       for (std::int64_t j = 0; j < dout; ++j) db[j] += gm(r, j);
                   }
               }
           });
    return out;
}

template <typename T>
BasicTensor<T> matmul_batched(const BasicTensor<T>& a, const BasicTensor<T>& b)
{
    constexpr std::string_view op = "matmul_batched";
    require_rank(op, a.shape(), 3, "a");
    require_rank(op, b.shape(), 3, "b");
    if (a.dim(0) != b.dim(0)) {
        shape_fail(op, "batch extents differ: " + std::to_string(a.dim(0)) + " vs " + std::to_string(b.dim(0)));
    }
    if (a.dim(2) != b.dim(1)) {
        shape_fail(op, "inner extents differ: " + std::to_string(a.dim(2)) + " vs " + std::to_string(b.dim(1)));
    }
    const auto batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<T> c(static_cast<std::size_t>(batch * m * n));
    if (use_reference()) {
        kernels::reference::matmul_batched<T>(batch, m, k, n, a.data(), b.data(), c);
    } else {
        kernels::parallel::matmul_batched<T>(batch, m, k, n, a.data(), b.data(), c);
    }
    auto out = make_output<T>(op, {batch, m, n}, std::move(c));
    record(tape_for<T>({&a, &b}), op, out,
           [batch, m, k, n, as = a.storage(), bs = b.storage(), os = out.storage()] {
               std::span<T> da = as->requires_grad ? as->grad_buffer() : std::span<T>{};
               std::span<T> db = bs->requires_grad ? bs->grad_buffer() : std::span<T>{};
               if (use_reference()) {
                   kernels::reference::matmul_batched_backward<T>(batch, m, k, n, as->data, bs->data, os->grad, da, db);
               } else {
                   kernels::parallel::matmul_batched_backward<T>(batch, m, k, n, as->data, bs->data, os->grad, da, db);
               }
           });
    return out;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis)
{
    constexpr std::string_view op = "softmax";
    const int a = normalize_axis(op, axis, x.rank());
    const auto& s = x.shape();
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < a; ++i) outer *= s[i];
    for (int i = a + 1; i < x.rank(); ++i) inner *= s[i];
    const auto n = s[a];
    const auto xd = x.data();
    std::vector<T> y(xd.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
            const auto base = o * n * inner + i;
            T mx = xd[base];
            for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, xd[base + j * inner]);
            double total = 0;
            for (std::int64_t j = 0; j < n; ++j) {
                const T e = std::exp(xd[base + j * inner] - mx);
                y[base + j * inner] = e;
                total += e;
            }
            const double inv = 1.0 / total;
            for (std::int64_t j = 0; j < n; ++j) y[base + j * inner] = static_cast<T>(y[base + j * inner] * inv);
        }
    }
    auto out = make_output<T>(op, s, std::move(y));
    record(tape_for<T>({&x}), op, out, [outer, inner, n, xs = x.storage(), os = out.storage()] {
        if (!xs->requires_grad) return;
        auto dx = xs->grad_buffer();
        const auto& yv = os->data;
        const auto& gy = os->grad;
#pragma omp parallel for schedule(static)
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t i = 0; i < inner; ++i) {
                const auto base = o * n * inner + i;
                double dot = 0;
                for (std::int64_t j = 0; j < n; ++j) dot += static_cast<double>(gy[base + j * inner]) * yv[base + j * inner];
                for (std::int64_t j = 0; j < n; ++j) {
                    const auto idx = base + j * inner;
                    dx[idx] += static_cast<T>(yv[idx] * (gy[idx] - dot));
                }
            }
        }
    });
    return out;
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x)
{
    constexpr std::string_view op = "sigmoid";
    const auto xd = x.data();
    std::vector<T> y(xd.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        const T v = xd[i];
        if (v >= 0) {
            y[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            y[i] = e / (T(1) + e);
        }
    }
    auto out = make_output<T>(op, x.shape(), std::move(y));
    record(tape_for<T>({&x}), op, out, [xs = x.storage(), os = out.storage()] {
        if (!xs->requires_grad) return;
        auto dx = xs->grad_buffer();
        for (std::size_t i = 0; i < dx.size(); ++i) {
            const T s = os->data[i];
            dx[i] += os->grad[i] * s * (T(1) - s);
        }
    });
    return out;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x)
{
    constexpr std::string_view op = "relu";
    const auto xd = x.data();
    std::vector<T> y(xd.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xd[i] < 0 ? T(0) : xd[i];  // NaN passes through
    if (auto* log = detail::kink_log()) {
        for (auto v : xd) log->fold(v > 0);
    }
    auto out = make_output<T>(op, x.shape(), std::move(y));
    record(tape_for<T>({&x}), op, out, [xs = x.storage(), os = out.storage()] {
        if (!xs->requires_grad) return;
        auto dx = xs->grad_buffer();
        // subgradient 0 at exactly 0
        for (std::size_t i = 0; i < dx.size(); ++i) {
            if (xs->data[i] > 0) dx[i] += os->grad[i];
        }
    });
    return out;
}

namespace {

// Normalizes `groups` contiguous runs of `len` values; returns xhat and per-run 1/std.
template <typename T>
void normalize_runs(std::span<const T> x, std::int64_t runs, std::int64_t len, T eps, std::vector<T>& xhat,
                    std::vector<T>& rstd)
{
    xhat.resize(x.size());
    rstd.resize(static_cast<std::size_t>(runs));
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < runs; ++r) {
        const T* p = x.data() + r * len;
        double m = 0;
        for (std::int64_t i = 0; i < len; ++i) m += p[i];
        m /= static_cast<double>(len);
        double v = 0;
        for (std::int64_t i = 0; i < len; ++i) v += (p[i] - m) * (p[i] - m);
        v /= static_cast<double>(len);
        const double rs = 1.0 / std::sqrt(v + static_cast<double>(eps));
        rstd[r] = static_cast<T>(rs);
        T* q = xhat.data() + r * len;
        for (std::int64_t i = 0; i < len; ++i) q[i] = static_cast<T>((p[i] - m) * rs);
    }
}

// dx for y = xhat (before affine), given dxhat per run.
template <typename T>
void normalize_runs_backward(const std::vector<T>& xhat, const std::vector<T>& rstd, const std::vector<T>& dxhat,
                             std::int64_t runs, std::int64_t len, std::span<T> dx)
{
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < runs; ++r) {
        const T* xh = xhat.data() + r * len;
        const T* g = dxhat.data() + r * len;
        double sg = 0, sgx = 0;
        for (std::int64_t i = 0; i < len; ++i) {
            sg += g[i];
            sgx += static_cast<double>(g[i]) * xh[i];
        }
        const double inv_n = 1.0 / static_cast<double>(len);
        T* d = dx.data() + r * len;
        for (std::int64_t i = 0; i < len; ++i) {
            d[i] += static_cast<T>(rstd[r] * (g[i] - sg * inv_n - xh[i] * sgx * inv_n));
        }
    }
}

}  // namespace

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta, T eps)
{
    constexpr std::string_view op = "layer_norm";
    const auto d = x.dim(-1);
    if (gamma.numel() != d || beta.numel() != d) {
        shape_fail(op, "gamma/beta must have " + std::to_string(d) + " elements, got " + shape_str(gamma.shape()) +
                           " and " + shape_str(beta.shape()));
    }
    const auto runs = x.numel() / d;
    auto xhat = std::make_shared<std::vector<T>>();
    auto rstd = std::make_shared<std::vector<T>>();
    normalize_runs<T>(x.data(), runs, d, eps, *xhat, *rstd);
    std::vector<T> y(xhat->size());
    for (std::int64_t r = 0; r < runs; ++r) {
        for (std::int64_t i = 0; i < d; ++i) y[r * d + i] = (*xhat)[r * d + i] * gamma[i] + beta[i];
    }
    auto out = make_output<T>(op, x.shape(), std::move(y));
    record(tape_for<T>({&x, &gamma, &beta}), op, out,
           [runs, d, xhat, rstd, xs = x.storage(), gs = gamma.storage(), bs = beta.storage(), os = out.storage()] {
               const auto& gy = os->grad;
               if (gs->requires_grad || bs->requires_grad) {
                   std::vector<double> dg(d, 0.0), db(d, 0.0);
                   for (std::int64_t r = 0; r < runs; ++r) {
                       for (std::int64_t i = 0; i < d; ++i) {
                           dg[i] += static_cast<double>(gy[r * d + i]) * (*xhat)[r * d + i];
                           db[i] += gy[r * d + i];
                       }
                   }
                   if (gs->requires_grad) {
                       auto g = gs->grad_buffer();
                       for (std::int64_t i = 0; i < d; ++i) g[i] += static_cast<T>(dg[i]);
                   }
                   if (bs->requires_grad) {
                       auto g = bs->grad_buffer();
                       for (std::int64_t i = 0; i < d; ++i) g[i] += static_cast<T>(db[i]);
                   }
               }
               if (xs->requires_grad) {
                   std::vector<T> dxhat(gy.size());
                   for (std::int64_t r = 0; r < runs; ++r) {
                       for (std::int64_t i = 0; i < d; ++i) dxhat[r * d + i] = gy[r * d + i] * gs->data[i];
                   }
                   normalize_runs_backward<T>(*xhat, *rstd, dxhat, runs, d, xs->grad_buffer());
               }
           });
    return out;
}

template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, int groups, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps)
{
    constexpr std::string_view op = "group_norm";
    require_rank(op, x.shape(), 4, "input");
    const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (groups < 1 || c % groups != 0) {
        shape_fail(op, std::to_string(c) + " channels not divisible into " + std::to_string(groups) + " groups");
    }
    if (gamma.numel() != c || beta.numel() != c) {
        shape_fail(op, "gamma/beta must have " + std::to_string(c) + " elements");
    }
    const auto runs = n * groups;
    const auto len = (c / groups) * hw;
    auto xhat = std::make_shared<std::vector<T>>();
    auto rstd = std::make_shared<std::vector<T>>();
    normalize_runs<T>(x.data(), runs, len, eps, *xhat, *rstd);
    std::vector<T> y(xhat->size());
    for (std::int64_t s = 0; s < n; ++s) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const auto off = (s * c + ch) * hw;
            for (std::int64_t i = 0; i < hw; ++i) y[off + i] = (*xhat)[off + i] * gamma[ch] + beta[ch];
        }
    }
    auto out = make_output<T>(op, x.shape(), std::move(y));
    record(tape_for<T>({&x, &gamma, &beta}), op, out,
           [n, c, hw, runs, len, xhat, rstd, xs = x.storage(), gs = gamma.storage(), bs = beta.storage(),
            os = out.storage()] {
               const auto& gy = os->grad;
               if (gs->requires_grad || bs->requires_grad) {
                   std::vector<double> dg(c, 0.0), db(c, 0.0);
                   for (std::int64_t s = 0; s < n; ++s) {
                       for (std::int64_t ch = 0; ch < c; ++ch) {
                           const auto off = (s * c + ch) * hw;
                           double a = 0, b = 0;
                           for (std::int64_t i = 0; i < hw; ++i) {
                               a += static_cast<double>(gy[off + i]) * (*xhat)[off + i];
                               b += gy[off + i];
                           }
                           dg[ch] += a;
                           db[ch] += b;
                       }
                   }
                   if (gs->requires_grad) {
                       auto g = gs->grad_buffer();
                       for (std::int64_t ch = 0; ch < c; ++ch) g[ch] += static_cast<T>(dg[ch]);
                   }
                   if (bs->requires_grad) {
                       auto g = bs->grad_buffer();
                       for (std::int64_t ch = 0; ch < c; ++ch) g[ch] += static_cast<T>(db[ch]);
                   }
               }
               if (xs->requires_grad) {
                   std::vector<T> dxhat(gy.size());
                   for (std::int64_t s = 0; s < n; ++s) {
                       for (std::int64_t ch = 0; ch < c; ++ch) {
                           const auto off = (s * c + ch) * hw;
                           for (std::int64_t i = 0; i < hw; ++i) dxhat[off + i] = gy[off + i] * gs->data[ch];
                       }
                   }
                   normalize_runs_backward<T>(*xhat, *rstd, dxhat, runs, len, xs->grad_buffer());
               }
           });
    return out;
}

// ---------------------------------------------------------------------------------------------
// elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b)
{
    constexpr std::string_view op = "add";
    require_same(op, a.shape(), b.shape());
    std::vector<T> y(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.data()[i];
    auto out = make_output<T>(op, a.shape(), std::move(y));
    record(tape_for<T>({&a, &b}), op, out, [as = a.storage(), bs = b.storage(), os = out.storage()] {
        for (auto* s : {as.get(), bs.get()}) {
            if (!s->requires_grad) continue;
            auto g = s->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += os->grad[i];
        }
    });
    return out;
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b)
{
    constexpr std::string_view op = "sub";
    require_same(op, a.shape(), b.shape());
    std::vector<T> y(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.data()[i];
    auto out = make_output<T>(op, a.shape(), std::move(y));
    record(tape_for<T>({&a, &b}), op, out, [as = a.storage(), bs = b.storage(), os = out.storage()] {
        if (as->requires_grad) {
            auto g = as->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += os->grad[i];
        }
        if (bs->requires_grad) {
            auto g = bs->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= os->grad[i];
        }
    });
    return out;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b)
{
    constexpr std::string_view op = "mul";
    require_same(op, a.shape(), b.shape());
    std::vector<T> y(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.data()[i];
    auto out = make_output<T>(op, a.shape(), std::move(y));
    record(tape_for<T>({&a, &b}), op, out, [as = a.storage(), bs = b.storage(), os = out.storage()] {
        if (as->requires_grad) {
            auto g = as->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += os->grad[i] * bs->data[i];
        }
        if (bs->requires_grad) {
            auto g = bs->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += os->grad[i] * as->data[i];
        }
    });
    return out;
}

template <typename T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b)
{
    constexpr std::string_view op = "div";
    require_same(op, a.shape(), b.shape());
    std::vector<T> y(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] /= b.data()[i];
    auto out = make_output<T>(op, a.shape(), std::move(y));
    record(tape_for<T>({&a, &b}), op, out, [as = a.storage(), bs = b.storage(), os = out.storage()] {
        if (as->requires_grad) {
            auto g = as->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += os->grad[i] / bs->data[i];
        }
        if (bs->requires_grad) {
            auto g = bs->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= os->grad[i] * os->data[i] / bs->data[i];
        }
    });
    return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor)
{
    constexpr std::string_view op = "scale";
    std::vector<T> y(x.data().begin(), x.data().end());
    for (auto& v : y) v *= factor;
    auto out = make_output<T>(op, x.shape(), std::move(y));
    record(tape_for<T>({&x}), op, out, [factor, xs = x.storage(), os = out.storage()] {
        if (!xs->requires_grad) return;
        auto g = xs->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += os->grad[i] * factor;
    });
    return out;
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value)
{
    constexpr std::string_view op = "add_scalar";
    std::vector<T> y(x.data().begin(), x.data().end());
    for (auto& v : y) v += value;
    auto out = make_output<T>(op, x.shape(), std::move(y));
    record(tape_for<T>({&x}), op, out, [xs = x.storage(), os = out.storage()] {
        if (!xs->requires_grad) return;
        auto g = xs->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += os->grad[i];
    });
    return out;
}

// ---------------------------------------------------------------------------------------------
// layout

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis)
{
    constexpr std::string_view op = "concat";
    if (parts.empty()) shape_fail(op, "nothing to concatenate");
    const int rank = parts[0].rank();
    const int a = normalize_axis(op, axis, rank);
    Shape shape = parts[0].shape();
    shape[a] = 0;
    for (const auto& p : parts) {
        if (p.rank() != rank) shape_fail(op, "rank mismatch: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
        for (int i = 0; i < rank; ++i) {
            if (i != a && p.shape()[i] != parts[0].shape()[i]) {
                shape_fail(op, "extent mismatch on axis " + std::to_string(i) + ": " + shape_str(p.shape()) + " vs " +
                                   shape_str(parts[0].shape()));
            }
        }
        shape[a] += p.shape()[a];
    }
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < a; ++i) outer *= shape[i];
    for (int i = a + 1; i < rank; ++i) inner *= shape[i];
    const auto out_chunk = shape[a] * inner;

    std::vector<T> y(static_cast<std::size_t>(shape_numel(shape)));
    std::vector<std::int64_t> offsets;
    std::int64_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const auto chunk = p.shape()[a] * inner;
        for (std::int64_t o = 0; o < outer; ++o) {
            std::copy_n(p.data().data() + o * chunk, chunk, y.data() + o * out_chunk + off);
        }
        off += chunk;
    }
    auto out = make_output<T>(op, shape, std::move(y));

    auto* tape = BasicTape<T>::current();
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (tape == nullptr || !any) return out;

    std::vector<std::shared_ptr<Storage<T>>> storages;
    std::vector<std::int64_t> chunks;
    for (const auto& p : parts) {
        storages.push_back(p.storage());
        chunks.push_back(p.shape()[a] * inner);
    }
    record(tape, op, out, [outer, out_chunk, storages, chunks, offsets, os = out.storage()] {
        for (std::size_t k = 0; k < storages.size(); ++k) {
            if (!storages[k]->requires_grad) continue;
            auto g = storages[k]->grad_buffer();
            for (std::int64_t o = 0; o < outer; ++o) {
                const T* src = os->grad.data() + o * out_chunk + offsets[k];
                T* dst = g.data() + o * chunks[k];
                for (std::int64_t i = 0; i < chunks[k]; ++i) dst[i] += src[i];
            }
        }
    });
    return out;
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape)
{
    constexpr std::string_view op = "reshape";
    int infer = -1;
    std::int64_t known = 1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) shape_fail(op, "at most one extent may be -1");
            infer = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0 && known > 0 && x.numel() % known == 0) shape[infer] = x.numel() / known;
    if (shape_numel(shape) != x.numel()) {
        shape_fail(op, "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    auto out = make_output<T>(op, std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
    record(tape_for<T>({&x}), op, out, [xs = x.storage(), os = out.storage()] {
        if (!xs->requires_grad) return;
        auto g = xs->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += os->grad[i];
    });
    return out;
}

namespace {

// For each output flat index, the flat index it reads in the input.
std::vector<std::int64_t> permute_map(const Shape& in, const std::vector<int>& perm)
{
    const int r = static_cast<int>(in.size());
    std::vector<std::int64_t> in_stride(r, 1);
    for (int i = r - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * in[i + 1];
    Shape out(r);
    std::vector<std::int64_t> src_stride(r);
    for (int i = 0; i < r; ++i) {
        out[i] = in[perm[i]];
        src_stride[i] = in_stride[perm[i]];
    }
    const auto total = shape_numel(in);
    std::vector<std::int64_t> map(static_cast<std::size_t>(total));
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t src = 0;
    for (std::int64_t k = 0; k < total; ++k) {
        map[k] = src;
        for (int d = r - 1; d >= 0; --d) {
            ++idx[d];
            src += src_stride[d];
            if (idx[d] < out[d]) break;
            src -= src_stride[d] * idx[d];
            idx[d] = 0;
        }
    }
    return map;
}

}  // namespace

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<int>& perm)
{
    constexpr std::string_view op = "permute";
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r) shape_fail(op, "permutation length differs from rank");
    std::vector<bool> seen(r, false);
    for (int p : perm) {
        if (p < 0 || p >= r || seen[p]) shape_fail(op, "invalid permutation");
        seen[p] = true;
    }
    Shape shape(r);
    for (int i = 0; i < r; ++i) shape[i] = x.shape()[perm[i]];
    auto map = std::make_shared<std::vector<std::int64_t>>(permute_map(x.shape(), perm));
    std::vector<T> y(map->size());
    const auto xd = x.data();
    for (std::size_t k = 0; k < y.size(); ++k) y[k] = xd[(*map)[k]];
    auto out = make_output<T>(op, std::move(shape), std::move(y));
    record(tape_for<T>({&x}), op, out, [map, xs = x.storage(), os = out.storage()] {
        if (!xs->requires_grad) return;
        auto g = xs->grad_buffer();
        for (std::size_t k = 0; k < map->size(); ++k) g[(*map)[k]] += os->grad[k];
    });
    return out;
}

template <typename T>
BasicTensor<T> resize_bilinear(const BasicTensor<T>& x, std::int64_t out_h, std::int64_t out_w)
{
    constexpr std::string_view op = "resize_bilinear";
    require_rank(op, x.shape(), 4, "input");
    if (out_h < 1 || out_w < 1) shape_fail(op, "target size must be positive");
    kernels::ResizeGeometry g{x.dim(0) * x.dim(1), x.dim(2), x.dim(3), out_h, out_w};
    std::vector<T> y(static_cast<std::size_t>(g.planes * out_h * out_w));
    if (use_reference()) {
        kernels::reference::resize_bilinear_forward<T>(g, x.data(), y);
    } else {
        kernels::parallel::resize_bilinear_forward<T>(g, x.data(), y);
    }
    auto out = make_output<T>(op, {x.dim(0), x.dim(1), out_h, out_w}, std::move(y));
    record(tape_for<T>({&x}), op, out, [g, xs = x.storage(), os = out.storage()] {
        if (!xs->requires_grad) return;
        if (use_reference()) {
            kernels::reference::resize_bilinear_backward<T>(g, os->grad, xs->grad_buffer());
        } else {
            kernels::parallel::resize_bilinear_backward<T>(g, os->grad, xs->grad_buffer());
        }
    });
    return out;
}

template <typename T>
BasicTensor<T> upsample2x(const BasicTensor<T>& x)
{
    require_rank("upsample2x", x.shape(), 4, "input");
    return resize_bilinear(x, 2 * x.dim(2), 2 * x.dim(3));
}

template <typename T>
BasicTensor<T> avg_pool2x(const BasicTensor<T>& x)
{
    constexpr std::string_view op = "avg_pool2x";
    require_rank(op, x.shape(), 4, "input");
    const auto planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) shape_fail(op, "spatial extents must be even, got " + shape_str(x.shape()));
    const auto oh = h / 2, ow = w / 2;
    std::vector<T> y(static_cast<std::size_t>(planes * oh * ow));
    const auto xd = x.data();
    for (std::int64_t p = 0; p < planes; ++p) {
        const T* src = xd.data() + p * h * w;
        for (std::int64_t i = 0; i < oh; ++i) {
            for (std::int64_t j = 0; j < ow; ++j) {
                const T s = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1] + src[(2 * i + 1) * w + 2 * j] +
                            src[(2 * i + 1) * w + 2 * j + 1];
                y[(p * oh + i) * ow + j] = s * T(0.25);
            }
        }
    }
    auto out = make_output<T>(op, {x.dim(0), x.dim(1), oh, ow}, std::move(y));
    record(tape_for<T>({&x}), op, out, [planes, h, w, oh, ow, xs = x.storage(), os = out.storage()] {
        if (!xs->requires_grad) return;
        auto g = xs->grad_buffer();
        for (std::int64_t p = 0; p < planes; ++p) {
            T* dst = g.data() + p * h * w;
            for (std::int64_t i = 0; i < oh; ++i) {
                for (std::int64_t j = 0; j < ow; ++j) {
                    const T v = os->grad[(p * oh + i) * ow + j] * T(0.25);
                    dst[2 * i * w + 2 * j] += v;
                    dst[2 * i * w + 2 * j + 1] += v;
                    dst[(2 * i + 1) * w + 2 * j] += v;
                    dst[(2 * i + 1) * w + 2 * j + 1] += v;
                }
            }
        }
    });
    return out;
}

template <typename T>
BasicTensor<T> adaptive_global_avg_pool(const BasicTensor<T>& x)
{
    constexpr std::string_view op = "adaptive_global_avg_pool";
    require_rank(op, x.shape(), 4, "input");
    const auto planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<T> y(static_cast<std::size_t>(planes));
    for (std::int64_t p = 0; p < planes; ++p) {
        double s = 0;
        for (std::int64_t i = 0; i < hw; ++i) s += x.data()[p * hw + i];
        y[p] = static_cast<T>(s / static_cast<double>(hw));
    }
    auto out = make_output<T>(op, {x.dim(0), x.dim(1), 1, 1}, std::move(y));
    record(tape_for<T>({&x}), op, out, [planes, hw, xs = x.storage(), os = out.storage()] {
        if (!xs->requires_grad) return;
        auto g = xs->grad_buffer();
        const T inv = T(1) / static_cast<T>(hw);
        for (std::int64_t p = 0; p < planes; ++p) {
            const T v = os->grad[p] * inv;
            for (std::int64_t i = 0; i < hw; ++i) g[p * hw + i] += v;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------------------------
// broadcasts

template <typename T>
BasicTensor<T> scale_per_sample(const BasicTensor<T>& x, const BasicTensor<T>& s)
{
    constexpr std::string_view op = "scale_per_sample";
    const auto n = x.dim(0);
    if (s.numel() != n) {
        shape_fail(op, "scale " + shape_str(s.shape()) + " must hold one value per leading index of " + shape_str(x.shape()));
    }
    const auto inner = x.numel() / n;
    std::vector<T> y(x.data().begin(), x.data().end());
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t k = 0; k < inner; ++k) y[i * inner + k] *= s[i];
    }
    auto out = make_output<T>(op, x.shape(), std::move(y));
    record(tape_for<T>({&x, &s}), op, out, [n, inner, xs = x.storage(), ss = s.storage(), os = out.storage()] {
        if (xs->requires_grad) {
            auto g = xs->grad_buffer();
            for (std::int64_t i = 0; i < n; ++i) {
                for (std::int64_t k = 0; k < inner; ++k) g[i * inner + k] += os->grad[i * inner + k] * ss->data[i];
            }
        }
        if (ss->requires_grad) {
            auto g = ss->grad_buffer();
            for (std::int64_t i = 0; i < n; ++i) {
                double acc = 0;
                for (std::int64_t k = 0; k < inner; ++k) {
                    acc += static_cast<double>(os->grad[i * inner + k]) * xs->data[i * inner + k];
                }
                g[i] += static_cast<T>(acc);
            }
        }
    });
    return out;
}

template <typename T>
BasicTensor<T> mul_spatial_gate(const BasicTensor<T>& x, const BasicTensor<T>& gate)
{
    constexpr std::string_view op = "mul_spatial_gate";
    require_rank(op, x.shape(), 4, "input");
    const Shape want{x.dim(0), 1, x.dim(2), x.dim(3)};
    if (gate.shape() != want) shape_fail(op, "gate " + shape_str(gate.shape()) + " must be " + shape_str(want));
    const auto b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<T> y(x.data().begin(), x.data().end());
    for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            for (std::int64_t p = 0; p < hw; ++p) y[(i * c + ch) * hw + p] *= gate[i * hw + p];
        }
    }
    auto out = make_output<T>(op, x.shape(), std::move(y));
    record(tape_for<T>({&x, &gate}), op, out, [b, c, hw, xs = x.storage(), gs = gate.storage(), os = out.storage()] {
        if (xs->requires_grad) {
            auto g = xs->grad_buffer();
            for (std::int64_t i = 0; i < b; ++i) {
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    for (std::int64_t p = 0; p < hw; ++p) {
                        g[(i * c + ch) * hw + p] += os->grad[(i * c + ch) * hw + p] * gs->data[i * hw + p];
                    }
                }
            }
        }
        if (gs->requires_grad) {
            auto g = gs->grad_buffer();
            for (std::int64_t i = 0; i < b; ++i) {
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    for (std::int64_t p = 0; p < hw; ++p) {
                        g[i * hw + p] += os->grad[(i * c + ch) * hw + p] * xs->data[(i * c + ch) * hw + p];
                    }
                }
            }
        }
    });
    return out;
}

template <typename T>
BasicTensor<T> add_batch_shared(const BasicTensor<T>& x, const BasicTensor<T>& table)
{
    constexpr std::string_view op = "add_batch_shared";
    const Shape rest(x.shape().begin() + 1, x.shape().end());
    if (table.shape() != rest) shape_fail(op, "table " + shape_str(table.shape()) + " must be " + shape_str(rest));
    const auto n = x.dim(0), inner = table.numel();
    std::vector<T> y(x.data().begin(), x.data().end());
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t k = 0; k < inner; ++k) y[i * inner + k] += table[k];
    }
    auto out = make_output<T>(op, x.shape(), std::move(y));
    record(tape_for<T>({&x, &table}), op, out, [n, inner, xs = x.storage(), ts = table.storage(), os = out.storage()] {
        if (xs->requires_grad) {
            auto g = xs->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += os->grad[i];
        }
        if (ts->requires_grad) {
            auto g = ts->grad_buffer();
            for (std::int64_t i = 0; i < n; ++i) {
                for (std::int64_t k = 0; k < inner; ++k) g[k] += os->grad[i * inner + k];
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------------------------
// reductions and loss terms

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x)
{
    constexpr std::string_view op = "sum";
    double s = 0;
    for (auto v : x.data()) s += v;
    auto out = make_output<T>(op, {1}, {static_cast<T>(s)});
    record(tape_for<T>({&x}), op, out, [xs = x.storage(), os = out.storage()] {
        if (!xs->requires_grad) return;
        auto g = xs->grad_buffer();
        const T go = os->grad[0];
        for (auto& v : g) v += go;
    });
    return out;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x)
{
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
BasicTensor<T> sum_per_sample(const BasicTensor<T>& x)
{
    constexpr std::string_view op = "sum_per_sample";
    const auto n = x.dim(0), inner = x.numel() / n;
    std::vector<T> y(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::int64_t k = 0; k < inner; ++k) s += x.data()[i * inner + k];
        y[i] = static_cast<T>(s);
    }
    auto out = make_output<T>(op, {n}, std::move(y));
    record(tape_for<T>({&x}), op, out, [n, inner, xs = x.storage(), os = out.storage()] {
        if (!xs->requires_grad) return;
        auto g = xs->grad_buffer();
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t k = 0; k < inner; ++k) g[i * inner + k] += os->grad[i];
        }
    });
    return out;
}

template <typename T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits, const BasicTensor<T>& targets)
{
    constexpr std::string_view op = "bce_with_logits";
    require_same(op, logits.shape(), targets.shape());
    const auto z = logits.data();
    const auto t = targets.data();
    std::vector<T> y(z.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = std::max(z[i], T(0)) - z[i] * t[i] + std::log1p(std::exp(-std::abs(z[i])));
    }
    auto out = make_output<T>(op, logits.shape(), std::move(y));
    record(tape_for<T>({&logits}), op, out, [zs = logits.storage(), ts = targets.storage(), os = out.storage()] {
        if (!zs->requires_grad) return;
        auto g = zs->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T v = zs->data[i];
            const T p = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
            g[i] += os->grad[i] * (p - ts->data[i]);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------------------------

#define FUNET_INSTANTIATE_OPS(T)                                                                                  \
    template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,          \
                                   const Conv2dOptions&);                                                         \
    template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);         \
    template BasicTensor<T> matmul_batched(const BasicTensor<T>&, const BasicTensor<T>&);                        \
    template BasicTensor<T> softmax(const BasicTensor<T>&, int);                                                 \
    template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                      \
    template BasicTensor<T> relu(const BasicTensor<T>&);                                                         \
    template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, T);  \
    template BasicTensor<T> group_norm(const BasicTensor<T>&, int, const BasicTensor<T>&, const BasicTensor<T>&, \
                                       T);                                                                        \
    template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
    template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
    template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
    template BasicTensor<T> div(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
    template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                     \
    template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                                \
    template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, int);                                     \
    template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                               \
    template BasicTensor<T> permute(const BasicTensor<T>&, const std::vector<int>&);                             \
    template BasicTensor<T> resize_bilinear(const BasicTensor<T>&, std::int64_t, std::int64_t);                  \
    template BasicTensor<T> upsample2x(const BasicTensor<T>&);                                                   \
    template BasicTensor<T> avg_pool2x(const BasicTensor<T>&);                                                   \
    template BasicTensor<T> adaptive_global_avg_pool(const BasicTensor<T>&);                                     \
    template BasicTensor<T> scale_per_sample(const BasicTensor<T>&, const BasicTensor<T>&);                      \
    template BasicTensor<T> mul_spatial_gate(const BasicTensor<T>&, const BasicTensor<T>&);                      \
    template BasicTensor<T> add_batch_shared(const BasicTensor<T>&, const BasicTensor<T>&);                      \
    template BasicTensor<T> sum(const BasicTensor<T>&);                                                          \
    template BasicTensor<T> mean(const BasicTensor<T>&);                                                         \
    template BasicTensor<T> sum_per_sample(const BasicTensor<T>&);                                               \
    template BasicTensor<T> bce_with_logits(const BasicTensor<T>&, const BasicTensor<T>&);

FUNET_INSTANTIATE_OPS(float)
FUNET_INSTANTIATE_OPS(double)

#undef FUNET_INSTANTIATE_OPS

}  // namespace funet
