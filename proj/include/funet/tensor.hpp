#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace funet {

using Shape = std::vector<std::int64_t>;

/// Raised for any extent/rank disagreement between operands.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised in checked mode when an op produces NaN/Inf, and by training on a non-finite loss.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Process-wide switches. Checked mode scans every forward result for non-finite values.
// Deterministic mode forces fixed-order reductions in the parallel kernels so results are
// bitwise identical for any thread count.
enum class KernelBackend { Reference, Parallel };

void set_checked_mode(bool on);
bool checked_mode();
void set_deterministic_mode(bool on);
bool deterministic_mode();
void set_kernel_backend(KernelBackend backend);
KernelBackend kernel_backend();

namespace detail {

template <typename T>
struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a gradient flows
    bool requires_grad = false;

    std::span<T> grad_buffer()
    {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

// While a log is installed (thread-local), piecewise-linear ops fold their branch decisions
// into it. The finite-difference oracle uses this to spot probes that straddle a kink.
struct KinkLog {
    std::uint64_t hash = 1469598103934665603ULL;
    void fold(bool branch) { hash = (hash ^ static_cast<std::uint64_t>(branch)) * 1099511628211ULL; }
};
KinkLog* kink_log();
void set_kink_log(KinkLog* log);

}  // namespace detail

template <typename T>
class BasicTape;

/// Dense row-major tensor handle. Copies share storage; use clone() for a deep copy.
template <typename T>
class BasicTensor {
public:
    using value_type = T;
    using StoragePtr = std::shared_ptr<detail::Storage<T>>;

    BasicTensor() = default;
    explicit BasicTensor(StoragePtr storage) : s_(std::move(storage)) {}

    static BasicTensor zeros(Shape shape);
    static BasicTensor full(Shape shape, T value);
    static BasicTensor from_vector(Shape shape, std::vector<T> values);
    static BasicTensor scalar(T value);

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    int rank() const { return static_cast<int>(s_->shape.size()); }
    /// Extent of `axis`; negative axes count from the back.
    std::int64_t dim(int axis) const;
    std::int64_t numel() const { return static_cast<std::int64_t>(s_->data.size()); }

    std::span<const T> data() const { return s_->data; }
    std::span<T> mutable_data() { return s_->data; }
    T operator[](std::int64_t i) const { return s_->data[static_cast<std::size_t>(i)]; }
    T item() const;

    bool requires_grad() const { return s_->requires_grad; }
    BasicTensor& set_requires_grad(bool on)
    {
        s_->requires_grad = on;
        return *this;
    }
    bool has_grad() const { return !s_->grad.empty(); }
    std::span<const T> grad() const { return s_->grad; }
    std::span<T> mutable_grad() { return s_->grad_buffer(); }
    void zero_grad() { s_->grad.clear(); }

    /// New leaf with copied data and no gradient tracking.
    BasicTensor detach() const;
    BasicTensor clone() const { return detach(); }

    template <typename U>
    BasicTensor<U> cast() const
    {
        std::vector<U> out(s_->data.begin(), s_->data.end());
        return BasicTensor<U>::from_vector(s_->shape, std::move(out));
    }

    const StoragePtr& storage() const { return s_; }

private:
    StoragePtr s_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Append-only record of differentiable operations. Nodes are appended after their inputs exist,
/// so reverse insertion order is a reverse topological order.
template <typename T>
class BasicTape {
public:
    struct Node {
        std::string_view op;
        std::shared_ptr<detail::Storage<T>> output;
        std::function<void()> backward;
    };

    BasicTape() = default;
    BasicTape(const BasicTape&) = delete;
    BasicTape& operator=(const BasicTape&) = delete;

    void record(std::string_view op, std::shared_ptr<detail::Storage<T>> output,
                std::function<void()> backward);
    std::size_t size() const { return nodes_.size(); }
    const std::vector<Node>& nodes() const { return nodes_; }
    void clear() { nodes_.clear(); }

    /// Tape recording ops on the calling thread, or nullptr.
    static BasicTape* current();

private:
    template <typename U>
    friend class TapeScope;
    std::vector<Node> nodes_;
};

using Tape = BasicTape<float>;
using TapeD = BasicTape<double>;

/// Makes `tape` the recording tape of the calling thread for the scope's lifetime.
template <typename T>
class TapeScope {
public:
    explicit TapeScope(BasicTape<T>& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    BasicTape<T>* previous_;
};

template <typename T>
TapeScope(BasicTape<T>&) -> TapeScope<T>;

/// Reverse-mode sweep: seeds d(loss)=1 and accumulates into every requires_grad leaf.
/// Intermediate gradients are reset first, so a second call accumulates leaf gradients exactly once more.
template <typename T>
void backward(BasicTape<T>& tape, const BasicTensor<T>& loss);

}  // namespace funet
