#include "funet/tensor.hpp"

#include <atomic>
#include <sstream>

namespace funet {

namespace {

std::atomic<bool> g_checked{false};
std::atomic<bool> g_deterministic{true};
std::atomic<KernelBackend> g_backend{KernelBackend::Parallel};

template <typename T>
thread_local BasicTape<T>* t_current_tape = nullptr;

}  // namespace

std::int64_t shape_numel(const Shape& shape)
{
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
}

void set_checked_mode(bool on) { g_checked = on; }
bool checked_mode() { return g_checked; }
void set_deterministic_mode(bool on) { g_deterministic = on; }
bool deterministic_mode() { return g_deterministic; }

namespace detail {
namespace {
thread_local KinkLog* t_kink_log = nullptr;
}
KinkLog* kink_log() { return t_kink_log; }
void set_kink_log(KinkLog* log) { t_kink_log = log; }
}  // namespace detail
void set_kernel_backend(KernelBackend backend) { g_backend = backend; }
KernelBackend kernel_backend() { return g_backend; }

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape)
{
    return full(std::move(shape), T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value)
{
    for (auto e : shape) {
        if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    auto s = std::make_shared<detail::Storage<T>>();
    s->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
    s->shape = std::move(shape);
    return BasicTensor(std::move(s));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_vector(Shape shape, std::vector<T> values)
{
    for (auto e : shape) {
        if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                         " elements but " + std::to_string(values.size()) + " were given");
    }
    auto s = std::make_shared<detail::Storage<T>>();
    s->shape = std::move(shape);
    s->data = std::move(values);
    return BasicTensor(std::move(s));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value)
{
    return from_vector({1}, {value});
}

template <typename T>
std::int64_t BasicTensor<T>::dim(int axis) const
{
    const int r = rank();
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
    }
    return s_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
T BasicTensor<T>::item() const
{
    if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
    return s_->data[0];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const
{
    return from_vector(s_->shape, s_->data);
}

template <typename T>
void BasicTape<T>::record(std::string_view op, std::shared_ptr<detail::Storage<T>> output,
                          std::function<void()> backward)
{
    nodes_.push_back(Node{op, std::move(output), std::move(backward)});
}

template <typename T>
BasicTape<T>* BasicTape<T>::current()
{
    return t_current_tape<T>;
}

template <typename T>
TapeScope<T>::TapeScope(BasicTape<T>& tape) : previous_(t_current_tape<T>)
{
    t_current_tape<T> = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope()
{
    t_current_tape<T> = previous_;
}

template <typename T>
void backward(BasicTape<T>& tape, const BasicTensor<T>& loss)
{
    if (!loss.defined() || loss.numel() != 1) {
        throw ShapeError("backward needs a scalar loss, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    if (!loss.requires_grad()) return;

    for (auto& node : tape.nodes()) node.output->grad.clear();
    loss.storage()->grad_buffer()[0] += T(1);

    const auto& nodes = tape.nodes();
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        if (it->output->grad.empty()) continue;
        it->backward();
    }
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class BasicTape<float>;
template class BasicTape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template void backward(BasicTape<float>&, const BasicTensor<float>&);
template void backward(BasicTape<double>&, const BasicTensor<double>&);

}  // namespace funet
