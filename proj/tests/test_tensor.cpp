#include <cmath>
#include <random>

#include "doctest.h"
#include "funet/gradcheck.hpp"
#include "funet/gradcheck_suite.hpp"
#include "funet/kernels.hpp"
#include "funet/ops.hpp"

using namespace funet;

namespace {

TensorD random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1, double hi = 1)
{
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = d(rng);
    return TensorD::from_vector(std::move(shape), std::move(v));
}

// Independent direct convolution: loops written against the textbook definition,
// out[b,o,y,x] = bias[o] + sum_{c,i,j} in[b,c,y*s-p+i*d, x*s-p+j*d] * w[o,c,i,j].
std::vector<double> naive_conv(const TensorD& x, const TensorD& w, const TensorD& b, int s, int p, int d)
{
    const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const auto O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    const auto OH = (H + 2 * p - d * (KH - 1) - 1) / s + 1;
    const auto OW = (W + 2 * p - d * (KW - 1) - 1) / s + 1;
    std::vector<double> out;
    for (std::int64_t bi = 0; bi < B; ++bi)
        for (std::int64_t o = 0; o < O; ++o)
            for (std::int64_t yy = 0; yy < OH; ++yy)
                for (std::int64_t xx = 0; xx < OW; ++xx) {
                    double acc = b[o];
                    for (std::int64_t c = 0; c < C; ++c)
                        for (std::int64_t i = 0; i < KH; ++i)
                            for (std::int64_t j = 0; j < KW; ++j) {
                                const auto iy = yy * s - p + i * d, ix = xx * s - p + j * d;
                                if (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                    acc += x[((bi * C + c) * H + iy) * W + ix] * w[((o * C + c) * KH + i) * KW + j];
                            }
                    out.push_back(acc);
                }
    return out;
}

}  // namespace

TEST_CASE("tensor construction rejects inconsistent shapes")
{
    CHECK_THROWS_AS(Tensor::from_vector({2, 2}, {1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({0, 3}), ShapeError);
    auto t = Tensor::full({2, 3}, 1.5f);
    CHECK(t.numel() == 6);
    CHECK(t.dim(-1) == 3);
    CHECK_FALSE(t.has_grad());
}

TEST_CASE("conv2d examples")
{
    SUBCASE("identity kernel")
    {
        auto x = Tensor::from_vector({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
        auto y = conv2d(x, Tensor::from_vector({1, 1, 1, 1}, {1}));
        CHECK(y.shape() == Shape{1, 1, 3, 3});
        for (int i = 0; i < 9; ++i) CHECK(y[i] == x[i]);
    }
    SUBCASE("diagonal 2x2 kernel")
    {
        auto x = Tensor::from_vector({1, 1, 2, 2}, {1, 2, 3, 4});
        auto y = conv2d(x, Tensor::from_vector({1, 1, 2, 2}, {1, 0, 0, 1}));
        CHECK(y.shape() == Shape{1, 1, 1, 1});
        CHECK(y.item() == 5.0f);
    }
    SUBCASE("zero weight and bias")
    {
        std::mt19937_64 rng(3);
        auto x = random_tensor(rng, {2, 3, 5, 4});
        auto y = conv2d(x, TensorD::zeros({4, 3, 3, 3}), TensorD::zeros({4}), {{1, 1}, {1, 1}, {1, 1}});
        for (auto v : y.data()) CHECK(v == 0.0);
    }
    SUBCASE("errors name the dimension")
    {
        auto x = Tensor::zeros({1, 3, 4, 4});
        CHECK_THROWS_WITH_AS(conv2d(x, Tensor::zeros({2, 2, 3, 3})), doctest::Contains("channels"), ShapeError);
        CHECK_THROWS_WITH_AS(conv2d(x, Tensor::zeros({2, 3, 5, 3})), doctest::Contains("height"), ShapeError);
    }
}

TEST_CASE("conv2d agrees with the naive oracle on random shapes, both backends")
{
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> ext(1, 6), k(1, 3), two(1, 2), pd(0, 2);
    for (int trial = 0; trial < 40; ++trial) {
        const int kk = k(rng), d = two(rng), s = two(rng), p = pd(rng);
        const int span = d * (kk - 1) + 1;
        const int h = std::max(ext(rng), span - 2 * p), w = std::max(ext(rng), span - 2 * p);
        auto x = random_tensor(rng, {two(rng), ext(rng), h, w});
        auto wt = random_tensor(rng, {ext(rng), x.dim(1), kk, kk});
        auto b = random_tensor(rng, {wt.dim(0)});
        const auto want = naive_conv(x, wt, b, s, p, d);
        for (auto backend : {KernelBackend::Reference, KernelBackend::Parallel}) {
            set_kernel_backend(backend);
            auto y = conv2d(x, wt, b, {{s, s}, {p, p}, {d, d}});
            REQUIRE(y.numel() == static_cast<std::int64_t>(want.size()));
            for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(y[i] - want[i]) <= 1e-10);
        }
    }
    set_kernel_backend(KernelBackend::Parallel);
}

TEST_CASE("parallel conv backward matches the reference kernel")
{
    std::mt19937_64 rng(5);
    kernels::ConvGeometry g;
    g.batch = 3;
    g.in_channels = 4;
    g.in_h = 7;
    g.in_w = 5;
    g.out_channels = 5;
    g.kernel_h = g.kernel_w = 3;
    g.stride_h = 2;
    g.pad_h = g.pad_w = 1;
    g.dilation_w = 2;
    g.resolve();
    auto x = random_tensor(rng, {g.batch, g.in_channels, g.in_h, g.in_w});
    auto w = random_tensor(rng, {g.out_channels, g.in_channels, 3, 3});
    auto dy = random_tensor(rng, {g.batch, g.out_channels, g.out_h, g.out_w});
    std::vector<double> dx1(x.numel()), dw1(w.numel()), db1(g.out_channels);
    std::vector<double> dx2 = dx1, dw2 = dw1, db2 = db1;
    kernels::reference::conv2d_backward<double>(g, x.data(), w.data(), dy.data(), dx1, dw1, db1);
    kernels::parallel::conv2d_backward<double>(g, x.data(), w.data(), dy.data(), dx2, dw2, db2);
    for (std::size_t i = 0; i < dx1.size(); ++i) CHECK(dx1[i] == doctest::Approx(dx2[i]).epsilon(1e-12));
    for (std::size_t i = 0; i < dw1.size(); ++i) CHECK(dw1[i] == doctest::Approx(dw2[i]).epsilon(1e-12));
    for (std::size_t i = 0; i < db1.size(); ++i) CHECK(db1[i] == doctest::Approx(db2[i]).epsilon(1e-12));

    set_deterministic_mode(false);
    std::vector<double> dw3(w.numel());
    kernels::parallel::conv2d_backward<double>(g, x.data(), w.data(), dy.data(), {}, dw3, {});
    set_deterministic_mode(true);
    for (std::size_t i = 0; i < dw1.size(); ++i) CHECK(dw1[i] == doctest::Approx(dw3[i]).epsilon(1e-12));
}

TEST_CASE("linear examples")
{
    auto x = Tensor::from_vector({1, 2}, {1, 2});
    auto y = linear(x, Tensor::from_vector({2, 2}, {1, 1, 1, -1}), Tensor::zeros({2}));
    CHECK(y[0] == 3.0f);
    CHECK(y[1] == -1.0f);

    auto eye = Tensor::from_vector({2, 2}, {1, 0, 0, 1});
    auto z = linear(Tensor::from_vector({3, 1, 2}, {1, 2, 3, 4, 5, 6}), eye, Tensor::zeros({2}));
    CHECK(z.shape() == Shape{3, 1, 2});
    for (int i = 0; i < 6; ++i) CHECK(z[i] == static_cast<float>(i + 1));

    auto bias = Tensor::from_vector({3}, {0.5f, -1, 2});
    auto c = linear(Tensor::zeros({4, 2}), Tensor::full({3, 2}, 0.3f), bias);
    for (int r = 0; r < 4; ++r)
        for (int j = 0; j < 3; ++j) CHECK(c[r * 3 + j] == bias[j]);

    CHECK_THROWS_AS(linear(Tensor::zeros({2, 3}), eye), ShapeError);
}

TEST_CASE("matmul_batched examples")
{
    auto c = matmul_batched(Tensor::from_vector({1, 1, 2}, {1, 2}), Tensor::from_vector({1, 2, 1}, {3, 4}));
    CHECK(c.item() == 11.0f);

    std::mt19937_64 rng(2);
    auto a = random_tensor(rng, {2, 3, 4});
    std::vector<double> eye(2 * 16, 0.0);
    for (int b = 0; b < 2; ++b)
        for (int i = 0; i < 4; ++i) eye[b * 16 + i * 4 + i] = 1;
    auto same = matmul_batched(a, TensorD::from_vector({2, 4, 4}, eye));
    for (int i = 0; i < a.numel(); ++i) CHECK(same[i] == a[i]);

    auto zero = matmul_batched(TensorD::zeros({2, 3, 4}), random_tensor(rng, {2, 4, 5}));
    for (auto v : zero.data()) CHECK(v == 0.0);

    CHECK_THROWS_AS(matmul_batched(Tensor::zeros({2, 3, 4}), Tensor::zeros({1, 4, 2})), ShapeError);
    CHECK_THROWS_AS(matmul_batched(Tensor::zeros({1, 3, 4}), Tensor::zeros({1, 3, 2})), ShapeError);
}

TEST_CASE("softmax examples and row sums")
{
    auto u = softmax(TensorD::zeros({3}), 0);
    for (int i = 0; i < 3; ++i) CHECK(u[i] == doctest::Approx(1.0 / 3));

    auto sat = softmax(Tensor::from_vector({2}, {1000, 0}), 0);
    CHECK(std::isfinite(sat[0]));
    CHECK(sat[0] == doctest::Approx(1.0f));
    CHECK(sat[1] == doctest::Approx(0.0f));

    auto l = softmax(TensorD::from_vector({3}, {std::log(1.0), std::log(2.0), std::log(3.0)}), 0);
    CHECK(l[0] == doctest::Approx(1.0 / 6).epsilon(1e-12));
    CHECK(l[1] == doctest::Approx(2.0 / 6).epsilon(1e-12));
    CHECK(l[2] == doctest::Approx(3.0 / 6).epsilon(1e-12));

    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = random_tensor(rng, {3, 7, 5}, -1000, 1000);
        const int axis = trial % 3;
        auto y = softmax(x.cast<float>(), axis);
        const auto& s = x.shape();
        std::int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= s[i];
        for (int i = axis + 1; i < 3; ++i) inner *= s[i];
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < inner; ++i) {
                double total = 0;
                for (std::int64_t j = 0; j < s[axis]; ++j) {
                    const float v = y[(o * s[axis] + j) * inner + i];
                    CHECK(v >= 0.0f);
                    total += v;
                }
                CHECK(std::abs(total - 1.0) <= 1e-6);
            }
    }
}

TEST_CASE("sigmoid examples")
{
    CHECK(sigmoid(Tensor::scalar(0)).item() == 0.5f);
    CHECK(sigmoid(TensorD::scalar(std::log(3.0))).item() == doctest::Approx(0.75).epsilon(1e-15));
    std::mt19937_64 rng(1);
    auto x = random_tensor(rng, {50}, -30, 30);
    auto p = sigmoid(x);
    auto q = sigmoid(scale(x, -1.0));
    for (int i = 0; i < 50; ++i) {
        CHECK(p[i] == doctest::Approx(1 - q[i]).epsilon(1e-14));
        CHECK(p[i] > 0);
        CHECK(p[i] < 1);
    }
}

TEST_CASE("layer_norm examples")
{
    auto ones = TensorD::full({4}, 1.0);
    auto zeros = TensorD::zeros({4});
    auto c = layer_norm(TensorD::full({2, 4}, 7.0), ones, zeros, 1e-5);
    for (auto v : c.data()) CHECK(std::abs(v) < 1e-9);

    auto y = layer_norm(TensorD::from_vector({2}, {1, 3}), TensorD::full({2}, 1.0), TensorD::zeros({2}), 1e-14);
    CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-9));
    CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("reshape and permute round trips are exact")
{
    std::mt19937_64 rng(4);
    auto x = random_tensor(rng, {2, 3, 4, 5});
    auto r = reshape(reshape(x, {6, 20}), {2, 3, 4, 5});
    CHECK(r.shape() == x.shape());
    for (int i = 0; i < x.numel(); ++i) CHECK(r[i] == x[i]);

    const std::vector<int> perm{2, 0, 3, 1};
    std::vector<int> inv(4);
    for (int i = 0; i < 4; ++i) inv[perm[i]] = i;
    auto p = permute(x, perm);
    CHECK(p.shape() == Shape{4, 2, 5, 3});
    // p[a,b,c,d] == x[b,d,a,c]
    CHECK(p[((1 * 2 + 0) * 5 + 3) * 3 + 2] == x[((0 * 3 + 2) * 4 + 1) * 5 + 3]);
    auto back = permute(p, inv);
    CHECK(back.shape() == x.shape());
    for (int i = 0; i < x.numel(); ++i) CHECK(back[i] == x[i]);

    CHECK(reshape(x, {-1, 5}).shape() == Shape{24, 5});
    CHECK_THROWS_AS(reshape(x, {7, -1}), ShapeError);
}

TEST_CASE("adaptive global average pooling examples")
{
    CHECK(adaptive_global_avg_pool(Tensor::from_vector({1, 1, 2, 2}, {1, 2, 3, 4})).item() == 2.5f);
    auto c = adaptive_global_avg_pool(Tensor::full({2, 3, 4, 5}, -1.25f));
    CHECK(c.shape() == Shape{2, 3, 1, 1});
    for (auto v : c.data()) CHECK(v == -1.25f);
    auto z = adaptive_global_avg_pool(Tensor::zeros({1, 2, 3, 3}));
    for (auto v : z.data()) CHECK(v == 0.0f);
}

TEST_CASE("upsample2x and resize")
{
    auto c = upsample2x(Tensor::full({1, 2, 3, 4}, 0.3f));
    CHECK(c.shape() == Shape{1, 2, 6, 8});
    for (auto v : c.data()) CHECK(v == doctest::Approx(0.3f));
    // identity resize
    std::mt19937_64 rng(8);
    auto x = random_tensor(rng, {1, 1, 5, 6});
    auto same = resize_bilinear(x, 5, 6);
    for (int i = 0; i < x.numel(); ++i) CHECK(same[i] == doctest::Approx(x[i]).epsilon(1e-15));
    // backends agree
    set_kernel_backend(KernelBackend::Reference);
    auto r = resize_bilinear(x, 9, 13);
    set_kernel_backend(KernelBackend::Parallel);
    auto q = resize_bilinear(x, 9, 13);
    for (int i = 0; i < r.numel(); ++i) CHECK(r[i] == doctest::Approx(q[i]).epsilon(1e-14));
}

TEST_CASE("backward examples")
{
    SUBCASE("sum gives ones")
    {
        auto x = Tensor::from_vector({3}, {1, -2, 5});
        x.set_requires_grad(true);
        Tape tape;
        TapeScope scope(tape);
        auto loss = sum(x);
        backward(tape, loss);
        for (auto g : x.grad()) CHECK(g == 1.0f);
    }
    SUBCASE("sum of squares")
    {
        auto x = TensorD::from_vector({2}, {1, 2});
        x.set_requires_grad(true);
        TapeD tape;
        TapeScope scope(tape);
        auto loss = sum(mul(x, x));
        backward(tape, loss);
        CHECK(x.grad()[0] == 2.0);
        CHECK(x.grad()[1] == 4.0);
        SUBCASE("second call accumulates")
        {
            backward(tape, loss);
            CHECK(x.grad()[0] == 4.0);
            CHECK(x.grad()[1] == 8.0);
        }
    }
    SUBCASE("detached leaf gets nothing")
    {
        auto x = TensorD::from_vector({2}, {1, 2});
        x.set_requires_grad(true);
        auto d = x.detach();
        TapeD tape;
        TapeScope scope(tape);
        auto loss = sum(add(mul(x, x), d));
        backward(tape, loss);
        CHECK(x.has_grad());
        CHECK_FALSE(d.has_grad());
        CHECK_FALSE(d.requires_grad());
    }
    SUBCASE("non-scalar loss is rejected")
    {
        TapeD tape;
        CHECK_THROWS_AS(backward(tape, TensorD::zeros({2})), ShapeError);
    }
    SUBCASE("nothing recorded without a tape")
    {
        auto x = TensorD::from_vector({2}, {1, 2});
        x.set_requires_grad(true);
        auto y = mul(x, x);
        CHECK_FALSE(y.requires_grad());
    }
}

TEST_CASE("tape nodes are in topological order")
{
    auto x = TensorD::from_vector({2}, {1, 2});
    x.set_requires_grad(true);
    TapeD tape;
    TapeScope scope(tape);
    auto a = sigmoid(x);
    auto b = mul(a, x);
    auto c = sum(b);
    REQUIRE(tape.size() == 3);
    CHECK(tape.nodes()[0].output == a.storage());
    CHECK(tape.nodes()[1].output == b.storage());
    CHECK(tape.nodes()[2].output == c.storage());
}

TEST_CASE("grad_check examples")
{
    std::mt19937_64 rng(21);
    auto x = random_tensor(rng, {3, 4});
    CHECK(grad_check([](const std::vector<TensorD>& in) { return sum(sigmoid(in[0])); }, {x}) < 1e-6);

    auto w = random_tensor(rng, {3, 4});
    CHECK(grad_check([&](const std::vector<TensorD>& in) { return sum(mul(in[0], w)); }, {x}) < 1e-9);

    auto far = TensorD::from_vector({4}, {-0.8, -0.3, 0.4, 0.9});
    CHECK(grad_check([](const std::vector<TensorD>& in) { return sum(mul(relu(in[0]), in[0])); }, {far}) < 1e-6);
}

TEST_CASE("grad_check re-draws probes that straddle a relu kink")
{
    // f = sum(relu(3x)): the first element sits 2e-6 from the kink, inside +-eps
    const auto f = [](const std::vector<TensorD>& in) { return sum(relu(scale(in[0], 3.0))); };
    const auto x = TensorD::from_vector({3}, {2e-6, 0.5, -0.5});
    GradCheckOptions opt;
    const auto s = grad_check_stats(f, {x}, opt);
    CHECK(s.kink_skips == 1);
    CHECK(s.probes == 2);
    CHECK(s.worst < 1e-9);

    opt.skip_kink_crossings = false;
    const auto raw = grad_check_stats(f, {x}, opt);
    CHECK(raw.kink_skips == 0);
    CHECK(raw.probes == 3);
    CHECK(raw.worst > 0.5);  // the straddling probe reads a slope of 1.8 against an analytic 3

    // a wrong gradient away from any kink is still caught
    opt.skip_kink_crossings = true;
    const auto broken = [](const std::vector<TensorD>& in) {
        auto y = relu(in[0]);
        return sum(add(y, mul(y, y).detach()));  // forward has y^2, backward does not
    };
    CHECK(grad_check(broken, {TensorD::from_vector({2}, {0.7, 1.3})}, opt) > 0.5);
}

TEST_CASE("every op passes the finite-difference oracle over 20 seeds")
{
    for (const auto& name : gradcheck_op_names()) {
        double worst = 0;
        for (std::uint64_t seed = 0; seed < 20; ++seed) worst = std::max(worst, gradcheck_op(name, seed));
        INFO(name);
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("checked mode rejects non-finite results")
{
    set_checked_mode(true);
    auto a = Tensor::from_vector({2}, {1, 0});
    auto b = Tensor::from_vector({2}, {1, 0});
    CHECK_THROWS_AS(div(a, b), NumericError);
    CHECK_NOTHROW(add(a, b));
    set_checked_mode(false);
    CHECK_NOTHROW(div(a, b));
}
