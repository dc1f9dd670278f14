#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dc2fusion/tensor.hpp"

using namespace dc2f;
using D = double;

namespace {

Tensor<D> rnd(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    return Tensor<D>::uniform(std::move(shape), rng, lo, hi);
}

std::vector<D> grad_of(const std::function<Tensor<D>(const Tensor<D>&)>& f, const Tensor<D>& x) {
    Tensor<D> xc = x.clone();
    xc.set_requires_grad(true);
    Tape<D> tape;
    TapeScope<D> scope(tape);
    tape.backward(f(xc));
    Tensor<D> g = xc.grad_tensor();
    return {g.values().begin(), g.values().end()};
}

}  // namespace

TEST_CASE("elementwise arithmetic") {
    Tensor<D> a = Tensor<D>::from({2}, {1, 2});
    Tensor<D> b = Tensor<D>::from({2}, {3, 4});
    Tensor<D> c = add(a, b);
    CHECK(c.data()[0] == 4);
    CHECK(c.data()[1] == 6);

    CHECK(sub(a, b).data()[0] == -2);
    CHECK(mul(a, b).data()[1] == 8);
    CHECK(div(b, a).data()[1] == 2);

    // scalar broadcast on either side
    Tensor<D> s = Tensor<D>::scalar(2);
    CHECK(mul(a, s).data()[1] == 4);
    CHECK(mul(s, a).data()[1] == 4);

    CHECK_THROWS_AS(add(a, Tensor<D>::zeros({3})), ShapeError);
}

TEST_CASE("mul by zero scalar annihilates values and gradient") {
    Tensor<D> x = Tensor<D>::from({3}, {1, -2, 5}, true);
    Tensor<D> zero = Tensor<D>::scalar(0);
    Tape<D> tape;
    TapeScope<D> scope(tape);
    Tensor<D> y = sum_all(mul(x, zero));
    CHECK(y.item() == 0);
    tape.backward(y);
    for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad_tensor().data()[i] == 0);
}

TEST_CASE("product-rule gradient: d(a*b)/da = b") {
    auto g = grad_of([](const Tensor<D>& a) { return sum_all(mul(a, Tensor<D>::from({1}, {5}))); },
                     Tensor<D>::from({1}, {2}));
    CHECK(g[0] == 5);
}

TEST_CASE("ops do not mutate input buffers") {
    Rng rng(3);
    Tensor<D> a = rnd({4, 4}, rng);
    Tensor<D> b = rnd({4, 4}, rng);
    std::vector<D> snap_a(a.values().begin(), a.values().end());
    std::vector<D> snap_b(b.values().begin(), b.values().end());
    (void)add(a, b);
    (void)mul(a, b);
    (void)matmul(a, b);
    (void)softmax(a, 1);
    (void)reduce_var(a, {0});
    (void)concat<D>({a, b}, 0);
    CHECK(std::equal(snap_a.begin(), snap_a.end(), a.values().begin()));
    CHECK(std::equal(snap_b.begin(), snap_b.end(), b.values().begin()));
}

TEST_CASE("matmul identities") {
    Tensor<D> eye = Tensor<D>::from({2, 2}, {1, 0, 0, 1});
    Tensor<D> m = Tensor<D>::from({2, 2}, {3, 1, 2, 4});
    Tensor<D> r = matmul(eye, m);
    for (std::size_t i = 0; i < 4; ++i) CHECK(r.data()[i] == m.data()[i]);

    Tensor<D> row = Tensor<D>::from({1, 2}, {1, 2});
    Tensor<D> col = Tensor<D>::from({2, 1}, {3, 4});
    CHECK(matmul(row, col).item() == 11);

    CHECK_THROWS_AS(matmul(row, row), ShapeError);
}

TEST_CASE("matmul gradient vs central differences (4x5 . 5x3)") {
    Rng rng(11);
    Tensor<D> a = rnd({4, 5}, rng);
    Tensor<D> b = rnd({5, 3}, rng);
    Tensor<D> w = rnd({4, 3}, rng);
    auto fa = [&](const Tensor<D>& x) { return sum_all(mul(matmul(x, b), w)); };
    auto fb = [&](const Tensor<D>& x) { return sum_all(mul(matmul(a, x), w)); };
    CHECK(grad_check<D>(fa, a, 1e-4).max_rel_err < 1e-6);
    CHECK(grad_check<D>(fb, b, 1e-4).max_rel_err < 1e-6);
}

TEST_CASE("softmax identities") {
    Tensor<D> s = softmax(Tensor<D>::from({2}, {0, 0}), 0);
    CHECK(s.data()[0] == 0.5);
    CHECK(s.data()[1] == 0.5);

    Tensor<D> big = softmax(Tensor<D>::from({2}, {1000, 1000}), 0);
    CHECK(all_finite(big));
    CHECK(big.data()[0] == 0.5);

    // closed form e^0 / (e^0 + 3)
    Tensor<D> t = softmax(Tensor<D>::from({2}, {0, std::log(3.0)}), 0);
    CHECK(t.data()[0] == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(t.data()[1] == doctest::Approx(0.75).epsilon(1e-14));

    // slices along the axis sum to 1
    Rng rng(5);
    Tensor<D> x = rnd({3, 7}, rng, -5, 5);
    Tensor<D> sm = softmax(x, 1);
    for (std::size_t i = 0; i < 3; ++i) {
        D sum = 0;
        for (std::size_t j = 0; j < 7; ++j) sum += sm.data()[i * 7 + j];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("reductions use population statistics") {
    Tensor<D> x = Tensor<D>::from({3}, {1, 2, 3});
    CHECK(reduce_mean(x, {0}).item() == 2.0);
    CHECK(reduce_var(Tensor<D>::full({5}, 3.25), {0}).item() == 0.0);
    // population variance of {1,2,3}: (1 + 0 + 1)/3 = 2/3
    CHECK(reduce_var(x, {0}).item() == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK_THROWS_AS(reduce_mean(x, {}), ShapeError);
    CHECK_THROWS_AS(reduce_mean(x, {1}), ShapeError);

    Rng rng(9);
    Tensor<D> y = rnd({2, 3, 4}, rng);
    CHECK(reduce_mean(y, {1}).shape() == Shape{2, 4});
}

TEST_CASE("concat semantics") {
    Rng rng(13);
    Tensor<D> a = rnd({1, 4, 8, 8, 8}, rng);
    Tensor<D> b = rnd({1, 4, 8, 8, 8}, rng);
    Tensor<D> c = concat<D>({a, b}, 1);
    CHECK(c.shape() == Shape{1, 8, 8, 8, 8});

    Tensor<D> single = concat<D>({a}, 1);
    CHECK(std::equal(single.values().begin(), single.values().end(), a.values().begin()));

    CHECK_THROWS_AS(concat<D>({a, rnd({1, 4, 8, 8, 4}, rng)}, 1), ShapeError);
}

TEST_CASE("concat-split round trip is bit-exact on random shapes/axes") {
    Rng rng(17);
    for (int round = 0; round < 10; ++round) {
        Shape shape{1 + rng.uniform_int(4), 1 + rng.uniform_int(4), 1 + rng.uniform_int(4)};
        const std::size_t axis = rng.uniform_int(3);
        Shape s2 = shape;
        s2[axis] = 1 + rng.uniform_int(4);
        Tensor<D> a = rnd(shape, rng);
        Tensor<D> b = rnd(s2, rng);
        auto parts = split(concat<D>({a, b}, axis), axis, {shape[axis], s2[axis]});
        CHECK(std::equal(parts[0].values().begin(), parts[0].values().end(), a.values().begin()));
        CHECK(std::equal(parts[1].values().begin(), parts[1].values().end(), b.values().begin()));
    }
}

TEST_CASE("backward basics") {
    // loss = sum(x) -> grad ones
    auto g1 = grad_of([](const Tensor<D>& x) { return sum_all(x); }, Tensor<D>::from({3}, {7, 8, 9}));
    CHECK(g1 == std::vector<D>{1, 1, 1});

    // loss = x^2 at x=3 -> grad 6
    auto g2 = grad_of([](const Tensor<D>& x) { return sum_all(mul(x, x)); }, Tensor<D>::from({1}, {3}));
    CHECK(g2[0] == 6);

    // fan-out y = x + x -> grad 2
    auto g3 = grad_of([](const Tensor<D>& x) { return sum_all(add(x, x)); }, Tensor<D>::from({1}, {1}));
    CHECK(g3[0] == 2);
}

TEST_CASE("backward requires a scalar loss and consumes the tape once") {
    Tensor<D> x = Tensor<D>::from({2}, {1, 2}, true);
    Tape<D> tape;
    TapeScope<D> scope(tape);
    Tensor<D> y = add(x, x);
    CHECK_THROWS_AS(tape.backward(y), NumericError);

    Tensor<D> loss = sum_all(y);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), NumericError);
}

TEST_CASE("backward is deterministic between runs of the same graph") {
    Rng rng(23);
    Tensor<D> x0 = rnd({4, 4}, rng);
    auto run = [&]() {
        return grad_of(
            [](const Tensor<D>& x) {
                return sum_all(mul(softmax(matmul(x, transpose_last2(x)), 1), Tensor<D>::full({4, 4}, 0.25)));
            },
            x0);
    };
    auto a = run();
    auto b = run();
    CHECK(a == b);  // bit-identical
}

TEST_CASE("no recording happens without an active tape") {
    Tensor<D> x = Tensor<D>::from({2}, {1, 2}, true);
    Tensor<D> y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK(x.grad_data() == nullptr);
}

TEST_CASE("grad_check: f = sum is exact") {
    // dyadic values and a power-of-two eps keep every FD operation exact
    Tensor<D> x = Tensor<D>::from({6}, {0.5, -1.25, 2.0, 0.75, -0.125, 3.5});
    auto r = grad_check<D>([](const Tensor<D>& t) { return sum_all(t); }, x, 0x1.0p-12);
    CHECK(r.max_rel_err == 0.0);
}

TEST_CASE("debug finite check flags non-finite op results") {
    DebugFlags::check_finite = true;
    CHECK_THROWS_AS((void)div(Tensor<D>::from({2}, {1, 1}), Tensor<D>::from({2}, {1, 0})), NumericError);
    DebugFlags::check_finite = false;
}

TEST_CASE("unary op gradients") {
    Rng rng(31);
    auto fgelu = [](const Tensor<D>& x) { return sum_all(gelu(x)); };
    CHECK(grad_check<D>(fgelu, rnd({2, 5}, rng, -2, 2), 1e-4).max_rel_err < 1e-6);
    auto fsqrt = [](const Tensor<D>& x) { return sum_all(sqrt(x)); };
    CHECK(grad_check<D>(fsqrt, rnd({2, 5}, rng, 0.5, 2.0), 1e-4).max_rel_err < 1e-6);
    auto fabsv = [](const Tensor<D>& x) { return sum_all(abs(x)); };
    CHECK(grad_check<D>(fabsv, rnd({2, 5}, rng, 0.25, 1.0), 1e-4).max_rel_err < 1e-6);
}

TEST_CASE("layer_norm normalizes over the chosen axis") {
    Rng rng(37);
    Tensor<D> x = rnd({6, 3, 3, 3}, rng, -4, 4);
    Tensor<D> gamma = Tensor<D>::full({6}, 1.0);
    Tensor<D> beta = Tensor<D>::zeros({6});
    Tensor<D> y = layer_norm(x, gamma, beta, 0);
    for (std::size_t v = 0; v < 27; ++v) {
        D mean = 0, var = 0;
        for (std::size_t c = 0; c < 6; ++c) mean += y.data()[c * 27 + v];
        mean /= 6;
        for (std::size_t c = 0; c < 6; ++c) {
            const D d = y.data()[c * 27 + v] - mean;
            var += d * d;
        }
        var /= 6;
        CHECK(std::abs(mean) < 1e-12);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-4));  // eps sits in the denominator
    }
}

TEST_CASE("gradient accumulation across reuse in one graph") {
    Tensor<D> x = Tensor<D>::from({2}, {1, 2});
    Tensor<D> w = Tensor<D>::from({2}, {3, 4}, true);
    Tape<D> tape;
    TapeScope<D> scope(tape);
    Tensor<D> h = mul(x, w);
    Tensor<D> loss = sum_all(add(h, h));
    tape.backward(loss);
    CHECK(w.grad_tensor().data()[0] == 2 * 1);
    CHECK(w.grad_tensor().data()[1] == 2 * 2);
}
