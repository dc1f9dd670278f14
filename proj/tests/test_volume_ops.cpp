#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dc2fusion/volume_ops.hpp"

using namespace dc2f;
using D = double;

namespace {

Tensor<D> rnd(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    return Tensor<D>::uniform(std::move(shape), rng, lo, hi);
}

// scalar quadruple-loop reference convolution, written independently of conv3d
std::vector<D> conv_reference(const Tensor<D>& x, const Tensor<D>& w, const std::vector<D>& bias,
                              const ConvSpec& s, Shape& out_shape) {
    const std::size_t X = x.extent(1), Y = x.extent(2), Z = x.extent(3);
    const std::size_t OX = (X + 2 * s.padding[0] - s.kernel[0]) / s.stride[0] + 1;
    const std::size_t OY = (Y + 2 * s.padding[1] - s.kernel[1]) / s.stride[1] + 1;
    const std::size_t OZ = (Z + 2 * s.padding[2] - s.kernel[2]) / s.stride[2] + 1;
    out_shape = {s.out_channels, OX, OY, OZ};
    std::vector<D> out(s.out_channels * OX * OY * OZ, 0.0);
    const std::size_t cpg_in = s.in_channels / s.groups;
    const std::size_t cpg_out = s.out_channels / s.groups;
    for (std::size_t oc = 0; oc < s.out_channels; ++oc)
        for (std::size_t ox = 0; ox < OX; ++ox)
            for (std::size_t oy = 0; oy < OY; ++oy)
                for (std::size_t oz = 0; oz < OZ; ++oz) {
                    D acc = bias.empty() ? 0.0 : bias[oc];
                    for (std::size_t icl = 0; icl < cpg_in; ++icl)
                        for (std::size_t kx = 0; kx < s.kernel[0]; ++kx)
                            for (std::size_t ky = 0; ky < s.kernel[1]; ++ky)
                                for (std::size_t kz = 0; kz < s.kernel[2]; ++kz) {
                                    const long long xi = static_cast<long long>(ox * s.stride[0] + kx) -
                                                         static_cast<long long>(s.padding[0]);
                                    const long long yi = static_cast<long long>(oy * s.stride[1] + ky) -
                                                         static_cast<long long>(s.padding[1]);
                                    const long long zi = static_cast<long long>(oz * s.stride[2] + kz) -
                                                         static_cast<long long>(s.padding[2]);
                                    if (xi < 0 || yi < 0 || zi < 0 || xi >= static_cast<long long>(X) ||
                                        yi >= static_cast<long long>(Y) || zi >= static_cast<long long>(Z))
                                        continue;
                                    const std::size_t ic = (oc / cpg_out) * cpg_in + icl;
                                    acc += w.data()[((oc * cpg_in + icl) * s.kernel[0] + kx) * s.kernel[1] *
                                                        s.kernel[2] +
                                                    ky * s.kernel[2] + kz] *
                                           x.data()[((ic * X + static_cast<std::size_t>(xi)) * Y +
                                                     static_cast<std::size_t>(yi)) *
                                                        Z +
                                                    static_cast<std::size_t>(zi)];
                                }
                    out[((oc * OX + ox) * OY + oy) * OZ + oz] = acc;
                }
    return out;
}

}  // namespace

TEST_CASE("conv3d 1x1x1 identity and zero-weight cases") {
    Rng rng(1);
    Tensor<D> x = rnd({1, 4, 4, 4}, rng);
    Tensor<D> w_id = Tensor<D>::from({1, 1, 1, 1, 1}, {1});
    Tensor<D> y = conv3d(x, w_id, Tensor<D>(), make_conv_spec(1, 1, 1));
    CHECK(std::equal(y.values().begin(), y.values().end(), x.values().begin()));

    Tensor<D> xg = rnd({2, 4, 4, 4}, rng);
    xg.set_requires_grad(true);
    Tensor<D> w0 = Tensor<D>::zeros({3, 2, 3, 3, 3});
    Tape<D> tape;
    TapeScope<D> scope(tape);
    Tensor<D> z = conv3d(xg, w0, Tensor<D>(), make_conv_spec(2, 3, 3, 1, 1));
    for (D v : z.values()) CHECK(v == 0.0);
    tape.backward(sum_all(z));
    for (std::size_t i = 0; i < xg.numel(); ++i) CHECK(xg.grad_tensor().data()[i] == 0.0);
}

TEST_CASE("grouped conv equals independent per-channel convolutions") {
    Rng rng(2);
    Tensor<D> x = rnd({2, 5, 5, 5}, rng);
    Tensor<D> w = rnd({2, 1, 3, 3, 3}, rng);
    Tensor<D> b = rnd({2}, rng);
    Tensor<D> y = conv3d(x, w, b, make_conv_spec(2, 2, 3, 1, 1, 2));

    for (std::size_t c = 0; c < 2; ++c) {
        Tensor<D> xc = slice(x, 0, c, 1);
        Tensor<D> wc = slice(w, 0, c, 1);
        Tensor<D> bc = slice(b, 0, c, 1);
        Tensor<D> yc = conv3d(xc, wc, bc, make_conv_spec(1, 1, 3, 1, 1, 1));
        for (std::size_t i = 0; i < 125; ++i)
            CHECK(y.data()[c * 125 + i] == doctest::Approx(yc.data()[i]).epsilon(1e-12));
    }
}

TEST_CASE("conv3d matches the quadruple-loop reference on random 6^3 inputs") {
    Rng rng(3);
    struct Case {
        ConvSpec spec;
        const char* name;
    };
    const Case cases[] = {
        {make_conv_spec(2, 3, 3, 1, 1, 1), "k3 same"},
        {make_conv_spec(4, 4, 3, 1, 1, 4), "k3 depthwise"},
        {make_conv_spec(2, 4, 2, 2, 0, 1), "k2 s2"},
        {make_conv_spec(3, 6, 1, 1, 0, 3), "k1 grouped"},
        {make_conv_spec(1, 2, 5, 1, 0, 1), "k5 valid"},
    };
    for (const auto& c : cases) {
        CAPTURE(c.name);
        Tensor<D> x = rnd({c.spec.in_channels, 6, 6, 6}, rng);
        Tensor<D> w = rnd({c.spec.out_channels, c.spec.in_channels / c.spec.groups, c.spec.kernel[0],
                           c.spec.kernel[1], c.spec.kernel[2]},
                          rng);
        Tensor<D> b = rnd({c.spec.out_channels}, rng);
        Tensor<D> y = conv3d(x, w, b, c.spec);
        Shape ref_shape;
        std::vector<D> ref = conv_reference(x, w, {b.values().begin(), b.values().end()}, c.spec, ref_shape);
        REQUIRE(y.shape() == ref_shape);
        for (std::size_t i = 0; i < ref.size(); ++i)
            CHECK(y.data()[i] == doctest::Approx(ref[i]).epsilon(1e-5));
    }
}

TEST_CASE("conv3d validates channels, groups, and shapes") {
    Rng rng(4);
    Tensor<D> x = rnd({3, 4, 4, 4}, rng);
    Tensor<D> w = rnd({2, 3, 1, 1, 1}, rng);
    CHECK_THROWS_AS(conv3d(x, w, Tensor<D>(), make_conv_spec(3, 2, 1, 1, 0, 2)), ShapeError);
    CHECK_THROWS_AS(conv3d(x, w, Tensor<D>(), make_conv_spec(4, 2, 1)), ShapeError);
    CHECK_THROWS_AS(ConvSpec::same_padding({2, 2, 2}), ShapeError);
}

TEST_CASE("depthwise offset head channel plumbing") {
    Rng rng(5);
    const std::size_t c = 8;
    Tensor<D> f = rnd({c, 16, 16, 16}, rng);
    Tensor<D> dw_w = rnd({c, 1, 3, 3, 3}, rng);
    Tensor<D> dw_b = Tensor<D>::zeros({c});
    Tensor<D> pw_w = Tensor<D>::zeros({3, c, 1, 1, 1});
    Tensor<D> pw_b = Tensor<D>::zeros({3});

    // zero-initialized pointwise head: offsets identically zero
    Tensor<D> offsets = depthwise_offset_head(f, dw_w, dw_b, pw_w, pw_b, 3);
    CHECK(offsets.shape() == Shape{3, 16, 16, 16});
    for (D v : offsets.values()) CHECK(v == 0.0);

    // inner offset keeps the channel count; offsets are 3-channel
    Tensor<D> inner = conv3d(f, dw_w, dw_b, make_conv_spec(c, c, 3, 1, 1, c));
    CHECK(inner.shape() == Shape{c, 16, 16, 16});

    // constant input with zero-sum depthwise kernels -> zero inner offset (interior)
    Tensor<D> ones = Tensor<D>::full({2, 7, 7, 7}, 1.0);
    Rng rng2(6);
    Tensor<D> k = rnd({2, 1, 3, 3, 3}, rng2);
    for (std::size_t ch = 0; ch < 2; ++ch) {
        D s = 0;
        for (std::size_t i = 0; i < 27; ++i) s += k.data()[ch * 27 + i];
        for (std::size_t i = 0; i < 27; ++i) k.data()[ch * 27 + i] -= s / 27.0;
    }
    Tensor<D> io = conv3d(ones, k, Tensor<D>(), make_conv_spec(2, 2, 3, 1, 1, 2));
    for (std::size_t ch = 0; ch < 2; ++ch)
        for (std::size_t x = 1; x < 6; ++x)
            for (std::size_t y = 1; y < 6; ++y)
                for (std::size_t z = 1; z < 6; ++z)
                    CHECK(std::abs(io.data()[((ch * 7 + x) * 7 + y) * 7 + z]) < 1e-12);
}

TEST_CASE("trilinear_sample: zero offsets reproduce the input") {
    Rng rng(7);
    Tensor<D> v = rnd({2, 6, 6, 6}, rng);
    Tensor<D> zero = Tensor<D>::zeros({3, 6, 6, 6});
    Tensor<D> s = trilinear_sample(v, zero);
    for (std::size_t i = 0; i < v.numel(); ++i) CHECK(std::abs(s.data()[i] - v.data()[i]) <= 1e-6);
}

TEST_CASE("trilinear_sample: constant +1 x-offset shifts interior voxels") {
    Rng rng(8);
    Tensor<D> v = rnd({1, 6, 6, 6}, rng);
    Tensor<D> offs = Tensor<D>::zeros({3, 6, 6, 6});
    for (std::size_t i = 0; i < 216; ++i) offs.data()[i] = 1.0;  // dx channel
    Tensor<D> s = trilinear_sample(v, offs);
    for (std::size_t x = 0; x < 5; ++x)  // interior: x+1 stays in range
        for (std::size_t y = 0; y < 6; ++y)
            for (std::size_t z = 0; z < 6; ++z)
                CHECK(s.data()[(x * 6 + y) * 6 + z] ==
                      doctest::Approx(v.data()[((x + 1) * 6 + y) * 6 + z]).epsilon(1e-12));
}

TEST_CASE("trilinear_sample output stays within per-channel input bounds") {
    Rng rng(9);
    Tensor<D> v = rnd({2, 5, 5, 5}, rng, -3.0, 4.0);
    Tensor<D> offs = Tensor<D>::uniform({3, 5, 5, 5}, rng, -6.0, 6.0);
    Tensor<D> s = trilinear_sample(v, offs);
    for (std::size_t c = 0; c < 2; ++c) {
        D lo = v.data()[c * 125], hi = lo;
        for (std::size_t i = 0; i < 125; ++i) {
            lo = std::min(lo, v.data()[c * 125 + i]);
            hi = std::max(hi, v.data()[c * 125 + i]);
        }
        for (std::size_t i = 0; i < 125; ++i) {
            CHECK(s.data()[c * 125 + i] >= lo - 1e-12);
            CHECK(s.data()[c * 125 + i] <= hi + 1e-12);
        }
    }
}

TEST_CASE("trilinear_sample gradients vs finite differences at interior points") {
    Rng rng(10);
    Tensor<D> v = rnd({2, 6, 6, 6}, rng);
    Tensor<D> offs = Tensor<D>::zeros({3, 6, 6, 6});
    Rng orng(11);
    for (std::size_t i = 0; i < offs.numel(); ++i) {
        const double mag = orng.uniform(0.05, 0.35);
        offs.data()[i] = orng.uniform() < 0.5 ? -mag : mag;
    }
    Tensor<D> w = rnd({2, 6, 6, 6}, rng);
    auto fo = [&](const Tensor<D>& o) { return sum_all(mul(trilinear_sample(v, o), w)); };
    auto fv = [&](const Tensor<D>& x) { return sum_all(mul(trilinear_sample(x, offs), w)); };
    CHECK(grad_check<D>(fo, offs, 1e-4, 60).max_rel_err < 1e-4);
    CHECK(grad_check<D>(fv, v, 1e-4, 60).max_rel_err < 1e-4);
}

TEST_CASE("window partition geometry and round trip") {
    Rng rng(12);
    Tensor<D> f = rnd({3, 4, 4, 4}, rng);
    WindowGrid<D> g = window_partition(f, {2, 2, 2});
    CHECK(g.num_windows() == 8);
    CHECK(g.tokens_per_window() == 8);
    CHECK(g.tokens.shape() == Shape{8, 8, 3});

    // full-extent window: one window holding every voxel
    WindowGrid<D> full = window_partition(f, {4, 4, 4});
    CHECK(full.num_windows() == 1);
    CHECK(full.tokens_per_window() == 64);

    Tensor<D> back = window_merge(g);
    CHECK(std::equal(back.values().begin(), back.values().end(), f.values().begin()));

    Tensor<D> zeros = Tensor<D>::zeros({2, 4, 4, 4});
    Tensor<D> zback = window_merge(window_partition(zeros, {2, 2, 2}));
    for (D v : zback.values()) CHECK(v == 0.0);

    CHECK_THROWS_AS(window_partition(f, {3, 2, 2}), ShapeError);
    WindowGrid<D> bad = g;
    bad.counts = {1, 1, 1};
    CHECK_THROWS_AS(window_merge(bad), ShapeError);
}

TEST_CASE("window token order is x-fastest, then y, then z") {
    // voxel value encodes its coordinate so the order is observable
    Tensor<D> f = Tensor<D>::zeros({1, 2, 2, 2});
    for (std::size_t x = 0; x < 2; ++x)
        for (std::size_t y = 0; y < 2; ++y)
            for (std::size_t z = 0; z < 2; ++z) f.data()[(x * 2 + y) * 2 + z] = static_cast<D>(x + 2 * y + 4 * z);
    WindowGrid<D> g = window_partition(f, {2, 2, 2});
    // token t = ix + 2*iy + 4*iz must equal the encoded value
    for (std::size_t t = 0; t < 8; ++t) CHECK(g.tokens.data()[t] == static_cast<D>(t));
}

TEST_CASE("window partition/merge gradients") {
    Rng rng(13);
    Tensor<D> f = rnd({3, 4, 4, 4}, rng);
    Tensor<D> w = rnd({8, 8, 3}, rng);
    auto fp = [&](const Tensor<D>& x) { return sum_all(mul(window_partition(x, {2, 2, 2}).tokens, w)); };
    CHECK(grad_check<D>(fp, f, 1e-4, 30).max_rel_err < 1e-6);
}

TEST_CASE("patch_embed shapes and identities") {
    Rng rng(14);
    // literal default-config arithmetic: 32^3, patch 2, embed 24 -> [24,16^3]
    Tensor<D> v = rnd({1, 32, 32, 32}, rng);
    Tensor<D> w = rnd({24, 1, 2, 2, 2}, rng, -0.3, 0.3);
    Tensor<D> b = Tensor<D>::zeros({24});
    Tensor<D> e = patch_embed(v, w, b, 2, 24);
    CHECK(e.shape() == Shape{24, 16, 16, 16});

    // patch 1 with an identity 1x1x1 kernel passes the volume through
    Tensor<D> v1 = rnd({1, 4, 4, 4}, rng);
    Tensor<D> wid = Tensor<D>::from({1, 1, 1, 1, 1}, {1});
    Tensor<D> e1 = patch_embed(v1, wid, Tensor<D>::zeros({1}), 1, 1);
    CHECK(std::equal(e1.values().begin(), e1.values().end(), v1.values().begin()));

    // all-ones input, zero bias: each output voxel equals the kernel sum
    Tensor<D> ones = Tensor<D>::full({1, 4, 4, 4}, 1.0);
    Tensor<D> wk = rnd({3, 1, 2, 2, 2}, rng);
    Tensor<D> ek = patch_embed(ones, wk, Tensor<D>::zeros({3}), 2, 3);
    for (std::size_t oc = 0; oc < 3; ++oc) {
        D ksum = 0;
        for (std::size_t i = 0; i < 8; ++i) ksum += wk.data()[oc * 8 + i];
        for (std::size_t i = 0; i < 8; ++i) CHECK(ek.data()[oc * 8 + i] == doctest::Approx(ksum).epsilon(1e-12));
    }

    CHECK_THROWS_AS(patch_embed(rnd({1, 5, 4, 4}, rng), w, b, 2, 24), ShapeError);
}

TEST_CASE("downsample / upsample shape ladder") {
    Rng rng(15);
    Tensor<D> f = rnd({24, 16, 16, 16}, rng, -0.2, 0.2);
    Tensor<D> dw = rnd({48, 24, 2, 2, 2}, rng, -0.1, 0.1);
    Tensor<D> db = Tensor<D>::zeros({48});
    Tensor<D> down = downsample(f, dw, db);
    CHECK(down.shape() == Shape{48, 8, 8, 8});

    // trilinear x2 then a 1x1x1 conv halving channels restores the shape
    Tensor<D> up2 = upsample_trilinear2x(down);
    CHECK(up2.shape() == Shape{48, 16, 16, 16});
    Tensor<D> uw = rnd({24, 48, 1, 1, 1}, rng, -0.1, 0.1);
    Tensor<D> up = conv3d(up2, uw, Tensor<D>::zeros({24}), make_conv_spec(48, 24, 1));
    CHECK(up.shape() == f.shape());

    CHECK_THROWS_AS(downsample(rnd({2, 5, 6, 6}, rng), rnd({4, 2, 2, 2, 2}, rng), Tensor<D>()), ShapeError);
}

TEST_CASE("upsample of a constant volume is constant") {
    Tensor<D> c = Tensor<D>::full({3, 4, 4, 4}, 0.73);
    Tensor<D> up = upsample_trilinear2x(c);
    CHECK(up.shape() == Shape{3, 8, 8, 8});
    for (D v : up.values()) CHECK(v == doctest::Approx(0.73).epsilon(1e-12));
}
