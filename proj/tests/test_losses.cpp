#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dc2fusion/losses.hpp"

using namespace dc2f;
using D = double;

namespace {

Tensor<D> rnd(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
    return Tensor<D>::uniform(std::move(shape), rng, lo, hi);
}

// sliding-window scalar SSIM, written directly from the definition
double ssim_oracle(const Tensor<D>& a, const Tensor<D>& b, std::size_t w) {
    const std::size_t X = a.extent(1), Y = a.extent(2), Z = a.extent(3);
    const double c1 = 1e-4, c2 = 9e-4;
    const double wn = static_cast<double>(w * w * w);
    double total = 0;
    std::size_t count = 0;
    for (std::size_t c = 0; c < a.extent(0); ++c)
        for (std::size_t x0 = 0; x0 + w <= X; ++x0)
            for (std::size_t y0 = 0; y0 + w <= Y; ++y0)
                for (std::size_t z0 = 0; z0 + w <= Z; ++z0) {
                    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                    for (std::size_t x = x0; x < x0 + w; ++x)
                        for (std::size_t y = y0; y < y0 + w; ++y)
                            for (std::size_t z = z0; z < z0 + w; ++z) {
                                const double va = a.data()[((c * X + x) * Y + y) * Z + z];
                                const double vb = b.data()[((c * X + x) * Y + y) * Z + z];
                                sa += va;
                                sb += vb;
                                saa += va * va;
                                sbb += vb * vb;
                                sab += va * vb;
                            }
                    const double ma = sa / wn, mb = sb / wn;
                    const double var_a = saa / wn - ma * ma;
                    const double var_b = sbb / wn - mb * mb;
                    const double cov = sab / wn - ma * mb;
                    total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                             ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
                    ++count;
                }
    return total / static_cast<double>(count);
}

}  // namespace

TEST_CASE("ssim identity and anti-correlation") {
    Rng rng(1);
    Tensor<D> x = rnd({1, 8, 8, 8}, rng);
    CHECK(ssim(x, x).item() == 1.0);  // exact

    // binary volume vs its complement: anti-correlated structure
    Tensor<D> bin = Tensor<D>::zeros({1, 8, 8, 8});
    Rng rng2(2);
    for (std::size_t i = 0; i < bin.numel(); ++i) bin.data()[i] = rng2.uniform() < 0.5 ? 0.0 : 1.0;
    Tensor<D> inv = affine(bin, -1.0, 1.0);
    CHECK(ssim(bin, inv).item() < 0.0);
}

TEST_CASE("ssim matches the sliding-window oracle on random 12^3 pairs") {
    Rng rng(3);
    Tensor<D> a = rnd({1, 12, 12, 12}, rng);
    Tensor<D> b = rnd({1, 12, 12, 12}, rng);
    CHECK(ssim(a, b).item() == doctest::Approx(ssim_oracle(a, b, 7)).epsilon(1e-6));
    // symmetry
    CHECK(ssim(a, b).item() == doctest::Approx(ssim(b, a).item()).epsilon(1e-9));
}

TEST_CASE("ssim validates shapes and window fit") {
    Rng rng(4);
    Tensor<D> a = rnd({1, 8, 8, 8}, rng);
    CHECK_THROWS_AS((void)ssim(a, rnd({1, 8, 8, 4}, rng)), ShapeError);
    CHECK_THROWS_AS((void)ssim(rnd({1, 6, 6, 6}, rng), rnd({1, 6, 6, 6}, rng)), ShapeError);
}

TEST_CASE("ncc identities") {
    Rng rng(5);
    Tensor<D> x = rnd({1, 6, 6, 6}, rng);
    CHECK(std::abs(ncc(x, x).item() - 1.0) < 1e-12);
    CHECK(std::abs(ncc(x, affine(x, 3.0, 0.2)).item() - 1.0) < 1e-9);  // positive affine
    CHECK(std::abs(ncc(x, neg(x)).item() + 1.0) < 1e-12);              // sign flip

    // zero-variance guard
    CHECK(ncc(Tensor<D>::full({1, 6, 6, 6}, 0.5), x).item() == 0.0);
}

TEST_CASE("l1 identities and oracle") {
    Rng rng(6);
    Tensor<D> x = rnd({1, 4, 4, 4}, rng);
    CHECK(l1(x, x).item() == 0.0);
    CHECK(l1(Tensor<D>::zeros({1, 4, 4, 4}), Tensor<D>::full({1, 4, 4, 4}, 1.0)).item() == 1.0);

    Tensor<D> y = rnd({1, 4, 4, 4}, rng);
    double direct = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) direct += std::abs(x.data()[i] - y.data()[i]);
    direct /= static_cast<double>(x.numel());
    CHECK(l1(x, y).item() == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("pair loss identities") {
    Rng rng(7);
    Tensor<D> v = rnd({1, 8, 8, 8}, rng);
    Tensor<D> f = rnd({1, 8, 8, 8}, rng);
    CHECK(pair_loss(f, v, v).item() == 0.0);

    Tensor<D> p = rnd({1, 8, 8, 8}, rng);
    // fused == one modality: bias shows up as |1 - ssim(m, p)| > 0
    CHECK(pair_loss(v, v, p).item() == doctest::Approx(std::abs(1.0 - ssim(v, p).item())).epsilon(1e-12));
    CHECK(pair_loss(v, v, p).item() > 0.0);

    // modality-swap symmetry, exact
    CHECK(pair_loss(f, v, p).item() == pair_loss(f, p, v).item());
}

TEST_CASE("total loss composition") {
    Rng rng(8);
    Tensor<D> v = rnd({1, 8, 8, 8}, rng);
    LossBreakdown<D> zero = total_loss(v, v, v);
    CHECK(std::abs(zero.total.item()) <= 1e-12);
    CHECK(zero.ssim_mri.item() == 1.0);
    CHECK(zero.l1_pet.item() == 0.0);

    Tensor<D> f = rnd({1, 8, 8, 8}, rng);
    Tensor<D> m = rnd({1, 8, 8, 8}, rng);
    Tensor<D> p = rnd({1, 8, 8, 8}, rng);
    LossBreakdown<D> lb = total_loss(f, m, p);
    CHECK(lb.total.item() >= 0.0);
    const double recomposed = (1 - lb.ssim_mri.item()) + (1 - lb.ssim_pet.item()) + (1 - lb.ncc_mri.item()) +
                              (1 - lb.ncc_pet.item()) + lb.l1_mri.item() + lb.l1_pet.item() + lb.pair.item();
    CHECK(lb.total.item() == doctest::Approx(recomposed).epsilon(1e-12));

    // modality order is irrelevant to the total
    LossBreakdown<D> swapped = total_loss(f, p, m);
    CHECK(lb.total.item() == doctest::Approx(swapped.total.item()).epsilon(1e-12));

    // all components finite for non-constant inputs in [0,1]
    CHECK(all_finite(lb.total));
    CHECK(all_finite(lb.pair));
}

TEST_CASE("total loss gradient wrt fused passes the finite-difference check on 10^3 volumes") {
    Rng rng(9);
    Tensor<D> f = rnd({1, 10, 10, 10}, rng);
    Tensor<D> m = rnd({1, 10, 10, 10}, rng);
    Tensor<D> p = rnd({1, 10, 10, 10}, rng);
    auto loss = [&](const Tensor<D>& x) { return total_loss(x, m, p).total; };
    CHECK(grad_check<D>(loss, f, 1e-4, 24).max_rel_err < 1e-4);
}

TEST_CASE("ssim gradient on random 8^3 pairs") {
    Rng rng(10);
    Tensor<D> a = rnd({1, 8, 8, 8}, rng);
    Tensor<D> b = rnd({1, 8, 8, 8}, rng);
    auto f = [&](const Tensor<D>& x) { return ssim(x, b); };
    CHECK(grad_check<D>(f, a, 1e-4, 30).max_rel_err < 1e-4);
}
