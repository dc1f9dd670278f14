#pragma once

// Built-in verification: finite-difference gradient checks for every
// differentiable operator (64-bit, central differences) and a battery of
// exact invariants. The CLI `gradcheck` and `selftest` commands run these and
// the acceptance suite reuses them. Finite-difference evaluation never touches
// the tape, so it is independent of the backward rules under test.

#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "dc2fusion/dataset.hpp"
#include "dc2fusion/losses.hpp"
#include "dc2fusion/metrics.hpp"
#include "dc2fusion/model.hpp"
#include "dc2fusion/train.hpp"

namespace dc2f {

struct CheckResult {
    std::string name;
    bool pass = false;
    double value = 0;  // measured error (or probe value)
    double tol = 0;
};

namespace selfcheck_detail {

using D = double;
using Fn = std::function<Tensor<D>(const Tensor<D>&)>;

inline Tensor<D> rnd(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    return Tensor<D>::uniform(std::move(shape), rng, lo, hi);
}

// fixed small weight tensor (decouples one check from stream position)
inline Tensor<D> rnd_fixed() {
    Rng r(42);
    return Tensor<D>::uniform({3}, r, -1.0, 1.0);
}

inline void run_gc(std::vector<CheckResult>& out, const std::string& name, const Fn& f, const Tensor<D>& x,
                   double tol, std::size_t max_coords = 24) {
    GradCheckResult<D> r = grad_check<D>(f, x, 1e-4, max_coords);
    out.push_back({name, r.max_rel_err < tol, r.max_rel_err, tol});
}

}  // namespace selfcheck_detail

inline std::vector<CheckResult> run_gradient_checks() {
    using namespace selfcheck_detail;
    std::vector<CheckResult> out;
    Rng rng(20260801);

    // --- elementwise and scalar broadcast
    {
        Tensor<D> y = rnd({3, 4}, rng, 0.5, 1.5);
        Tensor<D> w = rnd({3, 4}, rng);
        run_gc(out, "add/sub/mul/div", [=](const Tensor<D>& x) {
            return sum_all(mul(sub(add(x, y), div(x, y)), w));
        }, rnd({3, 4}, rng), 1e-6);
        run_gc(out, "scalar broadcast / mean_all", [=](const Tensor<D>& x) {
            Tensor<D> c = sub(x, mean_all(x));
            return sum_all(mul(c, mul(c, w)));
        }, rnd({3, 4}, rng), 1e-6);
        run_gc(out, "abs", [=](const Tensor<D>& x) { return mean_all(abs(x)); },
               rnd({3, 4}, rng, 0.2, 1.0), 1e-6);
        run_gc(out, "sqrt", [=](const Tensor<D>& x) { return mean_all(sqrt(x)); },
               rnd({3, 4}, rng, 0.5, 2.0), 1e-6);
        run_gc(out, "gelu", [=](const Tensor<D>& x) { return sum_all(mul(gelu(x), w)); },
               rnd({3, 4}, rng, -2.0, 2.0), 1e-6);
    }

    // --- matmul
    {
        Tensor<D> b0 = rnd({5, 3}, rng);
        Tensor<D> a0 = rnd({4, 5}, rng);
        Tensor<D> w0 = rnd({4, 3}, rng);
        run_gc(out, "matmul lhs", [=](const Tensor<D>& x) { return sum_all(mul(matmul(x, b0), w0)); }, a0, 1e-6);
        run_gc(out, "matmul rhs", [=](const Tensor<D>& x) { return sum_all(mul(matmul(a0, x), w0)); }, b0, 1e-6);
        Tensor<D> bb = rnd({2, 4, 3}, rng);
        Tensor<D> wb = rnd({2, 3, 3}, rng);
        run_gc(out, "matmul batched", [=](const Tensor<D>& x) {
            return sum_all(mul(matmul(x, bb), wb));
        }, rnd({2, 3, 4}, rng), 1e-6);
        run_gc(out, "transpose_last2", [=](const Tensor<D>& x) {
            return sum_all(mul(transpose_last2(x), b0));
        }, rnd({3, 5}, rng), 1e-6);
    }

    // --- softmax, reductions, concat/slice, reshape/permute
    {
        Tensor<D> w = rnd({3, 5}, rng);
        run_gc(out, "softmax", [=](const Tensor<D>& x) { return sum_all(mul(softmax(x, 1), w)); },
               rnd({3, 5}, rng, -3.0, 3.0), 1e-6);
        Tensor<D> w2 = rnd({4}, rng);
        run_gc(out, "reduce_mean", [=](const Tensor<D>& x) {
            return sum_all(mul(reduce_mean(x, {0, 2}), w2));
        }, rnd({3, 4, 2}, rng), 1e-6);
        run_gc(out, "reduce_var", [=](const Tensor<D>& x) {
            return sum_all(mul(reduce_var(x, {0, 2}), w2));
        }, rnd({3, 4, 2}, rng), 1e-6);
        run_gc(out, "reduce_sum", [=](const Tensor<D>& x) {
            return sum_all(mul(reduce_sum(x, {1}), rnd_fixed()));
        }, rnd({3, 4}, rng), 1e-6);

        Tensor<D> other = rnd({2, 4}, rng);
        Tensor<D> wc = rnd({5, 4}, rng);
        run_gc(out, "concat", [=](const Tensor<D>& x) {
            return sum_all(mul(concat<D>({x, other}, 0), wc));
        }, rnd({3, 4}, rng), 1e-6);
        Tensor<D> ws = rnd({3, 2}, rng);
        run_gc(out, "slice", [=](const Tensor<D>& x) { return sum_all(mul(slice(x, 1, 1, 2), ws)); },
               rnd({3, 4}, rng), 1e-6);
        Tensor<D> wp = rnd({4, 2, 3}, rng);
        run_gc(out, "reshape+permute", [=](const Tensor<D>& x) {
            return sum_all(mul(permute(reshape(x, {2, 3, 4}), {2, 0, 1}), wp));
        }, rnd({6, 4}, rng), 1e-6);
    }

    // --- linear / layer_norm
    {
        Tensor<D> x0 = rnd({3, 4, 5}, rng);
        Tensor<D> w0 = rnd({5, 4}, rng);
        Tensor<D> b0 = rnd({4}, rng);
        Tensor<D> wl = rnd({3, 4, 4}, rng);
        run_gc(out, "linear wrt x", [=](const Tensor<D>& x) { return sum_all(mul(linear(x, w0, b0), wl)); }, x0, 1e-6);
        run_gc(out, "linear wrt w", [=](const Tensor<D>& w) { return sum_all(mul(linear(x0, w, b0), wl)); }, w0, 1e-6);
        run_gc(out, "linear wrt b", [=](const Tensor<D>& b) { return sum_all(mul(linear(x0, w0, b), wl)); }, b0, 1e-6);

        Tensor<D> g0 = rnd({5}, rng, 0.5, 1.5);
        Tensor<D> be0 = rnd({5}, rng);
        Tensor<D> xn = rnd({5, 3, 3, 3}, rng);
        Tensor<D> wn = rnd({5, 3, 3, 3}, rng);
        run_gc(out, "layer_norm wrt x", [=](const Tensor<D>& x) {
            return sum_all(mul(layer_norm(x, g0, be0, 0), wn));
        }, xn, 1e-5);
        run_gc(out, "layer_norm wrt gamma", [=](const Tensor<D>& g) {
            return sum_all(mul(layer_norm(xn, g, be0, 0), wn));
        }, g0, 1e-6);
        run_gc(out, "layer_norm wrt beta", [=](const Tensor<D>& b) {
            return sum_all(mul(layer_norm(xn, g0, b, 0), wn));
        }, be0, 1e-6);
    }

    // --- conv3d variants
    {
        Tensor<D> x1 = rnd({2, 5, 5, 5}, rng);
        Tensor<D> w1 = rnd({3, 2, 1, 1, 1}, rng);
        Tensor<D> b1 = rnd({3}, rng);
        Tensor<D> wo1 = rnd({3, 5, 5, 5}, rng);
        ConvSpec s1 = make_conv_spec(2, 3, 1);
        run_gc(out, "conv3d k1 wrt input", [=](const Tensor<D>& x) {
            return sum_all(mul(conv3d(x, w1, b1, s1), wo1));
        }, x1, 1e-6);
        run_gc(out, "conv3d k1 wrt weights", [=](const Tensor<D>& w) {
            return sum_all(mul(conv3d(x1, w, b1, s1), wo1));
        }, w1, 1e-6);
        run_gc(out, "conv3d k1 wrt bias", [=](const Tensor<D>& b) {
            return sum_all(mul(conv3d(x1, w1, b, s1), wo1));
        }, b1, 1e-6);

        Tensor<D> x2 = rnd({4, 6, 6, 6}, rng);
        Tensor<D> w2 = rnd({4, 2, 3, 3, 3}, rng);
        Tensor<D> b2 = rnd({4}, rng);
        Tensor<D> wo2 = rnd({4, 6, 6, 6}, rng);
        ConvSpec s2 = make_conv_spec(4, 4, 3, 1, 1, 2);
        run_gc(out, "conv3d k3 grouped wrt input", [=](const Tensor<D>& x) {
            return sum_all(mul(conv3d(x, w2, b2, s2), wo2));
        }, x2, 1e-6, 20);
        run_gc(out, "conv3d k3 grouped wrt weights", [=](const Tensor<D>& w) {
            return sum_all(mul(conv3d(x2, w, b2, s2), wo2));
        }, w2, 1e-6, 20);

        Tensor<D> x3 = rnd({2, 6, 6, 6}, rng);
        Tensor<D> w3 = rnd({4, 2, 2, 2, 2}, rng);
        Tensor<D> b3 = rnd({4}, rng);
        Tensor<D> wo3 = rnd({4, 3, 3, 3}, rng);
        ConvSpec s3 = make_conv_spec(2, 4, 2, 2, 0, 1);
        run_gc(out, "conv3d strided wrt input", [=](const Tensor<D>& x) {
            return sum_all(mul(conv3d(x, w3, b3, s3), wo3));
        }, x3, 1e-6, 20);
    }

    // --- trilinear sampling and upsampling
    {
        Rng orng = rng.derive(7);
        Tensor<D> vol = rnd({2, 6, 6, 6}, rng);
        Tensor<D> offs = Tensor<D>::zeros({3, 6, 6, 6});
        for (std::size_t i = 0; i < offs.numel(); ++i) {
            // keep |offset| in (0.05, 0.35): stays clear of the non-smooth set
            const double mag = orng.uniform(0.05, 0.35);
            offs.data()[i] = orng.uniform() < 0.5 ? -mag : mag;
        }
        Tensor<D> wo = rnd({2, 6, 6, 6}, rng);
        run_gc(out, "trilinear_sample wrt offsets", [=](const Tensor<D>& o) {
            return sum_all(mul(trilinear_sample(vol, o), wo));
        }, offs, 1e-4, 30);
        run_gc(out, "trilinear_sample wrt volume", [=](const Tensor<D>& v) {
            return sum_all(mul(trilinear_sample(v, offs), wo));
        }, vol, 1e-6, 30);

        Tensor<D> xu = rnd({2, 3, 3, 3}, rng);
        Tensor<D> wu = rnd({2, 6, 6, 6}, rng);
        run_gc(out, "upsample_trilinear2x", [=](const Tensor<D>& x) {
            return sum_all(mul(upsample_trilinear2x(x), wu));
        }, xu, 1e-6, 20);
    }

    // --- window attention (partition -> multi-head cross attention -> merge)
    {
        const std::array<std::size_t, 3> win{2, 2, 2};
        Tensor<D> fa = rnd({4, 4, 4, 4}, rng);
        Tensor<D> fb = rnd({4, 4, 4, 4}, rng);
        AttnWeights<D> aw;
        aw.wq = rnd({4, 4}, rng);
        aw.bq = rnd({4}, rng);
        aw.wk = rnd({4, 4}, rng);
        aw.bk = rnd({4}, rng);
        aw.wv = rnd({4, 4}, rng);
        aw.bv = rnd({4}, rng);
        aw.wo = rnd({4, 4}, rng);
        aw.bo = rnd({4}, rng);
        Tensor<D> wout = rnd({4, 4, 4, 4}, rng);
        auto attn_of = [=](const Tensor<D>& qsrc, const Tensor<D>& ksrc) {
            return cross_attention(window_partition(qsrc, win), window_partition(ksrc, win), 2, aw);
        };
        run_gc(out, "window attention wrt query stream", [=](const Tensor<D>& x) {
            return sum_all(mul(attn_of(x, fb), wout));
        }, fa, 1e-5, 24);
        run_gc(out, "window attention wrt key stream", [=](const Tensor<D>& x) {
            return sum_all(mul(attn_of(fa, x), wout));
        }, fb, 1e-5, 24);
        run_gc(out, "window attention wrt W_Q", [=](const Tensor<D>& w) {
            AttnWeights<D> aw2 = aw;
            aw2.wq = w;
            return sum_all(mul(cross_attention(window_partition(fa, win), window_partition(fb, win), 2, aw2), wout));
        }, aw.wq, 1e-5, 16);
    }

    // --- losses
    {
        Tensor<D> a8 = rnd({1, 8, 8, 8}, rng, 0.0, 1.0);
        Tensor<D> b8 = rnd({1, 8, 8, 8}, rng, 0.0, 1.0);
        run_gc(out, "ssim loss", [=](const Tensor<D>& x) { return ssim(x, b8); }, a8, 1e-4, 16);
        Tensor<D> a6 = rnd({1, 6, 6, 6}, rng, 0.0, 1.0);
        Tensor<D> b6 = rnd({1, 6, 6, 6}, rng, 0.0, 1.0);
        run_gc(out, "ncc loss", [=](const Tensor<D>& x) { return ncc(x, b6); }, a6, 1e-6, 20);
        run_gc(out, "l1 loss", [=](const Tensor<D>& x) { return l1(x, b6); }, a6, 1e-6, 20);
        Tensor<D> m8 = rnd({1, 8, 8, 8}, rng, 0.0, 1.0);
        run_gc(out, "pair loss", [=](const Tensor<D>& x) { return pair_loss(x, b8, m8); }, a8, 1e-4, 12);
        Tensor<D> f10 = rnd({1, 10, 10, 10}, rng, 0.0, 1.0);
        Tensor<D> m10 = rnd({1, 10, 10, 10}, rng, 0.0, 1.0);
        Tensor<D> p10 = rnd({1, 10, 10, 10}, rng, 0.0, 1.0);
        run_gc(out, "total loss", [=](const Tensor<D>& x) { return total_loss(x, m10, p10).total; }, f10, 1e-4, 12);
    }

    return out;
}

// ---------------------------------------------------------------------------
// invariant battery (exact identities, round trips, equivalences)

inline std::vector<CheckResult> run_invariant_checks() {
    using namespace selfcheck_detail;
    std::vector<CheckResult> out;
    Rng rng(97531);
    auto push = [&](const std::string& name, bool pass, double value, double tol) {
        out.push_back({name, pass, value, tol});
    };

    {  // softmax identities
        Tensor<D> s = softmax(Tensor<D>::from({2}, {0.0, 0.0}), 0);
        push("softmax symmetry [0,0] -> 0.5", std::abs(s.data()[0] - 0.5) == 0.0, s.data()[0], 0);
        Tensor<D> big = softmax(Tensor<D>::from({2}, {1000.0, 1000.0}), 0);
        push("softmax shift invariance (no overflow)", all_finite(big) && big.data()[0] == 0.5, big.data()[0], 0);
        Tensor<D> t = softmax(Tensor<D>::from({2}, {0.0, std::log(3.0)}), 0);
        const double err = std::abs(t.data()[0] - 0.25) + std::abs(t.data()[1] - 0.75);
        push("softmax closed form [0,ln3] -> [0.25,0.75]", err < 1e-15, err, 1e-15);
    }

    {  // trilinear zero-offset identity and convexity bounds
        Tensor<D> v = rnd({2, 8, 8, 8}, rng);
        Tensor<D> zero = Tensor<D>::zeros({3, 8, 8, 8});
        Tensor<D> s = trilinear_sample(v, zero);
        double maxdiff = 0;
        for (std::size_t i = 0; i < v.numel(); ++i) maxdiff = std::max(maxdiff, std::abs(s.data()[i] - v.data()[i]));
        push("trilinear zero-offset identity", maxdiff <= 1e-6, maxdiff, 1e-6);

        Tensor<D> offs = Tensor<D>::uniform({3, 8, 8, 8}, rng, -2.5, 2.5);
        Tensor<D> s2 = trilinear_sample(v, offs);
        double lo = v.data()[0], hi = v.data()[0];
        for (std::size_t c = 0; c < 2; ++c) {
            lo = hi = v.data()[c * 512];
            for (std::size_t i = 0; i < 512; ++i) {
                lo = std::min(lo, v.data()[c * 512 + i]);
                hi = std::max(hi, v.data()[c * 512 + i]);
            }
            for (std::size_t i = 0; i < 512; ++i) {
                const double x = s2.data()[c * 512 + i];
                if (x < lo - 1e-12 || x > hi + 1e-12) {
                    push("trilinear convex bounds", false, x, 0);
                    goto bounds_done;
                }
            }
        }
        push("trilinear convex bounds", true, 0, 0);
    bounds_done:;
    }

    {  // window partition/merge bijection
        Tensor<D> f = rnd({3, 4, 4, 4}, rng);
        WindowGrid<D> g = window_partition(f, {2, 2, 2});
        Tensor<D> back = window_merge(g);
        bool exact = back.shape() == f.shape();
        for (std::size_t i = 0; exact && i < f.numel(); ++i) exact = back.data()[i] == f.data()[i];
        push("window partition/merge bit-exact round trip", exact, exact ? 0 : 1, 0);
        push("window count 4^3 / 2^3 = 8 windows of 8 tokens",
             g.num_windows() == 8 && g.tokens_per_window() == 8, static_cast<double>(g.num_windows()), 0);
    }

    {  // zero-offset equivalence on the toy model (fresh offset heads)
        FusionModel<D> model(toy_config(), 11);
        Rng vr(5);
        Tensor<D> a = Tensor<D>::uniform({1, 16, 16, 16}, vr, 0.0, 1.0);
        Tensor<D> b = Tensor<D>::uniform({1, 16, 16, 16}, vr, 0.0, 1.0);
        Tensor<D> with = model.forward(a, b, {false, false});
        Tensor<D> without = model.forward(a, b, {true, false});
        double maxdiff = 0;
        for (std::size_t i = 0; i < with.numel(); ++i)
            maxdiff = std::max(maxdiff, std::abs(with.data()[i] - without.data()[i]));
        push("zero-offset equivalence (toy model, 16^3)", maxdiff <= 1e-6, maxdiff, 1e-6);
    }

    {  // metric identities
        Rng vr(77);
        Volume v;
        v.dims = {8, 8, 8};
        v.voxels.resize(512);
        for (auto& x : v.voxels) x = static_cast<float>(vr.uniform());
        ImageBuf img = image_from_volume(v);
        push("psnr(I,I) = 99 dB cap", psnr(img, img) == 99.0, psnr(img, img), 0);
        push("nmi(I,I) = 2 exactly", nmi(img, img) == 2.0, nmi(img, img), 0);
        push("fmi(I,I) = 1 exactly", fmi(img, img) == 1.0, fmi(img, img), 0);
        push("ssim_metric(I,I) = 1 exactly", ssim_metric(img, img, 7) == 1.0, ssim_metric(img, img, 7), 0);
        ImageBuf img2 = img;
        for (auto& x : img2.data) x += 0.1;
        const double p = psnr(img, img2);
        push("uniform 0.1 difference -> 20 dB", std::abs(p - 20.0) < 1e-9, std::abs(p - 20.0), 1e-9);
    }

    {  // loss identities
        Rng vr(78);
        Tensor<D> v = Tensor<D>::uniform({1, 8, 8, 8}, vr, 0.0, 1.0);
        LossBreakdown<D> lb = total_loss(v, v, v);
        push("total_loss(V,V,V) = 0", std::abs(lb.total.item()) <= 1e-12, std::abs(lb.total.item()), 1e-12);
        Tensor<D> a = Tensor<D>::uniform({1, 6, 6, 6}, vr, 0.0, 1.0);
        Tensor<D> b = affine(a, D(2.5), D(0.25));
        const double aff = std::abs(ncc(a, b).item() - 1.0);
        push("ncc affine invariance", aff <= 1e-9, aff, 1e-9);
        Tensor<D> f = Tensor<D>::uniform({1, 8, 8, 8}, vr, 0.0, 1.0);
        Tensor<D> m = Tensor<D>::uniform({1, 8, 8, 8}, vr, 0.0, 1.0);
        Tensor<D> p2 = Tensor<D>::uniform({1, 8, 8, 8}, vr, 0.0, 1.0);
        const double d = std::abs(pair_loss(f, m, p2).item() - pair_loss(f, p2, m).item());
        push("pair_loss modality-swap symmetry", d == 0.0, d, 0);
    }

    {  // shape ladder on the default config at 32^3 (probe hooks)
        FusionModel<float> model(ModelConfig{}, 3);
        Rng vr(9);
        Tensor<float> a = Tensor<float>::uniform({1, 32, 32, 32}, vr, 0.f, 1.f);
        Tensor<float> b = Tensor<float>::uniform({1, 32, 32, 32}, vr, 0.f, 1.f);
        ForwardTrace<float> trace;
        Tensor<float> fused = model.forward(a, b, {}, &trace);
        const std::size_t want_c[4] = {24, 48, 96, 192};
        const std::size_t want_s[4] = {16, 8, 4, 2};
        bool ok = trace.encoder_levels.size() == 4 && fused.shape() == Shape{1, 32, 32, 32};
        for (std::size_t i = 0; ok && i < 4; ++i)
            ok = trace.encoder_levels[i].channels == want_c[i] &&
                 trace.encoder_levels[i].spatial == std::array<std::size_t, 3>{want_s[i], want_s[i], want_s[i]};
        push("shape ladder [24,16^3]->[48,8^3]->[96,4^3]->[192,2^3]", ok, ok ? 0 : 1, 0);
    }

    {  // checkpoint + VOL3 round trips
        namespace fs = std::filesystem;
        const fs::path dir = fs::temp_directory_path() / "dc2f_selfcheck";
        fs::create_directories(dir);
        FusionModel<float> m1(toy_config(), 21);
        const std::string ck = (dir / "toy.dcf").string();
        m1.save(ck);
        FusionModel<float> m2 = FusionModel<float>::load(ck);
        const std::string ck2 = (dir / "toy2.dcf").string();
        m2.save(ck2);
        std::ifstream f1(ck, std::ios::binary), f2(ck2, std::ios::binary);
        std::stringstream s1, s2;
        s1 << f1.rdbuf();
        s2 << f2.rdbuf();
        push("checkpoint save/load/save byte-identical", s1.str() == s2.str() && !s1.str().empty(),
             s1.str() == s2.str() ? 0 : 1, 0);

        Rng vr(31);
        Volume v;
        v.dims = {8, 8, 8};
        v.voxels.resize(512);
        for (auto& x : v.voxels) x = static_cast<float>(vr.uniform());
        const std::string vp = (dir / "probe.vol3").string();
        save_volume(vp, v);
        Volume v2 = load_volume(vp);
        push("VOL3 bit-exact round trip", v2.dims == v.dims && v2.voxels == v.voxels, 0, 0);
        fs::remove_all(dir);
    }

    {  // determinism: same seed, same init; same input, same output
        FusionModel<float> m1(toy_config(), 77);
        FusionModel<float> m2(toy_config(), 77);
        bool same = m1.parameter_count() == m2.parameter_count();
        const auto& p1 = m1.params().items();
        const auto& p2 = m2.params().items();
        for (std::size_t i = 0; same && i < p1.size(); ++i)
            same = std::equal(p1[i].tensor.values().begin(), p1[i].tensor.values().end(),
                              p2[i].tensor.values().begin());
        push("seeded init determinism", same, same ? 0 : 1, 0);
    }

    return out;
}

// prints one line per check; returns true when everything passed
inline bool report_checks(const std::vector<CheckResult>& checks, const char* suite) {
    bool all = true;
    for (const auto& c : checks) {
        std::printf("[%s] %-55s %s (err=%.3g tol=%.3g)\n", suite, c.name.c_str(), c.pass ? "PASS" : "FAIL", c.value,
                    c.tol);
        all = all && c.pass;
    }
    return all;
}

}  // namespace dc2f
