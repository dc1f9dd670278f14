#pragma once

// Training losses: local-window SSIM, global NCC, mean-absolute L1, the
// modality-balance pair term, and the equally weighted total. Similarity terms
// (SSIM, NCC) enter the total as (1 - s) so that gradient descent maximizes
// them; the 1:1:1 weighting and the zero at perfect agreement are preserved.

#include <cstdio>

#include "dc2fusion/tensor.hpp"
#include "dc2fusion/volume_ops.hpp"

namespace dc2f {

// uniform depth-wise box filter over valid positions (no padding)
template <class T>
Tensor<T> box_filter(const Tensor<T>& x, std::size_t window) {
    const std::size_t c = x.extent(0);
    Tensor<T> w = Tensor<T>::full({c, 1, window, window, window},
                                  T(1) / static_cast<T>(window * window * window));
    return conv3d(x, w, Tensor<T>(), make_conv_spec(c, c, window, 1, 0, c));
}

// Mean local SSIM over a w^3 sliding window with population moments.
// C1 = (0.01)^2, C2 = (0.03)^2 for dynamic range 1. Returns a scalar in [-1,1].
template <class T>
Tensor<T> ssim(const Tensor<T>& a, const Tensor<T>& b, std::size_t window = 7) {
    if (a.shape() != b.shape()) throw ShapeError("ssim: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    if (a.dim() != 4) throw ShapeError("ssim: expected [C,X,Y,Z]");
    for (int axis = 1; axis <= 3; ++axis)
        if (a.extent(axis) < window) throw ShapeError("ssim: extent smaller than window");
    const T c1 = T(0.01) * T(0.01);
    const T c2 = T(0.03) * T(0.03);

    Tensor<T> mu_a = box_filter(a, window);
    Tensor<T> mu_b = box_filter(b, window);
    Tensor<T> e_aa = box_filter(mul(a, a), window);
    Tensor<T> e_bb = box_filter(mul(b, b), window);
    Tensor<T> e_ab = box_filter(mul(a, b), window);

    Tensor<T> mu_ab = mul(mu_a, mu_b);
    Tensor<T> var_a = sub(e_aa, mul(mu_a, mu_a));
    Tensor<T> var_b = sub(e_bb, mul(mu_b, mu_b));
    Tensor<T> cov = sub(e_ab, mu_ab);

    Tensor<T> num = mul(add_const(scale(mu_ab, T(2)), c1), add_const(scale(cov, T(2)), c2));
    Tensor<T> den = mul(add_const(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), c1),
                        add_const(add(var_a, var_b), c2));
    return mean_all(div(num, den));
}

// Global zero-mean normalized cross-correlation (single patch = whole volume).
// Constant input: returns 0 with a warning instead of dividing by zero.
template <class T>
Tensor<T> ncc(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("ncc: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> ca = sub(a, mean_all(a));
    Tensor<T> cb = sub(b, mean_all(b));
    Tensor<T> saa = sum_all(mul(ca, ca));
    Tensor<T> sbb = sum_all(mul(cb, cb));
    if (saa.item() == T(0) || sbb.item() == T(0)) {
        std::fprintf(stderr, "warning: ncc on zero-variance input, returning 0\n");
        return Tensor<T>::scalar(T(0));
    }
    return div(sum_all(mul(ca, cb)), sqrt(mul(saa, sbb)));
}

// mean absolute difference, normalized by voxel count
template <class T>
Tensor<T> l1(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("l1: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    return mean_all(abs(sub(a, b)));
}

// |ssim(fused,a) - ssim(fused,b)|; penalizes bias towards either modality
template <class T>
Tensor<T> pair_loss(const Tensor<T>& fused, const Tensor<T>& a, const Tensor<T>& b, std::size_t window = 7) {
    return abs(sub(ssim(fused, a, window), ssim(fused, b, window)));
}

template <class T>
struct LossBreakdown {
    Tensor<T> ssim_mri, ssim_pet;  // raw similarities in [-1,1]
    Tensor<T> ncc_mri, ncc_pet;    // raw similarities in [-1,1]
    Tensor<T> l1_mri, l1_pet;      // >= 0
    Tensor<T> pair;                // >= 0
    Tensor<T> total;               // (1-ssim)*2 terms + (1-ncc)*2 terms + l1 terms + pair
};

template <class T>
LossBreakdown<T> total_loss(const Tensor<T>& fused, const Tensor<T>& mri, const Tensor<T>& pet,
                            std::size_t ssim_window = 7) {
    LossBreakdown<T> out;
    out.ssim_mri = ssim(fused, mri, ssim_window);
    out.ssim_pet = ssim(fused, pet, ssim_window);
    out.ncc_mri = ncc(fused, mri);
    out.ncc_pet = ncc(fused, pet);
    out.l1_mri = l1(fused, mri);
    out.l1_pet = l1(fused, pet);
    out.pair = abs(sub(out.ssim_mri, out.ssim_pet));

    Tensor<T> sim_penalty = add(add(affine(out.ssim_mri, T(-1), T(1)), affine(out.ssim_pet, T(-1), T(1))),
                                add(affine(out.ncc_mri, T(-1), T(1)), affine(out.ncc_pet, T(-1), T(1))));
    out.total = add(add(sim_penalty, add(out.l1_mri, out.l1_pet)), out.pair);
    return out;
}

}  // namespace dc2f
