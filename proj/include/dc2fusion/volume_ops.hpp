#pragma once

// 3D neural operators on [C,X,Y,Z] tensors: grouped direct convolution,
// the depth-wise + pointwise offset head, differentiable trilinear resampling
// with border clamping, window partition/merge, patch embedding and the
// up/down scale ops. Axis convention: dim 1 = x, dim 2 = y, dim 3 = z; offset
// fields carry channels (dx, dy, dz) in voxel units.

#include <array>
#include <cstdint>

#include "dc2fusion/tensor.hpp"

namespace dc2f {

struct ConvSpec {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::array<std::size_t, 3> kernel{1, 1, 1};
    std::array<std::size_t, 3> stride{1, 1, 1};
    std::array<std::size_t, 3> padding{0, 0, 0};
    std::size_t groups = 1;

    void validate() const {
        if (groups == 0 || in_channels % groups != 0 || out_channels % groups != 0)
            throw ShapeError("conv3d: channels not divisible by groups");
        for (std::size_t k : kernel)
            if (k == 0) throw ShapeError("conv3d: zero kernel extent");
        for (std::size_t s : stride)
            if (s == 0) throw ShapeError("conv3d: zero stride");
    }

    // "same" spatial shape at stride 1 needs an odd kernel
    static std::array<std::size_t, 3> same_padding(const std::array<std::size_t, 3>& kernel) {
        for (std::size_t k : kernel)
            if (k % 2 == 0) throw ShapeError("same padding requires odd kernel extents");
        return {kernel[0] / 2, kernel[1] / 2, kernel[2] / 2};
    }
};

inline ConvSpec make_conv_spec(std::size_t in_ch, std::size_t out_ch, std::size_t k, std::size_t stride = 1,
                               std::size_t padding = 0, std::size_t groups = 1) {
    return ConvSpec{in_ch, out_ch, {k, k, k}, {stride, stride, stride}, {padding, padding, padding}, groups};
}

namespace detail {

// 1x1x1 stride-1 convolution is a grouped channel matmul over contiguous
// voxel planes; the FFN/pointwise layers live here, so it gets its own path
template <class T>
struct Pointwise {
    static void forward(const T* pin, const T* pw, const T* pb, T* po, std::size_t cout, std::size_t cpg_in,
                        std::size_t cpg_out, std::size_t nvox) {
#pragma omp parallel for schedule(static)
        for (long long oci = 0; oci < static_cast<long long>(cout); ++oci) {
            const std::size_t oc = static_cast<std::size_t>(oci);
            const std::size_t g = oc / cpg_out;
            T* orow = po + oc * nvox;
            const T bv = pb ? pb[oc] : T(0);
            for (std::size_t v = 0; v < nvox; ++v) orow[v] = bv;
            for (std::size_t icl = 0; icl < cpg_in; ++icl) {
                const T w = pw[oc * cpg_in + icl];
                const T* irow = pin + (g * cpg_in + icl) * nvox;
                for (std::size_t v = 0; v < nvox; ++v) orow[v] += w * irow[v];
            }
        }
    }
    static void backward_input(const T* go, const T* pw, T* gi, std::size_t cin, std::size_t cpg_in,
                               std::size_t cpg_out, std::size_t nvox) {
#pragma omp parallel for schedule(static)
        for (long long ici = 0; ici < static_cast<long long>(cin); ++ici) {
            const std::size_t ic = static_cast<std::size_t>(ici);
            const std::size_t g = ic / cpg_in;
            const std::size_t icl = ic % cpg_in;
            T* grow = gi + ic * nvox;
            for (std::size_t oc = g * cpg_out; oc < (g + 1) * cpg_out; ++oc) {
                const T w = pw[oc * cpg_in + icl];
                const T* gorow = go + oc * nvox;
                for (std::size_t v = 0; v < nvox; ++v) grow[v] += w * gorow[v];
            }
        }
    }
    static void backward_weights(const T* go, const T* pin, T* gw, std::size_t cout, std::size_t cpg_in,
                                 std::size_t cpg_out, std::size_t nvox) {
#pragma omp parallel for schedule(static)
        for (long long oci = 0; oci < static_cast<long long>(cout); ++oci) {
            const std::size_t oc = static_cast<std::size_t>(oci);
            const std::size_t g = oc / cpg_out;
            const T* gorow = go + oc * nvox;
            for (std::size_t icl = 0; icl < cpg_in; ++icl) {
                const T* irow = pin + (g * cpg_in + icl) * nvox;
                T acc = T(0);
                for (std::size_t v = 0; v < nvox; ++v) acc += gorow[v] * irow[v];
                gw[oc * cpg_in + icl] += acc;
            }
        }
    }
};

}  // namespace detail

// Direct (naive loop) cross-correlation with zero padding.
// input [C_in,X,Y,Z], weights [C_out, C_in/groups, kx,ky,kz], bias [C_out] or undefined.
template <class T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, const ConvSpec& spec) {
    spec.validate();
    if (input.dim() != 4 || input.extent(0) != spec.in_channels)
        throw ShapeError("conv3d: input must be [C_in,X,Y,Z] with C_in=" + std::to_string(spec.in_channels));
    const std::size_t cpg_in = spec.in_channels / spec.groups;
    const std::size_t cpg_out = spec.out_channels / spec.groups;
    Shape wshape{spec.out_channels, cpg_in, spec.kernel[0], spec.kernel[1], spec.kernel[2]};
    if (weights.shape() != wshape)
        throw ShapeError("conv3d: weights " + shape_str(weights.shape()) + " expected " + shape_str(wshape));
    if (bias.defined() && (bias.dim() != 1 || bias.extent(0) != spec.out_channels))
        throw ShapeError("conv3d: bias extent mismatch");

    const std::size_t X = input.extent(1), Y = input.extent(2), Z = input.extent(3);
    std::array<std::size_t, 3> od{};
    const std::array<std::size_t, 3> id{X, Y, Z};
    for (int a = 0; a < 3; ++a) {
        const std::size_t padded = id[a] + 2 * spec.padding[a];
        if (padded < spec.kernel[a]) throw ShapeError("conv3d: kernel larger than padded input");
        od[a] = (padded - spec.kernel[a]) / spec.stride[a] + 1;
    }
    const std::size_t OX = od[0], OY = od[1], OZ = od[2];
    const std::size_t KX = spec.kernel[0], KY = spec.kernel[1], KZ = spec.kernel[2];

    Tensor<T> out = Tensor<T>::zeros({spec.out_channels, OX, OY, OZ});
    const T* pin = input.data();
    const T* pw = weights.data();
    const T* pb = bias.defined() ? bias.data() : nullptr;
    T* po = out.data();

    const bool pointwise = KX == 1 && KY == 1 && KZ == 1 && spec.stride == std::array<std::size_t, 3>{1, 1, 1} &&
                           spec.padding == std::array<std::size_t, 3>{0, 0, 0};
    const bool unit_stride = spec.stride == std::array<std::size_t, 3>{1, 1, 1};

    if (pointwise) {
        detail::Pointwise<T>::forward(pin, pw, pb, po, spec.out_channels, cpg_in, cpg_out, X * Y * Z);
    } else
#pragma omp parallel for schedule(static)
    for (long long oci = 0; oci < static_cast<long long>(spec.out_channels); ++oci) {
        const std::size_t oc = static_cast<std::size_t>(oci);
        const std::size_t g = oc / cpg_out;
        const T bias_v = pb ? pb[oc] : T(0);
        for (std::size_t ox = 0; ox < OX; ++ox) {
            const long long bx = static_cast<long long>(ox * spec.stride[0]) - static_cast<long long>(spec.padding[0]);
            const std::size_t kx0 = static_cast<std::size_t>(std::max(0LL, -bx));
            const std::size_t kx1 = static_cast<std::size_t>(std::min<long long>(KX, static_cast<long long>(X) - bx));
            for (std::size_t oy = 0; oy < OY; ++oy) {
                const long long by = static_cast<long long>(oy * spec.stride[1]) - static_cast<long long>(spec.padding[1]);
                const std::size_t ky0 = static_cast<std::size_t>(std::max(0LL, -by));
                const std::size_t ky1 = static_cast<std::size_t>(std::min<long long>(KY, static_cast<long long>(Y) - by));
                for (std::size_t oz = 0; oz < OZ; ++oz) {
                    const long long bz = static_cast<long long>(oz * spec.stride[2]) - static_cast<long long>(spec.padding[2]);
                    const std::size_t kz0 = static_cast<std::size_t>(std::max(0LL, -bz));
                    const std::size_t kz1 = static_cast<std::size_t>(std::min<long long>(KZ, static_cast<long long>(Z) - bz));
                    T acc = bias_v;
                    for (std::size_t icl = 0; icl < cpg_in; ++icl) {
                        const std::size_t ic = g * cpg_in + icl;
                        const T* in_c = pin + ic * X * Y * Z;
                        const T* w_c = pw + (oc * cpg_in + icl) * KX * KY * KZ;
                        for (std::size_t kx = kx0; kx < kx1; ++kx) {
                            const std::size_t xi = static_cast<std::size_t>(bx + static_cast<long long>(kx));
                            for (std::size_t ky = ky0; ky < ky1; ++ky) {
                                const std::size_t yi = static_cast<std::size_t>(by + static_cast<long long>(ky));
                                const T* in_row = in_c + (xi * Y + yi) * Z + static_cast<std::size_t>(bz);
                                const T* w_row = w_c + (kx * KY + ky) * KZ;
                                for (std::size_t kz = kz0; kz < kz1; ++kz) acc += w_row[kz] * in_row[kz];
                            }
                        }
                    }
                    po[((oc * OX + ox) * OY + oy) * OZ + oz] = acc;
                }
            }
        }
    }

    detail::record_if_needed("conv3d", out, {input, weights, bias.defined() ? bias : input}, [&] {
        return [input, weights, bias, out, spec, cpg_in, cpg_out, X, Y, Z, OX, OY, OZ, KX, KY, KZ, pointwise,
                unit_stride]() mutable {
            const T* go = out.grad_data();
            if (!go) return;
            const T* pin = input.data();
            const T* pw = weights.data();
            const std::size_t nvox = X * Y * Z;

            if (bias.defined() && bias.requires_grad()) {
                T* gb = bias.grad_buffer().data();
                for (std::size_t oc = 0; oc < spec.out_channels; ++oc) {
                    T acc = T(0);
                    const T* g_c = go + oc * OX * OY * OZ;
                    for (std::size_t i = 0; i < OX * OY * OZ; ++i) acc += g_c[i];
                    gb[oc] += acc;
                }
            }

            if (pointwise) {
                if (weights.requires_grad())
                    detail::Pointwise<T>::backward_weights(go, pin, weights.grad_buffer().data(), spec.out_channels,
                                                           cpg_in, cpg_out, nvox);
                if (input.requires_grad())
                    detail::Pointwise<T>::backward_input(go, pw, input.grad_buffer().data(), spec.in_channels,
                                                         cpg_in, cpg_out, nvox);
                return;
            }

            if (unit_stride) {
                // dW[oc,icl,k] = correlation of dOut with the input at lag k
                if (weights.requires_grad()) {
                    T* gw = weights.grad_buffer().data();
#pragma omp parallel for schedule(static)
                    for (long long oci = 0; oci < static_cast<long long>(spec.out_channels); ++oci) {
                        const std::size_t oc = static_cast<std::size_t>(oci);
                        const std::size_t g = oc / cpg_out;
                        const T* g_c = go + oc * OX * OY * OZ;
                        for (std::size_t icl = 0; icl < cpg_in; ++icl) {
                            const T* in_c = pin + (g * cpg_in + icl) * nvox;
                            auto lag_range = [](std::size_t pad, std::size_t k, std::size_t in_n, std::size_t out_n,
                                                std::size_t& lo, std::size_t& hi) {
                                const long long l0 = std::max(0LL, static_cast<long long>(pad) - static_cast<long long>(k));
                                const long long l1 = std::min(static_cast<long long>(out_n),
                                                              static_cast<long long>(in_n + pad) - static_cast<long long>(k));
                                lo = static_cast<std::size_t>(l0);
                                hi = static_cast<std::size_t>(std::max(l0, l1));
                            };
                            for (std::size_t kx = 0; kx < KX; ++kx) {
                                std::size_t ox0, ox1;
                                lag_range(spec.padding[0], kx, X, OX, ox0, ox1);
                                for (std::size_t ky = 0; ky < KY; ++ky) {
                                    std::size_t oy0, oy1;
                                    lag_range(spec.padding[1], ky, Y, OY, oy0, oy1);
                                    for (std::size_t kz = 0; kz < KZ; ++kz) {
                                        std::size_t oz0, oz1;
                                        lag_range(spec.padding[2], kz, Z, OZ, oz0, oz1);
                                        T acc = T(0);
                                        for (std::size_t ox = ox0; ox < ox1; ++ox) {
                                            const std::size_t xi = ox + kx - spec.padding[0];
                                            for (std::size_t oy = oy0; oy < oy1; ++oy) {
                                                const std::size_t yi = oy + ky - spec.padding[1];
                                                const T* grow = g_c + (ox * OY + oy) * OZ + oz0;
                                                const T* irow = in_c + (xi * Y + yi) * Z + (oz0 + kz - spec.padding[2]);
                                                const std::size_t len = oz1 - oz0;
                                                T dot = T(0);
                                                for (std::size_t i = 0; i < len; ++i) dot += grow[i] * irow[i];
                                                acc += dot;
                                            }
                                        }
                                        gw[((oc * cpg_in + icl) * KX + kx) * KY * KZ + ky * KZ + kz] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                // dX = convolution of dOut with the kernel flipped; same loop
                // structure as the forward pass, parallel over input channels
                if (input.requires_grad()) {
                    T* gi = input.grad_buffer().data();
#pragma omp parallel for schedule(static)
                    for (long long ici = 0; ici < static_cast<long long>(spec.in_channels); ++ici) {
                        const std::size_t ic = static_cast<std::size_t>(ici);
                        const std::size_t g = ic / cpg_in;
                        const std::size_t icl = ic % cpg_in;
                        T* gi_c = gi + ic * nvox;
                        for (std::size_t xi = 0; xi < X; ++xi) {
                            const std::size_t kx0 = xi + spec.padding[0] >= OX ? xi + spec.padding[0] - OX + 1 : 0;
                            const std::size_t kx1 = std::min(KX, xi + spec.padding[0] + 1);
                            for (std::size_t yi = 0; yi < Y; ++yi) {
                                const std::size_t ky0 = yi + spec.padding[1] >= OY ? yi + spec.padding[1] - OY + 1 : 0;
                                const std::size_t ky1 = std::min(KY, yi + spec.padding[1] + 1);
                                for (std::size_t zi = 0; zi < Z; ++zi) {
                                    const std::size_t kz0 = zi + spec.padding[2] >= OZ ? zi + spec.padding[2] - OZ + 1 : 0;
                                    const std::size_t kz1 = std::min(KZ, zi + spec.padding[2] + 1);
                                    T acc = T(0);
                                    for (std::size_t oc = g * cpg_out; oc < (g + 1) * cpg_out; ++oc) {
                                        const T* g_c = go + oc * OX * OY * OZ;
                                        const T* w_c = pw + (oc * cpg_in + icl) * KX * KY * KZ;
                                        for (std::size_t kx = kx0; kx < kx1; ++kx) {
                                            const std::size_t ox = xi + spec.padding[0] - kx;
                                            for (std::size_t ky = ky0; ky < ky1; ++ky) {
                                                const std::size_t oy = yi + spec.padding[1] - ky;
                                                const T* grow = g_c + (ox * OY + oy) * OZ;
                                                const T* wrow = w_c + (kx * KY + ky) * KZ;
                                                const std::size_t zoff = zi + spec.padding[2];
                                                for (std::size_t kz = kz0; kz < kz1; ++kz)
                                                    acc += wrow[kz] * grow[zoff - kz];
                                            }
                                        }
                                    }
                                    gi_c[(xi * Y + yi) * Z + zi] += acc;
                                }
                            }
                        }
                    }
                }
                return;
            }

            // strided path (patch embed, downsample): gather with divisibility
            if (weights.requires_grad()) {
                T* gw = weights.grad_buffer().data();
#pragma omp parallel for schedule(static)
                for (long long oci = 0; oci < static_cast<long long>(spec.out_channels); ++oci) {
                    const std::size_t oc = static_cast<std::size_t>(oci);
                    const std::size_t g = oc / cpg_out;
                    const T* g_c = go + oc * OX * OY * OZ;
                    for (std::size_t icl = 0; icl < cpg_in; ++icl) {
                        const std::size_t ic = g * cpg_in + icl;
                        const T* in_c = pin + ic * nvox;
                        for (std::size_t kx = 0; kx < KX; ++kx)
                            for (std::size_t ky = 0; ky < KY; ++ky)
                                for (std::size_t kz = 0; kz < KZ; ++kz) {
                                    T acc = T(0);
                                    for (std::size_t ox = 0; ox < OX; ++ox) {
                                        const long long xi = static_cast<long long>(ox * spec.stride[0] + kx) -
                                                             static_cast<long long>(spec.padding[0]);
                                        if (xi < 0 || xi >= static_cast<long long>(X)) continue;
                                        for (std::size_t oy = 0; oy < OY; ++oy) {
                                            const long long yi = static_cast<long long>(oy * spec.stride[1] + ky) -
                                                                 static_cast<long long>(spec.padding[1]);
                                            if (yi < 0 || yi >= static_cast<long long>(Y)) continue;
                                            for (std::size_t oz = 0; oz < OZ; ++oz) {
                                                const long long zi = static_cast<long long>(oz * spec.stride[2] + kz) -
                                                                     static_cast<long long>(spec.padding[2]);
                                                if (zi < 0 || zi >= static_cast<long long>(Z)) continue;
                                                acc += g_c[(ox * OY + oy) * OZ + oz] *
                                                       in_c[(static_cast<std::size_t>(xi) * Y + static_cast<std::size_t>(yi)) * Z +
                                                            static_cast<std::size_t>(zi)];
                                            }
                                        }
                                    }
                                    gw[((oc * cpg_in + icl) * KX + kx) * KY * KZ + ky * KZ + kz] += acc;
                                }
                    }
                }
            }
            if (input.requires_grad()) {
                T* gi = input.grad_buffer().data();
#pragma omp parallel for schedule(static)
                for (long long ici = 0; ici < static_cast<long long>(spec.in_channels); ++ici) {
                    const std::size_t ic = static_cast<std::size_t>(ici);
                    const std::size_t g = ic / cpg_in;
                    const std::size_t icl = ic % cpg_in;
                    T* gi_c = gi + ic * nvox;
                    for (std::size_t xi = 0; xi < X; ++xi)
                        for (std::size_t yi = 0; yi < Y; ++yi)
                            for (std::size_t zi = 0; zi < Z; ++zi) {
                                T acc = T(0);
                                for (std::size_t oc = g * cpg_out; oc < (g + 1) * cpg_out; ++oc) {
                                    const T* g_c = go + oc * OX * OY * OZ;
                                    const T* w_c = pw + (oc * cpg_in + icl) * KX * KY * KZ;
                                    for (std::size_t kx = 0; kx < KX; ++kx) {
                                        const long long num_x = static_cast<long long>(xi + spec.padding[0]) -
                                                                static_cast<long long>(kx);
                                        if (num_x < 0 || num_x % static_cast<long long>(spec.stride[0])) continue;
                                        const std::size_t ox = static_cast<std::size_t>(num_x) / spec.stride[0];
                                        if (ox >= OX) continue;
                                        for (std::size_t ky = 0; ky < KY; ++ky) {
                                            const long long num_y = static_cast<long long>(yi + spec.padding[1]) -
                                                                    static_cast<long long>(ky);
                                            if (num_y < 0 || num_y % static_cast<long long>(spec.stride[1])) continue;
                                            const std::size_t oy = static_cast<std::size_t>(num_y) / spec.stride[1];
                                            if (oy >= OY) continue;
                                            for (std::size_t kz = 0; kz < KZ; ++kz) {
                                                const long long num_z = static_cast<long long>(zi + spec.padding[2]) -
                                                                        static_cast<long long>(kz);
                                                if (num_z < 0 || num_z % static_cast<long long>(spec.stride[2])) continue;
                                                const std::size_t oz = static_cast<std::size_t>(num_z) / spec.stride[2];
                                                if (oz >= OZ) continue;
                                                acc += g_c[(ox * OY + oy) * OZ + oz] * w_c[(kx * KY + ky) * KZ + kz];
                                            }
                                        }
                                    }
                                }
                                gi_c[(xi * Y + yi) * Z + zi] += acc;
                            }
                }
            }
        };
    });
    return out;
}

// Offset head: per-channel depth-wise conv (groups = C, same padding) followed
// by a 1x1x1 conv down to exactly 3 offset channels (dx, dy, dz).
template <class T>
Tensor<T> depthwise_offset_head(const Tensor<T>& concat_features, const Tensor<T>& dw_weights,
                                const Tensor<T>& dw_bias, const Tensor<T>& pw_weights, const Tensor<T>& pw_bias,
                                std::size_t k) {
    if (k % 2 == 0) throw ShapeError("offset head: depth-wise kernel must be odd");
    const std::size_t c = concat_features.extent(0);
    ConvSpec dw = make_conv_spec(c, c, k, 1, k / 2, c);
    Tensor<T> inner_offset = conv3d(concat_features, dw_weights, dw_bias, dw);
    ConvSpec pw = make_conv_spec(c, 3, 1);
    return conv3d(inner_offset, pw_weights, pw_bias, pw);
}

// ---------------------------------------------------------------------------
// Trilinear resampling: output(c,p) interpolates volume(c, .) at p + offset(p).
// Sampling coordinates are clamped to [0, extent-1] per axis (border
// replication); saturated axes contribute zero offset gradient.

template <class T>
Tensor<T> trilinear_sample(const Tensor<T>& volume, const Tensor<T>& offsets) {
    if (volume.dim() != 4) throw ShapeError("trilinear_sample: volume must be [C,X,Y,Z]");
    if (offsets.dim() != 4 || offsets.extent(0) != 3)
        throw ShapeError("trilinear_sample: offsets must be [3,X,Y,Z]");
    const std::size_t C = volume.extent(0), X = volume.extent(1), Y = volume.extent(2), Z = volume.extent(3);
    if (offsets.extent(1) != X || offsets.extent(2) != Y || offsets.extent(3) != Z)
        throw ShapeError("trilinear_sample: offsets spatial shape mismatch");

    const std::size_t nvox = X * Y * Z;
    Tensor<T> out = Tensor<T>::zeros(volume.shape());
    const T* pv = volume.data();
    const T* pofs = offsets.data();
    T* po = out.data();

    // per-voxel corner indices and fractions, shared between channels
    auto corner = [](T coord, std::size_t extent, std::size_t& i0, std::size_t& i1, T& frac, bool& saturated) {
        const T hi = static_cast<T>(extent - 1);
        saturated = coord < T(0) || coord > hi;  // strictly outside: the clamp flattens the map
        T c = std::min(std::max(coord, T(0)), hi);
        T fl = std::floor(c);
        i0 = static_cast<std::size_t>(fl);
        if (i0 >= extent - 1) {
            i0 = extent - 1;
            i1 = extent - 1;
            frac = T(0);
        } else {
            i1 = i0 + 1;
            frac = c - fl;
        }
    };

#pragma omp parallel for schedule(static)
    for (long long vi = 0; vi < static_cast<long long>(nvox); ++vi) {
        const std::size_t v = static_cast<std::size_t>(vi);
        const std::size_t x = v / (Y * Z);
        const std::size_t y = (v / Z) % Y;
        const std::size_t z = v % Z;
        std::size_t x0, x1, y0, y1, z0, z1;
        T fx, fy, fz;
        bool sx, sy, sz;
        corner(static_cast<T>(x) + pofs[v], X, x0, x1, fx, sx);
        corner(static_cast<T>(y) + pofs[nvox + v], Y, y0, y1, fy, sy);
        corner(static_cast<T>(z) + pofs[2 * nvox + v], Z, z0, z1, fz, sz);
        for (std::size_t c = 0; c < C; ++c) {
            const T* vc = pv + c * nvox;
            const T v000 = vc[(x0 * Y + y0) * Z + z0], v001 = vc[(x0 * Y + y0) * Z + z1];
            const T v010 = vc[(x0 * Y + y1) * Z + z0], v011 = vc[(x0 * Y + y1) * Z + z1];
            const T v100 = vc[(x1 * Y + y0) * Z + z0], v101 = vc[(x1 * Y + y0) * Z + z1];
            const T v110 = vc[(x1 * Y + y1) * Z + z0], v111 = vc[(x1 * Y + y1) * Z + z1];
            const T c00 = v000 * (T(1) - fz) + v001 * fz;
            const T c01 = v010 * (T(1) - fz) + v011 * fz;
            const T c10 = v100 * (T(1) - fz) + v101 * fz;
            const T c11 = v110 * (T(1) - fz) + v111 * fz;
            const T c0 = c00 * (T(1) - fy) + c01 * fy;
            const T c1 = c10 * (T(1) - fy) + c11 * fy;
            po[c * nvox + v] = c0 * (T(1) - fx) + c1 * fx;
        }
    }

    detail::record_if_needed("trilinear_sample", out, {volume, offsets}, [&] {
        return [volume, offsets, out, C, X, Y, Z, nvox]() mutable {
            const T* go = out.grad_data();
            if (!go) return;
            const T* pv = volume.data();
            const T* pofs = offsets.data();

            auto corner = [](T coord, std::size_t extent, std::size_t& i0, std::size_t& i1, T& frac, bool& saturated) {
                const T hi = static_cast<T>(extent - 1);
                saturated = coord < T(0) || coord > hi;
                T c = std::min(std::max(coord, T(0)), hi);
                T fl = std::floor(c);
                i0 = static_cast<std::size_t>(fl);
                if (i0 >= extent - 1) {
                    i0 = extent - 1;
                    i1 = extent - 1;
                    frac = T(0);
                } else {
                    i1 = i0 + 1;
                    frac = c - fl;
                }
            };

            if (offsets.requires_grad()) {
                T* gofs = offsets.grad_buffer().data();
#pragma omp parallel for schedule(static)
                for (long long vi = 0; vi < static_cast<long long>(nvox); ++vi) {
                    const std::size_t v = static_cast<std::size_t>(vi);
                    const std::size_t x = v / (Y * Z);
                    const std::size_t y = (v / Z) % Y;
                    const std::size_t z = v % Z;
                    std::size_t x0, x1, y0, y1, z0, z1;
                    T fx, fy, fz;
                    bool sx, sy, sz;
                    corner(static_cast<T>(x) + pofs[v], X, x0, x1, fx, sx);
                    corner(static_cast<T>(y) + pofs[nvox + v], Y, y0, y1, fy, sy);
                    corner(static_cast<T>(z) + pofs[2 * nvox + v], Z, z0, z1, fz, sz);
                    T gx = T(0), gy = T(0), gz = T(0);
                    for (std::size_t c = 0; c < C; ++c) {
                        const T g = go[c * nvox + v];
                        if (g == T(0)) continue;
                        const T* vc = pv + c * nvox;
                        const T v000 = vc[(x0 * Y + y0) * Z + z0], v001 = vc[(x0 * Y + y0) * Z + z1];
                        const T v010 = vc[(x0 * Y + y1) * Z + z0], v011 = vc[(x0 * Y + y1) * Z + z1];
                        const T v100 = vc[(x1 * Y + y0) * Z + z0], v101 = vc[(x1 * Y + y0) * Z + z1];
                        const T v110 = vc[(x1 * Y + y1) * Z + z0], v111 = vc[(x1 * Y + y1) * Z + z1];
                        const T c00 = v000 * (T(1) - fz) + v001 * fz;
                        const T c01 = v010 * (T(1) - fz) + v011 * fz;
                        const T c10 = v100 * (T(1) - fz) + v101 * fz;
                        const T c11 = v110 * (T(1) - fz) + v111 * fz;
                        if (!sx) gx += g * ((c10 * (T(1) - fy) + c11 * fy) - (c00 * (T(1) - fy) + c01 * fy));
                        if (!sy) {
                            const T d0 = c01 - c00, d1 = c11 - c10;
                            gy += g * (d0 * (T(1) - fx) + d1 * fx);
                        }
                        if (!sz) {
                            const T dz00 = v001 - v000, dz01 = v011 - v010, dz10 = v101 - v100, dz11 = v111 - v110;
                            const T dz0 = dz00 * (T(1) - fy) + dz01 * fy;
                            const T dz1 = dz10 * (T(1) - fy) + dz11 * fy;
                            gz += g * (dz0 * (T(1) - fx) + dz1 * fx);
                        }
                    }
                    gofs[v] += gx;
                    gofs[nvox + v] += gy;
                    gofs[2 * nvox + v] += gz;
                }
            }

            if (volume.requires_grad()) {
                T* gv = volume.grad_buffer().data();
                // scatter into the 8 corners; outputs of channel c only touch
                // channel c of the volume, so parallelizing over c is race-free
#pragma omp parallel for schedule(static)
                for (long long ci = 0; ci < static_cast<long long>(C); ++ci) {
                    const std::size_t c = static_cast<std::size_t>(ci);
                    T* gvc = gv + c * nvox;
                    for (std::size_t v = 0; v < nvox; ++v) {
                        const T g = go[c * nvox + v];
                        if (g == T(0)) continue;
                        const std::size_t x = v / (Y * Z);
                        const std::size_t y = (v / Z) % Y;
                        const std::size_t z = v % Z;
                        std::size_t x0, x1, y0, y1, z0, z1;
                        T fx, fy, fz;
                        bool sx, sy, sz;
                        corner(static_cast<T>(x) + pofs[v], X, x0, x1, fx, sx);
                        corner(static_cast<T>(y) + pofs[nvox + v], Y, y0, y1, fy, sy);
                        corner(static_cast<T>(z) + pofs[2 * nvox + v], Z, z0, z1, fz, sz);
                        const T wx0 = T(1) - fx, wy0 = T(1) - fy, wz0 = T(1) - fz;
                        gvc[(x0 * Y + y0) * Z + z0] += g * wx0 * wy0 * wz0;
                        gvc[(x0 * Y + y0) * Z + z1] += g * wx0 * wy0 * fz;
                        gvc[(x0 * Y + y1) * Z + z0] += g * wx0 * fy * wz0;
                        gvc[(x0 * Y + y1) * Z + z1] += g * wx0 * fy * fz;
                        gvc[(x1 * Y + y0) * Z + z0] += g * fx * wy0 * wz0;
                        gvc[(x1 * Y + y0) * Z + z1] += g * fx * wy0 * fz;
                        gvc[(x1 * Y + y1) * Z + z0] += g * fx * fy * wz0;
                        gvc[(x1 * Y + y1) * Z + z1] += g * fx * fy * fz;
                    }
                }
            }
        };
    });
    return out;
}

// ---------------------------------------------------------------------------
// Window partition / merge. Windows and the tokens inside each window are both
// enumerated x-fastest, then y, then z; this order is part of the checkpoint
// contract and must not change.

template <class T>
struct WindowGrid {
    Tensor<T> tokens;  // [numWindows, wx*wy*wz, C]
    std::array<std::size_t, 3> window{};
    std::array<std::size_t, 3> counts{};   // windows per axis
    std::array<std::size_t, 3> spatial{};  // original X,Y,Z
    std::size_t channels = 0;

    std::size_t num_windows() const { return counts[0] * counts[1] * counts[2]; }
    std::size_t tokens_per_window() const { return window[0] * window[1] * window[2]; }
};

namespace detail {

// flat volume index (within one channel) for (window w, token t)
inline std::size_t window_token_to_voxel(std::size_t w, std::size_t t, const std::array<std::size_t, 3>& win,
                                         const std::array<std::size_t, 3>& counts,
                                         const std::array<std::size_t, 3>& spatial) {
    const std::size_t wix = w % counts[0];
    const std::size_t wiy = (w / counts[0]) % counts[1];
    const std::size_t wiz = w / (counts[0] * counts[1]);
    const std::size_t ix = t % win[0];
    const std::size_t iy = (t / win[0]) % win[1];
    const std::size_t iz = t / (win[0] * win[1]);
    const std::size_t x = wix * win[0] + ix;
    const std::size_t y = wiy * win[1] + iy;
    const std::size_t z = wiz * win[2] + iz;
    return (x * spatial[1] + y) * spatial[2] + z;
}

}  // namespace detail

template <class T>
WindowGrid<T> window_partition(const Tensor<T>& f, const std::array<std::size_t, 3>& wsize) {
    if (f.dim() != 4) throw ShapeError("window_partition: expected [C,X,Y,Z]");
    WindowGrid<T> grid;
    grid.window = wsize;
    grid.spatial = {f.extent(1), f.extent(2), f.extent(3)};
    grid.channels = f.extent(0);
    for (int a = 0; a < 3; ++a) {
        if (wsize[a] == 0 || grid.spatial[a] % wsize[a] != 0)
            throw ShapeError("window_partition: extent " + std::to_string(grid.spatial[a]) +
                             " not divisible by window " + std::to_string(wsize[a]));
        grid.counts[a] = grid.spatial[a] / wsize[a];
    }
    const std::size_t nw = grid.num_windows();
    const std::size_t tpw = grid.tokens_per_window();
    const std::size_t nvox = grid.spatial[0] * grid.spatial[1] * grid.spatial[2];
    const std::size_t C = grid.channels;

    Tensor<T> tokens = Tensor<T>::zeros({nw, tpw, C});
    const T* pf = f.data();
    T* pt = tokens.data();
    for (std::size_t w = 0; w < nw; ++w)
        for (std::size_t t = 0; t < tpw; ++t) {
            const std::size_t v = detail::window_token_to_voxel(w, t, grid.window, grid.counts, grid.spatial);
            T* dst = pt + (w * tpw + t) * C;
            for (std::size_t c = 0; c < C; ++c) dst[c] = pf[c * nvox + v];
        }

    detail::record_if_needed("window_partition", tokens, {f}, [&] {
        auto g = grid;
        return [f, tokens, g, nw, tpw, nvox, C]() mutable {
            const T* go = tokens.grad_data();
            if (!go || !f.requires_grad()) return;
            T* gf = f.grad_buffer().data();
            for (std::size_t w = 0; w < nw; ++w)
                for (std::size_t t = 0; t < tpw; ++t) {
                    const std::size_t v = detail::window_token_to_voxel(w, t, g.window, g.counts, g.spatial);
                    const T* src = go + (w * tpw + t) * C;
                    for (std::size_t c = 0; c < C; ++c) gf[c * nvox + v] += src[c];
                }
        };
    });
    grid.tokens = tokens;
    return grid;
}

// exact inverse of window_partition
template <class T>
Tensor<T> window_merge(const WindowGrid<T>& grid) {
    const std::size_t nw = grid.num_windows();
    const std::size_t tpw = grid.tokens_per_window();
    const std::size_t C = grid.channels;
    if (grid.tokens.dim() != 3 || grid.tokens.extent(0) != nw || grid.tokens.extent(1) != tpw ||
        grid.tokens.extent(2) != C)
        throw ShapeError("window_merge: token tensor inconsistent with grid geometry");
    const std::size_t nvox = grid.spatial[0] * grid.spatial[1] * grid.spatial[2];

    Tensor<T> out = Tensor<T>::zeros({C, grid.spatial[0], grid.spatial[1], grid.spatial[2]});
    const T* pt = grid.tokens.data();
    T* po = out.data();
    for (std::size_t w = 0; w < nw; ++w)
        for (std::size_t t = 0; t < tpw; ++t) {
            const std::size_t v = detail::window_token_to_voxel(w, t, grid.window, grid.counts, grid.spatial);
            const T* src = pt + (w * tpw + t) * C;
            for (std::size_t c = 0; c < C; ++c) po[c * nvox + v] = src[c];
        }

    Tensor<T> tokens = grid.tokens;
    auto g = grid;
    detail::record_if_needed("window_merge", out, {tokens}, [&] {
        return [tokens, out, g, nw, tpw, nvox, C]() mutable {
            const T* go = out.grad_data();
            if (!go || !tokens.requires_grad()) return;
            T* gt = tokens.grad_buffer().data();
            for (std::size_t w = 0; w < nw; ++w)
                for (std::size_t t = 0; t < tpw; ++t) {
                    const std::size_t v = detail::window_token_to_voxel(w, t, g.window, g.counts, g.spatial);
                    T* dst = gt + (w * tpw + t) * C;
                    for (std::size_t c = 0; c < C; ++c) dst[c] += go[c * nvox + v];
                }
        };
    });
    return out;
}

// ---------------------------------------------------------------------------
// patch embedding / scale changes

// non-overlapping convolution with kernel = stride = patch
template <class T>
Tensor<T> patch_embed(const Tensor<T>& volume, const Tensor<T>& weights, const Tensor<T>& bias,
                      std::size_t patch, std::size_t embed_dim) {
    const std::size_t c_in = volume.extent(0);
    for (int a = 1; a <= 3; ++a)
        if (volume.extent(a) % patch != 0)
            throw ShapeError("patch_embed: extent not divisible by patch size");
    return conv3d(volume, weights, bias, make_conv_spec(c_in, embed_dim, patch, patch, 0, 1));
}

// strided conv (k=2, s=2) doubling channels
template <class T>
Tensor<T> downsample(const Tensor<T>& f, const Tensor<T>& weights, const Tensor<T>& bias) {
    const std::size_t c = f.extent(0);
    for (int a = 1; a <= 3; ++a)
        if (f.extent(a) % 2 != 0) throw ShapeError("downsample: odd spatial extent");
    return conv3d(f, weights, bias, make_conv_spec(c, 2 * c, 2, 2, 0, 1));
}

// trilinear x2 upsampling; output voxel i samples input at (i - 0.5) / 2,
// clamped to the border, so constants are preserved exactly
template <class T>
Tensor<T> upsample_trilinear2x(const Tensor<T>& f) {
    if (f.dim() != 4) throw ShapeError("upsample: expected [C,X,Y,Z]");
    const std::size_t C = f.extent(0), X = f.extent(1), Y = f.extent(2), Z = f.extent(3);
    const std::size_t OX = 2 * X, OY = 2 * Y, OZ = 2 * Z;

    // per-axis source index pair + weight, precomputed
    auto make_axis = [](std::size_t out_n, std::size_t in_n) {
        std::vector<std::array<std::size_t, 2>> idx(out_n);
        std::vector<T> frac(out_n);
        for (std::size_t i = 0; i < out_n; ++i) {
            double src = (static_cast<double>(i) - 0.5) / 2.0;
            src = std::min(std::max(src, 0.0), static_cast<double>(in_n - 1));
            std::size_t i0 = static_cast<std::size_t>(std::floor(src));
            if (i0 >= in_n - 1) {
                idx[i] = {in_n - 1, in_n - 1};
                frac[i] = T(0);
            } else {
                idx[i] = {i0, i0 + 1};
                frac[i] = static_cast<T>(src - static_cast<double>(i0));
            }
        }
        return std::make_pair(idx, frac);
    };
    auto [xi, xf] = make_axis(OX, X);
    auto [yi, yf] = make_axis(OY, Y);
    auto [zi, zf] = make_axis(OZ, Z);

    Tensor<T> out = Tensor<T>::zeros({C, OX, OY, OZ});
    const T* pf = f.data();
    T* po = out.data();
#pragma omp parallel for schedule(static)
    for (long long ci = 0; ci < static_cast<long long>(C); ++ci) {
        const std::size_t c = static_cast<std::size_t>(ci);
        const T* fc = pf + c * X * Y * Z;
        T* oc = po + c * OX * OY * OZ;
        for (std::size_t x = 0; x < OX; ++x)
            for (std::size_t y = 0; y < OY; ++y)
                for (std::size_t z = 0; z < OZ; ++z) {
                    const T fx = xf[x], fy = yf[y], fz = zf[z];
                    T acc = T(0);
                    for (int dx = 0; dx < 2; ++dx)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dz = 0; dz < 2; ++dz) {
                                const T w = (dx ? fx : T(1) - fx) * (dy ? fy : T(1) - fy) * (dz ? fz : T(1) - fz);
                                if (w == T(0)) continue;
                                acc += w * fc[(xi[x][dx] * Y + yi[y][dy]) * Z + zi[z][dz]];
                            }
                    oc[(x * OY + y) * OZ + z] = acc;
                }
    }

    detail::record_if_needed("upsample_trilinear2x", out, {f}, [&] {
        auto xidx = std::make_shared<std::vector<std::array<std::size_t, 2>>>(xi);
        auto yidx = std::make_shared<std::vector<std::array<std::size_t, 2>>>(yi);
        auto zidx = std::make_shared<std::vector<std::array<std::size_t, 2>>>(zi);
        auto xfr = std::make_shared<std::vector<T>>(xf);
        auto yfr = std::make_shared<std::vector<T>>(yf);
        auto zfr = std::make_shared<std::vector<T>>(zf);
        return [f, out, xidx, yidx, zidx, xfr, yfr, zfr, C, X, Y, Z, OX, OY, OZ]() mutable {
            const T* go = out.grad_data();
            if (!go || !f.requires_grad()) return;
            T* gf = f.grad_buffer().data();
#pragma omp parallel for schedule(static)
            for (long long ci = 0; ci < static_cast<long long>(C); ++ci) {
                const std::size_t c = static_cast<std::size_t>(ci);
                const T* goc = go + c * OX * OY * OZ;
                T* gfc = gf + c * X * Y * Z;
                for (std::size_t x = 0; x < OX; ++x)
                    for (std::size_t y = 0; y < OY; ++y)
                        for (std::size_t z = 0; z < OZ; ++z) {
                            const T g = goc[(x * OY + y) * OZ + z];
                            if (g == T(0)) continue;
                            const T fx = (*xfr)[x], fy = (*yfr)[y], fz = (*zfr)[z];
                            for (int dx = 0; dx < 2; ++dx)
                                for (int dy = 0; dy < 2; ++dy)
                                    for (int dz = 0; dz < 2; ++dz) {
                                        const T w = (dx ? fx : T(1) - fx) * (dy ? fy : T(1) - fy) *
                                                    (dz ? fz : T(1) - fz);
                                        if (w == T(0)) continue;
                                        gfc[((*xidx)[x][dx] * Y + (*yidx)[y][dy]) * Z + (*zidx)[z][dz]] += w * g;
                                    }
                        }
            }
        };
    });
    return out;
}

}  // namespace dc2f
