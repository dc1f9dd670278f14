#include "dc2fusion/phantom.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace dc2f {

namespace {

struct Ellipsoid {
    float cx, cy, cz;
    float ax, ay, az;  // semi-axes, voxels
    float intensity;
    float activity;
};

// quadratic form value: <1 inside, 1 on the surface
inline float qform(const Ellipsoid& e, float x, float y, float z) {
    const float dx = (x - e.cx) / e.ax;
    const float dy = (y - e.cy) / e.ay;
    const float dz = (z - e.cz) / e.az;
    return dx * dx + dy * dy + dz * dz;
}

// separable Gaussian blur with replicated borders, radius ceil(3*sigma)
void gaussian_blur(Volume& v, float sigma) {
    if (sigma <= 0.f) return;
    const int radius = static_cast<int>(std::ceil(3.0f * sigma));
    std::vector<float> kernel(2 * radius + 1);
    float sum = 0.f;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5f * (i * i) / (sigma * sigma));
        sum += kernel[i + radius];
    }
    for (float& k : kernel) k /= sum;

    const int X = static_cast<int>(v.dims[0]);
    const int Y = static_cast<int>(v.dims[1]);
    const int Z = static_cast<int>(v.dims[2]);
    Volume tmp = v;
    auto clampi = [](int i, int n) { return std::min(std::max(i, 0), n - 1); };
    for (int axis = 0; axis < 3; ++axis) {
        for (int z = 0; z < Z; ++z)
            for (int y = 0; y < Y; ++y)
                for (int x = 0; x < X; ++x) {
                    float acc = 0.f;
                    for (int k = -radius; k <= radius; ++k) {
                        int xx = x, yy = y, zz = z;
                        if (axis == 0) xx = clampi(x + k, X);
                        if (axis == 1) yy = clampi(y + k, Y);
                        if (axis == 2) zz = clampi(z + k, Z);
                        acc += kernel[k + radius] * v.at(static_cast<std::size_t>(xx), static_cast<std::size_t>(yy),
                                                         static_cast<std::size_t>(zz));
                    }
                    tmp.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), static_cast<std::size_t>(z)) = acc;
                }
        std::swap(v.voxels, tmp.voxels);
    }
}

}  // namespace

VolumePair generate_phantom_pair(const PhantomSpec& spec) {
    if (spec.size < 16) throw DataError("size too small: phantom volumes must be at least 16^3");
    Rng rng(spec.seed);
    const std::size_t n = spec.size;
    const float nf = static_cast<float>(n);

    const int count = spec.min_ellipsoids +
                      static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.max_ellipsoids -
                                                                                  spec.min_ellipsoids + 1)));
    std::vector<Ellipsoid> shapes;
    for (int i = 0; i < count; ++i) {
        Ellipsoid e;
        e.cx = static_cast<float>(rng.uniform(0.25, 0.75)) * nf;
        e.cy = static_cast<float>(rng.uniform(0.25, 0.75)) * nf;
        e.cz = static_cast<float>(rng.uniform(0.25, 0.75)) * nf;
        e.ax = static_cast<float>(rng.uniform(0.12, 0.28)) * nf;
        e.ay = static_cast<float>(rng.uniform(0.12, 0.28)) * nf;
        e.az = static_cast<float>(rng.uniform(0.12, 0.28)) * nf;
        e.intensity = static_cast<float>(rng.uniform(0.4, 0.8));
        e.activity = static_cast<float>(rng.uniform(0.5, 0.95));
        shapes.push_back(e);
    }

    // metabolic activity in a random subset (~3/4 of the ellipsoids, >= 2)
    std::vector<std::size_t> order(shapes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    const std::size_t active_count =
        std::min(shapes.size(), std::max<std::size_t>(2, (3 * shapes.size() + 2) / 4));
    std::vector<bool> active(shapes.size(), false);
    for (std::size_t i = 0; i < active_count; ++i) active[order[i]] = true;

    Volume a, b;
    a.dims = {spec.size, spec.size, spec.size};
    b.dims = a.dims;
    a.voxels.assign(a.size(), 0.f);
    b.voxels.assign(b.size(), 0.f);

    // shell detection band in normalized quadratic-form units
    const float mean_axis = 0.2f * nf;
    const float band = spec.line_width / mean_axis;
    const float base_activity = 0.2f;

    for (std::size_t z = 0; z < n; ++z)
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const float fx = static_cast<float>(x), fy = static_cast<float>(y), fz = static_cast<float>(z);
                float structural = 0.08f;  // background tissue floor
                bool on_edge = false;
                float act = base_activity;
                for (std::size_t i = 0; i < shapes.size(); ++i) {
                    const float q = qform(shapes[i], fx, fy, fz);
                    if (q < 1.f) {
                        structural = shapes[i].intensity;  // topmost ellipsoid wins
                        if (active[i]) act = std::max(act, shapes[i].activity);
                    }
                    if (std::abs(q - 1.f) < band) on_edge = true;
                }
                if (on_edge) structural = 0.95f;  // edge-enhanced boundary
                a.at(x, y, z) = structural;
                b.at(x, y, z) = act;
            }

    // mild anti-aliasing keeps the structural image resolvable yet sharp-edged
    gaussian_blur(a, 0.7f * spec.line_width);
    gaussian_blur(b, spec.blob_sigma);

    // rescale activity so blob cores stay clearly above background
    float bmax = 0.f;
    for (float v : b.voxels) bmax = std::max(bmax, v);
    if (bmax > 0.f)
        for (float& v : b.voxels) v *= 0.8f / bmax;

    for (float& v : a.voxels)
        v = std::clamp(v + spec.noise_amp * static_cast<float>(rng.uniform(-1.0, 1.0)), 0.f, 1.f);
    for (float& v : b.voxels)
        v = std::clamp(v + spec.noise_amp * static_cast<float>(rng.uniform(-1.0, 1.0)), 0.f, 1.f);

    return VolumePair{std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// right-angle cube rotations

namespace {

// the 24 proper signed permutation matrices, enumerated deterministically
struct SignedPerm {
    std::array<int, 3> perm;  // output axis a reads input axis perm[a]
    std::array<int, 3> sign;
};

const std::vector<SignedPerm>& rotation_table() {
    static const std::vector<SignedPerm> table = [] {
        std::vector<SignedPerm> out;
        const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
        for (const auto& p : perms) {
            int inversions = 0;
            for (int i = 0; i < 3; ++i)
                for (int j = i + 1; j < 3; ++j)
                    if (p[i] > p[j]) ++inversions;
            const int perm_det = (inversions % 2 == 0) ? 1 : -1;
            for (int s = 0; s < 8; ++s) {
                const int sx = (s & 1) ? -1 : 1;
                const int sy = (s & 2) ? -1 : 1;
                const int sz = (s & 4) ? -1 : 1;
                if (perm_det * sx * sy * sz != 1) continue;  // proper rotations only
                out.push_back({{p[0], p[1], p[2]}, {sx, sy, sz}});
            }
        }
        return out;
    }();
    return table;
}

}  // namespace

Volume rotate_cube(const Volume& v, int orientation) {
    if (!v.cubic()) throw DataError("rotation requires a cubic volume");
    if (orientation < 0 || orientation >= 24) throw DataError("rotation orientation out of range");
    const auto& sp = rotation_table()[static_cast<std::size_t>(orientation)];
    // table entry 0 is {identity perm, +++}: the identity rotation
    const std::size_t n = v.dims[0];
    Volume out;
    out.dims = v.dims;
    out.voxels.resize(v.voxels.size());
    for (std::size_t z = 0; z < n; ++z)
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const std::size_t o[3] = {x, y, z};
                std::size_t src[3];
                for (int axis = 0; axis < 3; ++axis) {
                    const std::size_t coord = o[static_cast<std::size_t>(axis)];
                    src[sp.perm[axis]] = sp.sign[axis] > 0 ? coord : n - 1 - coord;
                }
                out.at(x, y, z) = v.at(src[0], src[1], src[2]);
            }
    return out;
}

VolumePair augment_rotate(const VolumePair& pair, Rng& rng) {
    if (!pair.mri.cubic() || !pair.pet.cubic()) throw DataError("rotation augmentation requires cubic volumes");
    const int orientation = static_cast<int>(rng.uniform_int(24));
    return VolumePair{rotate_cube(pair.mri, orientation), rotate_cube(pair.pet, orientation)};
}

SplitIndices make_splits(std::size_t n, std::uint64_t seed) {
    if (n < 10) throw DataError("make_splits: need at least 10 samples");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng = Rng(seed).derive(0x5917);
    rng.shuffle(idx);
    const std::size_t n_train = (n * 8) / 10;
    const std::size_t n_val = n / 10;
    SplitIndices s;
    s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                 idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
    return s;
}

}  // namespace dc2f
