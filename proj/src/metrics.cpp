#include "dc2fusion/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

namespace dc2f {

ImageBuf image_from_volume(const Volume& v) {
    ImageBuf img;
    img.dims = {v.dims[0], v.dims[1], v.dims[2]};
    img.data.assign(v.voxels.begin(), v.voxels.end());
    return img;
}

ImageBuf slice_from_volume(const Volume& v, std::size_t z_index) {
    if (z_index >= v.dims[2]) throw DataError("slice index out of range");
    ImageBuf img;
    img.dims = {v.dims[0], v.dims[1]};
    img.data.resize(static_cast<std::size_t>(v.dims[0]) * v.dims[1]);
    for (std::size_t y = 0; y < v.dims[1]; ++y)
        for (std::size_t x = 0; x < v.dims[0]; ++x) img.data[x + v.dims[0] * y] = v.at(x, y, z_index);
    return img;
}

static void require_same(const ImageBuf& a, const ImageBuf& b, const char* what) {
    if (a.dims != b.dims) throw ShapeError(std::string(what) + ": image dims differ");
}

double psnr(const ImageBuf& a, const ImageBuf& b, double peak) {
    require_same(a, b, "psnr");
    double mse = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse == 0) return 99.0;
    return 10.0 * std::log10(peak * peak / mse);
}

double ssim_metric(const ImageBuf& a, const ImageBuf& b, std::size_t window) {
    require_same(a, b, "ssim");
    const std::size_t ndim = a.dims.size();
    if (ndim != 2 && ndim != 3) throw ShapeError("ssim: expected a 2D or 3D image");
    for (std::size_t d : a.dims)
        if (d < window) throw ShapeError("ssim: extent smaller than window");
    const double c1 = 0.01 * 0.01;
    const double c2 = 0.03 * 0.03;

    const std::size_t X = a.dims[0], Y = a.dims[1];
    const std::size_t Z = ndim == 3 ? a.dims[2] : 1;
    const std::size_t wz = ndim == 3 ? window : 1;
    const double wn = static_cast<double>(window * window * wz);

    double total = 0;
    std::size_t count = 0;
    for (std::size_t z0 = 0; z0 + wz <= Z; ++z0)
        for (std::size_t y0 = 0; y0 + window <= Y; ++y0)
            for (std::size_t x0 = 0; x0 + window <= X; ++x0) {
                double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                for (std::size_t z = z0; z < z0 + wz; ++z)
                    for (std::size_t y = y0; y < y0 + window; ++y)
                        for (std::size_t x = x0; x < x0 + window; ++x) {
                            const double va = a.data[x + X * (y + Y * z)];
                            const double vb = b.data[x + X * (y + Y * z)];
                            sa += va;
                            sb += vb;
                            saa += va * va;
                            sbb += vb * vb;
                            sab += va * vb;
                        }
                const double ma = sa / wn, mb = sb / wn;
                const double va = saa / wn - ma * ma;
                const double vb = sbb / wn - mb * mb;
                const double cov = sab / wn - ma * mb;
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
    return total / static_cast<double>(count);
}

namespace {

inline std::size_t bin_of(double v, double lo, double hi, std::size_t bins) {
    if (hi <= lo) return 0;
    double t = (v - lo) / (hi - lo);
    t = std::min(std::max(t, 0.0), 1.0);
    std::size_t b = static_cast<std::size_t>(t * static_cast<double>(bins));
    return std::min(b, bins - 1);
}

struct JointHistogram {
    std::vector<double> joint;  // bins x bins, probabilities
    std::vector<double> pa, pb;
    double entropy_a = 0, entropy_b = 0, entropy_joint = 0, mutual_information = 0;
};

JointHistogram joint_histogram(const std::vector<double>& a, const std::vector<double>& b, std::size_t bins,
                               double a_lo, double a_hi, double b_lo, double b_hi) {
    JointHistogram h;
    h.joint.assign(bins * bins, 0.0);
    h.pa.assign(bins, 0.0);
    h.pb.assign(bins, 0.0);
    const double w = 1.0 / static_cast<double>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const std::size_t ba = bin_of(a[i], a_lo, a_hi, bins);
        const std::size_t bb = bin_of(b[i], b_lo, b_hi, bins);
        h.joint[ba * bins + bb] += w;
        h.pa[ba] += w;
        h.pb[bb] += w;
    }
    for (double p : h.pa)
        if (p > 0) h.entropy_a -= p * std::log(p);
    for (double p : h.pb)
        if (p > 0) h.entropy_b -= p * std::log(p);
    for (double p : h.joint)
        if (p > 0) h.entropy_joint -= p * std::log(p);
    // entropy identity; for identical inputs this cancels exactly to H
    h.mutual_information = h.entropy_a + h.entropy_b - h.entropy_joint;
    return h;
}

// gradient magnitude via central differences with replicated borders
std::vector<double> gradient_features(const ImageBuf& img) {
    const std::size_t ndim = img.dims.size();
    const std::size_t X = img.dims[0], Y = img.dims[1];
    const std::size_t Z = ndim == 3 ? img.dims[2] : 1;
    std::vector<double> feat(img.data.size());
    auto value = [&](std::size_t x, std::size_t y, std::size_t z) { return img.data[x + X * (y + Y * z)]; };
    auto clamp_idx = [](long long i, std::size_t n) {
        return static_cast<std::size_t>(std::min<long long>(std::max<long long>(i, 0), static_cast<long long>(n) - 1));
    };
    for (std::size_t z = 0; z < Z; ++z)
        for (std::size_t y = 0; y < Y; ++y)
            for (std::size_t x = 0; x < X; ++x) {
                const double gx =
                    0.5 * (value(clamp_idx(static_cast<long long>(x) + 1, X), y, z) -
                           value(clamp_idx(static_cast<long long>(x) - 1, X), y, z));
                const double gy =
                    0.5 * (value(x, clamp_idx(static_cast<long long>(y) + 1, Y), z) -
                           value(x, clamp_idx(static_cast<long long>(y) - 1, Y), z));
                double gz = 0;
                if (ndim == 3)
                    gz = 0.5 * (value(x, y, clamp_idx(static_cast<long long>(z) + 1, Z)) -
                                value(x, y, clamp_idx(static_cast<long long>(z) - 1, Z)));
                feat[x + X * (y + Y * z)] = std::sqrt(gx * gx + gy * gy + gz * gz);
            }
    return feat;
}

}  // namespace

double nmi(const ImageBuf& a, const ImageBuf& b, std::size_t bins) {
    require_same(a, b, "nmi");
    JointHistogram h = joint_histogram(a.data, b.data, bins, 0.0, 1.0, 0.0, 1.0);
    if (h.entropy_joint == 0) return 2.0;  // both degenerate single-bin images
    return (h.entropy_a + h.entropy_b) / h.entropy_joint;
}

double fmi(const ImageBuf& a, const ImageBuf& b, std::size_t bins) {
    require_same(a, b, "fmi");
    std::vector<double> fa = gradient_features(a);
    std::vector<double> fb = gradient_features(b);
    auto range = [](const std::vector<double>& v) {
        double lo = v[0], hi = v[0];
        for (double x : v) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        return std::make_pair(lo, hi);
    };
    auto [alo, ahi] = range(fa);
    auto [blo, bhi] = range(fb);
    JointHistogram h = joint_histogram(fa, fb, bins, alo, ahi, blo, bhi);
    const double denom = h.entropy_a + h.entropy_b;
    if (denom == 0) return 0.0;  // featureless images carry no shared information
    return 2.0 * h.mutual_information / denom;
}

const char* eval_mode_name(EvalMode mode) { return mode == EvalMode::Slice2d ? "slice2d" : "volume3d"; }

FusionReport evaluate_sample(const Volume& fused, const Volume& mri, const Volume& pet, EvalMode mode,
                             long long slice_index, const std::string& sample_id) {
    if (fused.dims != mri.dims || fused.dims != pet.dims) throw ShapeError("evaluate_sample: volume dims differ");
    FusionReport r;
    r.sample = sample_id;
    r.mode = mode;

    ImageBuf f, m, p;
    if (mode == EvalMode::Slice2d) {
        const std::size_t z = slice_index < 0 ? fused.dims[2] / 2 : static_cast<std::size_t>(slice_index);
        if (z >= fused.dims[2]) throw DataError("slice index out of range");
        r.slice_index = z;
        f = slice_from_volume(fused, z);
        m = slice_from_volume(mri, z);
        p = slice_from_volume(pet, z);
    } else {
        f = image_from_volume(fused);
        m = image_from_volume(mri);
        p = image_from_volume(pet);
    }

    auto fill = [&](FusionReport::Entry& e, auto&& metric) {
        e.vs_mri = metric(f, m);
        e.vs_pet = metric(f, p);
        e.mean = (e.vs_mri + e.vs_pet) / 2.0;
    };
    fill(r.psnr, [](const ImageBuf& x, const ImageBuf& y) { return psnr(x, y); });
    fill(r.ssim, [](const ImageBuf& x, const ImageBuf& y) { return ssim_metric(x, y); });
    fill(r.nmi, [](const ImageBuf& x, const ImageBuf& y) { return nmi(x, y); });
    fill(r.fmi, [](const ImageBuf& x, const ImageBuf& y) { return fmi(x, y); });
    return r;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void write_reports_csv(std::ostream& os, const std::vector<FusionReport>& reports) {
    os << "sample,mode,metric,vs_mri,vs_pet,mean\n";
    for (const auto& r : reports) {
        auto row = [&](const char* metric, const FusionReport::Entry& e) {
            os << r.sample << ',' << eval_mode_name(r.mode) << ',' << metric << ',' << fmt_double(e.vs_mri) << ','
               << fmt_double(e.vs_pet) << ',' << fmt_double(e.mean) << '\n';
        };
        row("psnr", r.psnr);
        row("ssim", r.ssim);
        row("nmi", r.nmi);
        row("fmi", r.fmi);
    }
}

std::vector<FusionReport> read_reports_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != "sample,mode,metric,vs_mri,vs_pet,mean")
        throw DataError("report csv: missing or malformed header");
    std::vector<FusionReport> reports;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string sample, mode, metric, s1, s2, s3;
        if (!std::getline(ss, sample, ',') || !std::getline(ss, mode, ',') || !std::getline(ss, metric, ',') ||
            !std::getline(ss, s1, ',') || !std::getline(ss, s2, ',') || !std::getline(ss, s3, ','))
            throw DataError("report csv: malformed row");
        if (reports.empty() || reports.back().sample != sample ||
            eval_mode_name(reports.back().mode) != mode) {
            FusionReport r;
            r.sample = sample;
            r.mode = mode == "slice2d" ? EvalMode::Slice2d : EvalMode::Volume3d;
            reports.push_back(r);
        }
        FusionReport::Entry e{std::stod(s1), std::stod(s2), std::stod(s3)};
        FusionReport& r = reports.back();
        if (metric == "psnr")
            r.psnr = e;
        else if (metric == "ssim")
            r.ssim = e;
        else if (metric == "nmi")
            r.nmi = e;
        else if (metric == "fmi")
            r.fmi = e;
        else
            throw DataError("report csv: unknown metric " + metric);
    }
    return reports;
}

}  // namespace dc2f
