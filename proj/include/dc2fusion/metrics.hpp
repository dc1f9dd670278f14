#pragma once

// Inference-time fusion quality metrics: PSNR, local-window SSIM, Studholme
// NMI and gradient-feature FMI, computed on full volumes or on matched 2D
// axial slices, against both source modalities. Plain double-precision scalar
// code, independent of the autodiff stack.

#include <iosfwd>
#include <string>
#include <vector>

#include "dc2fusion/volume_io.hpp"

namespace dc2f {

// images as flat double buffers with explicit spatial dims (2D or 3D)
struct ImageBuf {
    std::vector<double> data;
    std::vector<std::size_t> dims;  // x-fastest storage: index = x + X*(y + Y*z)

    std::size_t size() const {
        std::size_t n = 1;
        for (std::size_t d : dims) n *= d;
        return n;
    }
};

ImageBuf image_from_volume(const Volume& v);
ImageBuf slice_from_volume(const Volume& v, std::size_t z_index);  // axial slice

// 10*log10(peak^2 / MSE); returns the documented 99 dB cap when MSE == 0
double psnr(const ImageBuf& a, const ImageBuf& b, double peak = 1.0);

// mean local SSIM over a window^d sliding box (valid positions, population
// moments), C1=(0.01)^2, C2=(0.03)^2 for dynamic range 1
double ssim_metric(const ImageBuf& a, const ImageBuf& b, std::size_t window = 7);

// Studholme normalized mutual information (H(a)+H(b))/H(a,b), natural log,
// equal-width bins over [0,1] (values clamped into the end bins)
double nmi(const ImageBuf& a, const ImageBuf& b, std::size_t bins = 64);

// feature mutual information: 2*MI/(H1+H2) over gradient-magnitude features,
// 64-bin joint histogram with per-feature [min,max] binning
double fmi(const ImageBuf& a, const ImageBuf& b, std::size_t bins = 64);

enum class EvalMode { Slice2d, Volume3d };

struct FusionReport {
    struct Entry {
        double vs_mri = 0, vs_pet = 0, mean = 0;
    };
    std::string sample;
    EvalMode mode = EvalMode::Slice2d;
    std::size_t slice_index = 0;  // meaningful in slice2d mode
    Entry psnr, ssim, nmi, fmi;
};

// slice_index < 0 selects the middle axial slice
FusionReport evaluate_sample(const Volume& fused, const Volume& mri, const Volume& pet, EvalMode mode,
                             long long slice_index = -1, const std::string& sample_id = "sample");

// CSV: header `sample,mode,metric,vs_mri,vs_pet,mean`, one row per metric per
// sample, '.' decimal separator, 17 significant digits (bit-exact round trip)
void write_reports_csv(std::ostream& os, const std::vector<FusionReport>& reports);
std::vector<FusionReport> read_reports_csv(std::istream& is);

const char* eval_mode_name(EvalMode mode);

}  // namespace dc2f
