#pragma once

#include <vector>

#include "v2flow/image.hpp"

namespace v2flow {

// 10*log10(peak^2 / MSE), capped at 99 dB (zero MSE reports the cap).
double psnr(const Image& a, const Image& b, double peak = 1.0);

// Mean over sliding windows (uniform weights, stride 1) of the standard
// luminance * contrast-structure product, averaged over channels.
double ssim(const Image& a, const Image& b, int window = 8, double k1 = 0.01, double k2 = 0.03, double peak = 1.0);

// Window-averaged luminance and contrast-structure factors, separately.
struct SsimFactors {
    double luminance = 0.0;
    double structure = 0.0;
};
SsimFactors ssim_factors(const Image& a, const Image& b, int window = 8, double k1 = 0.01, double k2 = 0.03,
                         double peak = 1.0);

struct MetricReport {
    std::vector<double> psnr_per_image;
    std::vector<double> ssim_per_image;
    double psnr_mean = 0.0;
    double ssim_mean = 0.0;
};

MetricReport evaluate_pairs(const std::vector<Image>& ref, const std::vector<Image>& test);

}  // namespace v2flow
