#include "v2flow/metrics.hpp"

#include <cmath>

#include "v2flow/errors.hpp"

namespace v2flow {

double psnr(const Image& a, const Image& b, double peak) {
    require_same_size(a, b, "psnr");
    double acc = 0.0;
    for (size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
        acc += d * d;
    }
    const double mse = acc / static_cast<double>(a.pixels.size());
    if (mse == 0.0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(peak * peak / mse));
}

namespace {

// Per-channel window statistics via summed-area tables.
struct Sat {
    int h, w;
    std::vector<double> s;
    Sat(const Image& img, int channel, bool squared, const Image* other = nullptr)
        : h(img.height), w(img.width), s(static_cast<size_t>(h + 1) * (w + 1), 0.0) {
        for (int y = 0; y < h; ++y) {
            double rowsum = 0.0;
            for (int x = 0; x < w; ++x) {
                double v = img.at(y, x, channel);
                if (other) {
                    v *= other->at(y, x, channel);
                } else if (squared) {
                    v *= v;
                }
                rowsum += v;
                s[static_cast<size_t>(y + 1) * (w + 1) + (x + 1)] = s[static_cast<size_t>(y) * (w + 1) + (x + 1)] + rowsum;
            }
        }
    }
    double window(int y0, int x0, int win) const {
        const int y1 = y0 + win, x1 = x0 + win;
        return s[static_cast<size_t>(y1) * (w + 1) + x1] - s[static_cast<size_t>(y0) * (w + 1) + x1] -
               s[static_cast<size_t>(y1) * (w + 1) + x0] + s[static_cast<size_t>(y0) * (w + 1) + x0];
    }
};

struct SsimAccum {
    double product = 0.0;
    double lum = 0.0;
    double cs = 0.0;
    long windows = 0;
};

SsimAccum ssim_accumulate(const Image& a, const Image& b, int window, double k1, double k2, double peak) {
    require_same_size(a, b, "ssim");
    if (a.height < window || a.width < window) throw ConfigError("ssim: image smaller than the window");
    const double c1 = (k1 * peak) * (k1 * peak);
    const double c2 = (k2 * peak) * (k2 * peak);
    const double n = static_cast<double>(window) * window;

    SsimAccum acc;
    for (int ch = 0; ch < a.channels; ++ch) {
        const Sat sa(a, ch, false);
        const Sat sb(b, ch, false);
        const Sat saa(a, ch, true);
        const Sat sbb(b, ch, true);
        const Sat sab(a, ch, false, &b);
        for (int y = 0; y + window <= a.height; ++y) {
            for (int x = 0; x + window <= a.width; ++x) {
                const double mu_a = sa.window(y, x, window) / n;
                const double mu_b = sb.window(y, x, window) / n;
                const double var_a = saa.window(y, x, window) / n - mu_a * mu_a;
                const double var_b = sbb.window(y, x, window) / n - mu_b * mu_b;
                const double cov = sab.window(y, x, window) / n - mu_a * mu_b;
                const double lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1);
                const double cs = (2.0 * cov + c2) / (var_a + var_b + c2);
                acc.product += lum * cs;
                acc.lum += lum;
                acc.cs += cs;
                ++acc.windows;
            }
        }
    }
    return acc;
}

}  // namespace

double ssim(const Image& a, const Image& b, int window, double k1, double k2, double peak) {
    const SsimAccum acc = ssim_accumulate(a, b, window, k1, k2, peak);
    return acc.product / static_cast<double>(acc.windows);
}

SsimFactors ssim_factors(const Image& a, const Image& b, int window, double k1, double k2, double peak) {
    const SsimAccum acc = ssim_accumulate(a, b, window, k1, k2, peak);
    SsimFactors f;
    f.luminance = acc.lum / static_cast<double>(acc.windows);
    f.structure = acc.cs / static_cast<double>(acc.windows);
    return f;
}

MetricReport evaluate_pairs(const std::vector<Image>& ref, const std::vector<Image>& test) {
    if (ref.size() != test.size()) throw ShapeError("evaluate_pairs: corpus sizes differ");
    if (ref.empty()) throw ContractError("evaluate_pairs: empty corpus");
    MetricReport r;
    for (size_t i = 0; i < ref.size(); ++i) {
        r.psnr_per_image.push_back(psnr(ref[i], test[i]));
        r.ssim_per_image.push_back(ssim(ref[i], test[i]));
    }
    for (double v : r.psnr_per_image) r.psnr_mean += v;
    for (double v : r.ssim_per_image) r.ssim_mean += v;
    r.psnr_mean /= static_cast<double>(ref.size());
    r.ssim_mean /= static_cast<double>(ref.size());
    return r;
}

}  // namespace v2flow
