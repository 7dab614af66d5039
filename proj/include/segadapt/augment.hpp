#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "segadapt/tensor.hpp"

namespace segadapt {

// Both pipelines are strictly photometric: pixel (x, y) keeps its semantic
// location, so one prompt set and one pseudo-label grid stay valid for the
// anchor, teacher and student branches at once. Geometric ops are out of
// scope by design.

struct WeakAugmentPolicy {
    double brightness = 0.1;  // additive jitter in [-brightness, +brightness]
    double contrast = 0.1;    // multiplicative jitter in [1-contrast, 1+contrast]
};

struct StrongAugmentPolicy {
    double p_color_jitter = 0.8;
    double color_scale = 0.4;   // per-channel gain in [1-s, 1+s]
    double color_shift = 0.2;   // per-channel offset in [-s, +s]
    double p_grayscale = 0.2;
    double p_blur = 0.5;
    double blur_sigma_min = 0.3;
    double blur_sigma_max = 1.5;
    double p_posterize = 0.3;
    int posterize_bits_min = 3;
    int posterize_bits_max = 6;
    double p_solarize = 0.2;
    double solarize_threshold = 0.5;
};

namespace detail {

inline double clamp01(double x) { return std::min(1.0, std::max(0.0, x)); }

inline void gaussian_blur_inplace(Image& img, double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(2.5 * sigma)));
    std::vector<double> k(static_cast<size_t>(radius) * 2 + 1);
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        norm += k[static_cast<size_t>(i + radius)];
    }
    for (auto& x : k) x /= norm;

    const auto clampi = [](int v, int hi) { return std::min(hi - 1, std::max(0, v)); };
    Image tmp = img;
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < img.h; ++y)  // horizontal pass
            for (int x = 0; x < img.w; ++x) {
                double s = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    s += k[static_cast<size_t>(i + radius)] * img.at(c, y, clampi(x + i, img.w));
                tmp.at(c, y, x) = s;
            }
        for (int y = 0; y < img.h; ++y)  // vertical pass
            for (int x = 0; x < img.w; ++x) {
                double s = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    s += k[static_cast<size_t>(i + radius)] * tmp.at(c, clampi(y + i, img.h), x);
                img.at(c, y, x) = s;
            }
    }
}

}  // namespace detail

// Mild brightness/contrast jitter around the mid-gray pivot. Feeds the
// anchor and teacher branches.
inline Image weak_augment(const Image& img, Rng& rng, const WeakAugmentPolicy& policy = {}) {
    const double c = rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast);
    const double b = rng.uniform(-policy.brightness, policy.brightness);
    Image out = img;
    for (auto& x : out.v) x = detail::clamp01(c * (x - 0.5) + 0.5 + b);
    return out;
}

// Aggressive photometric composition for the student branch: color jitter,
// grayscale, Gaussian blur, posterize, solarize — each probability-gated.
inline Image strong_augment(const Image& img, Rng& rng, const StrongAugmentPolicy& policy = {}) {
    Image out = img;

    if (rng.uniform() < policy.p_color_jitter) {
        for (int c = 0; c < 3; ++c) {
            const double gain = rng.uniform(1.0 - policy.color_scale, 1.0 + policy.color_scale);
            const double shift = rng.uniform(-policy.color_shift, policy.color_shift);
            for (int y = 0; y < out.h; ++y)
                for (int x = 0; x < out.w; ++x)
                    out.at(c, y, x) = gain * (out.at(c, y, x) - 0.5) + 0.5 + shift;
        }
    }

    if (rng.uniform() < policy.p_grayscale) {
        for (int y = 0; y < out.h; ++y)
            for (int x = 0; x < out.w; ++x) {
                const double luma =
                    0.299 * out.at(0, y, x) + 0.587 * out.at(1, y, x) + 0.114 * out.at(2, y, x);
                out.at(0, y, x) = out.at(1, y, x) = out.at(2, y, x) = luma;
            }
    }

    if (rng.uniform() < policy.p_blur)
        detail::gaussian_blur_inplace(out, rng.uniform(policy.blur_sigma_min, policy.blur_sigma_max));

    if (rng.uniform() < policy.p_posterize) {
        const int bits = policy.posterize_bits_min +
                         static_cast<int>(rng.below(
                             static_cast<uint64_t>(policy.posterize_bits_max - policy.posterize_bits_min + 1)));
        const double levels = static_cast<double>(1 << bits);
        for (auto& x : out.v) x = std::floor(detail::clamp01(x) * (levels - 1.0) + 0.5) / (levels - 1.0);
    }

    if (rng.uniform() < policy.p_solarize) {
        for (auto& x : out.v)
            if (x >= policy.solarize_threshold) x = 1.0 - x;
    }

    for (auto& x : out.v) x = detail::clamp01(x);
    return out;
}

}  // namespace segadapt
