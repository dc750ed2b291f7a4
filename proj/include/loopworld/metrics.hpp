#pragma once

// Image-quality metrics for generated frames: mean squared pixel error,
// peak signal-to-noise ratio (unit dynamic range, capped at 99 dB), and
// single-scale SSIM over the channel-mean luminance with a uniform 8x8
// sliding window.

#include <cmath>
#include <span>
#include <vector>

#include "loopworld/common.hpp"
#include "loopworld/env.hpp"

namespace loopworld {

inline constexpr double kPsnrCapDb = 99.0;
inline constexpr int kSsimWindow = 8;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

inline double frames_mse(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size() && !a.empty(), "frames_mse: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

inline double psnr_from_mse(double mse) {
    require(mse >= 0.0, "psnr_from_mse: negative mse");
    if (mse == 0.0) return kPsnrCapDb;
    return std::min(kPsnrCapDb, 10.0 * std::log10(1.0 / mse));
}

namespace detail {

// Channel-mean luminance of one [plane][y][x] frame, as a kGrid*kGrid image.
inline std::vector<double> luminance(std::span<const double> frame) {
    require(frame.size() == static_cast<std::size_t>(kFramePixels),
            "luminance: need exactly one frame");
    constexpr int plane_px = kGrid * kGrid;
    std::vector<double> lum(static_cast<std::size_t>(plane_px));
    for (int i = 0; i < plane_px; ++i) {
        double acc = 0.0;
        for (int p = 0; p < kFramePlanes; ++p) acc += frame[static_cast<std::size_t>(p * plane_px + i)];
        lum[static_cast<std::size_t>(i)] = acc / kFramePlanes;
    }
    return lum;
}

}  // namespace detail

// Mean SSIM over all 8x8 windows of the two frames' luminance images.
inline double frame_ssim(std::span<const double> a, std::span<const double> b) {
    const std::vector<double> la = detail::luminance(a);
    const std::vector<double> lb = detail::luminance(b);
    constexpr int n = kSsimWindow * kSsimWindow;
    constexpr int steps = kGrid - kSsimWindow + 1;
    double total = 0.0;
    for (int wy = 0; wy < steps; ++wy) {
        for (int wx = 0; wx < steps; ++wx) {
            double sx = 0.0, sy = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0;
            for (int dy = 0; dy < kSsimWindow; ++dy) {
                for (int dx = 0; dx < kSsimWindow; ++dx) {
                    const std::size_t i =
                        static_cast<std::size_t>((wy + dy) * kGrid + (wx + dx));
                    const double x = la[i];
                    const double y = lb[i];
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                }
            }
            const double mx = sx / n;
            const double my = sy / n;
            const double vx = sxx / n - mx * mx;
            const double vy = syy / n - my * my;
            const double cov = sxy / n - mx * my;
            total += ((2.0 * mx * my + kSsimC1) * (2.0 * cov + kSsimC2)) /
                     ((mx * mx + my * my + kSsimC1) * (vx + vy + kSsimC2));
        }
    }
    return total / (steps * steps);
}

struct VideoQuality {
    double mse = 0.0;
    double psnr_db = 0.0;
    double ssim = 0.0;
};

// Pixel-pooled MSE/PSNR plus frame-averaged SSIM over a sequence of frames
// laid out back to back.
inline VideoQuality eval_frame_sequence(std::span<const double> predicted,
                                        std::span<const double> truth) {
    require(predicted.size() == truth.size() &&
                predicted.size() % static_cast<std::size_t>(kFramePixels) == 0 &&
                !predicted.empty(),
            "eval_frame_sequence: need matched whole frames");
    VideoQuality q;
    q.mse = frames_mse(predicted, truth);
    q.psnr_db = psnr_from_mse(q.mse);
    const std::size_t n_frames = predicted.size() / static_cast<std::size_t>(kFramePixels);
    double ssim_acc = 0.0;
    for (std::size_t f = 0; f < n_frames; ++f) {
        const std::size_t off = f * static_cast<std::size_t>(kFramePixels);
        ssim_acc += frame_ssim(predicted.subspan(off, kFramePixels),
                               truth.subspan(off, kFramePixels));
    }
    q.ssim = ssim_acc / static_cast<double>(n_frames);
    return q;
}

}  // namespace loopworld
