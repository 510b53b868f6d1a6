#pragma once
// BT.601 full-range RGB <-> YCrCb (channel order Y, Cr, Cb).

#include <array>
#include <cstdint>

#include "image.hpp"

namespace streamgate {

struct YCrCbSample {
    double y, cr, cb;
};

inline constexpr YCrCbSample rgb_to_ycrcb_real(double r, double g, double b) noexcept {
    const double y = 0.299 * r + 0.587 * g + 0.114 * b;
    return {y, (r - y) * 0.713 + 128.0, (b - y) * 0.564 + 128.0};
}

inline constexpr std::array<double, 3> ycrcb_to_rgb_real(double y, double cr, double cb) noexcept {
    const double r = y + (cr - 128.0) / 0.713;
    const double b = y + (cb - 128.0) / 0.564;
    const double g = (y - 0.299 * r - 0.114 * b) / 0.587;
    return {r, g, b};
}

/// Luma of one RGB pixel, quantized the same way as the Y channel.
inline std::uint8_t luma_u8(std::uint8_t r, std::uint8_t g, std::uint8_t b) noexcept {
    return quantize(0.299 * r + 0.587 * g + 0.114 * b);
}

inline Image rgb_to_ycrcb(const Image& img) {
    if (img.channels != 3 || img.colorspace != ColorSpace::RGB)
        throw ValidationError("rgb_to_ycrcb: expected 3-channel RGB");
    Image out(img.height, img.width, 3, ColorSpace::YCrCb);
    const std::size_t n = img.pixel_count();
    for (std::size_t i = 0; i < n; ++i) {
        const auto* p = &img.pixels[3 * i];
        const auto s = rgb_to_ycrcb_real(p[0], p[1], p[2]);
        out.pixels[3 * i] = quantize(s.y);
        out.pixels[3 * i + 1] = quantize(s.cr);
        out.pixels[3 * i + 2] = quantize(s.cb);
    }
    return out;
}

inline Image ycrcb_to_rgb(const Image& img) {
    if (img.channels != 3 || img.colorspace != ColorSpace::YCrCb)
        throw ValidationError("ycrcb_to_rgb: expected 3-channel YCrCb");
    Image out(img.height, img.width, 3, ColorSpace::RGB);
    const std::size_t n = img.pixel_count();
    for (std::size_t i = 0; i < n; ++i) {
        const auto* p = &img.pixels[3 * i];
        const auto rgb = ycrcb_to_rgb_real(p[0], p[1], p[2]);
        for (int k = 0; k < 3; ++k) out.pixels[3 * i + k] = quantize(rgb[k]);
    }
    return out;
}

/// Y plane of an RGB, YCrCb or single-channel image.
inline Image luma_of(const Image& img) {
    if (img.channels == 1) return img;
    Image out(img.height, img.width, 1);
    const std::size_t n = img.pixel_count();
    if (img.colorspace == ColorSpace::YCrCb) {
        for (std::size_t i = 0; i < n; ++i) out.pixels[i] = img.pixels[3 * i];
    } else {
        for (std::size_t i = 0; i < n; ++i)
            out.pixels[i] = luma_u8(img.pixels[3 * i], img.pixels[3 * i + 1], img.pixels[3 * i + 2]);
    }
    return out;
}

/// Replicates a gray image into three identical RGB channels.
inline Image gray_to_rgb(const Image& img) {
    if (img.channels == 3) return img;
    Image out(img.height, img.width, 3);
    for (std::size_t i = 0; i < img.pixel_count(); ++i)
        out.pixels[3 * i] = out.pixels[3 * i + 1] = out.pixels[3 * i + 2] = img.pixels[i];
    return out;
}

}  // namespace streamgate
