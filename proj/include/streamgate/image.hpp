#pragma once
/**
 * image.hpp
 *
 * Plain 8-bit raster used by every pipeline stage. Pixels are row-major with
 * interleaved channels; a 3-channel image is either RGB or YCrCb depending on
 * its colorspace tag.
 */

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace streamgate {

/// Input that violates a documented precondition. The CLI maps it to exit 1.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class ColorSpace { RGB, YCrCb };

struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    ColorSpace colorspace = ColorSpace::RGB;
    std::vector<std::uint8_t> pixels;

    Image() = default;

    Image(int h, int w, int c, ColorSpace cs = ColorSpace::RGB, std::uint8_t fill = 0)
        : height(h), width(w), channels(c), colorspace(cs),
          pixels(checked_size(h, w, c), fill) {}

    [[nodiscard]] bool empty() const noexcept { return pixels.empty(); }
    [[nodiscard]] std::size_t pixel_count() const noexcept {
        return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    }

    [[nodiscard]] std::uint8_t at(int row, int col, int ch = 0) const {
        return pixels[index(row, col, ch)];
    }
    std::uint8_t& at(int row, int col, int ch = 0) {
        return pixels[index(row, col, ch)];
    }

    [[nodiscard]] std::size_t index(int row, int col, int ch = 0) const noexcept {
        return (static_cast<std::size_t>(row) * static_cast<std::size_t>(width) +
                static_cast<std::size_t>(col)) * static_cast<std::size_t>(channels) +
               static_cast<std::size_t>(ch);
    }

    [[nodiscard]] bool same_shape(const Image& o) const noexcept {
        return height == o.height && width == o.width && channels == o.channels;
    }

    /// Throws ValidationError unless the buffer length matches h*w*c.
    void validate() const {
        if (height < 0 || width < 0 || (channels != 1 && channels != 3))
            throw ValidationError("image: bad dimensions or channel count");
        if (pixels.size() != checked_size(height, width, channels))
            throw ValidationError("image: pixel buffer length != h*w*c");
    }

    friend bool operator==(const Image&, const Image&) = default;

private:
    static std::size_t checked_size(int h, int w, int c) {
        if (h < 0 || w < 0 || c < 0) throw ValidationError("image: negative dimension");
        return static_cast<std::size_t>(h) * static_cast<std::size_t>(w) *
               static_cast<std::size_t>(c);
    }
};

/// Real-valued single plane, e.g. a temporal mean of luma samples.
struct Plane {
    int height = 0;
    int width = 0;
    std::vector<double> samples;

    Plane() = default;
    Plane(int h, int w, double fill = 0.0)
        : height(h), width(w),
          samples(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {}

    [[nodiscard]] double at(int row, int col) const {
        return samples[static_cast<std::size_t>(row) * static_cast<std::size_t>(width) +
                       static_cast<std::size_t>(col)];
    }
    double& at(int row, int col) {
        return samples[static_cast<std::size_t>(row) * static_cast<std::size_t>(width) +
                       static_cast<std::size_t>(col)];
    }
};

/// Round half-up and clamp to the 8-bit range.
inline std::uint8_t quantize(double v) noexcept {
    const double r = v + 0.5;
    if (!(r >= 1.0)) return 0;  // also maps NaN to 0
    if (r >= 255.0) return 255;
    return static_cast<std::uint8_t>(static_cast<int>(r));
}

/// Column mirror; the only flip the pipeline ever applies.
inline Image hflip(const Image& img) {
    Image out = img;
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c)
            for (int k = 0; k < img.channels; ++k)
                out.at(r, img.width - 1 - c, k) = img.at(r, c, k);
    return out;
}

}  // namespace streamgate
