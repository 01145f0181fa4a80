#pragma once

#include <cstdint>
#include <vector>

namespace toposeg {

/// Interleaved 8-bit RGB, row-major from the top-left pixel.
struct ImageRGB8 {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pixels;

    ImageRGB8() = default;
    ImageRGB8(int w, int h) : width(w), height(h), pixels(static_cast<size_t>(w) * static_cast<size_t>(h) * 3, 0) {}

    uint8_t& at(int x, int y, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + static_cast<size_t>(c)]; }
    uint8_t at(int x, int y, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * 3 + static_cast<size_t>(c)];
    }
    bool same_bytes(const ImageRGB8& o) const {
        return width == o.width && height == o.height && pixels == o.pixels;
    }
};

/// Planar double-precision HSL. Hue is degrees in [0,360); saturation and
/// lightness sit in [0,1].
struct ImageHSL {
    int width = 0;
    int height = 0;
    std::vector<double> h, s, l;

    ImageHSL() = default;
    ImageHSL(int w, int hh)
        : width(w),
          height(hh),
          h(static_cast<size_t>(w) * static_cast<size_t>(hh), 0.0),
          s(h.size(), 0.0),
          l(h.size(), 0.0) {}

    int64_t count() const { return static_cast<int64_t>(width) * height; }
    size_t idx(int x, int y) const { return static_cast<size_t>(y) * width + x; }
};

} // namespace toposeg
