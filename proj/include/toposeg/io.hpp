#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "toposeg/image.hpp"
#include "toposeg/tensor.hpp"

namespace toposeg::io {

/// Single-channel image with explicit maxval. Values must satisfy p <= maxval.
/// On disk this maps to PGM P5: one byte per sample when maxval <= 255, two
/// bytes big-endian otherwise.
struct GrayImage {
    int width = 0;
    int height = 0;
    int maxval = 255;
    std::vector<uint16_t> pixels;

    GrayImage() = default;
    GrayImage(int w, int h, int mv)
        : width(w), height(h), maxval(mv), pixels(static_cast<size_t>(w) * static_cast<size_t>(h), 0) {}

    uint16_t& at(int x, int y) { return pixels[static_cast<size_t>(y) * width + x]; }
    uint16_t at(int x, int y) const { return pixels[static_cast<size_t>(y) * width + x]; }
};

// Whole-file helpers. Both throw io_error on filesystem failure.
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);
std::vector<uint8_t> read_binary_file(const std::string& path);
void write_binary_file(const std::string& path, const std::vector<uint8_t>& bytes);

// Netpbm. Readers accept header comments and arbitrary header whitespace;
// writers emit the canonical "P6\n<w> <h>\n<maxval>\n" form. Malformed or
// truncated input throws io_error; out-of-range pixel values on write throw
// std::invalid_argument. PPM requires maxval 255 on both sides.
ImageRGB8 read_ppm(const std::string& path);
void write_ppm(const std::string& path, const ImageRGB8& img);
GrayImage read_pgm(const std::string& path);
void write_pgm(const std::string& path, const GrayImage& img);

// PNG via libpng. Reading decodes any color type to interleaved 8-bit RGB
// (palette expanded, alpha stripped, 16-bit depth narrowed). Writing always
// emits 8-bit RGB. Decode and encode failures throw io_error.
ImageRGB8 read_png(const std::string& path);
void write_png(const std::string& path, const ImageRGB8& img);

// Format dispatch by magic bytes: PNG signature, "P6", or "P5".
// read_image_rgb replicates a PGM's gray channel; read_image_gray accepts
// RGB sources only when every pixel has equal channels (config_error
// otherwise, since the caller asked for a single-channel map).
ImageRGB8 read_image_rgb(const std::string& path);
GrayImage read_image_gray(const std::string& path);

// [1,1,H,W] tensor of pixel/maxval; exact at the endpoints (0 and maxval).
Tensor to_unit_tensor(const GrayImage& img);

/// Flat key=value configuration. Order of appearance is preserved so a
/// round trip through format_config is stable.
struct Config {
    std::vector<std::pair<std::string, std::string>> entries;

    bool has(const std::string& key) const;
    const std::string* find(const std::string& key) const;

    // Missing key or unparsable value throws config_error. Numeric getters
    // require the whole value to parse; booleans accept true/false/1/0.
    std::string get_string(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;
    int64_t get_int(const std::string& key) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    double get_double(const std::string& key) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key) const;
    bool get_bool(const std::string& key, bool fallback) const;
};

// One "key=value" per line. Blank lines and lines starting with '#' are
// skipped. Keys match [A-Za-z_][A-Za-z0-9_.]*; duplicates, missing '=',
// or bad keys throw config_error naming the offending line.
Config parse_config(const std::string& text);
Config read_config(const std::string& path);
std::string format_config(const Config& cfg);

/// Checkpoint entry. Names are unique, nonempty, at most 255 bytes.
struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// Versioned flat binary of named tensors; layout is fixed little-endian
// regardless of host. Write validates names and throws std::invalid_argument
// on misuse; read throws io_error on any structural defect (bad magic,
// unknown version, truncation, trailing bytes, duplicate names).
void write_checkpoint(const std::string& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> read_checkpoint(const std::string& path);

} // namespace toposeg::io
