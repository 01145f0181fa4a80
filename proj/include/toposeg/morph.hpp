#pragma once

#include <array>
#include <cstdint>

#include "toposeg/image.hpp"
#include "toposeg/tensor.hpp"

namespace toposeg::morph {

/// Flat square structuring element: b(y) = 0 on a size x size support
/// centered at the origin, so erosion and dilation are exact window
/// min/max filters.
struct StructuringElement {
    int size;
    explicit StructuringElement(int sz);
};

ImageHSL rgb_to_hsl(const ImageRGB8& img);
/// Throws std::invalid_argument when any channel leaves its range.
ImageRGB8 hsl_to_rgb(const ImageHSL& img);

// Grayscale maps are 2-D [H,W] tensors. Borders are edge-replicated:
// zero padding would fabricate dark rims and corrupt the top-hats.
Tensor erode(const Tensor& f, StructuringElement b);
Tensor dilate(const Tensor& f, StructuringElement b);
Tensor open(const Tensor& f, StructuringElement b);
Tensor close(const Tensor& f, StructuringElement b);
Tensor white_tophat(const Tensor& f, StructuringElement b);
Tensor black_tophat(const Tensor& f, StructuringElement b);
Tensor morphological_gradient(const Tensor& f, StructuringElement b);

enum class AugOp { Erode, Dilate, Open, Close, WhiteTophat, BlackTophat };
constexpr int kAugOpCount = 6;
const char* aug_op_name(AugOp op);
Tensor apply_aug_op(AugOp op, const Tensor& f, StructuringElement b);

struct AugConfig {
    std::array<double, kAugOpCount> op_weights{1, 1, 1, 1, 1, 1};
    double p_apply = 0.5;
    std::array<double, 2> se_weights{1, 1}; // sizes 3 and 5
    uint64_t seed = 0;
};

struct AugTrace {
    bool applied = false;
    AugOp op = AugOp::Erode;
    int se_size = 0;
};

/// Throws config_error on invalid weights or probabilities.
void validate(const AugConfig& cfg);

/// Lightness-only randomized augmentation: with probability p_apply picks
/// one operator and one SE size by the configured weights, runs it on the
/// L channel and recombines with the untouched H and S. Deterministic for
/// a fixed (img, cfg) pair.
ImageRGB8 topo_augment(const ImageRGB8& img, const AugConfig& cfg, AugTrace* trace = nullptr);

/// L channel of an HSL image as an [H,W] map.
Tensor lightness(const ImageHSL& img);
/// Original hue and saturation recombined with a replacement L map.
ImageRGB8 recombine(const ImageHSL& original, const Tensor& new_l);

} // namespace toposeg::morph
