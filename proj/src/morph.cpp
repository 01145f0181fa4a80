#include "toposeg/morph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "toposeg/errors.hpp"
#include "toposeg/rng.hpp"

namespace toposeg::morph {

namespace {

void rgb_to_hsl_px(double r, double g, double b, double& h, double& s, double& l) {
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double c = mx - mn;
    l = (mx + mn) / 2.0;
    if (c == 0.0) {
        h = 0.0;
        s = 0.0;
        return;
    }
    s = c / (1.0 - std::fabs(2.0 * l - 1.0));
    double hp;
    if (mx == r) {
        hp = std::fmod((g - b) / c, 6.0);
        if (hp < 0.0) hp += 6.0;
    } else if (mx == g) {
        hp = (b - r) / c + 2.0;
    } else {
        hp = (r - g) / c + 4.0;
    }
    h = 60.0 * hp;
    // the exact values satisfy h < 360, s <= 1, l <= 1; strip rounding dust
    // (fmod can land on -1e-17 and wrap to exactly 6) so the stated ranges
    // hold as invariants
    if (h >= 360.0) h = 0.0;
    s = std::min(s, 1.0);
    l = std::min(std::max(l, 0.0), 1.0);
}

void hsl_to_rgb_px(double h, double s, double l, double& r, double& g, double& b) {
    if (!(h >= 0.0 && h < 360.0)) throw std::invalid_argument("hsl_to_rgb: hue out of [0,360)");
    if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument("hsl_to_rgb: saturation out of [0,1]");
    if (!(l >= 0.0 && l <= 1.0)) throw std::invalid_argument("hsl_to_rgb: lightness out of [0,1]");
    const double c = (1.0 - std::fabs(2.0 * l - 1.0)) * s;
    const double hp = h / 60.0;
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    switch (static_cast<int>(hp)) {
        case 0: r = c; g = x; b = 0; break;
        case 1: r = x; g = c; b = 0; break;
        case 2: r = 0; g = c; b = x; break;
        case 3: r = 0; g = x; b = c; break;
        case 4: r = x; g = 0; b = c; break;
        default: r = c; g = 0; b = x; break;
    }
    const double m = l - c / 2.0;
    r += m;
    g += m;
    b += m;
}

uint8_t quantize(double v) {
    const long q = std::lround(v * 255.0);
    return static_cast<uint8_t>(std::clamp(q, 0L, 255L));
}

void require_map(const Tensor& f, const char* op) {
    if (f.ndim() != 2) throw std::invalid_argument(std::string(op) + ": expected an [H,W] map");
}

Tensor window_extreme(const Tensor& f, int size, bool take_max) {
    const int H = f.extent(0), W = f.extent(1), r = size / 2;
    Tensor out({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = take_max ? -std::numeric_limits<double>::infinity()
                                  : std::numeric_limits<double>::infinity();
            for (int dy = -r; dy <= r; ++dy) {
                const int yy = std::clamp(y + dy, 0, H - 1);
                for (int dx = -r; dx <= r; ++dx) {
                    const int xx = std::clamp(x + dx, 0, W - 1);
                    const double v = f.at2(yy, xx);
                    acc = take_max ? std::max(acc, v) : std::min(acc, v);
                }
            }
            out.at2(y, x) = acc;
        }
    return out;
}

Tensor diff(const Tensor& a, const Tensor& b) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    return out;
}

} // namespace

StructuringElement::StructuringElement(int sz) : size(sz) {
    if (sz < 1 || sz % 2 == 0) throw std::invalid_argument("structuring element size must be odd and positive");
}

ImageHSL rgb_to_hsl(const ImageRGB8& img) {
    ImageHSL out(img.width, img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const size_t i = out.idx(x, y);
            rgb_to_hsl_px(img.at(x, y, 0) / 255.0, img.at(x, y, 1) / 255.0, img.at(x, y, 2) / 255.0, out.h[i],
                          out.s[i], out.l[i]);
        }
    return out;
}

ImageRGB8 hsl_to_rgb(const ImageHSL& img) {
    ImageRGB8 out(img.width, img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const size_t i = img.idx(x, y);
            double r, g, b;
            hsl_to_rgb_px(img.h[i], img.s[i], img.l[i], r, g, b);
            out.at(x, y, 0) = quantize(r);
            out.at(x, y, 1) = quantize(g);
            out.at(x, y, 2) = quantize(b);
        }
    return out;
}

Tensor erode(const Tensor& f, StructuringElement b) {
    require_map(f, "erode");
    return window_extreme(f, b.size, false);
}

Tensor dilate(const Tensor& f, StructuringElement b) {
    require_map(f, "dilate");
    return window_extreme(f, b.size, true);
}

Tensor open(const Tensor& f, StructuringElement b) { return dilate(erode(f, b), b); }

Tensor close(const Tensor& f, StructuringElement b) { return erode(dilate(f, b), b); }

Tensor white_tophat(const Tensor& f, StructuringElement b) {
    require_map(f, "white_tophat");
    return diff(f, open(f, b));
}

Tensor black_tophat(const Tensor& f, StructuringElement b) {
    require_map(f, "black_tophat");
    return diff(close(f, b), f);
}

Tensor morphological_gradient(const Tensor& f, StructuringElement b) {
    require_map(f, "morphological_gradient");
    return diff(dilate(f, b), erode(f, b));
}

const char* aug_op_name(AugOp op) {
    switch (op) {
        case AugOp::Erode: return "erode";
        case AugOp::Dilate: return "dilate";
        case AugOp::Open: return "open";
        case AugOp::Close: return "close";
        case AugOp::WhiteTophat: return "white_tophat";
        case AugOp::BlackTophat: return "black_tophat";
    }
    return "?";
}

Tensor apply_aug_op(AugOp op, const Tensor& f, StructuringElement b) {
    switch (op) {
        case AugOp::Erode: return erode(f, b);
        case AugOp::Dilate: return dilate(f, b);
        case AugOp::Open: return open(f, b);
        case AugOp::Close: return close(f, b);
        case AugOp::WhiteTophat: return white_tophat(f, b);
        case AugOp::BlackTophat: return black_tophat(f, b);
    }
    throw std::invalid_argument("unknown augmentation operator");
}

void validate(const AugConfig& cfg) {
    if (!(cfg.p_apply >= 0.0 && cfg.p_apply <= 1.0)) throw config_error("p_apply must lie in [0,1]");
    double op_total = 0.0;
    for (double w : cfg.op_weights) {
        if (w < 0.0 || !std::isfinite(w)) throw config_error("operator weights must be non-negative");
        op_total += w;
    }
    if (op_total <= 0.0) throw config_error("at least one operator weight must be positive");
    double se_total = 0.0;
    for (double w : cfg.se_weights) {
        if (w < 0.0 || !std::isfinite(w)) throw config_error("SE weights must be non-negative");
        se_total += w;
    }
    if (se_total <= 0.0) throw config_error("at least one SE weight must be positive");
}

Tensor lightness(const ImageHSL& img) {
    Tensor out({img.height, img.width});
    for (int64_t i = 0; i < img.count(); ++i) out[i] = img.l[static_cast<size_t>(i)];
    return out;
}

ImageRGB8 recombine(const ImageHSL& original, const Tensor& new_l) {
    require_map(new_l, "recombine");
    if (new_l.extent(0) != original.height || new_l.extent(1) != original.width)
        throw std::invalid_argument("recombine: lightness map size mismatch");
    ImageHSL merged = original;
    for (int64_t i = 0; i < merged.count(); ++i) merged.l[static_cast<size_t>(i)] = new_l[i];
    return hsl_to_rgb(merged);
}

ImageRGB8 topo_augment(const ImageRGB8& img, const AugConfig& cfg, AugTrace* trace) {
    validate(cfg);
    Rng rng(cfg.seed);
    // fixed draw order: gate, operator, SE size
    if (!rng.bernoulli(cfg.p_apply)) {
        if (trace) *trace = AugTrace{};
        return img;
    }
    const std::vector<double> ow(cfg.op_weights.begin(), cfg.op_weights.end());
    const AugOp op = static_cast<AugOp>(rng.weighted_pick(ow));
    const std::vector<double> sw(cfg.se_weights.begin(), cfg.se_weights.end());
    const int se_size = rng.weighted_pick(sw) == 0 ? 3 : 5;

    const ImageHSL hsl = rgb_to_hsl(img);
    // morphology keeps L inside [0,1]: min/max select existing values and
    // the top-hats are non-negative differences bounded by f
    const Tensor edited = apply_aug_op(op, lightness(hsl), StructuringElement(se_size));
    if (trace) {
        trace->applied = true;
        trace->op = op;
        trace->se_size = se_size;
    }
    return recombine(hsl, edited);
}

} // namespace toposeg::morph
