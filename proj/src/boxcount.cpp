#include "toposeg/boxcount.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "toposeg/errors.hpp"

namespace toposeg::boxcount {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

void require_map4(const Tensor& m, const char* who) {
    require(m.ndim() == 4, std::string(who) + ": expected a [B,C,H,W] map, got " + m.shape_str());
}

void check_scales_fit(const ScaleSet& scales, int h, int w, const char* who) {
    int smax = scales.sizes.back();
    require(smax <= std::min(h, w), std::string(who) + ": scale " + std::to_string(smax) +
                                        " exceeds map extent " + std::to_string(h) + "x" +
                                        std::to_string(w));
}

void check_unit_range(const Tensor& t, const char* who, const char* what) {
    const double* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) {
        if (!(p[i] >= 0.0 && p[i] <= 1.0))
            throw std::invalid_argument(std::string(who) + ": " + what + " outside [0,1]");
    }
}

Var stack_scales(Var m, const ScaleSet& scales, const char* who) {
    require_map4(m.value(), who);
    check_scales_fit(scales, m.value().extent(2), m.value().extent(3), who);
    int b = m.value().extent(0);
    int c = m.value().extent(1);
    std::vector<Var> slices;
    slices.reserve(scales.sizes.size());
    for (int s : scales.sizes) slices.push_back(reshape(dbc(m, s), {b, c, 1}));
    return concat(slices, 2);
}

// dilate - erode with the differentiable replicated-border window extrema,
// matching the value-level morphology.
Var window_gradient(Var x, int k) {
    Var dil = window_max(x, k);
    Var ero = scale(window_max(scale(x, -1.0), k), -1.0);
    return dil - ero;
}

Var mlp(Var x, const MlpVars& p) { return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2); }

Tensor sobel_x_kernel() {
    return Tensor({3, 3}, {-1, 0, 1, -2, 0, 2, -1, 0, 1});
}

Tensor sobel_y_kernel() {
    return Tensor({3, 3}, {-1, -2, -1, 0, 0, 0, 1, 2, 1});
}

} // namespace

ScaleSet::ScaleSet(std::vector<int> s) : sizes(std::move(s)) {
    require(sizes.size() >= 2, "ScaleSet: need at least two scales");
    int prev = 0;
    for (int v : sizes) {
        require(v >= 1, "ScaleSet: scales must be positive");
        require(v > prev, "ScaleSet: scales must be strictly increasing");
        prev = v;
    }
}

Tensor hard_box_count(const Tensor& m, int s) {
    require_map4(m, "hard_box_count");
    require(s >= 1, "hard_box_count: scale must be positive");
    const int b = m.extent(0), c = m.extent(1), h = m.extent(2), w = m.extent(3);
    for (int64_t i = 0; i < m.numel(); ++i)
        require(m[i] >= 0.0, "hard_box_count: negative mask entry");
    const int gh = (h + s - 1) / s, gw = (w + s - 1) / s;
    Tensor out = Tensor::zeros({b, c});
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            int64_t occupied = 0;
            for (int by = 0; by < gh; ++by)
                for (int bx = 0; bx < gw; ++bx) {
                    bool hit = false;
                    int y1 = std::min(h, (by + 1) * s), x1 = std::min(w, (bx + 1) * s);
                    for (int y = by * s; y < y1 && !hit; ++y)
                        for (int x = bx * s; x < x1; ++x)
                            if (m.at4(bi, ci, y, x) > 0.0) {
                                hit = true;
                                break;
                            }
                    if (hit) ++occupied;
                }
            out.at2(bi, ci) = static_cast<double>(occupied);
        }
    return out;
}

Tensor hard_box_count_multi(const Tensor& m, const ScaleSet& scales) {
    require_map4(m, "hard_box_count_multi");
    check_scales_fit(scales, m.extent(2), m.extent(3), "hard_box_count_multi");
    const int b = m.extent(0), c = m.extent(1), k = scales.k();
    Tensor out = Tensor::zeros({b, c, k});
    for (int si = 0; si < k; ++si) {
        Tensor one = hard_box_count(m, scales.sizes[static_cast<size_t>(si)]);
        for (int bi = 0; bi < b; ++bi)
            for (int ci = 0; ci < c; ++ci) out.at3(bi, ci, si) = one.at2(bi, ci);
    }
    return out;
}

Var dbc(Var m, int s) {
    require_map4(m.value(), "dbc");
    return reduce_sum(block_max_pool(m, s), {2, 3});
}

Var dbc_multiscale(Var m, const ScaleSet& scales) { return stack_scales(m, scales, "dbc_multiscale"); }

Var app_area_counts(Var class_probs, const ScaleSet& scales) {
    require_map4(class_probs.value(), "app_area_counts");
    check_unit_range(class_probs.value(), "app_area_counts", "class probability");
    return stack_scales(class_probs, scales, "app_area_counts");
}

Var app_boundary_counts(Var class_probs, const ScaleSet& scales, morph::StructuringElement b) {
    require_map4(class_probs.value(), "app_boundary_counts");
    check_unit_range(class_probs.value(), "app_boundary_counts", "class probability");
    return stack_scales(window_gradient(class_probs, b.size), scales, "app_boundary_counts");
}

Var geo_roughness_map(Var depth) {
    require_map4(depth.value(), "geo_roughness_map");
    require(depth.value().extent(1) == 1, "geo_roughness_map: expected a single-channel depth map");
    check_unit_range(depth.value(), "geo_roughness_map", "depth");
    Var mean = mean_filter_3x3(depth);
    Var mean_sq = mean_filter_3x3(depth * depth);
    return mean_sq - mean * mean;
}

Var geo_roughness_counts(Var depth, const ScaleSet& scales) {
    return stack_scales(clamp_min(geo_roughness_map(depth), 0.0), scales, "geo_roughness_counts");
}

Var geo_edge_counts(Var depth, const ScaleSet& scales) {
    require_map4(depth.value(), "geo_edge_counts");
    require(depth.value().extent(1) == 1, "geo_edge_counts: expected a single-channel depth map");
    check_unit_range(depth.value(), "geo_edge_counts", "depth");
    Var gx = conv2d_fixed(depth, sobel_x_kernel());
    Var gy = conv2d_fixed(depth, sobel_y_kernel());
    Var mag = toposeg::sqrt(add_scalar(gx * gx + gy * gy, 1e-12));
    return stack_scales(mag, scales, "geo_edge_counts");
}

Var occupancy_normalize(Var counts, const ScaleSet& scales, int h, int w) {
    const Tensor& v = counts.value();
    require(v.ndim() == 3, "occupancy_normalize: expected [B,C,k] counts, got " + v.shape_str());
    require(v.extent(2) == scales.k(), "occupancy_normalize: scale axis does not match the scale set");
    require(h >= 1 && w >= 1, "occupancy_normalize: map extents must be positive");
    Tensor factors(v.shape());
    for (int bi = 0; bi < v.extent(0); ++bi)
        for (int ci = 0; ci < v.extent(1); ++ci)
            for (int si = 0; si < v.extent(2); ++si) {
                int s = scales.sizes[static_cast<size_t>(si)];
                double boxes = double((h + s - 1) / s) * double((w + s - 1) / s);
                factors.at3(bi, ci, si) = 1.0 / boxes;
            }
    return counts * counts.graph()->constant(std::move(factors));
}

ProjectionHeads make_projection_heads(int classes, int k, int hidden, int d_feat, Rng& rng) {
    require(classes >= 1 && k >= 2 && hidden >= 1 && d_feat >= 1,
            "make_projection_heads: dimensions must be positive (k >= 2)");
    auto make = [&](int in) {
        MlpParams p;
        p.w1 = Tensor::normal({in, hidden}, rng, std::sqrt(2.0 / in));
        p.b1 = Tensor::zeros({hidden});
        p.w2 = Tensor::normal({hidden, d_feat}, rng, std::sqrt(2.0 / hidden));
        p.b2 = Tensor::zeros({d_feat});
        return p;
    };
    ProjectionHeads heads;
    heads.app = make(classes * 2 * k);
    heads.geo = make(2 * k);
    return heads;
}

HeadVars bind(Graph& g, const ProjectionHeads& heads, bool trainable) {
    auto one = [&](const MlpParams& p) {
        return MlpVars{g.leaf(p.w1, trainable), g.leaf(p.b1, trainable), g.leaf(p.w2, trainable),
                       g.leaf(p.b2, trainable)};
    };
    return HeadVars{one(heads.app), one(heads.geo)};
}

Projection project(Var n_app_area, Var n_app_bound, Var n_geo_area, Var n_geo_bound,
                   const HeadVars& heads) {
    auto flat = [](Var counts) {
        const Tensor& v = counts.value();
        require(v.ndim() == 3, "project: expected [B,C,k] counts, got " + v.shape_str());
        return reshape(counts, {v.extent(0), v.extent(1) * v.extent(2)});
    };
    Var app_in = concat({flat(n_app_area), flat(n_app_bound)}, 1);
    Var geo_in = concat({flat(n_geo_area), flat(n_geo_bound)}, 1);
    Projection out;
    out.f_app = mlp(app_in, heads.app);
    out.f_geo = mlp(geo_in, heads.geo);
    out.f_dbc = concat({out.f_app, out.f_geo}, 1);
    return out;
}

FractalFit fractal_dimension(const std::vector<double>& counts, const ScaleSet& scales,
                             double extent) {
    require(counts.size() == scales.sizes.size(),
            "fractal_dimension: counts and scales differ in length");
    require(extent > 0.0, "fractal_dimension: extent must be positive");
    const int n = static_cast<int>(counts.size());
    std::vector<double> xs(counts.size()), ys(counts.size());
    for (int i = 0; i < n; ++i) {
        double c = counts[static_cast<size_t>(i)];
        if (!(c > 0.0))
            throw numeric_error("fractal_dimension: zero box count, undefined dimension");
        xs[static_cast<size_t>(i)] = std::log(extent / scales.sizes[static_cast<size_t>(i)]);
        ys[static_cast<size_t>(i)] = std::log(c);
    }
    double mx = 0.0, my = 0.0;
    for (int i = 0; i < n; ++i) {
        mx += xs[static_cast<size_t>(i)];
        my += ys[static_cast<size_t>(i)];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (int i = 0; i < n; ++i) {
        double dx = xs[static_cast<size_t>(i)] - mx, dy = ys[static_cast<size_t>(i)] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    // distinct scales guarantee sxx > 0
    FractalFit fit;
    fit.slope = sxy / sxx;
    fit.r2 = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
    return fit;
}

} // namespace toposeg::boxcount
