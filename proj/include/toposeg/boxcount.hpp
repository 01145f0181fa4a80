#pragma once

#include <vector>

#include "toposeg/graph.hpp"
#include "toposeg/morph.hpp"
#include "toposeg/rng.hpp"
#include "toposeg/tensor.hpp"

namespace toposeg::boxcount {

/// Strictly increasing positive box sizes, at least two of them.
struct ScaleSet {
    std::vector<int> sizes;
    explicit ScaleSet(std::vector<int> s);
    int k() const { return static_cast<int>(sizes.size()); }
};

/// Boxes whose maximum is positive, per batch item and channel -> [B,C].
/// The non-differentiable reference; throws on negative entries.
Tensor hard_box_count(const Tensor& m, int s);
Tensor hard_box_count_multi(const Tensor& m, const ScaleSet& scales);

/// Sum of block maxima -> [B,C]. Differentiable; equals hard_box_count
/// exactly on binary masks.
Var dbc(Var m, int s);
/// Counts stacked along a trailing scale axis -> [B,C,k]. The largest
/// scale must fit inside the map.
Var dbc_multiscale(Var m, const ScaleSet& scales);

/// Per-class occupancy counts of a class-probability map [B,C,H,W].
/// Training passes soft probabilities, evaluation passes hard one-hots;
/// entries must sit in [0,1].
Var app_area_counts(Var class_probs, const ScaleSet& scales);
/// Counts of the per-class morphological gradient (differentiable window
/// max/min with edge replication).
Var app_boundary_counts(Var class_probs, const ScaleSet& scales, morph::StructuringElement b);

/// Local variance map of a single-channel depth map in [0,1], before the
/// non-negativity guard. On constant interiors the variance cancels to
/// rounding dust (bitwise zero when scaling by 9 is exact, as for 0 or
/// 0.5); the divisor-9 mean filter leaves a positive border bias for
/// nonzero constants.
Var geo_roughness_map(Var depth);
Var geo_roughness_counts(Var depth, const ScaleSet& scales);

/// Counts of the Sobel gradient magnitude sqrt(Gx^2+Gy^2+delta) with
/// delta = 1e-12 keeping the map differentiable at zero gradient.
Var geo_edge_counts(Var depth, const ScaleSet& scales);

/// Counts divided by the box-grid size per scale, so every entry becomes
/// an occupancy fraction in [0,1]; keeps projection-head inputs on one
/// magnitude regardless of map size.
Var occupancy_normalize(Var counts, const ScaleSet& scales, int h, int w);

struct MlpParams {
    Tensor w1, b1, w2, b2;
};
struct ProjectionHeads {
    MlpParams app, geo;
};
/// Two-layer perceptrons: appearance head over classes·2k flattened counts,
/// geometric head over 2k, both to d_feat.
ProjectionHeads make_projection_heads(int classes, int k, int hidden, int d_feat, Rng& rng);

struct MlpVars {
    Var w1, b1, w2, b2;
};
struct HeadVars {
    MlpVars app, geo;
};
HeadVars bind(Graph& g, const ProjectionHeads& heads, bool trainable);

struct Projection {
    Var f_app, f_geo, f_dbc;
};
/// Appearance counts through the appearance head, geometric counts through
/// the geometric head, f_dbc their concatenation.
Projection project(Var n_app_area, Var n_app_bound, Var n_geo_area, Var n_geo_bound,
                   const HeadVars& heads);

struct FractalFit {
    double slope = 0.0;
    double r2 = 0.0;
};
/// Least-squares slope of log N against log(extent/s). Throws numeric_error
/// when any count is zero (dimension undefined).
FractalFit fractal_dimension(const std::vector<double>& counts, const ScaleSet& scales, double extent);

} // namespace toposeg::boxcount
