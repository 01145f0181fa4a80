#include "toposeg/losses.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>

namespace toposeg::losses {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

// Rows scaled to unit length with the 1e-12 floor, differentiably.
Var normalize_rows(Var x) {
    Var sq = reduce_sum(x * x, {1});
    Var inv = reciprocal(clamp_min(toposeg::sqrt(sq), 1e-12));
    return row_scale(x, inv);
}

} // namespace

void validate(const LossWeights& w) {
    auto finite = [](double v) { return std::isfinite(v); };
    require(finite(w.l_con) && w.l_con >= 0.0, "loss weights: l_con must be finite and >= 0");
    require(finite(w.l_dist) && w.l_dist >= 0.0, "loss weights: l_dist must be finite and >= 0");
    require(finite(w.l_align) && w.l_align >= 0.0, "loss weights: l_align must be finite and >= 0");
    require(finite(w.l_ref) && w.l_ref >= 0.0, "loss weights: l_ref must be finite and >= 0");
    require(finite(w.tau) && w.tau > 0.0, "loss weights: tau must be finite and > 0");
    require(finite(w.eps) && w.eps > 0.0, "loss weights: eps must be finite and > 0");
}

Var contrastive_loss(Var pixel_features, const std::vector<int>& assignments,
                     const Tensor& prototypes, double tau) {
    const Tensor& ev = pixel_features.value();
    require(ev.ndim() == 2, "contrastive_loss: expected [P,D] features, got " + ev.shape_str());
    require(prototypes.ndim() == 2, "contrastive_loss: expected [N,D] prototypes");
    require(prototypes.extent(1) == ev.extent(1),
            "contrastive_loss: feature and prototype dimensions differ");
    require(std::isfinite(tau) && tau > 0.0, "contrastive_loss: tau must be positive");
    const int p = ev.extent(0), n = prototypes.extent(0);
    require(p >= 1 && n >= 1, "contrastive_loss: need at least one pixel and one prototype");
    require(static_cast<int>(assignments.size()) == p,
            "contrastive_loss: one assignment per pixel required");
    for (int a : assignments)
        require(a >= 0 && a < n, "contrastive_loss: assignment index outside the prototype set");

    Graph& g = *pixel_features.graph();

    // unit prototypes, transposed for the matmul; constants for the step
    const int d = prototypes.extent(1);
    Tensor wt = Tensor::zeros({d, n});
    for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int i = 0; i < d; ++i) s += prototypes.at2(j, i) * prototypes.at2(j, i);
        double norm = std::max(std::sqrt(s), 1e-12);
        for (int i = 0; i < d; ++i) wt.at2(i, j) = prototypes.at2(j, i) / norm;
    }

    Var logits = scale(linear(normalize_rows(pixel_features), g.constant(std::move(wt))), 1.0 / tau);
    Var lp = log_softmax(logits, 1);

    // picks out -lp[i, a_i] and averages in one weighted reduction
    Tensor pick = Tensor::zeros({p, n});
    for (int i = 0; i < p; ++i) pick.at2(i, assignments[static_cast<size_t>(i)]) = -1.0 / p;
    return reduce_sum(lp * g.constant(std::move(pick)));
}

Var distillation_loss(Var seg_probs, Var pseudo_onehot) {
    const Tensor& pv = seg_probs.value();
    const Tensor& mv = pseudo_onehot.value();
    require(pv.ndim() == 4, "distillation_loss: expected [B,C,H,W] probs, got " + pv.shape_str());
    require(pv.shape() == mv.shape(), "distillation_loss: probs and target shapes differ");
    const int b = mv.extent(0), c = mv.extent(1), h = mv.extent(2), w = mv.extent(3);
    for (int bi = 0; bi < b; ++bi)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double sum = 0.0;
                for (int ci = 0; ci < c; ++ci) {
                    double v = mv.at4(bi, ci, y, x);
                    require(v == 0.0 || v == 1.0, "distillation_loss: target is not hard one-hot");
                    sum += v;
                }
                require(sum == 1.0, "distillation_loss: target pixel is not one-hot");
            }
    Var picked = stop_gradient(pseudo_onehot) * log_clamped(seg_probs, 1e-12);
    return scale(reduce_sum(picked), -1.0 / (static_cast<double>(b) * h * w));
}

Var alignment_loss(Var f_app, Var f_geo) {
    const Tensor& av = f_app.value();
    require(av.ndim() == 2, "alignment_loss: expected [B,D] features, got " + av.shape_str());
    require(av.shape() == f_geo.value().shape(), "alignment_loss: feature shapes differ");
    const int b = av.extent(0);
    Var dot = reduce_sum(f_app * f_geo, {1});
    Var na = clamp_min(toposeg::sqrt(reduce_sum(f_app * f_app, {1})), 1e-12);
    Var ng = clamp_min(toposeg::sqrt(reduce_sum(f_geo * f_geo, {1})), 1e-12);
    Var cos = dot * reciprocal(na * ng);
    return scale(reduce_sum(add_scalar(scale(cos, -1.0), 1.0)), 1.0 / b);
}

Var refinement_dice_loss(Var seg_probs, Var aux_probs, double eps) {
    const Tensor& sv = seg_probs.value();
    require(sv.ndim() == 4, "refinement_dice_loss: expected [B,C,H,W] probs, got " + sv.shape_str());
    require(sv.shape() == aux_probs.value().shape(), "refinement_dice_loss: shapes differ");
    require(std::isfinite(eps) && eps > 0.0, "refinement_dice_loss: eps must be positive");
    const int c = sv.extent(1);
    Var inter = reduce_sum(seg_probs * aux_probs, {0, 2, 3});
    Var sums = reduce_sum(seg_probs, {0, 2, 3}) + reduce_sum(aux_probs, {0, 2, 3});
    Var dice = add_scalar(scale(inter, 2.0), eps) * reciprocal(add_scalar(sums, eps));
    return add_scalar(scale(reduce_sum(dice), -1.0 / c), 1.0);
}

GALossResult galoss(const GALossInputs& in, const LossWeights& w) {
    validate(w);
    GALossResult r;
    r.con = contrastive_loss(in.pixel_features, in.assignments, in.prototypes, w.tau);
    r.dist = distillation_loss(in.seg_probs, in.pseudo_onehot);
    r.align = alignment_loss(in.f_app, in.f_geo);
    r.ref = refinement_dice_loss(in.seg_probs, in.aux_probs, w.eps);
    r.total = scale(r.con, w.l_con) + scale(r.dist, w.l_dist) + scale(r.align, w.l_align) +
              scale(r.ref, w.l_ref);
    return r;
}

std::string csv_header() { return "step,l_con,l_dist,l_align,l_ref,total"; }

std::string csv_row(int step, const GALossResult& r) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << step << ',' << r.con.value()[0] << ',' << r.dist.value()[0] << ',' << r.align.value()[0]
       << ',' << r.ref.value()[0] << ',' << r.total.value()[0];
    return os.str();
}

} // namespace toposeg::losses
