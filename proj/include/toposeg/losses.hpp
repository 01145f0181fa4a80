#pragma once

#include <string>
#include <vector>

#include "toposeg/graph.hpp"
#include "toposeg/tensor.hpp"

namespace toposeg::losses {

struct LossWeights {
    double l_con = 1.0;
    double l_dist = 1.0;
    double l_align = 0.5;
    double l_ref = 0.5;
    double tau = 0.07;
    double eps = 1e-6;
};
/// Throws std::invalid_argument unless every weight is finite and
/// non-negative, tau > 0, and eps > 0.
void validate(const LossWeights& w);

/// Mean InfoNCE over pixel features [P,D] against N prototype rows [N,D].
/// Similarity is cosine with a 1e-12 norm floor; prototypes are constants
/// for the step, so gradients flow only into the features.
Var contrastive_loss(Var pixel_features, const std::vector<int>& assignments,
                     const Tensor& prototypes, double tau);

/// Mean pixel cross-entropy of predicted probs [B,C,H,W] against a hard
/// one-hot target. The target passes through a gradient barrier; logs are
/// clamped at 1e-12.
Var distillation_loss(Var seg_probs, Var pseudo_onehot);

/// Mean over the batch of 1 - cos(f_app, f_geo) for [B,D] rows, in [0,2].
Var alignment_loss(Var f_app, Var f_geo);

/// 1 - mean per-class Dice overlap of two [B,C,H,W] probability maps.
/// eps keeps empty classes defined: a class absent from both maps scores
/// a perfect overlap of 1 and adds no loss.
Var refinement_dice_loss(Var seg_probs, Var aux_probs, double eps);

struct GALossInputs {
    Var pixel_features;            // [P,D_emb]
    std::vector<int> assignments;  // P prototype indices
    Tensor prototypes;             // [N,D_emb]
    Var seg_probs;                 // [B,C,H,W]
    Var pseudo_onehot;             // [B,C,H,W] hard one-hot
    Var f_app, f_geo;              // [B,D_feat]
    Var aux_probs;                 // [B,C,H,W]
};

struct GALossResult {
    Var con, dist, align, ref;
    Var total;
};

/// Weighted sum of the four terms with the per-term handles kept for
/// logging. Dice compares seg_probs with aux_probs.
GALossResult galoss(const GALossInputs& in, const LossWeights& w);

/// Trainer log schema for the per-term breakdown.
std::string csv_header();
std::string csv_row(int step, const GALossResult& r);

} // namespace toposeg::losses
