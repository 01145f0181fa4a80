#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "toposeg/tensor.hpp"

namespace toposeg::eval {

struct Assignment {
    std::vector<int> perm;  // perm[row] = assigned column
    double cost = 0.0;
};

/// Minimum-cost perfect assignment on a square cost matrix via the O(n^3)
/// potentials algorithm. Among equal-cost optima the lexicographically
/// smallest permutation wins (row 0's column first, then row 1's, ...).
/// Throws std::invalid_argument on non-finite entries or non-square input.
Assignment hungarian_match(const Tensor& cost);

/// Pixel counts indexed by (predicted cluster, truth class). Accumulation
/// over scenes is associative: build one per scene and merge.
struct ConfusionMatrix {
    int classes = 0;
    std::vector<int64_t> counts;

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int c);
    void add(int pred, int truth);
    void merge(const ConfusionMatrix& o);
    int64_t at(int pred, int truth) const {
        return counts[static_cast<size_t>(pred) * classes + truth];
    }
    int64_t total() const;
};

/// Per-pixel confusion of two label sequences with labels in [0, classes).
ConfusionMatrix confusion(const std::vector<int>& pred, const std::vector<int>& truth, int classes);

struct Metrics {
    double acc = 0.0;
    double miou = 0.0;
    /// IoU per truth class under the matching; classes with zero union
    /// (absent from truth and from their matched cluster) hold -1 and do
    /// not enter the mIoU mean.
    std::vector<double> per_class_iou;
    std::vector<int> mapping;  // mapping[pred cluster] = truth class
};

/// Hungarian-matched unsupervised metrics: clusters map to truth classes by
/// maximizing joint mass (cost = -counts); Acc is the matched trace over
/// the total, mIoU the mean of TP/(TP+FP+FN) over nonzero-union classes.
Metrics metrics(const ConfusionMatrix& cm);
Metrics metrics(const std::vector<int>& pred, const std::vector<int>& truth, int classes);

/// {"acc": ..., "miou": ..., "per_class_iou": [...], "mapping": [...]}
std::string to_json(const Metrics& m);

} // namespace toposeg::eval
