#include "toposeg/eval.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace toposeg::eval {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

struct CoreResult {
    std::vector<int> perm;
    double cost = 0.0;
};

// Potentials form of the assignment algorithm, minimizing; a is row-major
// n x n. 1-based internals with column 0 as the virtual start.
CoreResult assignment_core(const std::vector<double>& a, int n) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(n) + 1, 0.0);
    std::vector<int> p(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<size_t>(n) + 1, inf);
        std::vector<char> used(static_cast<size_t>(n) + 1, 0);
        do {
            used[static_cast<size_t>(j0)] = 1;
            int i0 = p[static_cast<size_t>(j0)], j1 = 0;
            double delta = inf;
            for (int j = 1; j <= n; ++j)
                if (!used[static_cast<size_t>(j)]) {
                    double cur = a[static_cast<size_t>(i0 - 1) * n + (j - 1)] -
                                 u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
                    if (cur < minv[static_cast<size_t>(j)]) {
                        minv[static_cast<size_t>(j)] = cur;
                        way[static_cast<size_t>(j)] = j0;
                    }
                    if (minv[static_cast<size_t>(j)] < delta) {
                        delta = minv[static_cast<size_t>(j)];
                        j1 = j;
                    }
                }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            int j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    CoreResult r;
    r.perm.assign(static_cast<size_t>(n), -1);
    for (int j = 1; j <= n; ++j) {
        int row = p[static_cast<size_t>(j)];
        r.perm[static_cast<size_t>(row - 1)] = j - 1;
        r.cost += a[static_cast<size_t>(row - 1) * n + (j - 1)];
    }
    return r;
}

} // namespace

Assignment hungarian_match(const Tensor& cost) {
    require(cost.ndim() == 2 && cost.extent(0) == cost.extent(1) && cost.extent(0) >= 1,
            "hungarian_match: expected a square cost matrix, got " + cost.shape_str());
    const int n = cost.extent(0);
    std::vector<double> a(static_cast<size_t>(n) * n);
    for (int64_t i = 0; i < cost.numel(); ++i) {
        require(std::isfinite(cost[i]), "hungarian_match: non-finite cost entry");
        a[static_cast<size_t>(i)] = cost[i];
    }

    const double best = assignment_core(a, n).cost;
    const double tol = 1e-9 * (1.0 + std::abs(best));

    // fixes rows in order to the smallest column that still reaches the
    // optimal total, which is exactly the lexicographically smallest
    // optimal permutation
    Assignment out;
    out.perm.assign(static_cast<size_t>(n), -1);
    out.cost = best;
    std::vector<char> col_used(static_cast<size_t>(n), 0);
    double prefix = 0.0;
    for (int r = 0; r < n; ++r) {
        int fallback = -1;
        double fallback_total = std::numeric_limits<double>::infinity();
        bool fixed = false;
        for (int c = 0; c < n && !fixed; ++c) {
            if (col_used[static_cast<size_t>(c)]) continue;
            double here = prefix + a[static_cast<size_t>(r) * n + c];
            double sub_cost = 0.0;
            const int m = n - r - 1;
            if (m > 0) {
                std::vector<int> cols;
                cols.reserve(static_cast<size_t>(m));
                for (int j = 0; j < n; ++j)
                    if (!col_used[static_cast<size_t>(j)] && j != c) cols.push_back(j);
                std::vector<double> sub(static_cast<size_t>(m) * m);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < m; ++j)
                        sub[static_cast<size_t>(i) * m + j] =
                            a[static_cast<size_t>(r + 1 + i) * n + cols[static_cast<size_t>(j)]];
                sub_cost = assignment_core(sub, m).cost;
            }
            double total = here + sub_cost;
            if (total <= best + tol) {
                out.perm[static_cast<size_t>(r)] = c;
                col_used[static_cast<size_t>(c)] = 1;
                prefix = here;
                fixed = true;
            } else if (total < fallback_total) {
                fallback_total = total;
                fallback = c;
            }
        }
        // float near-ties can leave every candidate a hair above the bound;
        // take the cheapest remaining column so the assignment stays valid
        if (!fixed) {
            out.perm[static_cast<size_t>(r)] = fallback;
            col_used[static_cast<size_t>(fallback)] = 1;
            prefix += a[static_cast<size_t>(r) * n + fallback];
        }
    }
    return out;
}

ConfusionMatrix::ConfusionMatrix(int c) : classes(c) {
    require(c >= 1, "ConfusionMatrix: need at least one class");
    counts.assign(static_cast<size_t>(c) * c, 0);
}

void ConfusionMatrix::add(int pred, int truth) {
    require(pred >= 0 && pred < classes && truth >= 0 && truth < classes,
            "ConfusionMatrix: label outside [0, classes)");
    ++counts[static_cast<size_t>(pred) * classes + truth];
}

void ConfusionMatrix::merge(const ConfusionMatrix& o) {
    require(o.classes == classes, "ConfusionMatrix: merging mismatched class counts");
    for (size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
}

int64_t ConfusionMatrix::total() const {
    int64_t t = 0;
    for (int64_t v : counts) t += v;
    return t;
}

ConfusionMatrix confusion(const std::vector<int>& pred, const std::vector<int>& truth, int classes) {
    require(pred.size() == truth.size(), "confusion: label sequences differ in length");
    ConfusionMatrix cm(classes);
    for (size_t i = 0; i < pred.size(); ++i) cm.add(pred[i], truth[i]);
    return cm;
}

Metrics metrics(const ConfusionMatrix& cm) {
    const int c = cm.classes;
    require(c >= 1, "metrics: empty confusion matrix");
    const int64_t total = cm.total();
    require(total > 0, "metrics: no evaluated pixels");

    Tensor cost(std::vector<int>{c, c});
    for (int p = 0; p < c; ++p)
        for (int t = 0; t < c; ++t) cost.at2(p, t) = -static_cast<double>(cm.at(p, t));
    Assignment match = hungarian_match(cost);

    Metrics m;
    m.mapping = match.perm;

    int64_t trace = 0;
    for (int p = 0; p < c; ++p) trace += cm.at(p, m.mapping[static_cast<size_t>(p)]);
    m.acc = static_cast<double>(trace) / static_cast<double>(total);

    std::vector<int> cluster_of(static_cast<size_t>(c), -1);
    for (int p = 0; p < c; ++p) cluster_of[static_cast<size_t>(m.mapping[static_cast<size_t>(p)])] = p;
    std::vector<int64_t> row(static_cast<size_t>(c), 0), col(static_cast<size_t>(c), 0);
    for (int p = 0; p < c; ++p)
        for (int t = 0; t < c; ++t) {
            row[static_cast<size_t>(p)] += cm.at(p, t);
            col[static_cast<size_t>(t)] += cm.at(p, t);
        }

    m.per_class_iou.assign(static_cast<size_t>(c), -1.0);
    double iou_sum = 0.0;
    int included = 0;
    for (int t = 0; t < c; ++t) {
        int p = cluster_of[static_cast<size_t>(t)];
        int64_t tp = cm.at(p, t);
        int64_t uni = row[static_cast<size_t>(p)] + col[static_cast<size_t>(t)] - tp;
        if (uni == 0) continue;  // class absent from truth and its cluster
        double iou = static_cast<double>(tp) / static_cast<double>(uni);
        m.per_class_iou[static_cast<size_t>(t)] = iou;
        iou_sum += iou;
        ++included;
    }
    m.miou = iou_sum / included;  // total > 0 guarantees included >= 1
    return m;
}

Metrics metrics(const std::vector<int>& pred, const std::vector<int>& truth, int classes) {
    return metrics(confusion(pred, truth, classes));
}

std::string to_json(const Metrics& m) {
    nlohmann::json j;
    j["acc"] = m.acc;
    j["miou"] = m.miou;
    j["per_class_iou"] = m.per_class_iou;
    j["mapping"] = m.mapping;
    return j.dump();
}

} // namespace toposeg::eval
