#include "toposeg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "toposeg/boxcount.hpp"
#include "toposeg/graph.hpp"
#include "toposeg/losses.hpp"
#include "toposeg/morph.hpp"
#include "toposeg/rng.hpp"
#include "toposeg/tensor.hpp"

namespace toposeg::gradcheck {
namespace {

// Stable per-entry stream id, independent of entry order.
uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// Central differences cannot see which output coordinate is wrong, so every
// coordinate is folded into one scalar through a fixed random weighting.
Var weighted(Graph& g, Var y, const Tensor& w) { return reduce_sum(y * g.constant(w)); }

// Magnitudes in [margin, margin + span] with random signs. Keeps entries a
// safe distance from kinks at zero (relu, reciprocal, sign flips).
Tensor signed_away(const std::vector<int>& shape, Rng& rng, double margin, double span) {
    Tensor t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) {
        const double mag = margin + span * rng.uniform();
        t[i] = rng.bernoulli(0.5) ? mag : -mag;
    }
    return t;
}

// Rows rescaled to norms in [0.6, 1.4]. Cosine-based losses floor norms at
// 1e-12; these rows stay far above it under the difference step.
Tensor row_normalized(int rows, int cols, Rng& rng) {
    Tensor t = Tensor::normal({rows, cols}, rng);
    for (int i = 0; i < rows; ++i) {
        double n2 = 0.0;
        for (int j = 0; j < cols; ++j) n2 += t.at2(i, j) * t.at2(i, j);
        const double target = 0.6 + 0.8 * rng.uniform();
        const double s = target / std::sqrt(std::max(n2, 1e-300));
        for (int j = 0; j < cols; ++j) t.at2(i, j) *= s;
    }
    return t;
}

// Every cell gets a distinct level from an evenly spaced ladder over
// [0.02, 0.98], shuffled. Adjacent levels differ by 0.96/(n-1), far more
// than the difference step, so block and window maxima keep a unique
// winner throughout the probe. Ragged pooling pads compare as 0, already
// 0.02 below the smallest level.
Tensor distinct_map(const std::vector<int>& shape, Rng& rng) {
    Tensor t(shape);
    const int64_t n = t.numel();
    std::vector<double> levels(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        levels[static_cast<size_t>(i)] = 0.02 + 0.96 * static_cast<double>(i) / static_cast<double>(n - 1);
    rng.shuffle(levels);
    for (int64_t i = 0; i < n; ++i) t[i] = levels[static_cast<size_t>(i)];
    return t;
}

// One-hot class map over [B,C,H,W] with a class drawn per pixel.
Tensor random_onehot(int b, int c, int h, int w, Rng& rng) {
    Tensor t({b, c, h, w});
    for (int bi = 0; bi < b; ++bi)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) t.at4(bi, static_cast<int>(rng.below(static_cast<uint64_t>(c))), y, x) = 1.0;
    return t;
}

using Predicate = std::function<bool(const Tensor&)>;

Tensor draw_until(const std::vector<int>& shape, Rng& rng, double lo, double hi, const Predicate& ok) {
    for (int attempt = 0; attempt < 500; ++attempt) {
        Tensor t = Tensor::uniform(shape, rng, lo, hi);
        if (ok(t)) return t;
    }
    throw std::logic_error("gradcheck: no tie-free input after 500 draws");
}

// The top two values of every pooling block must be separated, otherwise
// the block argmax can flip between the two sides of the central
// difference. Cells beyond a ragged edge pool as zero and join the
// comparison.
bool blocks_separated(const Tensor& m, const std::vector<int>& scales, double gap) {
    const int b = m.extent(0), c = m.extent(1), h = m.extent(2), w = m.extent(3);
    for (int s : scales) {
        if (s <= 1) continue;
        const int gh = (h + s - 1) / s, gw = (w + s - 1) / s;
        for (int bi = 0; bi < b; ++bi)
            for (int ci = 0; ci < c; ++ci)
                for (int gy = 0; gy < gh; ++gy)
                    for (int gx = 0; gx < gw; ++gx) {
                        double best = -1e300, second = -1e300;
                        for (int y = gy * s; y < (gy + 1) * s; ++y)
                            for (int x = gx * s; x < (gx + 1) * s; ++x) {
                                const double v = (y < h && x < w) ? m.at4(bi, ci, y, x) : 0.0;
                                if (v > best) {
                                    second = best;
                                    best = v;
                                } else if (v > second) {
                                    second = v;
                                }
                            }
                        if (best - second < gap) return false;
                    }
    }
    return true;
}

// Sliding window extrema with edge replication. Replicated copies share
// one source cell and move together, so only distinct source cells can
// tie; both the max and the min side are kept separated.
bool windows_separated(const Tensor& m, int k, double gap) {
    const int b = m.extent(0), c = m.extent(1), h = m.extent(2), w = m.extent(3);
    const int r = k / 2;
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    std::vector<int> seen;
                    for (int dy = -r; dy <= r; ++dy)
                        for (int dx = -r; dx <= r; ++dx) {
                            const int yy = std::clamp(y + dy, 0, h - 1);
                            const int xx = std::clamp(x + dx, 0, w - 1);
                            const int key = yy * w + xx;
                            if (std::find(seen.begin(), seen.end(), key) == seen.end()) seen.push_back(key);
                        }
                    double hi1 = -1e300, hi2 = -1e300, lo1 = 1e300, lo2 = 1e300;
                    for (int key : seen) {
                        const double v = m.at4(bi, ci, key / w, key % w);
                        if (v > hi1) {
                            hi2 = hi1;
                            hi1 = v;
                        } else if (v > hi2) {
                            hi2 = v;
                        }
                        if (v < lo1) {
                            lo2 = lo1;
                            lo1 = v;
                        } else if (v < lo2) {
                            lo2 = v;
                        }
                    }
                    if (seen.size() >= 2 && (hi1 - hi2 < gap || lo2 - lo1 < gap)) return false;
                }
    return true;
}

double min_entry(const Tensor& t) {
    double m = 1e300;
    for (int64_t i = 0; i < t.numel(); ++i) m = std::min(m, t[i]);
    return m;
}

// Pooling-block separation for the window-gradient (max minus min) map.
// Window positions that share both extremum sources carry one local
// function and stay bitwise tied under any perturbation, which is as
// harmless as a replicated edge cell, so the gap is only required between
// candidates whose source pairs differ. Unique per-window winners are the
// caller's job (windows_separated).
bool boundary_blocks_separated(const Tensor& m, int k, const std::vector<int>& scales, double gap) {
    const int b = m.extent(0), c = m.extent(1), h = m.extent(2), w = m.extent(3);
    const int r = k / 2;
    const size_t n = static_cast<size_t>(b) * c * h * w;
    std::vector<double> val(n);
    std::vector<std::pair<int, int>> grp(n);
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double hi = -1e300, lo = 1e300;
                    int khi = -1, klo = -1;
                    for (int dy = -r; dy <= r; ++dy)
                        for (int dx = -r; dx <= r; ++dx) {
                            const int yy = std::clamp(y + dy, 0, h - 1);
                            const int xx = std::clamp(x + dx, 0, w - 1);
                            const double v = m.at4(bi, ci, yy, xx);
                            if (v > hi) {
                                hi = v;
                                khi = yy * w + xx;
                            }
                            if (v < lo) {
                                lo = v;
                                klo = yy * w + xx;
                            }
                        }
                    const size_t i = static_cast<size_t>(((bi * c + ci) * h + y) * w + x);
                    val[i] = hi - lo;
                    grp[i] = {khi, klo};
                }
    for (int s : scales) {
        if (s <= 1) continue;
        const int gh = (h + s - 1) / s, gw = (w + s - 1) / s;
        for (int bi = 0; bi < b; ++bi)
            for (int ci = 0; ci < c; ++ci)
                for (int gy = 0; gy < gh; ++gy)
                    for (int gx = 0; gx < gw; ++gx) {
                        double best = -1e300;
                        std::pair<int, int> bg{-9, -9};
                        for (int y = gy * s; y < std::min((gy + 1) * s, h); ++y)
                            for (int x = gx * s; x < std::min((gx + 1) * s, w); ++x) {
                                const size_t i = static_cast<size_t>(((bi * c + ci) * h + y) * w + x);
                                if (val[i] > best) {
                                    best = val[i];
                                    bg = grp[i];
                                }
                            }
                        for (int y = gy * s; y < std::min((gy + 1) * s, h); ++y)
                            for (int x = gx * s; x < std::min((gx + 1) * s, w); ++x) {
                                const size_t i = static_cast<size_t>(((bi * c + ci) * h + y) * w + x);
                                if (grp[i] != bg && best - val[i] < gap) return false;
                            }
                    }
    }
    return true;
}

// Value-level replicas of the derived maps that feed pooling, built from
// the same graph ops, so the separation predicates see exactly what the
// descriptor pools.
Tensor roughness_map_value(const Tensor& depth) {
    Graph g;
    return boxcount::geo_roughness_map(g.constant(depth)).value();
}

Tensor edge_map_value(const Tensor& depth) {
    Graph g;
    Var x = g.constant(depth);
    Var gx = conv2d_fixed(x, Tensor({3, 3}, {-1, 0, 1, -2, 0, 2, -1, 0, 1}));
    Var gy = conv2d_fixed(x, Tensor({3, 3}, {-1, -2, -1, 0, 0, 0, 1, 2, 1}));
    return sqrt(add_scalar(gx * gx + gy * gy, 1e-12)).value();
}

// Hidden pre-activations of both projection heads, mirroring the flatten
// and concat order of project(). Biases are zero at init, so the first
// linear layer alone decides the relu side.
double min_preact_margin(const Tensor& area, const Tensor& bound, const boxcount::MlpParams& p) {
    const int c = area.extent(1), k = area.extent(2);
    const int in = 2 * c * k;
    std::vector<double> x(static_cast<size_t>(in));
    for (int ci = 0; ci < c; ++ci)
        for (int ki = 0; ki < k; ++ki) {
            x[static_cast<size_t>(ci * k + ki)] = area.at3(0, ci, ki);
            x[static_cast<size_t>(c * k + ci * k + ki)] = bound.at3(0, ci, ki);
        }
    double worst = 1e300;
    for (int hcol = 0; hcol < p.w1.extent(1); ++hcol) {
        double a = p.b1[hcol];
        for (int i = 0; i < in; ++i) a += x[static_cast<size_t>(i)] * p.w1.at2(i, hcol);
        worst = std::min(worst, std::fabs(a));
    }
    return worst;
}

struct Case {
    Tensor x;
    ScalarFn f;
};
using CaseGen = std::function<Case(Rng&, int)>;

void add_entry(std::vector<Entry>& out, uint64_t seed, const std::string& name, const CaseGen& gen,
               double h = 1e-4) {
    Rng rng(Rng::mix(seed, fnv1a(name)));
    Entry e;
    e.name = name;
    e.runs = 10;
    for (int i = 0; i < e.runs; ++i) {
        Case c = gen(rng, i);
        e.max_err = std::max(e.max_err, grad_check(c.f, c.x, h));
    }
    out.push_back(std::move(e));
}

// A central difference still sees the value dependence behind the barrier,
// so stop_gradient is audited analytically instead: the entry records the
// largest gradient magnitude that leaks through. It must be exactly zero.
void add_barrier_entry(std::vector<Entry>& out, uint64_t seed) {
    Rng rng(Rng::mix(seed, fnv1a("stop_gradient")));
    Entry e;
    e.name = "stop_gradient";
    e.runs = 10;
    for (int i = 0; i < e.runs; ++i) {
        const Tensor x = Tensor::normal({3, 4}, rng);
        const Tensor w = Tensor::normal({3, 4}, rng);
        Graph g;
        Var vx = g.leaf(x, true);
        Var loss = reduce_sum((vx * vx + stop_gradient(scale(vx, 3.0))) * g.constant(w));
        const Gradients grads = g.backward(loss);
        const Tensor got = grads.at(vx);
        // gradient of the open path alone; any difference is barrier leakage
        double leak = 0.0;
        for (int64_t j = 0; j < x.numel(); ++j) leak = std::max(leak, std::fabs(got[j] - 2.0 * x[j] * w[j]));
        e.max_err = std::max(e.max_err, leak);
    }
    out.push_back(std::move(e));
}

const boxcount::ScaleSet& small_scales() {
    static const boxcount::ScaleSet s({1, 2, 3});
    return s;
}

} // namespace

bool entry_passes(const Entry& e) { return e.max_err < kTolerance; }

std::vector<Entry> run_suite(uint64_t seed) {
    std::vector<Entry> out;

    // elementwise arithmetic
    add_entry(out, seed, "add", [](Rng& rng, int) {
        const Tensor c = Tensor::normal({3, 4}, rng), w = Tensor::normal({3, 4}, rng);
        return Case{Tensor::normal({3, 4}, rng),
                    [c, w](Graph& g, Var x) { return weighted(g, x + g.constant(c), w); }};
    });
    add_entry(out, seed, "sub", [](Rng& rng, int i) {
        const Tensor c = Tensor::normal({3, 4}, rng), w = Tensor::normal({3, 4}, rng);
        const bool left = i % 2 == 0;
        return Case{Tensor::normal({3, 4}, rng), [c, w, left](Graph& g, Var x) {
                        return weighted(g, left ? x - g.constant(c) : g.constant(c) - x, w);
                    }};
    });
    add_entry(out, seed, "mul", [](Rng& rng, int) {
        const Tensor c = Tensor::normal({3, 4}, rng), w = Tensor::normal({3, 4}, rng);
        return Case{Tensor::normal({3, 4}, rng),
                    [c, w](Graph& g, Var x) { return weighted(g, x * g.constant(c), w); }};
    });
    add_entry(out, seed, "scale", [](Rng& rng, int i) {
        const Tensor w = Tensor::normal({3, 4}, rng);
        const double f = i % 2 == 0 ? 1.7 : -0.6;
        return Case{Tensor::normal({3, 4}, rng),
                    [w, f](Graph& g, Var x) { return weighted(g, scale(x, f), w); }};
    });
    add_entry(out, seed, "add_scalar", [](Rng& rng, int) {
        const Tensor w = Tensor::normal({3, 4}, rng);
        return Case{Tensor::normal({3, 4}, rng),
                    [w](Graph& g, Var x) { return weighted(g, add_scalar(x, 0.37), w); }};
    });

    // elementwise nonlinearities, inputs away from their kinks and poles
    add_entry(out, seed, "relu", [](Rng& rng, int) {
        const Tensor w = Tensor::normal({3, 4}, rng);
        return Case{signed_away({3, 4}, rng, 0.1, 1.0),
                    [w](Graph& g, Var x) { return weighted(g, relu(x), w); }};
    });
    add_entry(out, seed, "sqrt", [](Rng& rng, int) {
        const Tensor w = Tensor::normal({3, 4}, rng);
        return Case{Tensor::uniform({3, 4}, rng, 0.1, 2.1),
                    [w](Graph& g, Var x) { return weighted(g, sqrt(x), w); }};
    });
    add_entry(out, seed, "reciprocal", [](Rng& rng, int) {
        const Tensor w = Tensor::normal({3, 4}, rng);
        return Case{signed_away({3, 4}, rng, 0.2, 1.8),
                    [w](Graph& g, Var x) { return weighted(g, reciprocal(x), w); }};
    });
    add_entry(out, seed, "clamp_min", [](Rng& rng, int) {
        // floor 0.3 with entries at least 0.15 away on either side
        Tensor t({3, 4});
        for (int64_t i = 0; i < t.numel(); ++i)
            t[i] = rng.bernoulli(0.5) ? 0.45 + 1.55 * rng.uniform() : -1.0 + 1.15 * rng.uniform();
        const Tensor w = Tensor::normal({3, 4}, rng);
        return Case{std::move(t), [w](Graph& g, Var x) { return weighted(g, clamp_min(x, 0.3), w); }};
    });
    add_entry(out, seed, "log_clamped", [](Rng& rng, int) {
        const Tensor w = Tensor::normal({3, 4}, rng);
        return Case{Tensor::uniform({3, 4}, rng, 0.1, 2.0),
                    [w](Graph& g, Var x) { return weighted(g, log_clamped(x), w); }};
    });

    // shape plumbing
    add_entry(out, seed, "reduce_sum", [](Rng& rng, int i) {
        const int mode = i % 3;
        const Tensor x = Tensor::normal({2, 3, 2}, rng);
        if (mode == 0) return Case{x, [](Graph&, Var v) { return reduce_sum(v); }};
        if (mode == 1) {
            const Tensor w = Tensor::normal({3, 2}, rng);
            return Case{x, [w](Graph& g, Var v) { return weighted(g, reduce_sum(v, {0}), w); }};
        }
        const Tensor w = Tensor::normal({2}, rng);
        return Case{x, [w](Graph& g, Var v) { return weighted(g, reduce_sum(v, {1, 2}), w); }};
    });
    add_entry(out, seed, "reshape", [](Rng& rng, int i) {
        const std::vector<int> target = i % 2 == 0 ? std::vector<int>{3, 4} : std::vector<int>{12};
        const Tensor w = Tensor::normal(target, rng);
        return Case{Tensor::normal({2, 6}, rng),
                    [w, target](Graph& g, Var x) { return weighted(g, reshape(x, target), w); }};
    });
    add_entry(out, seed, "concat", [](Rng& rng, int i) {
        const int axis = i % 4 / 2;
        const bool first = i % 2 == 0;
        const Tensor c = axis == 0 ? Tensor::normal({2, 4}, rng) : Tensor::normal({3, 2}, rng);
        const Tensor w = axis == 0 ? Tensor::normal({5, 4}, rng) : Tensor::normal({3, 6}, rng);
        return Case{Tensor::normal({3, 4}, rng), [c, w, axis, first](Graph& g, Var x) {
                        Var cv = g.constant(c);
                        std::vector<Var> xs = first ? std::vector<Var>{x, cv} : std::vector<Var>{cv, x};
                        return weighted(g, concat(xs, axis), w);
                    }};
    });
    add_entry(out, seed, "row_scale", [](Rng& rng, int i) {
        const Tensor w = Tensor::normal({4, 5}, rng);
        if (i % 2 == 0) {
            const Tensor r = Tensor::normal({4}, rng);
            return Case{Tensor::normal({4, 5}, rng),
                        [r, w](Graph& g, Var x) { return weighted(g, row_scale(x, g.constant(r)), w); }};
        }
        const Tensor m = Tensor::normal({4, 5}, rng);
        return Case{Tensor::normal({4}, rng),
                    [m, w](Graph& g, Var r) { return weighted(g, row_scale(g.constant(m), r), w); }};
    });
    add_entry(out, seed, "broadcast_spatial", [](Rng& rng, int) {
        const Tensor w = Tensor::normal({2, 3, 4, 5}, rng);
        return Case{Tensor::normal({2, 3}, rng),
                    [w](Graph& g, Var v) { return weighted(g, broadcast_spatial(v, 4, 5), w); }};
    });
    add_entry(out, seed, "gather_pixels", [](Rng& rng, int) {
        // duplicated sites must accumulate, not overwrite
        const std::vector<PixelIndex> sites = {{0, 0, 0}, {1, 3, 4}, {0, 2, 1},
                                               {1, 0, 0}, {0, 2, 1}, {0, 0, 0}};
        const Tensor w = Tensor::normal({6, 3}, rng);
        return Case{Tensor::normal({2, 3, 4, 5}, rng),
                    [sites, w](Graph& g, Var m) { return weighted(g, gather_pixels(m, sites), w); }};
    });

    // dense layers
    add_entry(out, seed, "linear", [](Rng& rng, int i) {
        const Tensor xm = Tensor::normal({3, 4}, rng), wm = Tensor::normal({4, 5}, rng),
                     bm = Tensor::normal({5}, rng), w = Tensor::normal({3, 5}, rng);
        const int slot = i % 3;
        if (slot == 0)
            return Case{xm, [wm, bm, w](Graph& g, Var x) {
                            return weighted(g, linear(x, g.constant(wm), g.constant(bm)), w);
                        }};
        if (slot == 1)
            return Case{wm, [xm, bm, w](Graph& g, Var wv) {
                            return weighted(g, linear(g.constant(xm), wv, g.constant(bm)), w);
                        }};
        return Case{bm, [xm, wm, w](Graph& g, Var b) {
                        return weighted(g, linear(g.constant(xm), g.constant(wm), b), w);
                    }};
    });
    add_entry(out, seed, "conv2d", [](Rng& rng, int i) {
        const Tensor xm = Tensor::normal({2, 2, 5, 5}, rng), wm = Tensor::normal({3, 2, 3, 3}, rng),
                     bm = Tensor::normal({3}, rng), w = Tensor::normal({2, 3, 5, 5}, rng);
        const int slot = i % 3;
        if (slot == 0)
            return Case{xm, [wm, bm, w](Graph& g, Var x) {
                            return weighted(g, conv2d(x, g.constant(wm), g.constant(bm)), w);
                        }};
        if (slot == 1)
            return Case{wm, [xm, bm, w](Graph& g, Var wv) {
                            return weighted(g, conv2d(g.constant(xm), wv, g.constant(bm)), w);
                        }};
        return Case{bm, [xm, wm, w](Graph& g, Var b) {
                        return weighted(g, conv2d(g.constant(xm), g.constant(wm), b), w);
                    }};
    });
    add_entry(out, seed, "conv2d_fixed", [](Rng& rng, int) {
        const Tensor k = Tensor::normal({3, 3}, rng), w = Tensor::normal({1, 2, 5, 5}, rng);
        return Case{Tensor::normal({1, 2, 5, 5}, rng),
                    [k, w](Graph& g, Var x) { return weighted(g, conv2d_fixed(x, k), w); }};
    });
    add_entry(out, seed, "mean_filter_3x3", [](Rng& rng, int) {
        const Tensor w = Tensor::normal({1, 1, 6, 6}, rng);
        return Case{Tensor::normal({1, 1, 6, 6}, rng),
                    [w](Graph& g, Var x) { return weighted(g, mean_filter_3x3(x), w); }};
    });

    // pooling and window extrema on maps with pairwise distinct cells
    add_entry(out, seed, "block_max_pool", [](Rng& rng, int i) {
        const int s = i % 2 == 0 ? 2 : 4; // 4 leaves a ragged, zero-padded grid on 6x6
        const int n = (6 + s - 1) / s;
        const Tensor w = Tensor::normal({1, 1, n, n}, rng);
        return Case{distinct_map({1, 1, 6, 6}, rng),
                    [w, s](Graph& g, Var x) { return weighted(g, block_max_pool(x, s), w); }};
    });
    add_entry(out, seed, "window_max", [](Rng& rng, int i) {
        const int k = i % 2 == 0 ? 3 : 5;
        const Tensor w = Tensor::normal({1, 1, 6, 6}, rng);
        return Case{distinct_map({1, 1, 6, 6}, rng),
                    [w, k](Graph& g, Var x) { return weighted(g, window_max(x, k), w); }};
    });

    // softmax family
    add_entry(out, seed, "softmax", [](Rng& rng, int i) {
        const int axis = i % 2;
        const Tensor w = Tensor::normal({3, 5}, rng);
        return Case{Tensor::normal({3, 5}, rng, 1.5),
                    [w, axis](Graph& g, Var x) { return weighted(g, softmax(x, axis), w); }};
    });
    add_entry(out, seed, "log_softmax", [](Rng& rng, int i) {
        const int axis = i % 2;
        const Tensor w = Tensor::normal({3, 5}, rng);
        return Case{Tensor::normal({3, 5}, rng, 1.5),
                    [w, axis](Graph& g, Var x) { return weighted(g, log_softmax(x, axis), w); }};
    });
    add_entry(out, seed, "softmax_log", [](Rng& rng, int i) {
        const int axis = i % 2;
        const Tensor wp = Tensor::normal({3, 5}, rng), wl = Tensor::normal({3, 5}, rng);
        return Case{Tensor::normal({3, 5}, rng, 1.5), [wp, wl, axis](Graph& g, Var x) {
                        SoftmaxLog r = softmax_log(x, axis);
                        return weighted(g, r.probs, wp) + weighted(g, r.logprobs, wl);
                    }};
    });

    add_barrier_entry(out, seed);

    // box-counting descriptors
    add_entry(out, seed, "dbc", [](Rng& rng, int i) {
        const int s = i % 2 == 0 ? 2 : 3;
        const Tensor w = Tensor::normal({1, 1}, rng);
        return Case{distinct_map({1, 1, 6, 6}, rng),
                    [w, s](Graph& g, Var m) { return weighted(g, boxcount::dbc(m, s), w); }};
    });
    add_entry(out, seed, "dbc_multiscale", [](Rng& rng, int) {
        const Tensor w = Tensor::normal({1, 1, 3}, rng);
        return Case{distinct_map({1, 1, 6, 6}, rng), [w](Graph& g, Var m) {
                        return weighted(g, boxcount::dbc_multiscale(m, small_scales()), w);
                    }};
    });
    add_entry(out, seed, "app_area_counts", [](Rng& rng, int) {
        const Tensor w = Tensor::normal({1, 2, 3}, rng);
        return Case{distinct_map({1, 2, 6, 6}, rng), [w](Graph& g, Var m) {
                        return weighted(g, boxcount::app_area_counts(m, small_scales()), w);
                    }};
    });
    add_entry(
        out, seed, "app_boundary_counts",
        [](Rng& rng, int) {
            // a winner flip needs a gap under twice the step, so with
            // h = 3e-5 these margins are safe by an order of magnitude
            // while staying loose enough that draws routinely pass
            const Predicate ok = [](const Tensor& m) {
                return windows_separated(m, 3, 5e-4) && boundary_blocks_separated(m, 3, {2, 3}, 1e-3);
            };
            const Tensor w = Tensor::normal({1, 2, 3}, rng);
            return Case{draw_until({1, 2, 6, 6}, rng, 0.02, 0.98, ok), [w](Graph& g, Var m) {
                            return weighted(
                                g, boxcount::app_boundary_counts(m, small_scales(), morph::StructuringElement(3)),
                                w);
                        }};
        },
        3e-5);
    add_entry(out, seed, "geo_roughness_counts", [](Rng& rng, int) {
        // variance is quadratic, so only the clamp floor and the pooling
        // argmax need margins
        const Predicate ok = [](const Tensor& d) {
            const Tensor r = roughness_map_value(d);
            return min_entry(r) >= 1e-3 && blocks_separated(r, {2, 3}, 1e-3);
        };
        const Tensor w = Tensor::normal({1, 1, 3}, rng);
        return Case{draw_until({1, 1, 6, 6}, rng, 0.02, 0.98, ok), [w](Graph& g, Var d) {
                        return weighted(g, boxcount::geo_roughness_counts(d, small_scales()), w);
                    }};
    });
    add_entry(
        out, seed, "geo_edge_counts",
        [](Rng& rng, int) {
            // sqrt curvature blows up near zero magnitude; keep every pixel
            // away from the cusp and shrink the step for this entry
            const Predicate ok = [](const Tensor& d) {
                const Tensor e = edge_map_value(d);
                return min_entry(e) >= 5e-2 && blocks_separated(e, {2, 3}, 3e-3);
            };
            const Tensor w = Tensor::normal({1, 1, 3}, rng);
            return Case{draw_until({1, 1, 6, 6}, rng, 0.02, 0.98, ok), [w](Graph& g, Var d) {
                            return weighted(g, boxcount::geo_edge_counts(d, small_scales()), w);
                        }};
        },
        3e-5);
    add_entry(out, seed, "occupancy_normalize", [](Rng& rng, int) {
        static const boxcount::ScaleSet scales({1, 2, 4});
        const Tensor w = Tensor::normal({2, 2, 3}, rng);
        return Case{Tensor::uniform({2, 2, 3}, rng, 0.5, 5.0), [w](Graph& g, Var c) {
                        return weighted(g, boxcount::occupancy_normalize(c, scales, 8, 8), w);
                    }};
    });
    add_entry(out, seed, "project", [](Rng& rng, int i) {
        const boxcount::ProjectionHeads heads = boxcount::make_projection_heads(2, 3, 6, 4, rng);
        const int slot = i % 4;
        Tensor in[4];
        // redraw only the probed tuple until every hidden unit of both
        // heads sits at least 1e-2 from its relu kink
        for (int attempt = 0;; ++attempt) {
            in[0] = Tensor::uniform({1, 2, 3}, rng, 0.1, 0.9);
            in[1] = Tensor::uniform({1, 2, 3}, rng, 0.1, 0.9);
            in[2] = Tensor::uniform({1, 1, 3}, rng, 0.1, 0.9);
            in[3] = Tensor::uniform({1, 1, 3}, rng, 0.1, 0.9);
            if (min_preact_margin(in[0], in[1], heads.app) >= 1e-2 &&
                min_preact_margin(in[2], in[3], heads.geo) >= 1e-2)
                break;
            if (attempt >= 500) throw std::logic_error("gradcheck: projection heads stuck at a relu kink");
        }
        const Tensor w = Tensor::normal({1, 8}, rng); // f_dbc is [1, 2*d_feat]
        Tensor c0 = in[0], c1 = in[1], c2 = in[2], c3 = in[3];
        return Case{in[slot], [heads, c0, c1, c2, c3, w, slot](Graph& g, Var v) {
                        Var a = slot == 0 ? v : g.constant(c0);
                        Var b = slot == 1 ? v : g.constant(c1);
                        Var ga = slot == 2 ? v : g.constant(c2);
                        Var gb = slot == 3 ? v : g.constant(c3);
                        boxcount::HeadVars hv = boxcount::bind(g, heads, false);
                        return weighted(g, boxcount::project(a, b, ga, gb, hv).f_dbc, w);
                    }};
    });

    // loss terms
    add_entry(out, seed, "contrastive_loss", [](Rng& rng, int) {
        const Tensor protos = row_normalized(3, 4, rng);
        std::vector<int> assign(6);
        for (int& a : assign) a = static_cast<int>(rng.below(3));
        return Case{row_normalized(6, 4, rng), [assign, protos](Graph&, Var f) {
                        return losses::contrastive_loss(f, assign, protos, 0.2);
                    }};
    });
    add_entry(out, seed, "distillation_loss", [](Rng& rng, int) {
        const Tensor target = random_onehot(1, 3, 4, 4, rng);
        return Case{Tensor::uniform({1, 3, 4, 4}, rng, 0.05, 0.95), [target](Graph& g, Var p) {
                        return losses::distillation_loss(p, g.constant(target));
                    }};
    });
    add_entry(out, seed, "alignment_loss", [](Rng& rng, int i) {
        const Tensor other = row_normalized(3, 5, rng);
        const bool app_side = i % 2 == 0;
        return Case{row_normalized(3, 5, rng), [other, app_side](Graph& g, Var v) {
                        Var c = g.constant(other);
                        return app_side ? losses::alignment_loss(v, c) : losses::alignment_loss(c, v);
                    }};
    });
    add_entry(out, seed, "refinement_dice_loss", [](Rng& rng, int i) {
        const Tensor other = Tensor::uniform({1, 3, 4, 4}, rng, 0.05, 0.95);
        const bool seg_side = i % 2 == 0;
        return Case{Tensor::uniform({1, 3, 4, 4}, rng, 0.05, 0.95), [other, seg_side](Graph& g, Var v) {
                        Var c = g.constant(other);
                        return seg_side ? losses::refinement_dice_loss(v, c, 1e-6)
                                        : losses::refinement_dice_loss(c, v, 1e-6);
                    }};
    });
    add_entry(out, seed, "galoss_total", [](Rng& rng, int i) {
        losses::LossWeights lw;
        lw.tau = 0.2;
        const Tensor feats = row_normalized(8, 4, rng);
        std::vector<int> assign(8);
        for (int& a : assign) a = static_cast<int>(rng.below(3));
        const Tensor protos = row_normalized(3, 4, rng);
        const Tensor seg = Tensor::uniform({1, 3, 4, 4}, rng, 0.05, 0.95);
        const Tensor onehot = random_onehot(1, 3, 4, 4, rng);
        const Tensor fa = row_normalized(2, 5, rng), fg = row_normalized(2, 5, rng);
        const Tensor aux = Tensor::uniform({1, 3, 4, 4}, rng, 0.05, 0.95);
        const bool probe_feats = i % 2 == 0;
        auto f = [=](Graph& g, Var v) {
            losses::GALossInputs in;
            in.pixel_features = probe_feats ? v : g.constant(feats);
            in.assignments = assign;
            in.prototypes = protos;
            in.seg_probs = probe_feats ? g.constant(seg) : v;
            in.pseudo_onehot = g.constant(onehot);
            in.f_app = g.constant(fa);
            in.f_geo = g.constant(fg);
            in.aux_probs = g.constant(aux);
            return losses::galoss(in, lw).total;
        };
        return Case{probe_feats ? feats : seg, f};
    });

    return out;
}

double worst(const std::vector<Entry>& entries) {
    double w = 0.0;
    for (const Entry& e : entries) w = std::max(w, e.max_err);
    return w;
}

bool all_pass(const std::vector<Entry>& entries) {
    if (entries.empty()) return false;
    for (const Entry& e : entries)
        if (!entry_passes(e)) return false;
    return true;
}

std::string to_json(const std::vector<Entry>& entries) {
    nlohmann::json arr = nlohmann::json::array();
    for (const Entry& e : entries)
        arr.push_back({{"name", e.name}, {"max_err", e.max_err}, {"runs", e.runs}, {"pass", entry_passes(e)}});
    return arr.dump(2);
}

} // namespace toposeg::gradcheck
