#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "toposeg/boxcount.hpp"
#include "toposeg/errors.hpp"
#include "toposeg/graph.hpp"
#include "toposeg/morph.hpp"
#include "toposeg/rng.hpp"
#include "toposeg/tensor.hpp"

using toposeg::Graph;
using toposeg::Rng;
using toposeg::Tensor;
using toposeg::Var;
namespace bc = toposeg::boxcount;
namespace morph = toposeg::morph;

namespace {

// Pixel-marking box counter, structured differently from the library's
// per-box scan so the two cannot share a bug.
int64_t brute_count(const Tensor& m, int b, int c, int s) {
    const int h = m.extent(2), w = m.extent(3);
    const int gh = (h + s - 1) / s, gw = (w + s - 1) / s;
    std::vector<char> hit(static_cast<size_t>(gh) * gw, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (m.at4(b, c, y, x) > 0.0) hit[static_cast<size_t>(y / s) * gw + x / s] = 1;
    int64_t n = 0;
    for (char v : hit) n += v;
    return n;
}

// Sum of per-box maxima, plain loops.
double box_sum(const Tensor& m, int b, int c, int s) {
    const int h = m.extent(2), w = m.extent(3);
    const int gh = (h + s - 1) / s, gw = (w + s - 1) / s;
    double total = 0.0;
    for (int by = 0; by < gh; ++by)
        for (int bx = 0; bx < gw; ++bx) {
            double best = -1e300;
            for (int y = by * s; y < std::min(h, (by + 1) * s); ++y)
                for (int x = bx * s; x < std::min(w, (bx + 1) * s); ++x)
                    best = std::max(best, m.at4(b, c, y, x));
            if ((by + 1) * s > h || (bx + 1) * s > w) best = std::max(best, 0.0);
            total += best;
        }
    return total;
}

Tensor sierpinski(int level) {
    int n = 1;
    for (int i = 0; i < level; ++i) n *= 3;
    Tensor m = Tensor::zeros({1, 1, n, n});
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            int xa = x, ya = y;
            bool filled = true;
            for (int i = 0; i < level; ++i) {
                if (xa % 3 == 1 && ya % 3 == 1) {
                    filled = false;
                    break;
                }
                xa /= 3;
                ya /= 3;
            }
            if (filled) m.at4(0, 0, y, x) = 1.0;
        }
    return m;
}

Tensor random_binary(Rng& rng, int h, int w, double p, int b = 1, int c = 1) {
    Tensor m = Tensor::zeros({b, c, h, w});
    for (int64_t i = 0; i < m.numel(); ++i) m[i] = rng.bernoulli(p) ? 1.0 : 0.0;
    return m;
}

// Values pairwise at least ~8e-3 apart so finite-difference steps cannot
// flip a window or box argmax.
Tensor separated(std::vector<int> shape, Rng& rng, double center = 0.0) {
    Tensor t(std::move(shape));
    std::vector<double> vals(static_cast<size_t>(t.numel()));
    for (size_t i = 0; i < vals.size(); ++i)
        vals[i] = static_cast<double>(i) * 0.01 + rng.uniform(0.003, 0.005);
    rng.shuffle(vals);
    double mid = 0.005 * static_cast<double>(vals.size());
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = vals[static_cast<size_t>(i)] - mid + center;
    return t;
}

std::vector<double> counts_row(const Tensor& counts, int b, int c) {
    std::vector<double> out;
    for (int s = 0; s < counts.extent(2); ++s) out.push_back(counts.at3(b, c, s));
    return out;
}

// Zero-padded cross-correlation and divisor-9 local variance, written as
// straight loops.
double mean9(const Tensor& m, int b, int c, int y, int x, bool squared) {
    double acc = 0.0;
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
            int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= m.extent(2) || xx < 0 || xx >= m.extent(3)) continue;
            double v = m.at4(b, c, yy, xx);
            acc += squared ? v * v : v;
        }
    return acc / 9.0;
}

Tensor variance_oracle(const Tensor& depth) {
    Tensor out = Tensor::zeros(depth.shape());
    for (int b = 0; b < depth.extent(0); ++b)
        for (int y = 0; y < depth.extent(2); ++y)
            for (int x = 0; x < depth.extent(3); ++x) {
                double e1 = mean9(depth, b, 0, y, x, false);
                double e2 = mean9(depth, b, 0, y, x, true);
                out.at4(b, 0, y, x) = std::max(0.0, e2 - e1 * e1);
            }
    return out;
}

Tensor sobel_magnitude_oracle(const Tensor& depth) {
    const double kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
    const double ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
    Tensor out = Tensor::zeros(depth.shape());
    for (int b = 0; b < depth.extent(0); ++b)
        for (int y = 0; y < depth.extent(2); ++y)
            for (int x = 0; x < depth.extent(3); ++x) {
                double gx = 0.0, gy = 0.0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int yy = y + dy, xx = x + dx;
                        if (yy < 0 || yy >= depth.extent(2) || xx < 0 || xx >= depth.extent(3))
                            continue;
                        gx += kx[dy + 1][dx + 1] * depth.at4(b, 0, yy, xx);
                        gy += ky[dy + 1][dx + 1] * depth.at4(b, 0, yy, xx);
                    }
                out.at4(b, 0, y, x) = std::sqrt(gx * gx + gy * gy + 1e-12);
            }
    return out;
}

} // namespace

TEST_CASE("scale sets validate their invariants") {
    CHECK_NOTHROW(bc::ScaleSet({1, 2, 4, 8, 16}));
    CHECK_NOTHROW(bc::ScaleSet({1, 3, 9, 27}));
    CHECK_THROWS_AS(bc::ScaleSet({4}), std::invalid_argument);
    CHECK_THROWS_AS(bc::ScaleSet({}), std::invalid_argument);
    CHECK_THROWS_AS(bc::ScaleSet({4, 2}), std::invalid_argument);
    CHECK_THROWS_AS(bc::ScaleSet({2, 2, 4}), std::invalid_argument);
    CHECK_THROWS_AS(bc::ScaleSet({0, 2}), std::invalid_argument);
    CHECK_THROWS_AS(bc::ScaleSet({-1, 2}), std::invalid_argument);
}

TEST_CASE("hard box counts match a brute-force oracle and the known anchors") {
    // full 8x8 frame at scale 2 covers a 4x4 grid of boxes
    Tensor ones = Tensor::full({1, 1, 8, 8}, 1.0);
    CHECK(bc::hard_box_count(ones, 2).at2(0, 0) == 16.0);
    CHECK(bc::hard_box_count(Tensor::zeros({1, 1, 8, 8}), 2).at2(0, 0) == 0.0);

    Tensor neg = Tensor::zeros({1, 1, 4, 4});
    neg.at4(0, 0, 1, 1) = -0.5;
    CHECK_THROWS_AS(bc::hard_box_count(neg, 2), std::invalid_argument);

    Tensor carpet = sierpinski(3);
    bc::ScaleSet s3({1, 3, 9, 27});
    Tensor cc = bc::hard_box_count_multi(carpet, s3);
    CHECK(counts_row(cc, 0, 0) == std::vector<double>{512, 64, 8, 1});

    Rng rng(7001);
    for (int trial = 0; trial < 60; ++trial) {
        int h = rng.range(5, 33), w = rng.range(5, 33);
        Tensor m = random_binary(rng, h, w, rng.uniform(0.05, 0.6), 2, 2);
        for (int s : {1, 2, 3, 4, 5}) {
            if (s > std::min(h, w)) continue;
            Tensor got = bc::hard_box_count(m, s);
            for (int b = 0; b < 2; ++b)
                for (int c = 0; c < 2; ++c)
                    CHECK(got.at2(b, c) == static_cast<double>(brute_count(m, b, c, s)));
        }
    }
}

TEST_CASE("hard box counts shrink along nested scale chains and are sub-additive") {
    Rng rng(7002);
    for (int trial = 0; trial < 40; ++trial) {
        Tensor m = random_binary(rng, 32, 32, rng.uniform(0.02, 0.5));
        for (auto& chain : {std::vector<int>{1, 2, 4, 8, 16}, std::vector<int>{1, 3, 9, 27}}) {
            double prev = 1e18;
            for (int s : chain) {
                double n = bc::hard_box_count(m, s).at2(0, 0);
                CHECK(n <= prev);
                prev = n;
            }
        }
    }
    for (int trial = 0; trial < 40; ++trial) {
        Tensor a = random_binary(rng, 16, 16, 0.2);
        Tensor b = random_binary(rng, 16, 16, 0.2);
        Tensor u = Tensor::zeros({1, 1, 16, 16});
        for (int64_t i = 0; i < u.numel(); ++i) u[i] = std::max(a[i], b[i]);
        for (int s : {1, 2, 3, 4, 8}) {
            double nu = bc::hard_box_count(u, s).at2(0, 0);
            double na = bc::hard_box_count(a, s).at2(0, 0);
            double nb = bc::hard_box_count(b, s).at2(0, 0);
            CHECK(nu <= na + nb);
        }
    }
}

TEST_CASE("differentiable counts equal hard counts exactly on binary masks") {
    bc::ScaleSet scales({1, 2, 4, 8, 16});
    Rng rng(7003);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor m = random_binary(rng, 32, 32, rng.uniform(0.02, 0.7));
        Graph g;
        Tensor soft = bc::dbc_multiscale(g.constant(m), scales).value();
        Tensor hard = bc::hard_box_count_multi(m, scales);
        for (int s = 0; s < scales.k(); ++s) CHECK(soft.at3(0, 0, s) == hard.at3(0, 0, s));
    }

    Graph g;
    Tensor carpet = sierpinski(3);
    bc::ScaleSet s3({1, 3, 9, 27});
    Tensor soft = bc::dbc_multiscale(g.constant(carpet), s3).value();
    CHECK(counts_row(soft, 0, 0) == std::vector<double>{512, 64, 8, 1});

    // fractional mask: every 2x2 box of the constant 0.5 map contributes
    // its maximum, so the count is 4 * 0.5
    Tensor half = Tensor::full({1, 1, 4, 4}, 0.5);
    CHECK(bc::dbc(g.constant(half), 2).value().at2(0, 0) == 2.0);
}

TEST_CASE("differentiable counts are box-max sums with trustworthy gradients") {
    Rng rng(7004);
    Tensor m(std::vector<int>{2, 3, 11, 13});
    for (int64_t i = 0; i < m.numel(); ++i) m[i] = rng.uniform(0.0, 2.0);
    bc::ScaleSet scales({1, 2, 4, 8});
    Graph g;
    Tensor counts = bc::dbc_multiscale(g.constant(m), scales).value();
    for (int b = 0; b < 2; ++b)
        for (int c = 0; c < 3; ++c)
            for (int s = 0; s < scales.k(); ++s)
                CHECK(counts.at3(b, c, s) ==
                      doctest::Approx(box_sum(m, b, c, scales.sizes[static_cast<size_t>(s)]))
                          .epsilon(1e-12));

    Tensor x = separated({1, 2, 8, 8}, rng, 1.0);
    double err = toposeg::grad_check(
        [](Graph&, Var v) { return reduce_sum(bc::dbc_multiscale(v, bc::ScaleSet({1, 2, 4}))); },
        x);
    CHECK(err < 1e-4);
}

TEST_CASE("maps and scale sets that do not fit are rejected") {
    Graph g;
    Tensor small = Tensor::full({1, 1, 8, 8}, 1.0);
    CHECK_THROWS_AS(bc::dbc_multiscale(g.constant(small), bc::ScaleSet({1, 16})),
                    std::invalid_argument);
    CHECK_THROWS_AS(bc::hard_box_count_multi(small, bc::ScaleSet({1, 16})), std::invalid_argument);
    CHECK_THROWS_AS(bc::dbc(g.constant(Tensor::zeros({8, 8})), 2), std::invalid_argument);
    CHECK_THROWS_AS(bc::hard_box_count(Tensor::zeros({8, 8}), 2), std::invalid_argument);
}

TEST_CASE("appearance area counts follow one-hot and uniform-soft anchors") {
    bc::ScaleSet scales({1, 2, 4, 8});

    // two-class vertical split of an 8x8 frame: class 0 owns columns 0..3
    Tensor split = Tensor::zeros({1, 2, 8, 8});
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) split.at4(0, x < 4 ? 0 : 1, y, x) = 1.0;
    Graph g;
    Tensor counts = bc::app_area_counts(g.constant(split), scales).value();
    CHECK(counts_row(counts, 0, 0) == std::vector<double>{32, 8, 2, 1});
    CHECK(counts_row(counts, 0, 1) == std::vector<double>{32, 8, 2, 1});
    // the s=8 box spans both halves, so each class still occupies one box
    CHECK(counts.at3(0, 0, 3) == 1.0);
    CHECK(counts.at3(0, 1, 3) == 1.0);
    for (int c = 0; c < 2; ++c)
        for (int s = 0; s < scales.k(); ++s)
            CHECK(counts.at3(0, c, s) ==
                  static_cast<double>(brute_count(split, 0, c, scales.sizes[static_cast<size_t>(s)])));

    // a uniform soft map puts probability 1/C in every box
    Tensor soft = Tensor::full({1, 4, 8, 8}, 0.25);
    Tensor sc = bc::app_area_counts(g.constant(soft), scales).value();
    for (int c = 0; c < 4; ++c) CHECK(counts_row(sc, 0, c) == std::vector<double>{16, 4, 1, 0.25});

    Tensor bad = Tensor::full({1, 2, 8, 8}, 0.5);
    bad.at4(0, 0, 0, 0) = 1.5;
    CHECK_THROWS_AS(bc::app_area_counts(g.constant(bad), scales), std::invalid_argument);
    bad.at4(0, 0, 0, 0) = -0.1;
    CHECK_THROWS_AS(bc::app_area_counts(g.constant(bad), scales), std::invalid_argument);
}

TEST_CASE("appearance boundary counts localize class boundaries") {
    morph::StructuringElement se3(3);
    Graph g;

    // constant class map: dilation and erosion agree everywhere under
    // replicated borders, so every boundary count is exactly zero
    Tensor flat = Tensor::zeros({1, 2, 8, 8});
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) flat.at4(0, 0, y, x) = 1.0;
    Tensor fc = bc::app_boundary_counts(g.constant(flat), bc::ScaleSet({1, 2}), se3).value();
    for (int64_t i = 0; i < fc.numel(); ++i) CHECK(fc[i] == 0.0);

    // an isolated pixel dilates to its 3x3 neighborhood
    Tensor dot = Tensor::zeros({1, 2, 8, 8});
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) dot.at4(0, 1, y, x) = 1.0;
    dot.at4(0, 0, 3, 3) = 1.0;
    dot.at4(0, 1, 3, 3) = 0.0;
    Tensor dc = bc::app_boundary_counts(g.constant(dot), bc::ScaleSet({1, 2}), se3).value();
    CHECK(dc.at3(0, 0, 0) == 9.0);
    CHECK(dc.at3(0, 0, 1) == 4.0);

    // half-plane boundary: a two-column band whose counts halve with scale
    Tensor split = Tensor::zeros({1, 2, 8, 8});
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) split.at4(0, x < 4 ? 0 : 1, y, x) = 1.0;
    bc::ScaleSet s124({1, 2, 4});
    Tensor hc = bc::app_boundary_counts(g.constant(split), s124, se3).value();
    CHECK(counts_row(hc, 0, 0) == std::vector<double>{16, 8, 4});
    bc::FractalFit fit = bc::fractal_dimension(counts_row(hc, 0, 0), s124, 8.0);
    CHECK(std::abs(fit.slope - 1.0) < 1e-9);

    // binary maps reduce to the value-level morphological gradient
    Rng rng(7005);
    for (int trial = 0; trial < 25; ++trial) {
        Tensor m = random_binary(rng, 12, 12, rng.uniform(0.1, 0.6), 1, 2);
        Tensor got = bc::app_boundary_counts(g.constant(m), bc::ScaleSet({1, 2, 3}), se3).value();
        for (int c = 0; c < 2; ++c) {
            Tensor plane(std::vector<int>{12, 12});
            for (int y = 0; y < 12; ++y)
                for (int x = 0; x < 12; ++x) plane.at2(y, x) = m.at4(0, c, y, x);
            Tensor grad = morph::morphological_gradient(plane, se3);
            Tensor g4 = Tensor::zeros({1, 1, 12, 12});
            for (int y = 0; y < 12; ++y)
                for (int x = 0; x < 12; ++x) g4.at4(0, 0, y, x) = grad.at2(y, x);
            for (int s = 0; s < 3; ++s) {
                int sv = s == 2 ? 3 : s + 1;
                CHECK(got.at3(0, c, s) == static_cast<double>(brute_count(g4, 0, 0, sv)));
            }
        }
    }

    Tensor bad = Tensor::full({1, 1, 8, 8}, 2.0);
    CHECK_THROWS_AS(bc::app_boundary_counts(g.constant(bad), bc::ScaleSet({1, 2}), se3),
                    std::invalid_argument);
}

TEST_CASE("roughness is local variance, exactly zero on constant interiors") {
    Graph g;

    Tensor zero = Tensor::zeros({1, 1, 10, 10});
    Tensor zv = bc::geo_roughness_map(g.constant(zero)).value();
    for (int64_t i = 0; i < zv.numel(); ++i) CHECK(zv[i] == 0.0);
    Tensor zc = bc::geo_roughness_counts(g.constant(zero), bc::ScaleSet({1, 2, 5})).value();
    for (int64_t i = 0; i < zc.numel(); ++i) CHECK(zc[i] == 0.0);

    // constant 0.5: nine copies of 0.5 and 0.25 scale and divide by 9
    // without rounding, so the interior variance cancels bitwise
    Tensor dyadic = Tensor::full({1, 1, 10, 10}, 0.5);
    Tensor dv = bc::geo_roughness_map(g.constant(dyadic)).value();
    for (int y = 1; y < 9; ++y)
        for (int x = 1; x < 9; ++x) CHECK(dv.at4(0, 0, y, x) == 0.0);

    // constant 0.6 rounds in the mean filter, leaving at most an ulp of
    // dust on the interior; the border ring keeps a structural positive
    // bias from the divisor-9 zero padding
    Tensor flat = Tensor::full({1, 1, 10, 10}, 0.6);
    Tensor fv = bc::geo_roughness_map(g.constant(flat)).value();
    for (int y = 1; y < 9; ++y)
        for (int x = 1; x < 9; ++x) CHECK(std::abs(fv.at4(0, 0, y, x)) < 1e-15);
    CHECK(fv.at4(0, 0, 0, 0) > 1e-3);

    // checkerboard: every interior window holds 4 or 5 ones and both give
    // variance p(1-p) = 20/81
    Tensor board = Tensor::zeros({1, 1, 12, 12});
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) board.at4(0, 0, y, x) = static_cast<double>((x + y) % 2);
    Tensor bv = bc::geo_roughness_map(g.constant(board)).value();
    for (int y = 1; y < 11; ++y)
        for (int x = 1; x < 11; ++x)
            CHECK(bv.at4(0, 0, y, x) == doctest::Approx(20.0 / 81.0).epsilon(1e-12));

    Rng rng(7006);
    Tensor depth(std::vector<int>{1, 1, 12, 12});
    for (int64_t i = 0; i < depth.numel(); ++i) depth[i] = rng.uniform();
    bc::ScaleSet scales({1, 2, 3, 4});
    Tensor counts = bc::geo_roughness_counts(g.constant(depth), scales).value();
    Tensor oracle = variance_oracle(depth);
    for (int s = 0; s < scales.k(); ++s)
        CHECK(counts.at3(0, 0, s) ==
              doctest::Approx(box_sum(oracle, 0, 0, scales.sizes[static_cast<size_t>(s)]))
                  .epsilon(1e-12));

    // a smooth ramp of the same range is much flatter than checkerboard noise
    Tensor ramp = Tensor::zeros({1, 1, 12, 12});
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) ramp.at4(0, 0, y, x) = static_cast<double>(x) / 11.0;
    double ramp_s1 = bc::geo_roughness_counts(g.constant(ramp), scales).value().at3(0, 0, 0);
    double noise_s1 = bc::geo_roughness_counts(g.constant(board), scales).value().at3(0, 0, 0);
    CHECK(noise_s1 > ramp_s1);

    CHECK_THROWS_AS(bc::geo_roughness_counts(g.constant(Tensor::zeros({1, 2, 8, 8})),
                                             bc::ScaleSet({1, 2})),
                    std::invalid_argument);
    CHECK_THROWS_AS(bc::geo_roughness_counts(g.constant(Tensor::full({1, 1, 8, 8}, 1.5)),
                                             bc::ScaleSet({1, 2})),
                    std::invalid_argument);
}

TEST_CASE("edge counts respond to depth steps and follow the sobel oracle") {
    Graph g;
    bc::ScaleSet scales({1, 2, 4});

    // flat depth: only the delta inside the square root remains, so each
    // box contributes at most 1e-6
    Tensor flat = Tensor::zeros({1, 1, 8, 8});
    Tensor fc = bc::geo_edge_counts(g.constant(flat), scales).value();
    for (int s = 0; s < scales.k(); ++s) {
        int sv = scales.sizes[static_cast<size_t>(s)];
        double boxes = double((8 + sv - 1) / sv) * double((8 + sv - 1) / sv);
        CHECK(fc.at3(0, 0, s) <= boxes * 1.0000001e-6);
        CHECK(fc.at3(0, 0, s) > 0.0);
    }

    // vertical step of height 0.5: interior response 4 * step on the two
    // columns flanking the edge, delta-level noise far away
    Tensor step = Tensor::zeros({1, 1, 8, 8});
    for (int y = 0; y < 8; ++y)
        for (int x = 4; x < 8; ++x) step.at4(0, 0, y, x) = 0.5;
    Tensor mag = sobel_magnitude_oracle(step);
    for (int y = 2; y < 6; ++y) {
        CHECK(mag.at4(0, 0, y, 3) == doctest::Approx(2.0).epsilon(1e-9));
        CHECK(mag.at4(0, 0, y, 4) == doctest::Approx(2.0).epsilon(1e-9));
        CHECK(mag.at4(0, 0, y, 1) <= 1.1e-6);
        CHECK(mag.at4(0, 0, y, 6) <= 1.1e-6);
    }
    Tensor sc = bc::geo_edge_counts(g.constant(step), scales).value();
    for (int s = 0; s < scales.k(); ++s)
        CHECK(sc.at3(0, 0, s) ==
              doctest::Approx(box_sum(mag, 0, 0, scales.sizes[static_cast<size_t>(s)]))
                  .epsilon(1e-12));

    Rng rng(7007);
    Tensor depth(std::vector<int>{1, 1, 11, 9});
    for (int64_t i = 0; i < depth.numel(); ++i) depth[i] = rng.uniform();
    Tensor counts = bc::geo_edge_counts(g.constant(depth), bc::ScaleSet({1, 3})).value();
    Tensor oracle = sobel_magnitude_oracle(depth);
    CHECK(counts.at3(0, 0, 0) == doctest::Approx(box_sum(oracle, 0, 0, 1)).epsilon(1e-12));
    CHECK(counts.at3(0, 0, 1) == doctest::Approx(box_sum(oracle, 0, 0, 3)).epsilon(1e-12));

    CHECK_THROWS_AS(bc::geo_edge_counts(g.constant(Tensor::zeros({1, 3, 8, 8})),
                                        bc::ScaleSet({1, 2})),
                    std::invalid_argument);
}

TEST_CASE("occupancy normalization turns counts into box fractions") {
    Graph g;
    bc::ScaleSet scales({1, 2, 4, 8});
    Tensor ones = Tensor::full({2, 3, 8, 8}, 1.0);
    Var counts = bc::dbc_multiscale(g.constant(ones), scales);
    Tensor frac = bc::occupancy_normalize(counts, scales, 8, 8).value();
    for (int64_t i = 0; i < frac.numel(); ++i) CHECK(frac[i] == 1.0);

    // ragged 10x6 grid: box grids are 10x6, 5x3, 4x2, 2x1; the top five
    // rows are filled
    bc::ScaleSet rs({1, 2, 3, 6});
    Tensor half = Tensor::zeros({1, 1, 10, 6});
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 6; ++x) half.at4(0, 0, y, x) = 1.0;
    Var hc = bc::dbc_multiscale(g.constant(half), rs);
    Tensor hf = bc::occupancy_normalize(hc, rs, 10, 6).value();
    CHECK(hf.at3(0, 0, 0) == doctest::Approx(30.0 / 60.0));
    CHECK(hf.at3(0, 0, 1) == doctest::Approx(9.0 / 15.0));
    CHECK(hf.at3(0, 0, 2) == doctest::Approx(4.0 / 8.0));
    CHECK(hf.at3(0, 0, 3) == doctest::Approx(1.0 / 2.0));

    CHECK_THROWS_AS(bc::occupancy_normalize(g.constant(Tensor::zeros({2, 3})), scales, 8, 8),
                    std::invalid_argument);
    CHECK_THROWS_AS(
        bc::occupancy_normalize(g.constant(Tensor::zeros({1, 1, 3})), scales, 8, 8),
        std::invalid_argument);
}

TEST_CASE("projection heads transform counts with verifiable algebra") {
    Graph g;

    // zero counts through zero-bias heads stay exactly zero
    Rng rng(7008);
    bc::ProjectionHeads heads = bc::make_projection_heads(3, 4, 16, 8, rng);
    bc::HeadVars hv = bc::bind(g, heads, false);
    Var za = g.constant(Tensor::zeros({2, 3, 4}));
    Var zg = g.constant(Tensor::zeros({2, 1, 4}));
    bc::Projection zp = bc::project(za, za, zg, zg, hv);
    for (int64_t i = 0; i < zp.f_dbc.value().numel(); ++i) CHECK(zp.f_dbc.value()[i] == 0.0);
    CHECK(zp.f_dbc.value().shape() == std::vector<int>{2, 16});

    // identity weights reproduce the flattened count vector
    auto eye = [](int n) {
        Tensor t = Tensor::zeros({n, n});
        for (int i = 0; i < n; ++i) t.at2(i, i) = 1.0;
        return t;
    };
    bc::ProjectionHeads id_heads;
    id_heads.app = {eye(8), Tensor::zeros({8}), eye(8), Tensor::zeros({8})};
    id_heads.geo = {eye(4), Tensor::zeros({4}), eye(4), Tensor::zeros({4})};
    bc::HeadVars idv = bc::bind(g, id_heads, false);
    Tensor ca(std::vector<int>{1, 2, 2});
    for (int64_t i = 0; i < ca.numel(); ++i) ca[i] = static_cast<double>(i) + 1.0;
    Tensor cg(std::vector<int>{1, 1, 2});
    cg[0] = 9.0;
    cg[1] = 11.0;
    bc::Projection ip = bc::project(g.constant(ca), g.constant(ca), g.constant(cg), g.constant(cg), idv);
    for (int j = 0; j < 4; ++j) {
        CHECK(ip.f_app.value().at2(0, j) == ca[j]);
        CHECK(ip.f_app.value().at2(0, 4 + j) == ca[j]);
    }
    CHECK(ip.f_geo.value().at2(0, 0) == 9.0);
    CHECK(ip.f_geo.value().at2(0, 1) == 11.0);
    CHECK(ip.f_geo.value().at2(0, 2) == 9.0);
    CHECK(ip.f_geo.value().at2(0, 3) == 11.0);
    CHECK(ip.f_dbc.value().at2(0, 0) == ip.f_app.value().at2(0, 0));
    CHECK(ip.f_dbc.value().at2(0, 4 + 4) == ip.f_geo.value().at2(0, 0));

    // random heads against a straight matmul oracle
    Tensor a1(std::vector<int>{2, 3, 4}), a2(std::vector<int>{2, 3, 4});
    Tensor g1(std::vector<int>{2, 1, 4}), g2(std::vector<int>{2, 1, 4});
    for (Tensor* t : {&a1, &a2, &g1, &g2})
        for (int64_t i = 0; i < t->numel(); ++i) (*t)[i] = rng.uniform(0.0, 2.0);
    bc::Projection rp =
        bc::project(g.constant(a1), g.constant(a2), g.constant(g1), g.constant(g2), hv);
    auto mlp_oracle = [](const std::vector<double>& x, const bc::MlpParams& p) {
        int in = p.w1.extent(0), hid = p.w1.extent(1), out = p.w2.extent(1);
        std::vector<double> h(static_cast<size_t>(hid)), y(static_cast<size_t>(out));
        for (int j = 0; j < hid; ++j) {
            double acc = p.b1[j];
            for (int i = 0; i < in; ++i) acc += x[static_cast<size_t>(i)] * p.w1.at2(i, j);
            h[static_cast<size_t>(j)] = std::max(0.0, acc);
        }
        for (int j = 0; j < out; ++j) {
            double acc = p.b2[j];
            for (int i = 0; i < hid; ++i) acc += h[static_cast<size_t>(i)] * p.w2.at2(i, j);
            y[static_cast<size_t>(j)] = acc;
        }
        return y;
    };
    for (int b = 0; b < 2; ++b) {
        std::vector<double> xin;
        for (int c = 0; c < 3; ++c)
            for (int s = 0; s < 4; ++s) xin.push_back(a1.at3(b, c, s));
        for (int c = 0; c < 3; ++c)
            for (int s = 0; s < 4; ++s) xin.push_back(a2.at3(b, c, s));
        std::vector<double> want = mlp_oracle(xin, heads.app);
        for (int j = 0; j < 8; ++j)
            CHECK(rp.f_app.value().at2(b, j) == doctest::Approx(want[static_cast<size_t>(j)])
                                                    .epsilon(1e-12));
        std::vector<double> gin;
        for (int s = 0; s < 4; ++s) gin.push_back(g1.at3(b, 0, s));
        for (int s = 0; s < 4; ++s) gin.push_back(g2.at3(b, 0, s));
        std::vector<double> gw = mlp_oracle(gin, heads.geo);
        for (int j = 0; j < 8; ++j)
            CHECK(rp.f_geo.value().at2(b, j) == doctest::Approx(gw[static_cast<size_t>(j)])
                                                    .epsilon(1e-12));
    }

    // swapping appearance and geometric inputs breaks the head shapes
    CHECK_THROWS_AS(bc::project(zg, zg, za, za, hv), std::invalid_argument);
}

TEST_CASE("counting composed with projection is differentiable end to end") {
    Rng rng(7009);
    bc::ProjectionHeads heads = bc::make_projection_heads(2, 3, 6, 5, rng);
    Tensor w(std::vector<int>{1, 10});
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-1.0, 1.0);
    bc::ScaleSet scales({1, 2, 4});
    morph::StructuringElement se3(3);

    auto f = [&](Graph& g, Var x) {
        Var inv = add_scalar(scale(x, -1.0), 1.0);
        Var probs = toposeg::concat({x, inv}, 1);
        Var a1 = bc::occupancy_normalize(bc::app_area_counts(probs, scales), scales, 8, 8);
        Var a2 = bc::occupancy_normalize(bc::app_boundary_counts(probs, scales, se3), scales, 8, 8);
        Var g1 = bc::occupancy_normalize(bc::geo_roughness_counts(x, scales), scales, 8, 8);
        Var g2 = bc::occupancy_normalize(bc::geo_edge_counts(x, scales), scales, 8, 8);
        bc::HeadVars hv = bc::bind(g, heads, false);
        bc::Projection p = bc::project(a1, a2, g1, g2, hv);
        return reduce_sum(p.f_dbc * g.constant(w));
    };
    Tensor x = separated({1, 1, 8, 8}, rng, 0.5);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK((x[i] > 0.0 && x[i] < 1.0));
    CHECK(toposeg::grad_check(f, x) < 1e-4);
}

TEST_CASE("fractal dimension fits log counts against log inverse scale") {
    Tensor square = Tensor::full({1, 1, 64, 64}, 1.0);
    bc::ScaleSet s2({1, 2, 4, 8});
    Tensor qc = bc::hard_box_count_multi(square, s2);
    CHECK(counts_row(qc, 0, 0) == std::vector<double>{4096, 1024, 256, 64});
    bc::FractalFit qf = bc::fractal_dimension(counts_row(qc, 0, 0), s2, 64.0);
    CHECK(std::abs(qf.slope - 2.0) < 1e-9);
    CHECK(qf.r2 > 0.999999);

    Tensor line = Tensor::zeros({1, 1, 64, 64});
    for (int x = 0; x < 64; ++x) line.at4(0, 0, 10, x) = 1.0;
    bc::FractalFit lf =
        bc::fractal_dimension(counts_row(bc::hard_box_count_multi(line, s2), 0, 0), s2, 64.0);
    CHECK(std::abs(lf.slope - 1.0) < 0.05);
    CHECK(lf.r2 > 0.999);

    bc::ScaleSet s3({1, 3, 9, 27});
    Tensor carpet = sierpinski(3);
    bc::FractalFit cf =
        bc::fractal_dimension(counts_row(bc::hard_box_count_multi(carpet, s3), 0, 0), s3, 27.0);
    double want = std::log(8.0) / std::log(3.0);
    CHECK(std::abs(cf.slope - want) < 1e-9);
    CHECK(std::abs(cf.slope - want) < 0.05);
    CHECK(cf.r2 > 0.999);

    // the slope ignores the extent normalization: it only shifts log(1/s)
    bc::FractalFit cf1 =
        bc::fractal_dimension(counts_row(bc::hard_box_count_multi(carpet, s3), 0, 0), s3, 1.0);
    CHECK(cf1.slope == doctest::Approx(cf.slope).epsilon(1e-12));
    CHECK(cf1.r2 == doctest::Approx(cf.r2).epsilon(1e-12));

    // equal counts fit a horizontal line perfectly
    bc::FractalFit flat = bc::fractal_dimension({3, 3, 3, 3}, s2, 64.0);
    CHECK(flat.slope == 0.0);
    CHECK(flat.r2 == 1.0);

    CHECK_THROWS_AS(bc::fractal_dimension({4, 2, 0, 0}, s2, 64.0), toposeg::numeric_error);
    CHECK_THROWS_AS(bc::fractal_dimension({4, 2}, s2, 64.0), std::invalid_argument);
    CHECK_THROWS_AS(bc::fractal_dimension({4, 2, 1, 1}, s2, 0.0), std::invalid_argument);

    // empty mask has no defined dimension end to end
    Tensor empty = Tensor::zeros({1, 1, 16, 16});
    CHECK_THROWS_AS(
        bc::fractal_dimension(counts_row(bc::hard_box_count_multi(empty, s2), 0, 0), s2, 16.0),
        toposeg::numeric_error);
}
