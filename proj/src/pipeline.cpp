#include "toposeg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "toposeg/errors.hpp"
#include "toposeg/io.hpp"
#include "toposeg/rng.hpp"

namespace toposeg::pipeline {

namespace {

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

double wrap_hue(double h) {
    h = std::fmod(h, 360.0);
    if (h < 0.0) h += 360.0;
    // fmod can return exactly 360 - eps rounding up; keep the domain half-open
    return h >= 360.0 ? 0.0 : h;
}

// Class-correlated base hues: background plus three shape classes.
constexpr double kClassHue[kTrueClasses] = {215.0, 8.0, 125.0, 52.0};

struct Shape {
    int type;    // 0 rect, 1 ellipse, 2 bar
    int cls;     // 1..kTrueClasses-1
    double cx, cy, ax, ay;
    double depth_base, gx, gy;
    double hue, sat, light;

    bool inside(int x, int y) const {
        double dx = x - cx, dy = y - cy;
        if (type == 1) return (dx * dx) / (ax * ax) + (dy * dy) / (ay * ay) <= 1.0;
        return std::fabs(dx) <= ax && std::fabs(dy) <= ay;
    }
    double depth_at(int x, int y) const {
        return clamp01(depth_base + gx * (x - cx) / kCanvas + gy * (y - cy) / kCanvas);
    }
};

SyntheticScene make_scene(Rng& rng) {
    const int n = rng.range(2, 4);
    std::vector<Shape> shapes(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Shape& s = shapes[static_cast<size_t>(i)];
        s.type = static_cast<int>(rng.below(3));
        s.cls = rng.range(1, kTrueClasses - 1);
        s.cx = rng.uniform(10.0, 54.0);
        s.cy = rng.uniform(10.0, 54.0);
        if (s.type == 0) {
            s.ax = rng.uniform(6.0, 16.0);
            s.ay = rng.uniform(6.0, 16.0);
        } else if (s.type == 1) {
            s.ax = rng.uniform(5.0, 14.0);
            s.ay = rng.uniform(5.0, 14.0);
        } else {
            s.ax = rng.uniform(12.0, 28.0);
            s.ay = rng.uniform(2.0, 4.0);
            if (rng.bernoulli(0.5)) std::swap(s.ax, s.ay);
        }
        // paint order is depth order: later shapes sit nearer, and the base
        // gap 0.75/n dominates the +-0.04 per-shape gradient
        s.depth_base = 0.15 + 0.75 * (i + 1) / n;
        s.gx = rng.uniform(-0.04, 0.04);
        s.gy = rng.uniform(-0.04, 0.04);
        s.hue = wrap_hue(kClassHue[s.cls] + rng.uniform(-12.0, 12.0));
        s.sat = rng.uniform(0.45, 0.7);
        s.light = rng.uniform(0.45, 0.65);
    }

    ImageHSL hsl(kCanvas, kCanvas);
    SyntheticScene scene;
    scene.width = kCanvas;
    scene.height = kCanvas;
    scene.labels.assign(static_cast<size_t>(kCanvas) * kCanvas, 0);
    scene.depth = Tensor({1, kCanvas, kCanvas});

    const double bg_hue = wrap_hue(kClassHue[0] + rng.uniform(-10.0, 10.0));
    const double bg_sat = rng.uniform(0.25, 0.45);
    const double bg_light = rng.uniform(0.3, 0.42);
    const double bg_depth = rng.uniform(0.03, 0.06);
    const double bg_gx = rng.uniform(-0.02, 0.02);
    const double bg_gy = rng.uniform(-0.02, 0.02);

    for (int y = 0; y < kCanvas; ++y)
        for (int x = 0; x < kCanvas; ++x) {
            size_t p = hsl.idx(x, y);
            hsl.h[p] = bg_hue;
            hsl.s[p] = bg_sat;
            hsl.l[p] = bg_light;
            scene.depth.at3(0, y, x) = clamp01(bg_depth + bg_gx * (x - 32.0) / kCanvas + bg_gy * (y - 32.0) / kCanvas);
            for (const Shape& s : shapes)
                if (s.inside(x, y)) {
                    hsl.h[p] = s.hue;
                    hsl.s[p] = s.sat;
                    hsl.l[p] = s.light;
                    scene.labels[p] = s.cls;
                    scene.depth.at3(0, y, x) = s.depth_at(x, y);
                }
        }

    // photometric ambiguity, applied after labels and depth are final:
    // multiplicative shadow bands and additive glare spots on L only
    const int n_shadow = static_cast<int>(rng.below(3));
    for (int i = 0; i < n_shadow; ++i) {
        const double theta = rng.uniform(0.0, 3.14159265358979323846);
        const double ct = std::cos(theta), st = std::sin(theta);
        const double d0 = rng.uniform(0.0, kCanvas * 1.415);
        const double hw = rng.uniform(5.0, 12.0);
        const double factor = rng.uniform(0.55, 0.85);
        for (int y = 0; y < kCanvas; ++y)
            for (int x = 0; x < kCanvas; ++x)
                if (std::fabs(x * ct + y * st - d0) <= hw) hsl.l[hsl.idx(x, y)] *= factor;
    }

    std::vector<std::pair<int, int>> boundary;
    for (int y = 0; y < kCanvas; ++y)
        for (int x = 0; x < kCanvas; ++x) {
            size_t p = static_cast<size_t>(y) * kCanvas + x;
            if ((x + 1 < kCanvas && scene.labels[p] != scene.labels[p + 1]) ||
                (y + 1 < kCanvas && scene.labels[p] != scene.labels[p + kCanvas]))
                boundary.emplace_back(x, y);
        }

    const int n_glare = static_cast<int>(rng.below(3));
    for (int i = 0; i < n_glare; ++i) {
        double cx = rng.uniform(4.0, 60.0), cy = rng.uniform(4.0, 60.0);
        if (!boundary.empty()) {
            // anchor the spot on a class boundary so the glare crosses it
            auto [bx, by] = boundary[rng.below(boundary.size())];
            cx = bx + rng.uniform(-2.0, 2.0);
            cy = by + rng.uniform(-2.0, 2.0);
        }
        const double r = rng.uniform(5.0, 12.0);
        const double boost = rng.uniform(0.25, 0.45);
        for (int y = 0; y < kCanvas; ++y)
            for (int x = 0; x < kCanvas; ++x) {
                const double d = std::hypot(x - cx, y - cy);
                if (d < r) {
                    size_t p = hsl.idx(x, y);
                    hsl.l[p] = std::min(1.0, hsl.l[p] + boost * (1.0 - d / r));
                }
            }
    }

    scene.image = morph::hsl_to_rgb(hsl);
    return scene;
}

Tensor image_batch(const Batch& batch, const std::vector<ImageRGB8>& images) {
    const int b = static_cast<int>(batch.size());
    const int h = batch[0]->height, w = batch[0]->width;
    Tensor t({b, 3, h, w});
    for (int i = 0; i < b; ++i)
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) t.at4(i, c, y, x) = images[static_cast<size_t>(i)].at(x, y, c) / 255.0;
    return t;
}

Tensor depth_batch(const Batch& batch) {
    const int b = static_cast<int>(batch.size());
    const int h = batch[0]->height, w = batch[0]->width;
    Tensor t({b, 1, h, w});
    for (int i = 0; i < b; ++i)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) t.at4(i, 0, y, x) = batch[static_cast<size_t>(i)]->depth.at3(0, y, x);
    return t;
}

// [B,D,H,W] feature map flattened to per-pixel rows in (b,y,x) order.
Tensor pixels_to_rows(const Tensor& m) {
    const int b = m.extent(0), d = m.extent(1), h = m.extent(2), w = m.extent(3);
    Tensor rows({b * h * w, d});
    int p = 0;
    for (int i = 0; i < b; ++i)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x, ++p)
                for (int k = 0; k < d; ++k) rows.at2(p, k) = m.at4(i, k, y, x);
    return rows;
}

Tensor rows_to_map(const Tensor& rows, int b, int h, int w) {
    const int c = rows.extent(1);
    Tensor m({b, c, h, w});
    int p = 0;
    for (int i = 0; i < b; ++i)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x, ++p)
                for (int k = 0; k < c; ++k) m.at4(i, k, y, x) = rows.at2(p, k);
    return m;
}

Tensor argmax_onehot(const Tensor& probs) {
    const int b = probs.extent(0), c = probs.extent(1), h = probs.extent(2), w = probs.extent(3);
    Tensor out = Tensor::zeros({b, c, h, w});
    for (int i = 0; i < b; ++i)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                int best = 0;
                for (int k = 1; k < c; ++k)
                    if (probs.at4(i, k, y, x) > probs.at4(i, best, y, x)) best = k;
                out.at4(i, best, y, x) = 1.0;
            }
    return out;
}

Var encoder_forward(const ModelVars& v, Var x) {
    Var h1 = relu(conv2d(x, v.enc_w1, v.enc_b1));
    Var h2 = relu(conv2d(h1, v.enc_w2, v.enc_b2));
    return relu(conv2d(h2, v.enc_w3, v.enc_b3));
}

// Subtracts the per-channel mean taken over batch and space. Raw head
// outputs sit in a tight cone (ReLU features share a large positive
// component), so without this the cluster prototypes nearly coincide and
// every cosine logit goes flat; centering is what gives the prototype
// space contrast. Each branch centers by its own view's statistics.
Var center_channels(Graph& g, Var feats) {
    (void)g;
    const int b = feats.shape()[0], d = feats.shape()[1];
    const int h = feats.shape()[2], w = feats.shape()[3];
    Var mean = scale(reduce_sum(feats, {0, 2, 3}), 1.0 / (static_cast<double>(b) * h * w));
    Var row = reshape(mean, {1, d});
    Var rows = b == 1 ? row : concat(std::vector<Var>(static_cast<size_t>(b), row), 0);
    return feats - broadcast_spatial(rows, h, w);
}

// Tensor-side twin of center_channels for the non-differentiable teacher
// rows that feed clustering.
void center_rows(Tensor& rows) {
    const int p = rows.extent(0), d = rows.extent(1);
    std::vector<double> mean(static_cast<size_t>(d), 0.0);
    for (int i = 0; i < p; ++i)
        for (int k = 0; k < d; ++k) mean[static_cast<size_t>(k)] += rows.at2(i, k);
    for (int k = 0; k < d; ++k) mean[static_cast<size_t>(k)] /= p;
    for (int i = 0; i < p; ++i)
        for (int k = 0; k < d; ++k) rows.at2(i, k) -= mean[static_cast<size_t>(k)];
}

// Per-pixel cosine of d-channel features against unit prototype rows,
// realized as a 1x1 convolution over length-normalized features.
Var prototype_cosines(Graph& g, Var feats, const Tensor& prototypes) {
    const int b = feats.shape()[0], d = feats.shape()[1];
    const int h = feats.shape()[2], w = feats.shape()[3];
    const int c = prototypes.extent(0);
    Var sq = reduce_sum(feats * feats, {1});
    Var inv = reciprocal(toposeg::sqrt(clamp_min(reshape(sq, {b, 1, h, w}), 1e-24)));
    Var norm = feats * concat(std::vector<Var>(static_cast<size_t>(d), inv), 1);
    Tensor pw({c, d, 1, 1});
    for (int i = 0; i < c; ++i)
        for (int k = 0; k < d; ++k) pw.at4(i, k, 0, 0) = prototypes.at2(i, k);
    return conv2d(norm, g.constant(std::move(pw)), g.constant(Tensor::zeros({c})));
}

std::vector<ImageRGB8> branch_images(const Batch& batch, const TrainConfig& cfg, bool augment, uint64_t branch_seed) {
    std::vector<ImageRGB8> out;
    out.reserve(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
        if (augment) {
            morph::AugConfig ac = cfg.aug;
            ac.seed = Rng::mix(branch_seed, i);
            out.push_back(morph::topo_augment(batch[i]->image, ac));
        } else {
            out.push_back(batch[i]->image);
        }
    }
    return out;
}

std::vector<PixelIndex> sample_sites(int b, int h, int w, int cap, Rng& rng) {
    const int total = b * h * w;
    std::vector<int> idx;
    if (total > cap) {
        idx.resize(static_cast<size_t>(total));
        for (int i = 0; i < total; ++i) idx[static_cast<size_t>(i)] = i;
        for (int i = 0; i < cap; ++i) {
            int j = i + static_cast<int>(rng.below(static_cast<uint64_t>(total - i)));
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }
        idx.resize(static_cast<size_t>(cap));
    } else {
        idx.resize(static_cast<size_t>(total));
        for (int i = 0; i < total; ++i) idx[static_cast<size_t>(i)] = i;
    }
    std::vector<PixelIndex> sites;
    sites.reserve(idx.size());
    for (int p : idx) sites.push_back({p / (h * w), (p / w) % h, p % w});
    return sites;
}

// Renames fresh clusters onto the slots of the previous prototypes via
// maximum-cosine matching, so cluster identity is stable across steps and
// the aux head's class channels track consistent targets.
void align_to_previous(ClusterResult& cl, const Tensor& prev) {
    const int c = cl.prototypes.extent(0), d = cl.prototypes.extent(1);
    Tensor cost({c, c});
    for (int i = 0; i < c; ++i)
        for (int j = 0; j < c; ++j) {
            double dot = 0.0;
            for (int k = 0; k < d; ++k) dot += cl.prototypes.at2(i, k) * prev.at2(j, k);
            cost.at2(i, j) = -dot;
        }
    const std::vector<int> perm = eval::hungarian_match(cost).perm;

    Tensor protos(cl.prototypes.shape());
    for (int i = 0; i < c; ++i)
        for (int k = 0; k < d; ++k) protos.at2(perm[static_cast<size_t>(i)], k) = cl.prototypes.at2(i, k);
    const int p = cl.onehot.extent(0);
    Tensor onehot(cl.onehot.shape()), soft(cl.soft.shape());
    for (int r = 0; r < p; ++r)
        for (int i = 0; i < c; ++i) {
            onehot.at2(r, perm[static_cast<size_t>(i)]) = cl.onehot.at2(r, i);
            soft.at2(r, perm[static_cast<size_t>(i)]) = cl.soft.at2(r, i);
        }
    for (int& a : cl.assignments) a = perm[static_cast<size_t>(a)];
    cl.prototypes = std::move(protos);
    cl.onehot = std::move(onehot);
    cl.soft = std::move(soft);
}

void check_batch(const Batch& batch) {
    if (batch.empty()) throw std::invalid_argument("batch must be non-empty");
    for (const SyntheticScene* s : batch) {
        if (!s) throw std::invalid_argument("batch holds a null scene");
        if (s->height != batch[0]->height || s->width != batch[0]->width)
            throw std::invalid_argument("batch scenes must share dimensions");
    }
}

Tensor he_conv(int cout, int cin, int k, Rng& rng) {
    return Tensor::normal({cout, cin, k, k}, rng, std::sqrt(2.0 / (cin * k * k)));
}

std::string scene_base(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "scene_%04d", index);
    return buf;
}

double term_or_zero(const Var& v) { return v.valid() ? v.value()[0] : 0.0; }

} // namespace

std::vector<SyntheticScene> generate_corpus(int n, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("generate_corpus: n must be at least 1");
    std::vector<SyntheticScene> corpus;
    corpus.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng(Rng::mix(seed, static_cast<uint64_t>(i)));
        corpus.push_back(make_scene(rng));
    }
    return corpus;
}

void save_corpus(const std::string& dir, const std::vector<SyntheticScene>& corpus) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw io_error("cannot create corpus directory '" + dir + "'");

    io::Config manifest;
    manifest.entries = {{"count", std::to_string(corpus.size())},
                        {"width", std::to_string(corpus.empty() ? kCanvas : corpus[0].width)},
                        {"height", std::to_string(corpus.empty() ? kCanvas : corpus[0].height)},
                        {"classes", std::to_string(kTrueClasses)}};
    io::write_text_file(dir + "/corpus.cfg", io::format_config(manifest));

    for (size_t i = 0; i < corpus.size(); ++i) {
        const SyntheticScene& s = corpus[i];
        const std::string base = dir + "/" + scene_base(static_cast<int>(i));
        io::write_png(base + ".png", s.image);

        io::GrayImage depth(s.width, s.height, 65535);
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x) {
                double v = s.depth.at3(0, y, x) * 65535.0;
                depth.at(x, y) = static_cast<uint16_t>(std::llround(std::min(65535.0, std::max(0.0, v))));
            }
        io::write_pgm(base + "_depth.pgm", depth);

        io::GrayImage labels(s.width, s.height, 255);
        for (size_t p = 0; p < s.labels.size(); ++p) labels.pixels[p] = static_cast<uint16_t>(s.labels[p]);
        io::write_pgm(base + "_labels.pgm", labels);
    }
}

std::vector<SyntheticScene> load_corpus(const std::string& dir) {
    io::Config manifest = io::read_config(dir + "/corpus.cfg");
    const int64_t count = manifest.get_int("count");
    const int width = static_cast<int>(manifest.get_int("width"));
    const int height = static_cast<int>(manifest.get_int("height"));
    const int classes = static_cast<int>(manifest.get_int("classes"));
    if (count < 0 || width < 1 || height < 1 || classes < 1) throw io_error(dir + ": corrupt corpus manifest");

    std::vector<SyntheticScene> corpus;
    corpus.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        const std::string base = dir + "/" + scene_base(i);
        SyntheticScene s;
        s.image = io::read_png(base + ".png");
        if (s.image.width != width || s.image.height != height) throw io_error(base + ".png: unexpected dimensions");
        s.width = width;
        s.height = height;

        io::GrayImage depth = io::read_pgm(base + "_depth.pgm");
        if (depth.width != width || depth.height != height || depth.maxval != 65535)
            throw io_error(base + "_depth.pgm: unexpected layout");
        s.depth = Tensor({1, height, width});
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) s.depth.at3(0, y, x) = depth.at(x, y) / 65535.0;

        io::GrayImage labels = io::read_pgm(base + "_labels.pgm");
        if (labels.width != width || labels.height != height) throw io_error(base + "_labels.pgm: unexpected layout");
        s.labels.resize(labels.pixels.size());
        for (size_t p = 0; p < labels.pixels.size(); ++p) {
            if (labels.pixels[p] >= classes) throw io_error(base + "_labels.pgm: label out of range");
            s.labels[p] = labels.pixels[p];
        }
        corpus.push_back(std::move(s));
    }
    return corpus;
}

ClusterResult prototypical_cluster(const Tensor& embeddings, int c, uint64_t seed, double tau,
                                   const Tensor* warm_start) {
    if (embeddings.ndim() != 2) throw std::invalid_argument("prototypical_cluster: embeddings must be [P,D]");
    const int p = embeddings.extent(0), d = embeddings.extent(1);
    if (c < 1) throw std::invalid_argument("prototypical_cluster: cluster count must be positive");
    if (p < c) throw std::invalid_argument("prototypical_cluster: fewer points than clusters");
    if (!(tau > 0.0)) throw std::invalid_argument("prototypical_cluster: tau must be positive");
    if (!embeddings.all_finite()) throw std::invalid_argument("prototypical_cluster: non-finite embeddings");
    if (warm_start && (warm_start->ndim() != 2 || warm_start->extent(0) != c || warm_start->extent(1) != d))
        throw std::invalid_argument("prototypical_cluster: warm start must be [c,D]");
    if (warm_start && !warm_start->all_finite())
        throw std::invalid_argument("prototypical_cluster: non-finite warm start");

    // spherical k-means works on unit rows; zero rows stay zero
    Tensor unit({p, d});
    for (int i = 0; i < p; ++i) {
        double sq = 0.0;
        for (int k = 0; k < d; ++k) sq += embeddings.at2(i, k) * embeddings.at2(i, k);
        const double inv = sq > 1e-24 ? 1.0 / std::sqrt(sq) : 0.0;
        for (int k = 0; k < d; ++k) unit.at2(i, k) = embeddings.at2(i, k) * inv;
    }

    Rng rng(Rng::mix(seed, 0x636c7573));

    constexpr int kFitCap = 4096;
    std::vector<int> fit(static_cast<size_t>(p));
    for (int i = 0; i < p; ++i) fit[static_cast<size_t>(i)] = i;
    if (p > kFitCap) {
        for (int i = 0; i < kFitCap; ++i) {
            int j = i + static_cast<int>(rng.below(static_cast<uint64_t>(p - i)));
            std::swap(fit[static_cast<size_t>(i)], fit[static_cast<size_t>(j)]);
        }
        fit.resize(kFitCap);
    }
    const int fp = static_cast<int>(fit.size());

    auto sq_dist = [&](int row, const Tensor& centroids, int ci) {
        double acc = 0.0;
        for (int k = 0; k < d; ++k) {
            const double diff = unit.at2(row, k) - centroids.at2(ci, k);
            acc += diff * diff;
        }
        return acc;
    };

    // k-means++ over the fit subset, unless a warm start is carried in
    Tensor centroids({c, d});
    if (warm_start) {
        for (int ci = 0; ci < c; ++ci) {
            double sq = 0.0;
            for (int k = 0; k < d; ++k) sq += warm_start->at2(ci, k) * warm_start->at2(ci, k);
            const double inv = sq > 1e-24 ? 1.0 / std::sqrt(sq) : 0.0;
            for (int k = 0; k < d; ++k) centroids.at2(ci, k) = warm_start->at2(ci, k) * inv;
        }
    } else {
        const int first = fit[static_cast<size_t>(rng.below(static_cast<uint64_t>(fp)))];
        for (int k = 0; k < d; ++k) centroids.at2(0, k) = unit.at2(first, k);
        std::vector<double> w(static_cast<size_t>(fp));
        for (int ci = 1; ci < c; ++ci) {
            double total = 0.0;
            for (int i = 0; i < fp; ++i) {
                double best = sq_dist(fit[static_cast<size_t>(i)], centroids, 0);
                for (int cj = 1; cj < ci; ++cj) best = std::min(best, sq_dist(fit[static_cast<size_t>(i)], centroids, cj));
                w[static_cast<size_t>(i)] = best;
                total += best;
            }
            const int pick = total > 0.0 ? static_cast<int>(rng.weighted_pick(w))
                                         : static_cast<int>(rng.below(static_cast<uint64_t>(fp)));
            for (int k = 0; k < d; ++k) centroids.at2(ci, k) = unit.at2(fit[static_cast<size_t>(pick)], k);
        }
    }

    auto nearest = [&](int row, const Tensor& cents) {
        int best = 0;
        double best_dot = -2.0;
        for (int ci = 0; ci < c; ++ci) {
            double dot = 0.0;
            for (int k = 0; k < d; ++k) dot += unit.at2(row, k) * cents.at2(ci, k);
            if (dot > best_dot) {
                best_dot = dot;
                best = ci;
            }
        }
        return best;
    };

    std::vector<int> fit_assign(static_cast<size_t>(fp), 0);
    for (int iter = 0; iter < 50; ++iter) {
        for (int i = 0; i < fp; ++i) fit_assign[static_cast<size_t>(i)] = nearest(fit[static_cast<size_t>(i)], centroids);

        Tensor sums = Tensor::zeros({c, d});
        std::vector<int> counts(static_cast<size_t>(c), 0);
        for (int i = 0; i < fp; ++i) {
            const int a = fit_assign[static_cast<size_t>(i)];
            ++counts[static_cast<size_t>(a)];
            for (int k = 0; k < d; ++k) sums.at2(a, k) += unit.at2(fit[static_cast<size_t>(i)], k);
        }

        Tensor next({c, d});
        for (int ci = 0; ci < c; ++ci) {
            if (counts[static_cast<size_t>(ci)] == 0) {
                // re-seed an empty cluster from the farthest point, ties to
                // the lowest row index
                int far_row = fit[0];
                double far_d = -1.0;
                for (int i = 0; i < fp; ++i) {
                    const double dd = sq_dist(fit[static_cast<size_t>(i)], centroids, fit_assign[static_cast<size_t>(i)]);
                    if (dd > far_d) {
                        far_d = dd;
                        far_row = fit[static_cast<size_t>(i)];
                    }
                }
                for (int k = 0; k < d; ++k) next.at2(ci, k) = unit.at2(far_row, k);
                continue;
            }
            double sq = 0.0;
            for (int k = 0; k < d; ++k) {
                next.at2(ci, k) = sums.at2(ci, k) / counts[static_cast<size_t>(ci)];
                sq += next.at2(ci, k) * next.at2(ci, k);
            }
            if (sq > 1e-24) {
                const double inv = 1.0 / std::sqrt(sq);
                for (int k = 0; k < d; ++k) next.at2(ci, k) *= inv;
            }
        }

        double moved = 0.0;
        for (int ci = 0; ci < c; ++ci) {
            double acc = 0.0;
            for (int k = 0; k < d; ++k) {
                const double diff = next.at2(ci, k) - centroids.at2(ci, k);
                acc += diff * diff;
            }
            moved = std::max(moved, std::sqrt(acc));
        }
        centroids = std::move(next);
        if (moved < 1e-6) break;
    }

    ClusterResult out;
    out.prototypes = centroids;
    out.assignments.resize(static_cast<size_t>(p));
    out.onehot = Tensor::zeros({p, c});
    out.soft = Tensor({p, c});
    for (int i = 0; i < p; ++i) {
        const int a = nearest(i, centroids);
        out.assignments[static_cast<size_t>(i)] = a;
        out.onehot.at2(i, a) = 1.0;

        double mx = -2.0;
        std::vector<double> logits(static_cast<size_t>(c));
        for (int ci = 0; ci < c; ++ci) {
            double dot = 0.0;
            for (int k = 0; k < d; ++k) dot += unit.at2(i, k) * centroids.at2(ci, k);
            logits[static_cast<size_t>(ci)] = dot / tau;
            mx = std::max(mx, logits[static_cast<size_t>(ci)]);
        }
        double z = 0.0;
        for (int ci = 0; ci < c; ++ci) z += std::exp(logits[static_cast<size_t>(ci)] - mx);
        for (int ci = 0; ci < c; ++ci) out.soft.at2(i, ci) = std::exp(logits[static_cast<size_t>(ci)] - mx) / z;
    }
    return out;
}

void validate(const TrainConfig& cfg) {
    if (cfg.epochs < 0) throw config_error("epochs must be non-negative");
    if (cfg.batch < 1) throw config_error("batch size must be positive");
    if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr)) throw config_error("learning rate must be finite and non-negative");
    if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw config_error("momentum must sit in [0,1)");
    if (cfg.c < 2) throw config_error("cluster count must be at least 2");
    if (cfg.eval_every < 1) throw config_error("eval_every must be positive");
    if (cfg.d_enc < 1 || cfg.d_emb < 1 || cfg.d_feat < 1 || cfg.hidden < 1) throw config_error("model dims must be positive");
    if (!(cfg.tau_seg > 0.0)) throw config_error("tau_seg must be positive");
    if (cfg.contrastive_cap < 1) throw config_error("contrastive_cap must be positive");
    try {
        losses::validate(cfg.weights);
        morph::validate(cfg.aug);
        boxcount::ScaleSet scales(cfg.scales);
        if (scales.sizes.back() > kCanvas) throw config_error("largest scale exceeds the canvas");
    } catch (const std::invalid_argument& e) {
        throw config_error(e.what());
    }
}

ModelState make_model(const TrainConfig& cfg, uint64_t seed) {
    validate(cfg);
    Rng rng(Rng::mix(seed, 0x6d6f64656c));
    ModelState s;
    s.c = cfg.c;
    s.d_enc = cfg.d_enc;
    s.d_emb = cfg.d_emb;
    s.d_feat = cfg.d_feat;
    s.hidden = cfg.hidden;
    s.scale_count = static_cast<int>(cfg.scales.size());

    s.enc_w1 = he_conv(cfg.d_enc, 3, 3, rng);
    s.enc_b1 = Tensor::zeros({cfg.d_enc});
    s.enc_w2 = he_conv(cfg.d_enc, cfg.d_enc, 3, rng);
    s.enc_b2 = Tensor::zeros({cfg.d_enc});
    s.enc_w3 = he_conv(cfg.d_enc, cfg.d_enc, 3, rng);
    s.enc_b3 = Tensor::zeros({cfg.d_enc});
    s.pseudo_w = he_conv(cfg.d_emb, cfg.d_enc, 1, rng);
    s.pseudo_b = Tensor::zeros({cfg.d_emb});
    s.seg_w = he_conv(cfg.d_emb, cfg.d_enc, 1, rng);
    s.seg_b = Tensor::zeros({cfg.d_emb});
    s.aux_w = he_conv(cfg.c, cfg.d_enc + 2 * cfg.d_feat, 1, rng);
    s.aux_b = Tensor::zeros({cfg.c});
    s.proj = boxcount::make_projection_heads(cfg.c, s.scale_count, cfg.hidden, cfg.d_feat, rng);

    s.prototypes = Tensor({cfg.c, cfg.d_emb});
    for (int i = 0; i < cfg.c; ++i) {
        double sq = 0.0;
        std::vector<double> row(static_cast<size_t>(cfg.d_emb));
        for (int k = 0; k < cfg.d_emb; ++k) {
            row[static_cast<size_t>(k)] = rng.normal();
            sq += row[static_cast<size_t>(k)] * row[static_cast<size_t>(k)];
        }
        const double inv = sq > 0.0 ? 1.0 / std::sqrt(sq) : 1.0;
        for (int k = 0; k < cfg.d_emb; ++k) s.prototypes.at2(i, k) = row[static_cast<size_t>(k)] * inv;
    }

    for (auto& [name, t] : named_parameters(s)) {
        (void)name;
        s.momentum.push_back(Tensor::zeros(t->shape()));
    }
    return s;
}

std::vector<std::pair<std::string, Tensor*>> named_parameters(ModelState& s) {
    return {
        {"encoder.w1", &s.enc_w1},   {"encoder.b1", &s.enc_b1}, {"encoder.w2", &s.enc_w2},
        {"encoder.b2", &s.enc_b2},   {"encoder.w3", &s.enc_w3}, {"encoder.b3", &s.enc_b3},
        {"pseudo_head.w", &s.pseudo_w}, {"pseudo_head.b", &s.pseudo_b},
        {"seg_head.w", &s.seg_w},    {"seg_head.b", &s.seg_b},
        {"aux_head.w", &s.aux_w},    {"aux_head.b", &s.aux_b},
        {"proj.app.w1", &s.proj.app.w1}, {"proj.app.b1", &s.proj.app.b1},
        {"proj.app.w2", &s.proj.app.w2}, {"proj.app.b2", &s.proj.app.b2},
        {"proj.geo.w1", &s.proj.geo.w1}, {"proj.geo.b1", &s.proj.geo.b1},
        {"proj.geo.w2", &s.proj.geo.w2}, {"proj.geo.b2", &s.proj.geo.b2},
    };
}

void save_checkpoint(const std::string& path, const ModelState& state) {
    std::vector<io::NamedTensor> entries;
    ModelState& s = const_cast<ModelState&>(state);
    for (auto& [name, t] : named_parameters(s)) entries.push_back({name, *t});
    entries.push_back({"prototypes", state.prototypes});
    io::write_checkpoint(path, entries);
}

ModelState load_checkpoint(const std::string& path) {
    std::vector<io::NamedTensor> entries = io::read_checkpoint(path);
    size_t taken = 0;
    auto take = [&](const std::string& name, int rank) -> Tensor {
        for (auto& e : entries)
            if (e.name == name) {
                if (e.tensor.ndim() != rank) throw io_error(path + ": entry '" + name + "' has unexpected rank");
                ++taken;
                return e.tensor;
            }
        throw io_error(path + ": missing entry '" + name + "'");
    };

    ModelState s;
    s.enc_w1 = take("encoder.w1", 4);
    s.enc_b1 = take("encoder.b1", 1);
    s.enc_w2 = take("encoder.w2", 4);
    s.enc_b2 = take("encoder.b2", 1);
    s.enc_w3 = take("encoder.w3", 4);
    s.enc_b3 = take("encoder.b3", 1);
    s.pseudo_w = take("pseudo_head.w", 4);
    s.pseudo_b = take("pseudo_head.b", 1);
    s.seg_w = take("seg_head.w", 4);
    s.seg_b = take("seg_head.b", 1);
    s.aux_w = take("aux_head.w", 4);
    s.aux_b = take("aux_head.b", 1);
    s.proj.app.w1 = take("proj.app.w1", 2);
    s.proj.app.b1 = take("proj.app.b1", 1);
    s.proj.app.w2 = take("proj.app.w2", 2);
    s.proj.app.b2 = take("proj.app.b2", 1);
    s.proj.geo.w1 = take("proj.geo.w1", 2);
    s.proj.geo.b1 = take("proj.geo.b1", 1);
    s.proj.geo.w2 = take("proj.geo.w2", 2);
    s.proj.geo.b2 = take("proj.geo.b2", 1);
    s.prototypes = take("prototypes", 2);

    s.c = s.prototypes.extent(0);
    s.d_emb = s.prototypes.extent(1);
    s.d_enc = s.enc_w1.extent(0);
    s.d_feat = s.proj.app.w2.extent(1);
    s.hidden = s.proj.app.w1.extent(1);
    const int geo_in = s.proj.geo.w1.extent(0);
    if (geo_in % 2 != 0) throw io_error(path + ": inconsistent projection head shapes");
    s.scale_count = geo_in / 2;

    if (taken != entries.size()) throw io_error(path + ": unexpected extra entries");
    if (s.seg_w.extent(0) != s.d_emb || s.seg_w.extent(1) != s.d_enc || s.pseudo_w.extent(0) != s.d_emb ||
        s.aux_w.extent(0) != s.c || s.aux_w.extent(1) != s.d_enc + 2 * s.d_feat ||
        s.proj.app.w1.extent(0) != s.c * 2 * s.scale_count)
        throw io_error(path + ": inconsistent parameter shapes");
    for (auto& [name, t] : named_parameters(s)) {
        (void)name;
        s.momentum.push_back(Tensor::zeros(t->shape()));
    }
    return s;
}

ModelVars bind(Graph& g, const ModelState& state, bool trainable) {
    ModelVars v;
    auto reg = [&](const Tensor& t) {
        Var var = g.leaf(t, trainable);
        v.ordered.push_back(var);
        return var;
    };
    v.enc_w1 = reg(state.enc_w1);
    v.enc_b1 = reg(state.enc_b1);
    v.enc_w2 = reg(state.enc_w2);
    v.enc_b2 = reg(state.enc_b2);
    v.enc_w3 = reg(state.enc_w3);
    v.enc_b3 = reg(state.enc_b3);
    v.pseudo_w = reg(state.pseudo_w);
    v.pseudo_b = reg(state.pseudo_b);
    v.seg_w = reg(state.seg_w);
    v.seg_b = reg(state.seg_b);
    v.aux_w = reg(state.aux_w);
    v.aux_b = reg(state.aux_b);
    v.proj.app.w1 = reg(state.proj.app.w1);
    v.proj.app.b1 = reg(state.proj.app.b1);
    v.proj.app.w2 = reg(state.proj.app.w2);
    v.proj.app.b2 = reg(state.proj.app.b2);
    v.proj.geo.w1 = reg(state.proj.geo.w1);
    v.proj.geo.b1 = reg(state.proj.geo.b1);
    v.proj.geo.w2 = reg(state.proj.geo.w2);
    v.proj.geo.b2 = reg(state.proj.geo.b2);
    return v;
}

TeacherForward forward_teacher(Graph& g, const Batch& batch, const ModelVars& vars, const TrainConfig& cfg,
                               uint64_t step_seed, const Tensor* prev_prototypes) {
    check_batch(batch);
    const int b = static_cast<int>(batch.size());
    const int h = batch[0]->height, w = batch[0]->width;

    const bool aug = cfg.use_topoaug && (cfg.placement == Placement::tea || cfg.placement == Placement::both);
    std::vector<ImageRGB8> images = branch_images(batch, cfg, aug, Rng::mix(step_seed, 0x746561));

    Var x = g.constant(image_batch(batch, images));
    Var enc = encoder_forward(vars, x);
    Var emb = conv2d(enc, vars.pseudo_w, vars.pseudo_b);

    Tensor rows = pixels_to_rows(emb.value());
    center_rows(rows);
    ClusterResult cl = prototypical_cluster(rows, cfg.c, Rng::mix(step_seed, 0x636c), cfg.weights.tau,
                                            prev_prototypes);
    if (prev_prototypes) {
        if (prev_prototypes->ndim() != 2 || prev_prototypes->extent(0) != cfg.c ||
            prev_prototypes->extent(1) != cl.prototypes.extent(1))
            throw std::invalid_argument("forward_teacher: previous prototype shape mismatch");
        align_to_previous(cl, *prev_prototypes);
    }

    TeacherForward tf;
    tf.emb = emb;
    tf.prototypes = std::move(cl.prototypes);
    tf.assignments = std::move(cl.assignments);
    tf.m_pseudo = rows_to_map(cl.onehot, b, h, w);
    tf.soft = rows_to_map(cl.soft, b, h, w);

    if (cfg.use_dbc) {
        boxcount::ScaleSet scales(cfg.scales);
        Var probs = g.constant(tf.soft);
        Var depth = g.constant(depth_batch(batch));
        Var a_area = boxcount::occupancy_normalize(boxcount::app_area_counts(probs, scales), scales, h, w);
        Var a_bound = boxcount::occupancy_normalize(
            boxcount::app_boundary_counts(probs, scales, morph::StructuringElement(3)), scales, h, w);
        Var g_rough = boxcount::occupancy_normalize(boxcount::geo_roughness_counts(depth, scales), scales, h, w);
        Var g_edge = boxcount::occupancy_normalize(boxcount::geo_edge_counts(depth, scales), scales, h, w);
        boxcount::Projection p = boxcount::project(a_area, a_bound, g_rough, g_edge, vars.proj);
        tf.f_app = p.f_app;
        tf.f_geo = p.f_geo;
        tf.f_dbc = p.f_dbc;
    }
    return tf;
}

StudentForward forward_student(Graph& g, const Batch& batch, const ModelVars& vars, const TeacherForward& teacher,
                               const TrainConfig& cfg, uint64_t step_seed) {
    check_batch(batch);
    const int h = batch[0]->height, w = batch[0]->width;

    const bool aug = cfg.use_topoaug && (cfg.placement == Placement::stu || cfg.placement == Placement::both);
    std::vector<ImageRGB8> images = branch_images(batch, cfg, aug, Rng::mix(step_seed, 0x737475));

    Var x = g.constant(image_batch(batch, images));
    Var enc = encoder_forward(vars, x);

    StudentForward sf;
    sf.emb = center_channels(g, conv2d(enc, vars.seg_w, vars.seg_b));
    Var cos = prototype_cosines(g, sf.emb, teacher.prototypes);
    sf.p_seg = softmax(scale(cos, 1.0 / cfg.tau_seg), 1);
    sf.m_seg = argmax_onehot(sf.p_seg.value());

    if (cfg.use_dbc) {
        if (!teacher.f_dbc.valid()) throw std::invalid_argument("forward_student: teacher pass lacks descriptors");
        Var fused = concat({enc, broadcast_spatial(teacher.f_dbc, h, w)}, 1);
        sf.m_aux = softmax(conv2d(fused, vars.aux_w, vars.aux_b), 1);
    }
    return sf;
}

StepLosses train_step(const Batch& batch, ModelState& state, const TrainConfig& cfg, uint64_t step_seed) {
    check_batch(batch);
    const int b = static_cast<int>(batch.size());
    const int h = batch[0]->height, w = batch[0]->width;

    Graph g;
    ModelVars vars = bind(g, state, true);
    TeacherForward tf = forward_teacher(g, batch, vars, cfg, step_seed, &state.prototypes);
    state.prototypes = tf.prototypes;
    StudentForward sf = forward_student(g, batch, vars, tf, cfg, step_seed);

    Rng site_rng(Rng::mix(step_seed, 0x736974));
    std::vector<PixelIndex> sites = sample_sites(b, h, w, cfg.contrastive_cap, site_rng);
    std::vector<int> site_assign;
    site_assign.reserve(sites.size());
    for (const PixelIndex& s : sites)
        site_assign.push_back(tf.assignments[static_cast<size_t>((s.b * h + s.y) * w + s.x)]);

    Var con = losses::contrastive_loss(gather_pixels(sf.emb, sites), site_assign, tf.prototypes, cfg.weights.tau);
    Var dist = losses::distillation_loss(sf.p_seg, g.constant(tf.m_pseudo));
    Var align = cfg.use_dbc ? losses::alignment_loss(tf.f_app, tf.f_geo) : g.constant(Tensor::scalar(0.0));
    Var ref = cfg.use_dbc ? losses::refinement_dice_loss(sf.p_seg, sf.m_aux, cfg.weights.eps)
                          : g.constant(Tensor::scalar(0.0));

    const double wc = cfg.weights.l_con * (cfg.loss_term_mask[0] ? 1.0 : 0.0);
    const double wd = cfg.weights.l_dist * (cfg.loss_term_mask[1] ? 1.0 : 0.0);
    const double wa = cfg.weights.l_align * (cfg.loss_term_mask[2] ? 1.0 : 0.0);
    const double wr = cfg.weights.l_ref * (cfg.loss_term_mask[3] ? 1.0 : 0.0);
    Var total = scale(con, wc) + scale(dist, wd) + scale(align, wa) + scale(ref, wr);

    StepLosses out;
    out.con = term_or_zero(con);
    out.dist = term_or_zero(dist);
    out.align = term_or_zero(align);
    out.ref = term_or_zero(ref);
    out.total = total.value()[0];
    if (!std::isfinite(out.total) || !std::isfinite(out.con) || !std::isfinite(out.dist) ||
        !std::isfinite(out.align) || !std::isfinite(out.ref)) {
        std::ostringstream oss;
        oss << "train_step: non-finite loss, aborting step (seed " << step_seed << "): con=" << out.con
            << " dist=" << out.dist << " align=" << out.align << " ref=" << out.ref << " total=" << out.total;
        throw numeric_error(oss.str());
    }

    Gradients grads = g.backward(total);
    auto params = named_parameters(state);
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor gp = grads.at(vars.ordered[i]);
        Tensor& vel = state.momentum[i];
        Tensor& p = *params[i].second;
        for (int64_t k = 0; k < p.numel(); ++k) {
            vel[k] = cfg.momentum * vel[k] + gp[k];
            p[k] -= cfg.lr * vel[k];
        }
        if (!p.all_finite())
            throw numeric_error("train_step: parameter '" + params[i].first + "' became non-finite (seed " +
                                std::to_string(step_seed) + ")");
    }
    return out;
}

std::vector<int> infer(const ImageRGB8& image, const ModelState& state) {
    if (image.width < 1 || image.height < 1) throw std::invalid_argument("infer: empty image");
    if (state.prototypes.ndim() != 2 || state.prototypes.extent(0) < 1)
        throw std::invalid_argument("infer: model has no prototypes");

    Graph g;
    ModelVars vars = bind(g, state, false);

    SyntheticScene shim;
    shim.image = image;
    shim.width = image.width;
    shim.height = image.height;
    Batch batch = {&shim};
    Var x = g.constant(image_batch(batch, {image}));
    Var enc = encoder_forward(vars, x);
    Var emb = center_channels(g, conv2d(enc, vars.seg_w, vars.seg_b));
    Var cos = prototype_cosines(g, emb, state.prototypes);

    const Tensor& cv = cos.value();
    const int c = cv.extent(1);
    std::vector<int> labels(static_cast<size_t>(image.width) * image.height, 0);
    for (int y = 0; y < image.height; ++y)
        for (int x2 = 0; x2 < image.width; ++x2) {
            int best = 0;
            for (int k = 1; k < c; ++k)
                if (cv.at4(0, k, y, x2) > cv.at4(0, best, y, x2)) best = k;
            labels[static_cast<size_t>(y) * image.width + x2] = best;
        }
    return labels;
}

eval::Metrics evaluate(const std::vector<SyntheticScene>& corpus, const ModelState& state) {
    if (corpus.empty()) throw std::invalid_argument("evaluate: empty corpus");
    const int classes = std::max(state.c, kTrueClasses);
    eval::ConfusionMatrix merged(classes);
    for (const SyntheticScene& s : corpus) {
        std::vector<int> pred = infer(s.image, state);
        merged.merge(eval::confusion(pred, s.labels, classes));
    }
    return eval::metrics(merged);
}

TrainResult train_loop(const std::vector<SyntheticScene>& corpus, const TrainConfig& cfg) {
    validate(cfg);
    if (corpus.empty()) throw std::invalid_argument("train_loop: empty corpus");

    TrainResult res;
    res.state = make_model(cfg, Rng::mix(cfg.seed, 0x696e6974));
    res.best = res.state;
    res.best_miou = -1.0;
    res.best_epoch = 0;
    if (cfg.epochs == 0) return res;

    const int n = static_cast<int>(corpus.size());
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng shuffler(Rng::mix(cfg.seed, 0xe0000 + static_cast<uint64_t>(epoch)));
        shuffler.shuffle(order);

        StepLosses mean;
        int steps = 0;
        for (int at = 0; at < n; at += cfg.batch) {
            Batch batch;
            for (int i = at; i < std::min(n, at + cfg.batch); ++i)
                batch.push_back(&corpus[static_cast<size_t>(order[static_cast<size_t>(i)])]);
            const uint64_t step_seed = Rng::mix(cfg.seed, static_cast<uint64_t>(epoch) * 100003 + static_cast<uint64_t>(steps));
            StepLosses l = train_step(batch, res.state, cfg, step_seed);
            mean.con += l.con;
            mean.dist += l.dist;
            mean.align += l.align;
            mean.ref += l.ref;
            mean.total += l.total;
            ++steps;
        }
        mean.con /= steps;
        mean.dist /= steps;
        mean.align /= steps;
        mean.ref /= steps;
        mean.total /= steps;

        if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            eval::Metrics m = evaluate(corpus, res.state);
            res.history.push_back({epoch, m.acc, m.miou, mean});
            if (m.miou > res.best_miou) {
                res.best_miou = m.miou;
                res.best_epoch = epoch;
                res.best = res.state;
            }
        }
    }
    return res;
}

std::string metrics_csv_header() { return "epoch,acc,miou,l_con,l_dist,l_align,l_ref,total"; }

std::string metrics_csv_row(const EpochMetrics& m) {
    std::ostringstream oss;
    oss << std::setprecision(17) << m.epoch << ',' << m.acc << ',' << m.miou << ',' << m.mean_losses.con << ','
        << m.mean_losses.dist << ',' << m.mean_losses.align << ',' << m.mean_losses.ref << ',' << m.mean_losses.total;
    return oss.str();
}

} // namespace toposeg::pipeline
