#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unistd.h>
#include <vector>

#include "doctest.h"
#include "toposeg/errors.hpp"
#include "toposeg/io.hpp"
#include "toposeg/pipeline.hpp"
#include "toposeg/rng.hpp"

using toposeg::Gradients;
using toposeg::Graph;
using toposeg::ImageRGB8;
using toposeg::Rng;
using toposeg::Tensor;
using toposeg::Var;
using toposeg::config_error;
using toposeg::io_error;
namespace pl = toposeg::pipeline;
namespace ls = toposeg::losses;

namespace {

struct TempDir {
    std::string path;
    TempDir() {
        static int counter = 0;
        path = (std::filesystem::temp_directory_path() /
                ("toposeg_pipe_" + std::to_string(::getpid()) + "_" + std::to_string(counter++)))
                   .string();
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string operator/(const std::string& name) const { return path + "/" + name; }
};

bool tensor_bits_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (int64_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

bool scene_equal(const pl::SyntheticScene& a, const pl::SyntheticScene& b) {
    return a.image.same_bytes(b.image) && tensor_bits_equal(a.depth, b.depth) && a.labels == b.labels;
}

pl::SyntheticScene crop(const pl::SyntheticScene& s, int size) {
    pl::SyntheticScene out;
    out.width = out.height = size;
    out.image = ImageRGB8(size, size);
    out.depth = Tensor({1, size, size});
    out.labels.assign(static_cast<size_t>(size) * size, 0);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            for (int c = 0; c < 3; ++c) out.image.at(x, y, c) = s.image.at(x, y, c);
            out.depth.at3(0, y, x) = s.depth.at3(0, y, x);
            out.labels[static_cast<size_t>(y) * size + x] = s.labels[static_cast<size_t>(y) * s.width + x];
        }
    return out;
}

// Small scenes keep forward/backward cheap where full-resolution content
// does not matter.
std::vector<pl::SyntheticScene> tiny_corpus(int n, uint64_t seed, int size) {
    std::vector<pl::SyntheticScene> full = pl::generate_corpus(n, seed);
    std::vector<pl::SyntheticScene> out;
    out.reserve(full.size());
    for (const auto& s : full) out.push_back(crop(s, size));
    return out;
}

bool params_bits_equal(pl::ModelState& a, pl::ModelState& b) {
    auto pa = pl::named_parameters(a), pb = pl::named_parameters(b);
    if (pa.size() != pb.size()) return false;
    for (size_t i = 0; i < pa.size(); ++i)
        if (pa[i].first != pb[i].first || !tensor_bits_equal(*pa[i].second, *pb[i].second)) return false;
    return true;
}

} // namespace

TEST_CASE("corpus generation is deterministic and structurally sound") {
    const auto a = pl::generate_corpus(20, 5);
    const auto b = pl::generate_corpus(20, 5);
    REQUIRE(a.size() == 20);
    for (size_t i = 0; i < a.size(); ++i) CHECK(scene_equal(a[i], b[i]));

    const auto c = pl::generate_corpus(20, 6);
    bool any_diff = false;
    for (size_t i = 0; i < a.size(); ++i) any_diff = any_diff || !scene_equal(a[i], c[i]);
    CHECK(any_diff);

    for (const auto& s : a) {
        REQUIRE(s.width == pl::kCanvas);
        REQUIRE(s.height == pl::kCanvas);
        REQUIRE(s.image.width == pl::kCanvas);
        REQUIRE(s.labels.size() == static_cast<size_t>(pl::kCanvas) * pl::kCanvas);
        REQUIRE(s.depth.shape() == std::vector<int>{1, pl::kCanvas, pl::kCanvas});

        std::set<int> distinct;
        double bg_max = -1.0, shape_min = 2.0;
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x) {
                const int lab = s.labels[static_cast<size_t>(y) * s.width + x];
                REQUIRE(lab >= 0);
                REQUIRE(lab < pl::kTrueClasses);
                distinct.insert(lab);
                const double d = s.depth.at3(0, y, x);
                REQUIRE(d >= 0.0);
                REQUIRE(d <= 1.0);
                if (lab == 0)
                    bg_max = std::max(bg_max, d);
                else
                    shape_min = std::min(shape_min, d);
            }
        // background stays visible and strictly behind every shape
        CHECK(distinct.size() >= 2);
        CHECK(distinct.count(0) == 1);
        CHECK(bg_max < shape_min);
    }

    CHECK_THROWS_AS(pl::generate_corpus(0, 1), std::invalid_argument);
}

TEST_CASE("corpus covers every class across scenes") {
    const auto corpus = pl::generate_corpus(200, 1);
    std::vector<int64_t> hist(pl::kTrueClasses, 0);
    for (const auto& s : corpus)
        for (int lab : s.labels) ++hist[static_cast<size_t>(lab)];
    for (int k = 0; k < pl::kTrueClasses; ++k) CHECK(hist[static_cast<size_t>(k)] > 0);
    // background dominates but does not drown the shapes
    const int64_t total = static_cast<int64_t>(corpus.size()) * pl::kCanvas * pl::kCanvas;
    CHECK(hist[0] > total / 4);
    CHECK(hist[0] < total);
}

TEST_CASE("corpus save/load round trip") {
    TempDir tmp;
    const auto corpus = pl::generate_corpus(4, 9);
    pl::save_corpus(tmp / "c", corpus);
    const auto back = pl::load_corpus(tmp / "c");
    REQUIRE(back.size() == corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) {
        CHECK(back[i].image.same_bytes(corpus[i].image));
        CHECK(back[i].labels == corpus[i].labels);
        REQUIRE(back[i].depth.same_shape(corpus[i].depth));
        for (int64_t k = 0; k < back[i].depth.numel(); ++k)
            CHECK(std::fabs(back[i].depth[k] - corpus[i].depth[k]) <= 0.5 / 65535.0 + 1e-12);
    }

    // a second save of the loaded corpus reproduces the files byte for byte
    pl::save_corpus(tmp / "c2", back);
    for (const auto& name : {"corpus.cfg", "scene_0000.png", "scene_0000_depth.pgm", "scene_0000_labels.pgm",
                             "scene_0003.png", "scene_0003_depth.pgm", "scene_0003_labels.pgm"}) {
        const auto x = toposeg::io::read_binary_file(tmp / (std::string("c/") + name));
        const auto y = toposeg::io::read_binary_file(tmp / (std::string("c2/") + name));
        CHECK(x == y);
    }

    CHECK_THROWS_AS(pl::load_corpus(tmp / "missing"), io_error);

    // a label outside the manifest's class range is rejected
    toposeg::io::GrayImage bad(pl::kCanvas, pl::kCanvas, 255);
    bad.pixels.assign(bad.pixels.size(), 7);
    toposeg::io::write_pgm(tmp / "c/scene_0001_labels.pgm", bad);
    CHECK_THROWS_AS(pl::load_corpus(tmp / "c"), io_error);
}

TEST_CASE("clustering recovers well-separated blobs exactly") {
    const int per = 100, d = 6, c = 4;
    Rng rng(42);
    Tensor centers = Tensor::zeros({c, d});
    for (int i = 0; i < c; ++i) centers.at2(i, i) = 1.0; // orthonormal rows

    Tensor emb({per * c, d});
    std::vector<int> truth(static_cast<size_t>(per) * c);
    for (int i = 0; i < per * c; ++i) {
        const int t = i % c;
        truth[static_cast<size_t>(i)] = t;
        for (int k = 0; k < d; ++k) emb.at2(i, k) = centers.at2(t, k) + 0.05 * rng.normal();
    }

    const auto res = pl::prototypical_cluster(emb, c, 7, 0.07);
    REQUIRE(res.prototypes.shape() == std::vector<int>{c, d});
    REQUIRE(static_cast<int>(res.assignments.size()) == per * c);

    // majority vote per cluster must form a bijection with zero dissent
    std::vector<std::vector<int64_t>> votes(static_cast<size_t>(c), std::vector<int64_t>(static_cast<size_t>(c), 0));
    for (int i = 0; i < per * c; ++i)
        ++votes[static_cast<size_t>(res.assignments[static_cast<size_t>(i)])][static_cast<size_t>(truth[static_cast<size_t>(i)])];
    std::set<int> used;
    for (int ci = 0; ci < c; ++ci) {
        int best = 0;
        for (int t = 1; t < c; ++t)
            if (votes[static_cast<size_t>(ci)][static_cast<size_t>(t)] > votes[static_cast<size_t>(ci)][static_cast<size_t>(best)]) best = t;
        CHECK(votes[static_cast<size_t>(ci)][static_cast<size_t>(best)] == per);
        used.insert(best);
    }
    CHECK(used.size() == static_cast<size_t>(c));

    // determinism at the bit level
    const auto res2 = pl::prototypical_cluster(emb, c, 7, 0.07);
    CHECK(tensor_bits_equal(res.prototypes, res2.prototypes));
    CHECK(res.assignments == res2.assignments);
    CHECK(tensor_bits_equal(res.soft, res2.soft));
}

TEST_CASE("clustering invariants: assignment rule, soft rows, onehot") {
    Rng rng(3);
    Tensor emb = Tensor::normal({150, 5}, rng);
    const int c = 6;
    const auto res = pl::prototypical_cluster(emb, c, 11, 0.2);

    for (int i = 0; i < 150; ++i) {
        // recompute the nearest prototype by cosine, ties to lowest index
        double norm = 0.0;
        for (int k = 0; k < 5; ++k) norm += emb.at2(i, k) * emb.at2(i, k);
        norm = std::sqrt(norm);
        int best = 0;
        double best_dot = -2.0;
        for (int ci = 0; ci < c; ++ci) {
            double dot = 0.0;
            for (int k = 0; k < 5; ++k) dot += emb.at2(i, k) / norm * res.prototypes.at2(ci, k);
            if (dot > best_dot) {
                best_dot = dot;
                best = ci;
            }
        }
        CHECK(res.assignments[static_cast<size_t>(i)] == best);

        double soft_sum = 0.0;
        int arg = 0;
        for (int ci = 0; ci < c; ++ci) {
            soft_sum += res.soft.at2(i, ci);
            if (res.onehot.at2(i, ci) == 1.0) arg = ci;
            else CHECK(res.onehot.at2(i, ci) == 0.0);
        }
        CHECK(soft_sum == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(arg == best);
    }

    // prototype rows come out unit length (or zero for degenerate input)
    for (int ci = 0; ci < c; ++ci) {
        double sq = 0.0;
        for (int k = 0; k < 5; ++k) sq += res.prototypes.at2(ci, k) * res.prototypes.at2(ci, k);
        CHECK(std::sqrt(sq) == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("clustering edge cases") {
    CHECK_THROWS_AS(pl::prototypical_cluster(Tensor::zeros({3, 4}), 5, 1, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(pl::prototypical_cluster(Tensor::zeros({3, 4}), 2, 1, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(pl::prototypical_cluster(Tensor::full({3, 4}, std::nan("")), 2, 1, 0.1), std::invalid_argument);

    // identical points collapse into a single occupied cluster
    Tensor same = Tensor::full({40, 3}, 0.5);
    const auto res = pl::prototypical_cluster(same, 3, 2, 0.1);
    std::set<int> occupied(res.assignments.begin(), res.assignments.end());
    CHECK(occupied.size() == 1);
    CHECK(res.prototypes.all_finite());

    // more rows than the fit subsample cap still assigns every row
    Rng rng(5);
    const int per = 1500, c = 4;
    Tensor emb({per * c, 4});
    std::vector<int> truth(static_cast<size_t>(per) * c);
    for (int i = 0; i < per * c; ++i) {
        const int t = i % c;
        truth[static_cast<size_t>(i)] = t;
        for (int k = 0; k < 4; ++k) emb.at2(i, k) = (t == k ? 1.0 : 0.0) + 0.05 * rng.normal();
    }
    const auto big = pl::prototypical_cluster(emb, c, 13, 0.07);
    REQUIRE(big.assignments.size() == static_cast<size_t>(per) * c);
    std::vector<std::vector<int64_t>> votes(4, std::vector<int64_t>(4, 0));
    for (int i = 0; i < per * c; ++i)
        ++votes[static_cast<size_t>(big.assignments[static_cast<size_t>(i)])][static_cast<size_t>(truth[static_cast<size_t>(i)])];
    std::set<int> used;
    for (int ci = 0; ci < c; ++ci) {
        int best = 0;
        for (int t = 1; t < c; ++t)
            if (votes[static_cast<size_t>(ci)][static_cast<size_t>(t)] > votes[static_cast<size_t>(ci)][static_cast<size_t>(best)]) best = t;
        CHECK(votes[static_cast<size_t>(ci)][static_cast<size_t>(best)] == per);
        used.insert(best);
    }
    CHECK(used.size() == 4);
}

TEST_CASE("model construction and checkpoint round trip") {
    pl::TrainConfig cfg;
    pl::ModelState state = pl::make_model(cfg, 17);

    auto params = pl::named_parameters(state);
    REQUIRE(params.size() == 20);
    std::set<std::string> names;
    for (auto& [name, t] : params) {
        names.insert(name);
        CHECK(t->numel() > 0);
        CHECK(t->all_finite());
    }
    CHECK(names.size() == params.size());
    REQUIRE(state.momentum.size() == params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        CHECK(state.momentum[i].same_shape(*params[i].second));
        CHECK(state.momentum[i].max_abs() == 0.0);
    }
    CHECK(state.prototypes.shape() == std::vector<int>{cfg.c, cfg.d_emb});

    TempDir tmp;
    pl::save_checkpoint(tmp / "m.ckpt", state);
    pl::ModelState back = pl::load_checkpoint(tmp / "m.ckpt");
    CHECK(params_bits_equal(state, back));
    CHECK(tensor_bits_equal(state.prototypes, back.prototypes));
    CHECK(back.c == state.c);
    CHECK(back.d_enc == state.d_enc);
    CHECK(back.d_emb == state.d_emb);
    CHECK(back.d_feat == state.d_feat);
    CHECK(back.hidden == state.hidden);
    CHECK(back.scale_count == state.scale_count);

    CHECK_THROWS_AS(pl::load_checkpoint(tmp / "missing.ckpt"), io_error);

    // a checkpoint with a missing entry is rejected
    std::vector<toposeg::io::NamedTensor> entries = toposeg::io::read_checkpoint(tmp / "m.ckpt");
    std::vector<toposeg::io::NamedTensor> partial(entries.begin(), entries.end() - 1);
    toposeg::io::write_checkpoint(tmp / "partial.ckpt", partial);
    CHECK_THROWS_AS(pl::load_checkpoint(tmp / "partial.ckpt"), io_error);

    // and so is one with an unexpected extra entry
    entries.push_back({"stranger", Tensor::zeros({2})});
    toposeg::io::write_checkpoint(tmp / "extra.ckpt", entries);
    CHECK_THROWS_AS(pl::load_checkpoint(tmp / "extra.ckpt"), io_error);
}

TEST_CASE("train config validation") {
    pl::TrainConfig cfg;
    CHECK_NOTHROW(pl::validate(cfg));

    auto broken = [&](auto mutate) {
        pl::TrainConfig c2 = cfg;
        mutate(c2);
        CHECK_THROWS_AS(pl::validate(c2), config_error);
    };
    broken([](pl::TrainConfig& c2) { c2.epochs = -1; });
    broken([](pl::TrainConfig& c2) { c2.batch = 0; });
    broken([](pl::TrainConfig& c2) { c2.lr = -0.1; });
    broken([](pl::TrainConfig& c2) { c2.momentum = 1.0; });
    broken([](pl::TrainConfig& c2) { c2.c = 1; });
    broken([](pl::TrainConfig& c2) { c2.eval_every = 0; });
    broken([](pl::TrainConfig& c2) { c2.tau_seg = 0.0; });
    broken([](pl::TrainConfig& c2) { c2.scales = {4, 2}; });
    broken([](pl::TrainConfig& c2) { c2.scales = {1, 128}; });
    broken([](pl::TrainConfig& c2) { c2.weights.tau = 0.0; });
    broken([](pl::TrainConfig& c2) { c2.aug.p_apply = 1.5; });
}

TEST_CASE("teacher forward: determinism, one-hot pseudo labels, descriptors") {
    const auto scenes = tiny_corpus(2, 21, 16);
    pl::Batch batch = {&scenes[0], &scenes[1]};
    pl::TrainConfig cfg;
    pl::ModelState state = pl::make_model(cfg, 3);

    Graph g1;
    pl::ModelVars v1 = pl::bind(g1, state, true);
    const auto t1 = pl::forward_teacher(g1, batch, v1, cfg, 99);

    REQUIRE(t1.m_pseudo.shape() == std::vector<int>{2, cfg.c, 16, 16});
    REQUIRE(t1.prototypes.shape() == std::vector<int>{cfg.c, cfg.d_emb});
    REQUIRE(t1.assignments.size() == 2u * 16 * 16);
    for (int b = 0; b < 2; ++b)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                double sum = 0.0;
                for (int c = 0; c < cfg.c; ++c) {
                    const double p = t1.m_pseudo.at4(b, c, y, x);
                    CHECK((p == 0.0 || p == 1.0));
                    sum += p;
                }
                CHECK(sum == 1.0);
                const int a = t1.assignments[static_cast<size_t>((b * 16 + y) * 16 + x)];
                CHECK(t1.m_pseudo.at4(b, a, y, x) == 1.0);
            }

    REQUIRE(t1.f_dbc.valid());
    CHECK(t1.f_app.shape() == std::vector<int>{2, cfg.d_feat});
    CHECK(t1.f_geo.shape() == std::vector<int>{2, cfg.d_feat});
    CHECK(t1.f_dbc.shape() == std::vector<int>{2, 2 * cfg.d_feat});

    Graph g2;
    pl::ModelVars v2 = pl::bind(g2, state, true);
    const auto t2 = pl::forward_teacher(g2, batch, v2, cfg, 99);
    CHECK(tensor_bits_equal(t1.m_pseudo, t2.m_pseudo));
    CHECK(tensor_bits_equal(t1.prototypes, t2.prototypes));
    CHECK(tensor_bits_equal(t1.f_dbc.value(), t2.f_dbc.value()));

    pl::TrainConfig no_dbc = cfg;
    no_dbc.use_dbc = false;
    Graph g3;
    pl::ModelVars v3 = pl::bind(g3, state, true);
    const auto t3 = pl::forward_teacher(g3, batch, v3, no_dbc, 99);
    CHECK(!t3.f_dbc.valid());
    CHECK(tensor_bits_equal(t3.m_pseudo, t1.m_pseudo));
}

TEST_CASE("teacher forward aligns cluster identity to previous prototypes") {
    const auto scenes = tiny_corpus(2, 22, 16);
    pl::Batch batch = {&scenes[0], &scenes[1]};
    pl::TrainConfig cfg;
    pl::ModelState state = pl::make_model(cfg, 4);

    Graph g1;
    pl::ModelVars v1 = pl::bind(g1, state, true);
    const auto base = pl::forward_teacher(g1, batch, v1, cfg, 7);

    // aligning against itself keeps every slot in place
    Graph g2;
    pl::ModelVars v2 = pl::bind(g2, state, true);
    const auto self_aligned = pl::forward_teacher(g2, batch, v2, cfg, 7, &base.prototypes);
    CHECK(tensor_bits_equal(self_aligned.prototypes, base.prototypes));
    CHECK(tensor_bits_equal(self_aligned.m_pseudo, base.m_pseudo));

    // aligning against reversed prototypes reverses every slot
    Tensor reversed(base.prototypes.shape());
    const int c = cfg.c;
    for (int i = 0; i < c; ++i)
        for (int k = 0; k < cfg.d_emb; ++k) reversed.at2(c - 1 - i, k) = base.prototypes.at2(i, k);
    Graph g3;
    pl::ModelVars v3 = pl::bind(g3, state, true);
    const auto rev = pl::forward_teacher(g3, batch, v3, cfg, 7, &reversed);
    CHECK(tensor_bits_equal(rev.prototypes, reversed));
    for (size_t i = 0; i < rev.assignments.size(); ++i)
        CHECK(rev.assignments[i] == c - 1 - base.assignments[i]);

    Tensor wrong = Tensor::zeros({c, cfg.d_emb + 1});
    Graph g4;
    pl::ModelVars v4 = pl::bind(g4, state, true);
    CHECK_THROWS_AS(pl::forward_teacher(g4, batch, v4, cfg, 7, &wrong), std::invalid_argument);
}

TEST_CASE("student forward: probability maps, argmax, aux head") {
    const auto scenes = tiny_corpus(2, 23, 16);
    pl::Batch batch = {&scenes[0], &scenes[1]};
    pl::TrainConfig cfg;
    pl::ModelState state = pl::make_model(cfg, 5);

    Graph g;
    pl::ModelVars vars = pl::bind(g, state, true);
    const auto tf = pl::forward_teacher(g, batch, vars, cfg, 31);
    const auto sf = pl::forward_student(g, batch, vars, tf, cfg, 31);

    REQUIRE(sf.p_seg.shape() == std::vector<int>{2, cfg.c, 16, 16});
    REQUIRE(sf.m_aux.valid());
    REQUIRE(sf.m_aux.shape() == std::vector<int>{2, cfg.c, 16, 16});
    const Tensor& p = sf.p_seg.value();
    const Tensor& aux = sf.m_aux.value();
    for (int b = 0; b < 2; ++b)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                double ps = 0.0, as = 0.0;
                int arg = 0;
                for (int c = 0; c < cfg.c; ++c) {
                    ps += p.at4(b, c, y, x);
                    as += aux.at4(b, c, y, x);
                    if (p.at4(b, c, y, x) > p.at4(b, arg, y, x)) arg = c;
                }
                CHECK(ps == doctest::Approx(1.0).epsilon(1e-9));
                CHECK(as == doctest::Approx(1.0).epsilon(1e-9));
                CHECK(sf.m_seg.at4(b, arg, y, x) == 1.0);
            }

    // student without the descriptor branch has no aux map and needs no
    // teacher descriptors
    pl::TrainConfig plain = cfg;
    plain.use_dbc = false;
    plain.use_topoaug = false;
    Graph g2;
    pl::ModelVars v2 = pl::bind(g2, state, true);
    const auto tf2 = pl::forward_teacher(g2, batch, v2, plain, 31);
    const auto sf2 = pl::forward_student(g2, batch, v2, tf2, plain, 31);
    CHECK(!sf2.m_aux.valid());

    // clean path: disabling augmentation entirely matches p_apply = 0
    pl::TrainConfig zeroed = cfg;
    zeroed.aug.p_apply = 0.0;
    Graph g3;
    pl::ModelVars v3 = pl::bind(g3, state, true);
    const auto tf3 = pl::forward_teacher(g3, batch, v3, zeroed, 31);
    const auto sf3 = pl::forward_student(g3, batch, v3, tf3, zeroed, 31);
    pl::TrainConfig off = cfg;
    off.use_topoaug = false;
    Graph g4;
    pl::ModelVars v4 = pl::bind(g4, state, true);
    const auto tf4 = pl::forward_teacher(g4, batch, v4, off, 31);
    const auto sf4 = pl::forward_student(g4, batch, v4, tf4, off, 31);
    CHECK(tensor_bits_equal(sf3.p_seg.value(), sf4.p_seg.value()));

    // requesting the aux branch against a teacher that never built
    // descriptors is a caller error
    Graph g5;
    pl::ModelVars v5 = pl::bind(g5, state, true);
    const auto tf5 = pl::forward_teacher(g5, batch, v5, plain, 31);
    CHECK_THROWS_AS(pl::forward_student(g5, batch, v5, tf5, cfg, 31), std::invalid_argument);
}

TEST_CASE("gradients reach the student path and never the teacher targets") {
    const auto scenes = tiny_corpus(2, 24, 16);
    pl::Batch batch = {&scenes[0], &scenes[1]};
    pl::TrainConfig cfg;
    pl::ModelState state = pl::make_model(cfg, 6);

    Graph g;
    pl::ModelVars vars = pl::bind(g, state, true);
    const auto tf = pl::forward_teacher(g, batch, vars, cfg, 77);
    const auto sf = pl::forward_student(g, batch, vars, tf, cfg, 77);

    const int h = 16, w = 16;
    std::vector<toposeg::PixelIndex> sites;
    std::vector<int> assigns;
    for (int b = 0; b < 2; ++b)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                sites.push_back({b, y, x});
                assigns.push_back(tf.assignments[static_cast<size_t>((b * h + y) * w + x)]);
            }

    Var con = ls::contrastive_loss(gather_pixels(sf.emb, sites), assigns, tf.prototypes, cfg.weights.tau);
    Var dist = ls::distillation_loss(sf.p_seg, g.constant(tf.m_pseudo));
    Var align = ls::alignment_loss(tf.f_app, tf.f_geo);
    Var ref = ls::refinement_dice_loss(sf.p_seg, sf.m_aux, cfg.weights.eps);
    Var total = scale(con, cfg.weights.l_con) + scale(dist, cfg.weights.l_dist) +
                scale(align, cfg.weights.l_align) + scale(ref, cfg.weights.l_ref);

    Gradients grads = g.backward(total);

    // every student-side parameter group receives gradient
    for (Var v : {vars.enc_w1, vars.enc_w2, vars.enc_w3, vars.seg_w, vars.seg_b, vars.aux_w, vars.aux_b,
                  vars.proj.app.w1, vars.proj.app.w2, vars.proj.geo.w1, vars.proj.geo.w2}) {
        REQUIRE(grads.find(v) != nullptr);
        CHECK(grads.at(v).max_abs() > 0.0);
    }

    // the clustering head and its embedding feed no loss: backward never
    // visits them
    CHECK(grads.find(vars.pseudo_w) == nullptr);
    CHECK(grads.find(vars.pseudo_b) == nullptr);
    CHECK(grads.find(tf.emb) == nullptr);
}

TEST_CASE("train step: zero learning rate is a bitwise no-op on parameters") {
    const auto scenes = tiny_corpus(2, 25, 16);
    pl::Batch batch = {&scenes[0], &scenes[1]};
    pl::TrainConfig cfg;
    cfg.lr = 0.0;
    pl::ModelState state = pl::make_model(cfg, 8);
    pl::ModelState before = state;

    const auto losses = pl::train_step(batch, state, cfg, 13);
    CHECK(std::isfinite(losses.total));
    CHECK(losses.con > 0.0);
    CHECK(losses.dist > 0.0);
    CHECK(params_bits_equal(state, before));
}

TEST_CASE("train step: masking a term equals zeroing its weight") {
    const auto scenes = tiny_corpus(4, 26, 16);
    pl::Batch batch = {&scenes[0], &scenes[1], &scenes[2], &scenes[3]};

    pl::TrainConfig masked;
    masked.loss_term_mask = {true, true, true, false};
    pl::TrainConfig zeroed;
    zeroed.weights.l_ref = 0.0;

    pl::ModelState a = pl::make_model(masked, 9);
    pl::ModelState b = pl::make_model(zeroed, 9);
    REQUIRE(params_bits_equal(a, b));

    const auto la = pl::train_step(batch, a, masked, 21);
    const auto lb = pl::train_step(batch, b, zeroed, 21);

    // the masked term is still evaluated and reported
    CHECK(la.ref > 0.0);
    CHECK(la.ref == lb.ref);
    CHECK(la.con == lb.con);
    CHECK(la.total == lb.total);
    CHECK(params_bits_equal(a, b));

    // a positive learning rate changes the encoder
    pl::TrainConfig live;
    pl::ModelState c = pl::make_model(live, 9);
    pl::ModelState before = c;
    pl::train_step(batch, c, live, 21);
    CHECK(!params_bits_equal(c, before));
}

TEST_CASE("single-batch overfit decreases the loss across 50-step windows") {
    const auto scenes = tiny_corpus(1, 27, 32);
    pl::Batch batch = {&scenes[0]};
    pl::TrainConfig cfg;
    cfg.use_topoaug = false;
    cfg.lr = 0.02;
    pl::ModelState state = pl::make_model(cfg, 10);

    std::vector<double> totals;
    for (int step = 0; step < 200; ++step)
        totals.push_back(pl::train_step(batch, state, cfg, Rng::mix(1000, static_cast<uint64_t>(step))).total);

    for (size_t i = 0; i + 50 < totals.size(); ++i) CHECK(totals[i + 50] < totals[i]);
    CHECK(totals.back() < totals.front());
}

TEST_CASE("train loop: epoch zero contract, determinism, eval cadence") {
    const auto corpus = tiny_corpus(12, 28, 16);

    pl::TrainConfig none;
    none.epochs = 0;
    const auto empty = pl::train_loop(corpus, none);
    CHECK(empty.history.empty());
    CHECK(empty.best_epoch == 0);
    // the untrained model still infers valid labels
    const auto labels = pl::infer(corpus[0].image, empty.state);
    REQUIRE(labels.size() == 16u * 16);
    for (int lab : labels) {
        CHECK(lab >= 0);
        CHECK(lab < none.c);
    }

    pl::TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch = 6;
    cfg.eval_every = 1;
    cfg.seed = 4;
    auto r1 = pl::train_loop(corpus, cfg);
    auto r2 = pl::train_loop(corpus, cfg);
    REQUIRE(r1.history.size() == 2);
    CHECK(r1.history[0].epoch == 1);
    CHECK(r1.history[1].epoch == 2);
    REQUIRE(r2.history.size() == r1.history.size());
    for (size_t i = 0; i < r1.history.size(); ++i)
        CHECK(pl::metrics_csv_row(r1.history[i]) == pl::metrics_csv_row(r2.history[i]));
    CHECK(params_bits_equal(r1.state, r2.state));
    CHECK(tensor_bits_equal(r1.state.prototypes, r2.state.prototypes));
    CHECK(r1.best_miou == r2.best_miou);
    CHECK(r1.best_miou >= 0.0);
    CHECK(r1.best_miou <= 1.0);

    // sparse cadence still evaluates the final epoch
    pl::TrainConfig sparse = cfg;
    sparse.eval_every = 5;
    const auto r3 = pl::train_loop(corpus, sparse);
    REQUIRE(r3.history.size() == 1);
    CHECK(r3.history[0].epoch == 2);

    CHECK_THROWS_AS(pl::train_loop({}, cfg), std::invalid_argument);
}

TEST_CASE("inference and evaluation basics") {
    const auto corpus = tiny_corpus(3, 29, 16);
    pl::TrainConfig cfg;
    pl::ModelState state = pl::make_model(cfg, 11);

    const auto l1 = pl::infer(corpus[0].image, state);
    const auto l2 = pl::infer(corpus[0].image, state);
    CHECK(l1 == l2);
    REQUIRE(l1.size() == 16u * 16);
    for (int lab : l1) {
        CHECK(lab >= 0);
        CHECK(lab < cfg.c);
    }

    const auto m = pl::evaluate(corpus, state);
    CHECK(m.acc >= 0.0);
    CHECK(m.acc <= 1.0);
    CHECK(m.miou >= 0.0);
    CHECK(m.miou <= 1.0);
    CHECK_THROWS_AS(pl::evaluate({}, state), std::invalid_argument);
}

TEST_CASE("metrics CSV layout") {
    CHECK(pl::metrics_csv_header() == "epoch,acc,miou,l_con,l_dist,l_align,l_ref,total");
    pl::EpochMetrics m;
    m.epoch = 7;
    m.acc = 0.125;
    m.miou = 1.0 / 3.0;
    m.mean_losses = {1.5, 0.25, 0.0625, 2.0, 3.8125};
    const std::string row = pl::metrics_csv_row(m);
    std::vector<std::string> fields;
    std::stringstream ss(row);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    REQUIRE(fields.size() == 8);
    CHECK(fields[0] == "7");
    CHECK(std::stod(fields[1]) == 0.125);
    CHECK(std::stod(fields[2]) == 1.0 / 3.0);
    CHECK(std::stod(fields[3]) == 1.5);
    CHECK(std::stod(fields[7]) == 3.8125);
}
