// Batch front end for the topological segmentation library: augmentation,
// box counting, fractal dimension, gradient audit, corpus synthesis,
// training, evaluation, and inference. One subcommand per invocation, JSON
// on stdout, artifacts to files. Exit codes are a stable contract: 0 ok,
// 2 I/O failure, 3 configuration problem, 4 numeric failure.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "toposeg/boxcount.hpp"
#include "toposeg/errors.hpp"
#include "toposeg/eval.hpp"
#include "toposeg/gradcheck.hpp"
#include "toposeg/graph.hpp"
#include "toposeg/io.hpp"
#include "toposeg/morph.hpp"
#include "toposeg/pipeline.hpp"
#include "toposeg/tensor.hpp"

namespace {

using nlohmann::json;
namespace bc = toposeg::boxcount;
namespace gc = toposeg::gradcheck;
namespace io = toposeg::io;
namespace morph = toposeg::morph;
namespace pl = toposeg::pipeline;
using toposeg::config_error;
using toposeg::ImageRGB8;
using toposeg::numeric_error;
using toposeg::Tensor;

std::string lower_ext(const std::string& path) {
    std::string e = std::filesystem::path(path).extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e;
}

void write_image_auto(const std::string& path, const ImageRGB8& img) {
    const std::string e = lower_ext(path);
    if (e == ".png")
        io::write_png(path, img);
    else if (e == ".ppm")
        io::write_ppm(path, img);
    else
        throw config_error("unsupported output image extension '" + e + "' (use .png or .ppm)");
}

// Augmentation config file: w_<operator> entries following the operator
// names, p_apply, and the structuring element weights w_se3 / w_se5. Every
// key is optional; unknown keys are rejected rather than ignored so typos
// cannot silently disable an operator.
morph::AugConfig parse_aug_config(const io::Config& cfg) {
    std::set<std::string> allowed = {"p_apply", "w_se3", "w_se5"};
    for (int i = 0; i < morph::kAugOpCount; ++i)
        allowed.insert(std::string("w_") + morph::aug_op_name(static_cast<morph::AugOp>(i)));
    for (const auto& [key, value] : cfg.entries) {
        (void)value;
        if (!allowed.count(key)) throw config_error("augment config: unknown key '" + key + "'");
    }
    morph::AugConfig ac;
    for (int i = 0; i < morph::kAugOpCount; ++i) {
        const std::string key = std::string("w_") + morph::aug_op_name(static_cast<morph::AugOp>(i));
        ac.op_weights[static_cast<size_t>(i)] = cfg.get_double(key, ac.op_weights[static_cast<size_t>(i)]);
    }
    ac.p_apply = cfg.get_double("p_apply", ac.p_apply);
    ac.se_weights[0] = cfg.get_double("w_se3", ac.se_weights[0]);
    ac.se_weights[1] = cfg.get_double("w_se5", ac.se_weights[1]);
    return ac;
}

std::string format_count(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

int run_augment(const std::string& in, const std::string& out, const std::string& config, uint64_t seed) {
    morph::AugConfig ac;
    if (!config.empty()) ac = parse_aug_config(io::read_config(config));
    ac.seed = seed;
    morph::validate(ac);
    const ImageRGB8 img = io::read_image_rgb(in);
    morph::AugTrace trace;
    const ImageRGB8 result = morph::topo_augment(img, ac, &trace);
    write_image_auto(out, result);
    json j;
    j["applied"] = trace.applied;
    j["op"] = trace.applied ? json(morph::aug_op_name(trace.op)) : json(nullptr);
    j["se_size"] = trace.applied ? json(trace.se_size) : json(nullptr);
    j["seed"] = seed;
    std::cout << j.dump() << "\n";
    return 0;
}

int run_boxcount(const std::string& in, const std::vector<int>& scales, const std::string& mode,
                 const std::string& out) {
    const io::GrayImage gi = io::read_image_gray(in);
    const Tensor m = io::to_unit_tensor(gi);
    const bc::ScaleSet ss(scales);
    Tensor counts; // [1,1,k]
    if (mode == "hard") {
        counts = bc::hard_box_count_multi(m, ss);
    } else {
        toposeg::Graph g;
        counts = bc::dbc_multiscale(g.constant(m), ss).value();
    }
    std::string csv = "scale,count\n";
    json jscales = json::array(), jcounts = json::array();
    for (int i = 0; i < ss.k(); ++i) {
        csv += std::to_string(ss.sizes[static_cast<size_t>(i)]) + "," + format_count(counts[i]) + "\n";
        jscales.push_back(ss.sizes[static_cast<size_t>(i)]);
        jcounts.push_back(counts[i]);
    }
    io::write_text_file(out, csv);
    json j;
    j["mode"] = mode;
    j["scales"] = jscales;
    j["counts"] = jcounts;
    j["out"] = out;
    std::cout << j.dump() << "\n";
    return 0;
}

int run_fracdim(const std::string& in, const std::vector<int>& scales) {
    const io::GrayImage gi = io::read_image_gray(in);
    const Tensor m = io::to_unit_tensor(gi);
    const bc::ScaleSet ss(scales);
    toposeg::Graph g;
    const Tensor counts = bc::dbc_multiscale(g.constant(m), ss).value();
    std::vector<double> n(static_cast<size_t>(ss.k()));
    for (int i = 0; i < ss.k(); ++i) n[static_cast<size_t>(i)] = counts[i];
    const double extent = std::max(gi.width, gi.height);
    const bc::FractalFit fit = bc::fractal_dimension(n, ss, extent);
    json rec = json::array();
    rec.push_back({{"channel", 0}, {"slope", fit.slope}, {"r2", fit.r2}});
    std::cout << rec.dump() << "\n";
    return 0;
}

int run_gradcheck(uint64_t seed) {
    const std::vector<gc::Entry> entries = gc::run_suite(seed);
    std::cout << gc::to_json(entries) << "\n";
    if (!gc::all_pass(entries)) {
        int failed = 0;
        for (const gc::Entry& e : entries) failed += gc::entry_passes(e) ? 0 : 1;
        std::cerr << "toposeg: gradcheck: " << failed << " of " << entries.size()
                  << " entries exceed tolerance " << gc::kTolerance << "\n";
        return 4;
    }
    return 0;
}

int run_gen_corpus(const std::string& out, int count, uint64_t seed) {
    const std::vector<pl::SyntheticScene> corpus = pl::generate_corpus(count, seed);
    pl::save_corpus(out, corpus);
    json j;
    j["count"] = count;
    j["seed"] = seed;
    j["dir"] = out;
    j["width"] = pl::kCanvas;
    j["height"] = pl::kCanvas;
    std::cout << j.dump() << "\n";
    return 0;
}

std::array<bool, 4> parse_loss_terms(const std::string& spec) {
    std::array<bool, 4> mask = {false, false, false, false};
    std::stringstream ss(spec);
    std::string term;
    bool any = false;
    while (std::getline(ss, term, ',')) {
        if (term == "con")
            mask[0] = true;
        else if (term == "dist")
            mask[1] = true;
        else if (term == "align")
            mask[2] = true;
        else if (term == "ref")
            mask[3] = true;
        else
            throw config_error("unknown loss term '" + term + "' (expected con, dist, align, ref)");
        any = true;
    }
    if (!any) throw config_error("loss term list is empty");
    return mask;
}

struct TrainArgs {
    std::string corpus, ckpt, metrics, best_ckpt, aug_config, placement = "stu", loss_terms;
    pl::TrainConfig tc;
    bool no_topoaug = false, no_dbc = false;
};

int run_train_toy(TrainArgs& a) {
    a.tc.use_topoaug = !a.no_topoaug;
    a.tc.use_dbc = !a.no_dbc;
    a.tc.placement = a.placement == "stu"   ? pl::Placement::stu
                     : a.placement == "tea" ? pl::Placement::tea
                                            : pl::Placement::both;
    if (!a.loss_terms.empty()) a.tc.loss_term_mask = parse_loss_terms(a.loss_terms);
    if (!a.aug_config.empty()) a.tc.aug = parse_aug_config(io::read_config(a.aug_config));
    pl::validate(a.tc);

    const std::vector<pl::SyntheticScene> corpus = pl::load_corpus(a.corpus);
    const pl::TrainResult res = pl::train_loop(corpus, a.tc);

    pl::save_checkpoint(a.ckpt, res.state);
    if (!a.best_ckpt.empty()) pl::save_checkpoint(a.best_ckpt, res.best);
    std::string csv = pl::metrics_csv_header() + "\n";
    for (const pl::EpochMetrics& m : res.history) csv += pl::metrics_csv_row(m) + "\n";
    io::write_text_file(a.metrics, csv);

    json j;
    j["epochs"] = a.tc.epochs;
    j["history_rows"] = res.history.size();
    j["best_epoch"] = res.best_epoch;
    j["best_miou"] = res.best_miou;
    j["final_miou"] = res.history.empty() ? json(nullptr) : json(res.history.back().miou);
    j["ckpt"] = a.ckpt;
    j["metrics"] = a.metrics;
    std::cout << j.dump() << "\n";
    return 0;
}

int run_eval(const std::string& corpus_dir, const std::string& ckpt, const std::string& pred) {
    if (ckpt.empty() == pred.empty())
        throw config_error("eval: exactly one of --ckpt or --pred is required");
    const std::vector<pl::SyntheticScene> corpus = pl::load_corpus(corpus_dir);
    toposeg::eval::Metrics m;
    if (!ckpt.empty()) {
        const pl::ModelState state = pl::load_checkpoint(ckpt);
        m = pl::evaluate(corpus, state);
    } else {
        // predicted label maps on disk, one scene_%04d_labels.pgm per scene
        std::vector<std::vector<int>> preds;
        int classes = pl::kTrueClasses;
        for (size_t i = 0; i < corpus.size(); ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "scene_%04zu_labels.pgm", i);
            const std::string path = (std::filesystem::path(pred) / name).string();
            const io::GrayImage gi = io::read_pgm(path);
            if (gi.width != corpus[i].width || gi.height != corpus[i].height)
                throw config_error("eval: prediction " + path + " does not match the scene extents");
            std::vector<int> labels(static_cast<size_t>(gi.width) * gi.height);
            for (size_t p = 0; p < labels.size(); ++p) {
                labels[p] = gi.pixels[p];
                classes = std::max(classes, labels[p] + 1);
            }
            preds.push_back(std::move(labels));
        }
        toposeg::eval::ConfusionMatrix cm(classes);
        for (size_t i = 0; i < corpus.size(); ++i)
            for (size_t p = 0; p < preds[i].size(); ++p) cm.add(preds[i][p], corpus[i].labels[p]);
        m = toposeg::eval::metrics(cm);
    }
    std::cout << toposeg::eval::to_json(m) << "\n";
    return 0;
}

int run_infer(const std::string& in, const std::string& ckpt, const std::string& out) {
    const ImageRGB8 img = io::read_image_rgb(in);
    const pl::ModelState state = pl::load_checkpoint(ckpt);
    const std::vector<int> labels = pl::infer(img, state);
    const int maxval = state.c <= 256 ? 255 : 65535;
    io::GrayImage gi(img.width, img.height, maxval);
    std::vector<int64_t> per_class(static_cast<size_t>(state.c), 0);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const int lab = labels[static_cast<size_t>(y) * img.width + x];
            gi.at(x, y) = static_cast<uint16_t>(lab);
            ++per_class[static_cast<size_t>(lab)];
        }
    io::write_pgm(out, gi);
    json j;
    j["width"] = img.width;
    j["height"] = img.height;
    j["classes"] = state.c;
    j["class_pixels"] = per_class;
    j["out"] = out;
    std::cout << j.dump() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"topological segmentation toolbox"};
    app.require_subcommand(1);
    int rc = 0;

    // augment
    std::string aug_in, aug_out, aug_cfg;
    uint64_t aug_seed = 0;
    CLI::App* aug = app.add_subcommand("augment", "apply one randomized lightness morphology operator");
    aug->add_option("--in", aug_in, "input image (png, ppm, or pgm)")->required();
    aug->add_option("--out", aug_out, "output image (png or ppm)")->required();
    aug->add_option("--config", aug_cfg, "key=value augmentation config");
    aug->add_option("--seed", aug_seed, "sampling seed");
    aug->callback([&]() { rc = run_augment(aug_in, aug_out, aug_cfg, aug_seed); });

    // boxcount
    std::string bx_in, bx_mode = "soft", bx_out;
    std::vector<int> bx_scales;
    CLI::App* bx = app.add_subcommand("boxcount", "per-scale box occupancy counts of a grayscale map");
    bx->add_option("--in", bx_in, "single-channel input (pgm or grayscale png)")->required();
    bx->add_option("--scales", bx_scales, "comma-separated box sizes")->required()->delimiter(',');
    bx->add_option("--mode", bx_mode, "hard or soft counting")
        ->check(CLI::IsMember({"hard", "soft"}));
    bx->add_option("--out", bx_out, "output csv path")->required();
    bx->callback([&]() { rc = run_boxcount(bx_in, bx_scales, bx_mode, bx_out); });

    // fracdim
    std::string fd_in;
    std::vector<int> fd_scales;
    CLI::App* fd = app.add_subcommand("fracdim", "box-counting dimension of a grayscale map");
    fd->add_option("--in", fd_in, "single-channel input (pgm or grayscale png)")->required();
    fd->add_option("--scales", fd_scales, "comma-separated box sizes")->required()->delimiter(',');
    fd->callback([&]() { rc = run_fracdim(fd_in, fd_scales); });

    // gradcheck
    uint64_t gc_seed = 42;
    CLI::App* gch = app.add_subcommand("gradcheck", "finite-difference audit of every differentiable op");
    gch->add_option("--seed", gc_seed, "input sampling seed");
    gch->callback([&]() { rc = run_gradcheck(gc_seed); });

    // gen-corpus
    std::string gen_out;
    int gen_count = 200;
    uint64_t gen_seed = 0;
    CLI::App* gen = app.add_subcommand("gen-corpus", "synthesize a desk-scale segmentation corpus");
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--count", gen_count, "number of scenes");
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->callback([&]() { rc = run_gen_corpus(gen_out, gen_count, gen_seed); });

    // train-toy
    TrainArgs ta;
    std::vector<int> tr_scales;
    CLI::App* tr = app.add_subcommand("train-toy", "train the teacher-student pipeline on a corpus");
    tr->add_option("--corpus", ta.corpus, "corpus directory")->required();
    tr->add_option("--ckpt", ta.ckpt, "output checkpoint (final state)")->required();
    tr->add_option("--metrics", ta.metrics, "output metrics csv")->required();
    tr->add_option("--best-ckpt", ta.best_ckpt, "also write the best-mIoU checkpoint here");
    tr->add_option("--epochs", ta.tc.epochs, "training epochs");
    tr->add_option("--batch", ta.tc.batch, "scenes per step");
    tr->add_option("--lr", ta.tc.lr, "learning rate");
    tr->add_option("--momentum", ta.tc.momentum, "sgd momentum");
    tr->add_option("--seed", ta.tc.seed, "training seed");
    tr->add_option("--classes", ta.tc.c, "prototype count");
    tr->add_option("--scales", tr_scales, "comma-separated box sizes")->delimiter(',');
    tr->add_option("--eval-every", ta.tc.eval_every, "evaluation cadence in epochs");
    tr->add_option("--w-con", ta.tc.weights.l_con, "contrastive weight");
    tr->add_option("--w-dist", ta.tc.weights.l_dist, "distillation weight");
    tr->add_option("--w-align", ta.tc.weights.l_align, "alignment weight");
    tr->add_option("--w-ref", ta.tc.weights.l_ref, "refinement weight");
    tr->add_option("--tau", ta.tc.weights.tau, "contrastive temperature");
    tr->add_option("--tau-seg", ta.tc.tau_seg, "segmentation softmax temperature");
    tr->add_option("--d-enc", ta.tc.d_enc, "encoder width");
    tr->add_option("--d-emb", ta.tc.d_emb, "embedding width");
    tr->add_option("--d-feat", ta.tc.d_feat, "projection feature width");
    tr->add_option("--hidden", ta.tc.hidden, "projection hidden width");
    tr->add_option("--contrastive-cap", ta.tc.contrastive_cap, "max contrastive sites per step");
    tr->add_option("--aug-config", ta.aug_config, "key=value augmentation config");
    tr->add_flag("--no-topoaug", ta.no_topoaug, "disable the topological augmentation");
    tr->add_flag("--no-dbc", ta.no_dbc, "disable the box-counting descriptor branch");
    tr->add_option("--topoaug-placement", ta.placement, "which branch sees the augmentation")
        ->check(CLI::IsMember({"stu", "tea", "both"}));
    tr->add_option("--loss-terms", ta.loss_terms, "subset of con,dist,align,ref to keep active");
    tr->callback([&]() {
        if (!tr_scales.empty()) ta.tc.scales = tr_scales;
        rc = run_train_toy(ta);
    });

    // eval
    std::string ev_corpus, ev_ckpt, ev_pred;
    CLI::App* ev = app.add_subcommand("eval", "Hungarian-matched metrics against corpus ground truth");
    ev->add_option("--corpus", ev_corpus, "corpus directory")->required();
    ev->add_option("--ckpt", ev_ckpt, "checkpoint to run inference with");
    ev->add_option("--pred", ev_pred, "directory of predicted scene_%04d_labels.pgm maps");
    ev->callback([&]() { rc = run_eval(ev_corpus, ev_ckpt, ev_pred); });

    // infer
    std::string in_in, in_ckpt, in_out;
    CLI::App* inf = app.add_subcommand("infer", "label an image with a trained checkpoint");
    inf->add_option("--in", in_in, "input image")->required();
    inf->add_option("--ckpt", in_ckpt, "checkpoint path")->required();
    inf->add_option("--out", in_out, "output label map (pgm)")->required();
    inf->callback([&]() { rc = run_infer(in_in, in_ckpt, in_out); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 3;
    } catch (const toposeg::io_error& e) {
        std::cerr << "toposeg: " << e.what() << "\n";
        return 2;
    } catch (const config_error& e) {
        std::cerr << "toposeg: " << e.what() << "\n";
        return 3;
    } catch (const numeric_error& e) {
        std::cerr << "toposeg: " << e.what() << "\n";
        return 4;
    } catch (const std::invalid_argument& e) {
        std::cerr << "toposeg: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "toposeg: internal error: " << e.what() << "\n";
        return 1;
    }
    return rc;
}
