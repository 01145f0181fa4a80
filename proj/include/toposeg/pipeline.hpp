#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "toposeg/boxcount.hpp"
#include "toposeg/eval.hpp"
#include "toposeg/graph.hpp"
#include "toposeg/image.hpp"
#include "toposeg/losses.hpp"
#include "toposeg/morph.hpp"
#include "toposeg/tensor.hpp"

namespace toposeg::pipeline {

constexpr int kCanvas = 64;
constexpr int kTrueClasses = 4;

/// One synthetic sample: photo-corrupted rendering, ground-truth depth
/// with nearer shapes at larger values, and the label map assigned before
/// any photometric corruption.
struct SyntheticScene {
    ImageRGB8 image;
    Tensor depth;            // [1,H,W] in [0,1]
    std::vector<int> labels; // H*W row-major, values in [0, kTrueClasses)
    int height = 0;
    int width = 0;
};

/// Deterministic per seed; scene i depends only on (seed, i).
std::vector<SyntheticScene> generate_corpus(int n, uint64_t seed);

// Directory layout: corpus.cfg manifest plus, per scene i,
// scene_%04d.png / scene_%04d_depth.pgm (16-bit) / scene_%04d_labels.pgm.
void save_corpus(const std::string& dir, const std::vector<SyntheticScene>& corpus);
std::vector<SyntheticScene> load_corpus(const std::string& dir);

/// Spherical k-means output over P embedding rows.
struct ClusterResult {
    Tensor prototypes;            // [C,D] unit rows
    std::vector<int> assignments; // P entries in [0,C)
    Tensor onehot;                // [P,C]
    Tensor soft;                  // [P,C] softmax of cosine/tau per row
};

/// k-means++ seeding, iteration cap 50, movement tolerance 1e-6, cosine
/// assignment with ties to the lowest index, empty clusters re-seeded from
/// the farthest point. Fitting subsamples at most 4096 rows (deterministic
/// in seed); assignment always covers every row. P < c throws
/// std::invalid_argument.
///
/// A warm start ([c,D] rows, renormalized) replaces the k-means++ seeding.
/// Training passes the previous step's prototypes here: without the carry
/// the per-batch partitions churn and distillation degenerates into a
/// uniform target.
ClusterResult prototypical_cluster(const Tensor& embeddings, int c, uint64_t seed, double tau,
                                   const Tensor* warm_start = nullptr);

enum class Placement { stu, tea, both };

/// Loss-term order used by masks and CSV columns: con, dist, align, ref.
struct TrainConfig {
    int epochs = 30;
    int batch = 8;
    double lr = 0.05;
    double momentum = 0.9;
    uint64_t seed = 0;
    losses::LossWeights weights;
    morph::AugConfig aug;
    std::vector<int> scales = {1, 2, 4, 8, 16};
    int c = kTrueClasses;
    bool use_topoaug = true;
    bool use_dbc = true;
    Placement placement = Placement::stu;
    std::array<bool, 4> loss_term_mask = {true, true, true, true};
    int eval_every = 5;

    // model dimensions
    int d_enc = 8;
    int d_emb = 8;
    int d_feat = 16;
    int hidden = 32;
    double tau_seg = 0.2;   // softmax temperature over prototype cosines
    int contrastive_cap = 4096;
};
void validate(const TrainConfig& cfg);

/// Trainable state: shared three-layer stride-preserving encoder, 1x1
/// pseudo/seg heads to the embedding space, 1x1 aux head over encoder
/// features fused with the broadcast descriptor vector, projection heads,
/// and the prototype matrix refreshed by each teacher pass.
struct ModelState {
    Tensor enc_w1, enc_b1, enc_w2, enc_b2, enc_w3, enc_b3;
    Tensor pseudo_w, pseudo_b;
    Tensor seg_w, seg_b;
    Tensor aux_w, aux_b;
    boxcount::ProjectionHeads proj;
    Tensor prototypes;             // [c, d_emb] unit rows
    std::vector<Tensor> momentum;  // parallel to parameter order
    int c = 0;
    int d_enc = 0;
    int d_emb = 0;
    int d_feat = 0;
    int hidden = 0;
    int scale_count = 0;
};

ModelState make_model(const TrainConfig& cfg, uint64_t seed);

/// Fixed parameter enumeration shared by the optimizer and the checkpoint
/// writer; the prototype matrix is state, not a parameter.
std::vector<std::pair<std::string, Tensor*>> named_parameters(ModelState& state);

// Checkpoint of parameters plus prototypes; dimensions are recovered from
// the stored shapes. Missing or inconsistent entries throw io_error.
void save_checkpoint(const std::string& path, const ModelState& state);
ModelState load_checkpoint(const std::string& path);

/// Graph handles for one training step's bound parameters.
struct ModelVars {
    Var enc_w1, enc_b1, enc_w2, enc_b2, enc_w3, enc_b3;
    Var pseudo_w, pseudo_b;
    Var seg_w, seg_b;
    Var aux_w, aux_b;
    boxcount::HeadVars proj;
    std::vector<Var> ordered; // same order as named_parameters
};
ModelVars bind(Graph& g, const ModelState& state, bool trainable);

/// Teacher pass products. Cluster products are plain tensors, so nothing
/// downstream can push gradient into the teacher branch; the descriptor
/// projections are live graph nodes training the projection heads.
/// Clustering runs on mean-centered embedding rows, so prototypes are unit
/// rows of the centered space.
struct TeacherForward {
    Var emb;                      // [B,d_emb,H,W] raw pseudo head output
    Tensor prototypes;            // [c,d_emb]
    std::vector<int> assignments; // B*H*W in (b,y,x) row-major order
    Tensor m_pseudo;              // [B,c,H,W] one-hot
    Tensor soft;                  // [B,c,H,W]
    Var f_app, f_geo, f_dbc;      // valid only when cfg.use_dbc
};

/// Student pass products. p_seg is the softmax over prototype cosines;
/// m_seg its hard argmax (ties to the lowest class index). emb is the seg
/// head output centered by the view's per-channel mean, the same space the
/// teacher's prototypes are clustered in.
struct StudentForward {
    Var emb;      // [B,d_emb,H,W]
    Var p_seg;    // [B,c,H,W]
    Tensor m_seg; // [B,c,H,W] one-hot
    Var m_aux;    // valid only when cfg.use_dbc
};

using Batch = std::vector<const SyntheticScene*>;

// The teacher sees the clean image unless placement routes the augmentation
// at it; the student mirrors that on its own side. Both run on the same
// graph so the student can consume the teacher's descriptor projections.
// When prev_prototypes is given, fresh clusters are renamed onto its slots
// by maximum-cosine matching so cluster identity stays stable across steps.
TeacherForward forward_teacher(Graph& g, const Batch& batch, const ModelVars& vars, const TrainConfig& cfg,
                               uint64_t step_seed, const Tensor* prev_prototypes = nullptr);
StudentForward forward_student(Graph& g, const Batch& batch, const ModelVars& vars, const TeacherForward& teacher,
                               const TrainConfig& cfg, uint64_t step_seed);

struct StepLosses {
    double con = 0.0, dist = 0.0, align = 0.0, ref = 0.0, total = 0.0;
};

/// One optimization step: teacher, student, masked four-term loss,
/// backward, SGD with momentum. Masked terms are still evaluated and
/// reported; their gradient contribution is exactly zero. Non-finite loss
/// or parameters throw numeric_error carrying a per-term dump.
StepLosses train_step(const Batch& batch, ModelState& state, const TrainConfig& cfg, uint64_t step_seed);

/// Label map (H*W row-major) from the plain encoder + seg head + prototype
/// argmax path; no augmentation, descriptors, or refinement. Embeddings are
/// centered by the image's own per-channel mean before the cosine.
std::vector<int> infer(const ImageRGB8& image, const ModelState& state);

/// Whole-corpus confusion merged before a single Hungarian matching.
eval::Metrics evaluate(const std::vector<SyntheticScene>& corpus, const ModelState& state);

struct EpochMetrics {
    int epoch = 0;
    double acc = 0.0;
    double miou = 0.0;
    StepLosses mean_losses; // averaged over the epoch's steps
};

struct TrainResult {
    ModelState state;       // final
    ModelState best;        // highest mIoU seen at an evaluation point
    double best_miou = 0.0;
    int best_epoch = 0;
    std::vector<EpochMetrics> history;
};

/// Seeded shuffling per epoch; evaluation every cfg.eval_every epochs and
/// always after the last. epochs == 0 returns the initial state untouched
/// with empty history.
TrainResult train_loop(const std::vector<SyntheticScene>& corpus, const TrainConfig& cfg);

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& m);

} // namespace toposeg::pipeline
