#pragma once

// Training objective, loop, checkpoints and the ablation suite.
//
//   L = L_CE(Y, Y_do) + lambda1 L_cluster(Z_S, P_S) + lambda2 L_proto(Z_C, P_C) + beta L_MI(Z_C, Z_S)

#include "causalproto/datagen.hpp"
#include "causalproto/explain.hpp"
#include "causalproto/intervention.hpp"
#include "causalproto/metrics.hpp"
#include "causalproto/mi_club.hpp"
#include "causalproto/model.hpp"
#include "causalproto/proto_spaces.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace causalproto::train {

/// Ablation switches. erm_baseline excludes every other flag.
struct Ablation {
  bool no_mi = false;
  bool no_cluster = false;
  bool no_do = false;
  bool shared_proto = false;
  bool erm_baseline = false;

  bool any() const { return no_mi || no_cluster || no_do || shared_proto || erm_baseline; }
  /// "full", a single flag name, or flags joined with '+'.
  std::string variant_name() const;
  /// Accepts "full", "", "erm" and '+'- or ','-separated flag names.
  static Ablation parse(const std::string& text);
  friend bool operator==(const Ablation&, const Ablation&) = default;
};

/// The six rows of the ablation table, in output order.
std::vector<Ablation> standard_variants();

struct TrainConfig {
  double lambda1 = 0.1;
  double lambda2 = 0.1;
  double beta = 0.5;
  int K_per_class = 10;
  /// Treat K_per_class as a total split evenly over classes.
  bool k_is_total = false;
  int M = 50;
  model::EncoderSpec encoder;
  int fusion_hidden = 128;
  int q_hidden = 128;
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  int epochs = 20;
  int batch_size = 32;
  int projection_period = 10;
  /// Epochs before the first periodic projection; -1 means projection_period.
  int projection_warmup = -1;
  std::uint64_t seed = 0;
  Ablation ablation;

  double tau = 0.1;
  double margin = 1.0;
  proto::DistanceKind classifier_distance = proto::DistanceKind::euclidean;
  proto::DistanceKind regularizer_distance = proto::DistanceKind::squared;
  intervention::PoolingMode nwgm_mode = intervention::PoolingMode::arithmetic;
  /// Block the CE gradient from reaching the spurious prototypes.
  bool freeze_ps_in_ce = false;
  /// Contexts drawn per step for the training-time intervention; 0 uses all M.
  int subsample_contexts = 0;
  /// Std of the N(0, s^2) prototype initialisation.
  double proto_init_scale = 0.5;
  /// Before the first step, seed prototypes with latents of training images
  /// (spurious: the first M of the epoch-0 order; causal: the first K per class).
  bool data_init_prototypes = true;
  /// q's learning rate relative to the main learning rate.
  double q_lr_scale = 1.0;
  /// q updates per main step.
  int q_steps = 1;
  /// Use max(0, L_MI) in the objective; a negative bound estimate only means q lags.
  bool clip_negative_mi = true;
  /// Let the MI penalty's gradient reach the spurious encoder. When false the
  /// penalty only moves z_c, so it cannot be lowered by collapsing z_s.
  bool mi_through_spurious = true;

  int purity_neighbors = 20;
  /// Adam steps used to fit a fresh q on the frozen evaluation latents before the NMI estimate.
  int eval_q_steps = 400;
  double divergence_threshold = 1e6;
  /// Restore the best-validation-BAcc parameters at the end of training.
  bool keep_best = true;

  int num_classes = 3;

  /// Throws ConfigError on negative coefficients, empty dictionaries, ...
  void validate() const;
  int per_class() const;
  int projection_start() const { return projection_warmup < 0 ? projection_period : projection_warmup; }
};

/// Every learnable piece. Only the parts used by the configured variant are trained.
struct Model {
  model::DualEncoder encoder;
  model::FusionNet fusion;
  proto::CausalLibrary causal;
  proto::SpuriousLibrary spurious;
  mi::GaussianCondModel q;
  model::ErmClassifier erm;

  static Model create(const TrainConfig& cfg);

  /// Parameters updated by the main optimiser for this variant.
  std::vector<nn::ParamRef> main_params(const TrainConfig& cfg);
  std::vector<nn::ParamRef> q_params();
  /// Every parameter matrix, for checkpoints.
  std::vector<nn::ParamRef> all_params();

  /// The matrix serving as P_S; the causal matrix under shared_proto.
  const Matrix& spurious_matrix(const TrainConfig& cfg) const;
};

struct LossTerms {
  double ce = 0.0;
  double cluster = 0.0;
  double proto = 0.0;
  double mi = 0.0;
  double total = 0.0;
};

struct TrainState {
  int epoch = 0;             // completed epochs
  std::int64_t step = 0;     // completed optimiser steps
  Model model;
  nn::Adam main_opt;
  nn::Adam q_opt;
  LossTerms running;         // sums over the current epoch
  double running_q_nll = 0.0;
  int running_count = 0;
  std::mt19937_64 rng;       // context subsampling
  double best_val_bacc = -1.0;
  int best_epoch = -1;
  std::optional<Model> best_model;

  static TrainState create(const TrainConfig& cfg);
};

struct Batch {
  Matrix input;  // N x 3HW
  std::vector<int> labels;
};

Batch make_batch(const std::vector<datagen::ImageSample>& samples, const std::vector<int>& index,
                 int image_size);

/// Loss value and per-term breakdown on the current parameters.
/// Throws NumericError naming the first non-finite term.
LossTerms total_loss(const Batch& batch, const TrainState& state, const TrainConfig& cfg);

/// Graph form of total_loss; `b` must be the binding parameters are lifted through.
struct LossGraph {
  ag::Var total;
  LossTerms terms;
};
/// `on_latents` sees the encoder outputs before the MI term reads q, which
/// lets the caller refit q on exactly these latents. `contexts` restricts the
/// intervention to a subset of spurious prototypes (empty: all).
using LatentHook = std::function<void(const Matrix& z_c, const Matrix& z_s)>;
LossGraph build_loss(nn::Binding& b, const Batch& batch, const Model& model,
                     const TrainConfig& cfg, const std::vector<int>& contexts = {},
                     const LatentHook& on_latents = {});

/// One q fit on the batch latents followed by one main optimiser step at `lr`.
LossTerms train_step(TrainState& state, const Batch& batch, const TrainConfig& cfg, double lr);

struct EpochRecord {
  std::string variant;
  int epoch = 0;
  double lr = 0.0;
  LossTerms loss;
  double q_nll = 0.0;
  double val_bacc = 0.0;
  bool projected = false;
};

std::string to_json_line(const EpochRecord& r);

struct TrainOptions {
  /// Called after every epoch.
  std::function<void(const EpochRecord&, const TrainState&)> on_epoch;
  /// Directory for the divergence dump; empty disables the dump.
  std::filesystem::path dump_dir;
  /// Config text stored alongside dumped state.
  std::string config_json;
};

struct TrainResult {
  TrainState state;
  std::vector<EpochRecord> log;
};

TrainResult train(const TrainConfig& cfg, const std::vector<datagen::ImageSample>& train_set,
                  const std::vector<datagen::ImageSample>& val_set, const TrainOptions& opt = {});
TrainResult train(const TrainConfig& cfg, const std::filesystem::path& train_manifest,
                  const std::filesystem::path& val_manifest, const TrainOptions& opt = {});

/// Continues training `state` up to cfg.epochs.
void resume(TrainResult& result, const TrainConfig& cfg,
            const std::vector<datagen::ImageSample>& train_set,
            const std::vector<datagen::ImageSample>& val_set, const TrainOptions& opt = {});

/// Data-dependent prototype initialisation (see TrainConfig::data_init_prototypes).
void init_prototypes_from_data(TrainState& state, const TrainConfig& cfg,
                               const std::vector<datagen::ImageSample>& train_set);

/// Replaces causal prototypes by nearest same-class training latents.
void project(TrainState& state, const TrainConfig& cfg,
             const std::vector<datagen::ImageSample>& train_set);

// --- evaluation ---

/// Class probabilities (N x C) through the variant's inference path.
Matrix predict_probs(const Model& model, const TrainConfig& cfg,
                     const std::vector<datagen::ImageSample>& samples);
std::vector<int> argmax_rows(const Matrix& probs);

struct Latents {
  Matrix z_c;
  Matrix z_s;
  std::vector<int> labels;
  std::vector<std::string> ids;
};
/// Latent features for every sample; for ERM both matrices hold the classifier features.
Latents compute_latents(const Model& model, const TrainConfig& cfg,
                        const std::vector<datagen::ImageSample>& samples);

/// Acc/BAcc/F1 on `test_set`; NMI, purity and Div from the learned latents.
metrics::MetricsReport evaluate(const Model& model, const TrainConfig& cfg,
                                const std::vector<datagen::ImageSample>& train_set,
                                const std::vector<datagen::ImageSample>& test_set);

/// Nearest-latent class prototypes for a model without a causal library (ERM):
/// per class, the training feature closest to the class mean.
proto::CausalLibrary posthoc_prototypes(const Model& model, const TrainConfig& cfg,
                                        const std::vector<datagen::ImageSample>& train_set);

/// Explainer over the variant's inference path. ERM uses post-hoc class
/// prototypes; training images serve as thumbnails.
explain::Explainer make_explainer(const Model& model, const TrainConfig& cfg,
                                  const std::vector<datagen::ImageSample>& train_set);

// --- checkpoints ---

/// Binary archive of every parameter, optimiser moment, library and counter,
/// plus the JSON config text it was trained under.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state,
                     const std::string& config_json);
struct LoadedCheckpoint {
  TrainState state;
  std::string config_json;
};
/// Model shapes come from `cfg`; throws IoError on a malformed or mismatched file.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg);
/// Reads only the stored config text.
std::string checkpoint_config(const std::filesystem::path& path);

// --- ablation suite ---

struct Datasets {
  std::vector<datagen::ImageSample> train;
  std::vector<datagen::ImageSample> val;
  std::vector<datagen::ImageSample> test;
};

struct SuiteOptions {
  std::vector<Ablation> variants = standard_variants();
  /// Fired after each variant is trained and evaluated.
  std::function<void(const Ablation&, std::uint64_t seed, const TrainResult&, const Datasets&,
                     const metrics::MetricsReport&)>
      on_trained;
  TrainOptions train;
};

/// Trains every variant for every seed; `data(seed)` supplies the splits.
/// Rows are ordered seed-major, variants in `opt.variants` order.
std::vector<metrics::MetricsReport> run_ablation_suite(
    const TrainConfig& cfg, const std::function<Datasets(std::uint64_t)>& data,
    const std::vector<std::uint64_t>& seeds, const SuiteOptions& opt = {});

void write_results_csv(const std::filesystem::path& path,
                       const std::vector<metrics::MetricsReport>& rows);
std::vector<metrics::MetricsReport> read_results_csv(const std::filesystem::path& path);

}  // namespace causalproto::train
