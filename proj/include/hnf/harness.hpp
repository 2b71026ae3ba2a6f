#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "hnf/fusionhead.hpp"
#include "hnf/hnf.hpp"
#include "hnf/patcher.hpp"
#include "hnf/tensor.hpp"
#include "hnf/textknow.hpp"

namespace hnf {

// ---------------------------------------------------------------------------
// Image IO
// ---------------------------------------------------------------------------

// Decodes a PNG or JPEG file into a {h, w, c} tensor with values in [0, 1].
// c is 1 for grayscale sources and 3 otherwise. Throws UndecodableImage with
// the offending path on unreadable files or unsupported extensions.
Tensor decode_image(const std::string& path);

// Writes a {h, w, c} tensor (values clamped to [0, 1], c in {1, 3}) as an
// 8-bit PNG.
void write_png(const std::string& path, const Tensor& image);

// Replicates grayscale planes or averages color planes so the result has
// exactly `channels` planes.
Tensor convert_channels(const Tensor& image, int64_t channels);

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

enum class Provenance { disk, synthetic };

struct Dataset {
    std::vector<Micrograph> items;
    std::vector<std::string> label_names;
    Provenance provenance = Provenance::synthetic;

    int64_t classes() const { return static_cast<int64_t>(label_names.size()); }
};

// Loads `root/<category>/<image>` into a dataset. Category directories map to
// labels in lexicographic order and files are visited in sorted order.
Dataset ingest_dataset(const std::string& root);

// Deterministic grayscale texture dataset: class k draws from the family
// {stripes, dots, checker}[k % 3] at a coarseness that grows with k / 3, with
// 5% uniform pixel noise on top. classes must lie in [2, 10].
Dataset generate_synthetic_dataset(int64_t classes, int64_t per_class, int64_t size,
                                   uint64_t seed);

struct FoldSplit {
    std::vector<int64_t> train;
    std::vector<int64_t> val;
};

// Stratified k-fold assignment. Membership depends only on each item's label,
// source_id and the seed, never on the order items appear in the dataset.
std::vector<FoldSplit> kfold_split(const Dataset& ds, int64_t k, uint64_t seed);

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
    int64_t d = 64;
    int64_t batch = 48;
    int64_t epochs = 50;
    double lr = 1e-3;
    std::vector<int64_t> patch_sizes{16, 28, 32};
    std::vector<int64_t> knn{10, 6, 4};
    int64_t k_cheb = 3;
    int64_t h = 4;
    int64_t d_h = 16;
    int64_t folds = 10;
    uint64_t seed = 1;
    int64_t plateau_patience = 5;
    double lr_factor = 0.5;
    int64_t early_stop_patience = 10;
    double mask_rate = 0.15;
    double aux_match_weight = 0.5;
    // Desk-scale knobs beyond the core hyperparameters.
    int64_t image_hw = 224;
    int64_t enc_heads = 4;
    int64_t ffn_hidden = 128;
    int64_t ode_steps = 8;
    int64_t lm_ffn = 128;
    int64_t lm_max_len = 128;
    int64_t lm_epochs = 1;
    int64_t fold_limit = 0;
};

// Throws std::invalid_argument when a field is non-positive, folds < 2,
// patch_sizes and knn disagree in length, or a patch does not divide image_hw.
void validate_config(const TrainConfig& cfg);

// key=value config text, one pair per line, lists bracketed. parse accepts
// '#' comments and blank lines and throws std::invalid_argument on unknown
// keys or malformed values.
std::string config_to_text(const TrainConfig& cfg);
TrainConfig parse_config_text(const std::string& text, TrainConfig base = TrainConfig{});
TrainConfig load_config_file(const std::string& path, TrainConfig base = TrainConfig{});
void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value);

struct ModelSpec {
    HnfConfig vision;
    FusionConfig fusion;
    SmallLMConfig lm;
};

ModelSpec model_spec(const TrainConfig& cfg, int64_t channels = 1);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricRow {
    int64_t fold = 0;
    int64_t epoch = 0;
    std::string split;
    std::string metric;
    double value = 0.0;
};

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_metrics_csv(const std::string& path);

struct PrfMetrics {
    std::vector<double> precision;
    std::vector<double> recall;
    std::vector<double> f1;
    std::vector<bool> zero_division;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
};

// Precision, recall and F1 from a confusion matrix indexed [true][predicted].
// Zero-denominator classes score 0 and raise the matching flag.
PrfMetrics prf_from_confusion(const std::vector<std::vector<int64_t>>& confusion);

// Fraction of items whose true label appears among the n highest
// probabilities; probability ties resolve toward the lower class index.
double topn_accuracy(const std::vector<Tensor>& probs, const std::vector<int64_t>& labels,
                     int64_t n);

struct EvalReport {
    std::map<int64_t, double> topn;
    PrfMetrics prf;
    std::vector<std::vector<int64_t>> confusion;
    std::vector<std::string> notes;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct CheckpointMeta {
    std::string config_text;
    int64_t epoch = 0;
    std::vector<std::string> label_names;
    std::vector<MetricRow> history;
};

struct Checkpoint {
    ParamSet params;
    CheckpointMeta meta;
};

// Binary tensor archive: magic, manifest, raw little-endian data and a SHA-256
// trailer. The metadata overload also writes a JSON sidecar at path.meta.json
// which load_checkpoint picks up when present.
void save_checkpoint(const ParamSet& params, const std::string& path);
void save_checkpoint(const ParamSet& params, const std::string& path,
                     const CheckpointMeta& meta);
Checkpoint load_checkpoint(const std::string& path);

// Throws IncompatibleConfig when the checkpoint was produced under a model
// geometry that disagrees with cfg.
void ensure_compatible(const Checkpoint& ckpt, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

struct TrainResult {
    Checkpoint best;
    std::vector<MetricRow> history;
    std::vector<std::string> warnings;
};

// Fresh trainable parameter set for one fold: vision stack, fusion head,
// the (already pretrained) language model and the text query/match vectors.
ParamSet init_model_params(const TrainConfig& cfg, int64_t classes, int64_t channels,
                           const SmallLM& lm, uint64_t seed);

// Full pipeline: pretrain the masked LM on the fixture corpus, then run
// stratified k-fold training of the vision + fusion stack with the matching
// auxiliary loss, plateau-halving and early stopping. Returns the checkpoint
// of the best validation fold plus the complete metric history.
TrainResult train_model(const Dataset& ds, const TrainConfig& cfg,
                        const std::string& fixture_path);

// Class probabilities for one item under a trained checkpoint.
Tensor predict_probabilities(const Micrograph& item, const Checkpoint& ckpt);

// Metrics over ds restricted to `split` (item indices). Empty split throws
// EmptySplit; a class count mismatch with the checkpoint throws
// IncompatibleConfig.
EvalReport evaluate_model(const Checkpoint& ckpt, const Dataset& ds,
                          const std::vector<int64_t>& split);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

// Renders per-fold validation-loss curves from metric rows as a standalone
// SVG document.
std::string render_loss_svg(const std::vector<MetricRow>& rows);

// Scans run_dir for metrics*.csv, writes summary.csv (final validation
// metrics per fold) and loss.svg into out_dir, and returns the files written.
std::vector<std::string> write_report(const std::string& run_dir, const std::string& out_dir);

}  // namespace hnf
