#pragma once

// Experiment configuration, stage orchestration, metrics and reports.
//
// A run directory holds one sub-directory per seed:
//   seed_<s>/data/       PCSET v1 (source_train, target_train, target_test)
//   seed_<s>/warmup/     rec.rrck, cls.rrck, initial.plbl, history.jsonl
//   seed_<s>/refine/     refined.plbl, report.json
//   seed_<s>/selftrain/  model.rrck, epochs.jsonl, iterations.jsonl
//   seed_<s>/report.json
// Every artifact records the hash of the config keys that produced it; a
// stage refuses inputs whose hash does not match the current config.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "refrec/data.hpp"
#include "refrec/pseudolabel.hpp"
#include "refrec/refine.hpp"
#include "refrec/selftrain.hpp"
#include "refrec/warmup.hpp"

namespace refrec::harness {

using json = nlohmann::json;

struct ExperimentConfig {
  std::vector<std::string> classes = {"sphere", "cube", "cylinder", "cone"};
  int points = 256;
  int source_per_class = 50;
  int target_per_class = 50;
  int test_per_class = 50;
  geometry::Corruption source_corruption{};
  geometry::Corruption target_corruption{0.25, 0.5, 0.02, 2.0};

  std::vector<int> encoder_widths = {64, 64, 128};
  std::vector<int> decoder_widths = {256, 512};
  int head_hidden = 64;

  int recon_epochs = 60;
  int cls_epochs = 15;
  int selftrain_epochs = 15;
  int batch_size = 16;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double chamfer_weight = 1.0;
  double emd_weight = 1.0;
  std::string emd_solver = "exact";
  double auction_epsilon = 1e-3;
  double aug_occlusion_min = 0.25;
  double aug_occlusion_max = 0.5;
  double val_fraction = 0.1;

  double g = 0.10;
  int k = 3;
  std::string refine_metric = "euclidean";

  double ema_decay = 0.99;
  bool teacher_prototypes = false;

  bool synthetic_to_real = true;
  bool no_transfer = false;
  bool no_dual_head = false;
  bool no_ema = false;
  bool no_online_refine = false;
  bool no_offline_refine = false;
  bool single_head = false;

  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::string out = "out";

  json to_json() const;
  /// Unknown keys and type mismatches are errors.
  static ExperimentConfig from_json(const json& j);
  /// `key=value` where value is parsed as JSON, falling back to a string.
  void set(const std::string& assignment);

  model::ModelConfig model_config() const;
  warmup::WarmupConfig warmup_config(std::uint64_t seed) const;
  refine::RefineOptions refine_options() const;
  selftrain::SelfTrainConfig selftrain_config(std::uint64_t seed) const;
};

ExperimentConfig preset(const std::string& name);  // "desk" or "paper"
ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const ExperimentConfig& cfg);

enum class Stage { data, warmup, refine, selftrain };
const char* stage_name(Stage s);
/// Hash of every config key that influences `stage` (and its upstream stages).
std::string stage_hash(const ExperimentConfig& cfg, Stage s);

// ---------------------------------------------------------------------------
// Metrics (evaluation only).

struct Accuracy {
  double overall = 0.0;
  std::vector<double> per_class;               // recall per true class, NaN-free: 0 for absent classes
  std::vector<std::vector<long>> confusion;    // [truth][prediction]
  json to_json() const;
};
Accuracy accuracy(std::span<const int> preds, std::span<const int> truths, int classes);

struct LabelQuality {
  double overall = 0.0;
  long count = 0;
  std::vector<std::pair<std::string, std::pair<double, long>>> by_split;  // split name -> (accuracy, count)
  double of(const std::string& split) const;
  json to_json() const;
};
LabelQuality pseudo_label_quality(const PseudoLabelState& pls, const TargetTruth& truth);

// ---------------------------------------------------------------------------
// Stages.

struct DataBundle {
  SourceSet source;
  TargetSet target;
  TargetTruth truth;
  TargetSet test;
  TargetTruth test_truth;
};

DataBundle generate_data(const ExperimentConfig& cfg, std::uint64_t seed);

struct WarmupOutput {
  model::EncoderParams rec_encoder;
  model::DecoderParams decoder;
  model::EncoderParams cls_encoder;
  model::HeadParams head;
  PseudoLabelState initial;
  std::vector<warmup::EpochLog> recon_history, cls_history;
  double best_val_accuracy = 0.0;
};
WarmupOutput run_warmup(const ExperimentConfig& cfg, std::uint64_t seed, const DataBundle& data,
                        const warmup::Progress& progress = {});

struct RefineOutput {
  PseudoLabelState refined;
  refine::RefineReport report;
};
RefineOutput run_refine(const ExperimentConfig& cfg, const WarmupOutput& w, const TargetSet& target);

selftrain::SelfTrainResult run_selftrain(const ExperimentConfig& cfg, std::uint64_t seed, const DataBundle& data,
                                         const WarmupOutput& w, const PseudoLabelState& refined,
                                         const selftrain::Progress& progress = {},
                                         const selftrain::Evaluator& evaluate = {});

/// Source-only classifier from a random backbone without augmentation,
/// evaluated on the target test split.
Accuracy no_adaptation_baseline(const ExperimentConfig& cfg, std::uint64_t seed, const DataBundle& data);

struct RunReport {
  std::uint64_t seed = 0;
  std::string config_hash;
  json metrics;     // everything compared for determinism
  json wall_clock;  // seconds per stage; excluded from comparisons
  json to_json() const;
};

/// Data, warm-up and No-Adaptation results keyed by seed and warm-up hash.
/// Runs that differ only in downstream flags can share one entry.
struct WarmupCache {
  struct Entry {
    DataBundle data;
    WarmupOutput warmup;
    Accuracy no_adaptation;
  };
  std::map<std::string, std::shared_ptr<const Entry>> entries;
};

/// All stages in memory. When `dir` is set the stage artifacts are written there.
RunReport run_pipeline(const ExperimentConfig& cfg, std::uint64_t seed,
                       const std::optional<std::filesystem::path>& dir = std::nullopt, bool verbose = false,
                       WarmupCache* cache = nullptr);

// ---------------------------------------------------------------------------
// Artifact-based stages for the CLI. Each reads the previous stage's files
// from `dir` (a seed directory) and writes its own.

void stage_data(const ExperimentConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir);
void stage_warmup(const ExperimentConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir, bool verbose);
void stage_refine(const ExperimentConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir);
void stage_selftrain(const ExperimentConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir, bool verbose);
/// Evaluates the self-trained model (or an untrained one) on the target test split.
Accuracy stage_eval(const ExperimentConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir, bool untrained);

DataBundle load_data(const ExperimentConfig& cfg, const std::filesystem::path& dir);

/// Applies an ablation axis ("offline_refine", "ema", ...) with the component on or off.
ExperimentConfig with_axis(const ExperimentConfig& cfg, const std::string& axis, bool enabled);
const std::vector<std::string>& ablation_axes();
/// Runs every seed with `axis` on and off under out/ablate_<axis>/ and writes
/// ablation.csv there. Returns per-seed final accuracies and their means.
/// Warm-up results are shared between the on and off runs when the axis does
/// not touch the warm-up.
json ablate(const ExperimentConfig& cfg, const std::string& axis, bool verbose = false, WarmupCache* cache = nullptr);

// ---------------------------------------------------------------------------
// Reports.

std::string csv_escape(const std::string& field);
std::string csv_row(const std::vector<std::string>& fields);
/// Simple line plot of one or more series over a shared x axis.
std::string svg_line_plot(const std::string& title, const std::vector<std::pair<std::string, std::vector<double>>>& series);
/// Reads seed_*/report.json under `out` and writes summary.csv, summary.json and plots.
json aggregate_reports(const std::filesystem::path& out);

}  // namespace refrec::harness
