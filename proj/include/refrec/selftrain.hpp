#pragma once

// Dual-head self-training with a mean teacher.
//
// Per iteration `it` (global, from 0) the loop draws from Rng(seed).split(kData).split(it):
//   1. B/2 source rows, uniform with replacement (below(|S|) each),
//   2. B - B/2 E_refined ids, uniform with replacement,
//   3. B target ids, uniform with replacement over E_refined and H_refined
//      (entry order of the pseudo-label state).
// With no_dual_head step 2 is skipped and step 1 draws all B rows. Source
// samples are occlusion-augmented with stream split(1000 + position) when
// source_occlusion is set. L_s and L_t are summed, one AdamW step follows and
// then the teacher is updated by EMA.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "json.hpp"
#include "refrec/data.hpp"
#include "refrec/metricspace.hpp"
#include "refrec/model.hpp"
#include "refrec/pseudolabel.hpp"

namespace refrec::selftrain {

// Stream ids below the run seed (warm-up uses 1..4).
inline constexpr std::uint64_t kInitStream = 5;
inline constexpr std::uint64_t kDataStream = 6;

struct SelfTrainConfig {
  model::ModelConfig model;
  int epochs = 15;
  int batch_size = 16;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double ema_decay = 0.99;
  double val_fraction = 0.1;
  bool source_occlusion = true;
  double occlusion_min = 0.25;
  double occlusion_max = 0.5;
  /// Recompute prototypes in teacher feature space at the start of each epoch.
  bool teacher_prototypes = false;
  // Ablation switches.
  bool transfer = true;         // Φ_cls starts from Φ_rec
  bool dual_head = true;        // false: Ψ_s sees source samples only
  bool ema = true;              // false: teacher is a copy of the student
  bool online_refine = true;    // false: α = 0 and z = 1
  bool single_head = false;     // Ψ_t is Ψ_s
  std::uint64_t seed = 0;
};

struct PrototypeTable {
  Matrix eta;                  // k x d
  std::vector<int> support;    // samples per class
  bool defined(int c) const { return support[static_cast<size_t>(c)] > 0; }
  int defined_count() const;
};

/// Class means of `features` rows grouped by `labels`.
PrototypeTable compute_prototypes(const Matrix& features, std::span<const int> labels, int classes);
/// Prototypes of the E_refined members of `pls`; `emb` holds their descriptors.
PrototypeTable compute_prototypes(const PseudoLabelState& pls, const metric::EmbeddingTable& emb);

/// Softmax over defined classes of the negative distances, read at k_hat.
/// Undefined k_hat gives 1 / defined-count.
double plausibility_from_distances(std::span<const double> distances, std::span<const bool> defined, int k_hat);
double plausibility_weight(const Eigen::Ref<const RowVector>& feature, int k_hat, const PrototypeTable& protos);

/// Linear ramp it / total clamped to [0, 1].
double alpha(long it, long total);

/// teacher <- m * teacher + (1 - m) * student, tensor by tensor.
void ema_update(std::span<ad::Value> teacher, std::span<const ad::Value> student, double m);

struct Heads {
  model::EncoderParams encoder;
  model::HeadParams source;
  model::HeadParams target;
  bool shared = false;  // target head aliases the source head

  Heads clone() const;
  /// Deduplicated parameter list (encoder, Ψ_s, then Ψ_t unless shared).
  std::vector<ad::Value> params() const;
};

/// argmax of softmax(Ψ_s) + softmax(Ψ_t) over teacher features, per row.
std::vector<int> online_pseudolabels(const Heads& teacher, const Matrix& teacher_features);

struct IterLog {
  long it = 0;
  double loss_source = 0.0;
  double loss_target = 0.0;
  double alpha = 0.0;
  double mean_z = 1.0;
  double agreement = 1.0;  // online label == refined label rate in the target batch
};

struct EpochLog {
  int epoch = 0;
  double loss_source = 0.0;
  double loss_target = 0.0;
  double alpha = 0.0;
  double mean_z = 1.0;
  double agreement = 1.0;
  double val_accuracy = 0.0;
  double target_accuracy = -1.0;  // eval-only; -1 when no evaluator is given
  nlohmann::json to_json() const;
};

struct SelfTrainResult {
  Heads model;  // best epoch by source-validation accuracy
  double best_val_accuracy = -1.0;
  int best_epoch = -1;
  std::vector<IterLog> iterations;
  std::vector<EpochLog> epochs;
};

using Progress = std::function<void(const EpochLog&)>;
/// Evaluation hook run on the student after every epoch (target accuracy).
using Evaluator = std::function<double(const Heads&)>;

/// Builds L_t for one target batch given teacher-side quantities (treated as
/// constants): (1/B) sum_i z_i [(1 - a) CE(p_i, refined_i) + a CE(p_i, online_i)].
ad::Value target_loss(const ad::Value& logits, std::span<const int> refined, std::span<const int> online,
                      std::span<const double> z, double a);

/// `pls` must carry E_refined / H_refined tags; `rec_encoder` is Φ_rec.
SelfTrainResult selftrain_loop(const SourceSet& source, const TargetSet& target, const PseudoLabelState& pls,
                               const model::EncoderParams& rec_encoder, const SelfTrainConfig& cfg,
                               const Progress& progress = {}, const Evaluator& evaluate = {});

/// Inference path: Φ_cls then Ψ_t then argmax.
std::vector<int> predict(const Heads& model, std::span<const geometry::PointCloud> clouds);

}  // namespace refrec::selftrain
