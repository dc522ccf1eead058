#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "refrec/data.hpp"
#include "refrec/metricspace.hpp"
#include "refrec/model.hpp"
#include "refrec/pseudolabel.hpp"

namespace refrec::warmup {

struct WarmupConfig {
  model::ModelConfig model;
  int recon_epochs = 60;
  int cls_epochs = 15;
  int batch_size = 16;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double chamfer_weight = 1.0;
  double emd_weight = 1.0;
  metric::EmdOptions emd;
  /// Enables occlusion augmentation of source samples (synthetic-to-real).
  bool synthetic_to_real = true;
  bool occlusion_in_reconstruction = true;
  bool occlusion_in_classifier = true;
  double occlusion_min = 0.25;
  double occlusion_max = 0.5;
  double val_fraction = 0.1;
  /// Initialise the classifier backbone from the reconstruction encoder.
  bool transfer = true;
  std::uint64_t seed = 0;
};

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = -1.0;      // training accuracy (classifier stages)
  double val_accuracy = -1.0;  // source validation accuracy (classifier stages)
};

struct ReconstructionResult {
  model::EncoderParams encoder;
  model::DecoderParams decoder;
  std::vector<EpochLog> history;
};

struct ClassifierResult {
  model::EncoderParams encoder;
  model::HeadParams head;
  double best_val_accuracy = 0.0;
  int best_epoch = -1;
  std::vector<EpochLog> history;
};

using Progress = std::function<void(const std::string& stage, const EpochLog&)>;

/// Batch reconstruction loss: mean over the batch of
/// chamfer_weight * CD + emd_weight * EMD between decode(encode(x)) and x.
ad::Value reconstruction_loss(const model::EncoderParams& enc, const model::DecoderParams& dec,
                              std::span<const geometry::PointCloud> batch, const WarmupConfig& cfg);

/// Auto-encoder pre-training on the union of both domains (labels unused).
ReconstructionResult pretrain_reconstruction(const SourceSet& source, const TargetSet& target,
                                             const WarmupConfig& cfg, const Progress& progress = {});

/// Source-only cross-entropy training; backbone starts from `rec_encoder` when
/// cfg.transfer is set. Keeps the epoch with the best source-validation accuracy.
ClassifierResult train_source_classifier(const model::EncoderParams& rec_encoder, const SourceSet& source,
                                         const WarmupConfig& cfg, const Progress& progress = {});

/// lambda_argmax(classify(head, encode(encoder, x))) for every target sample.
PseudoLabelState emit_initial_pseudolabels(const model::EncoderParams& encoder, const model::HeadParams& head,
                                           const TargetSet& target);

/// Mean cross-entropy helper: -(1/normalizer) * sum_i w_i * log softmax(logits)_i[y_i].
/// An empty weight span means unit weights.
ad::Value cross_entropy(const ad::Value& logits, std::span<const int> labels, std::span<const double> weights,
                        double normalizer);

/// Argmax predictions of head(encoder(x)) for a list of clouds.
std::vector<int> predict(const model::EncoderParams& encoder, const model::HeadParams& head,
                         std::span<const geometry::PointCloud> clouds);

}  // namespace refrec::warmup
