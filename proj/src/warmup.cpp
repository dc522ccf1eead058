#include "refrec/warmup.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace refrec::warmup {

namespace {

// Stream ids below the run seed.
constexpr std::uint64_t kReconInit = 1, kReconData = 2, kClsInit = 3, kClsData = 4;

std::vector<ad::Value> concat(std::vector<ad::Value> a, const std::vector<ad::Value>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

geometry::PointCloud maybe_occlude(const geometry::PointCloud& cloud, bool on, const WarmupConfig& cfg, Rng rng) {
  if (!on) return cloud;
  const double f = rng.uniform(cfg.occlusion_min, cfg.occlusion_max);
  return geometry::occlusion_augment(cloud, f, rng);
}

double accuracy_of(const std::vector<int>& pred, std::span<const int> truth) {
  if (pred.empty()) return 0.0;
  size_t ok = 0;
  for (size_t i = 0; i < pred.size(); ++i) ok += pred[i] == truth[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

void check_finite(double loss, const char* stage, int epoch, long it) {
  if (!std::isfinite(loss))
    throw std::runtime_error(std::string(stage) + ": loss became non-finite at epoch " + std::to_string(epoch) +
                             ", iteration " + std::to_string(it) + " (try a smaller learning rate)");
}

}  // namespace

ad::Value cross_entropy(const ad::Value& logits, std::span<const int> labels, std::span<const double> weights,
                        double normalizer) {
  if (!(normalizer > 0.0)) throw std::invalid_argument("cross_entropy: normalizer must be positive");
  ad::Value picked = ad::pick(ad::log_softmax(logits), labels);
  if (!weights.empty()) {
    if (static_cast<Eigen::Index>(weights.size()) != picked.rows())
      throw std::invalid_argument("cross_entropy: weight count does not match batch");
    Matrix w(picked.rows(), 1);
    for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, 0) = weights[static_cast<size_t>(i)];
    picked = ad::mul(picked, ad::Value::constant(std::move(w)));
  }
  return ad::scale(ad::sum(picked), -1.0 / normalizer);
}

std::vector<int> predict(const model::EncoderParams& encoder, const model::HeadParams& head,
                         std::span<const geometry::PointCloud> clouds) {
  if (clouds.empty()) return {};
  const Matrix probs = model::classify(head, model::encode_all(encoder, clouds));
  std::vector<int> out(clouds.size());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) out[static_cast<size_t>(i)] = model::lambda_argmax(probs.row(i)).label;
  return out;
}

ad::Value reconstruction_loss(const model::EncoderParams& enc, const model::DecoderParams& dec,
                              std::span<const geometry::PointCloud> batch, const WarmupConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("reconstruction_loss: empty batch");
  const int n = static_cast<int>(batch.front().size());
  if (n != dec.points)
    throw std::invalid_argument("reconstruction_loss: decoder emits " + std::to_string(dec.points) +
                                " points but clouds have " + std::to_string(n));
  const ad::Value z = model::encode(enc, ad::Value::constant(model::stack_clouds(batch)), n);
  const ad::Value out = model::decode(dec, z);
  std::vector<ad::Value> terms;
  for (size_t i = 0; i < batch.size(); ++i) {
    const ad::Value pts = ad::reshape(ad::slice_rows(out, static_cast<Eigen::Index>(i), 1), n, 3);
    const ad::Value target = ad::Value::constant(batch[i].points);
    if (cfg.chamfer_weight != 0.0) terms.push_back(ad::scale(metric::chamfer(pts, target), cfg.chamfer_weight));
    if (cfg.emd_weight != 0.0) terms.push_back(ad::scale(metric::emd_loss(pts, target, cfg.emd), cfg.emd_weight));
  }
  if (terms.empty()) throw std::invalid_argument("reconstruction_loss: both loss weights are zero");
  return ad::scale(ad::sum(ad::concat_rows(terms)), 1.0 / static_cast<double>(batch.size()));
}

ReconstructionResult pretrain_reconstruction(const SourceSet& source, const TargetSet& target,
                                             const WarmupConfig& cfg, const Progress& progress) {
  if (source.size() == 0 || target.size() == 0)
    throw std::invalid_argument("pretrain_reconstruction: both domains must be non-empty");
  const Rng root(cfg.seed);
  Rng init = root.split(kReconInit);
  ReconstructionResult res{model::EncoderParams::init(cfg.model, init), model::DecoderParams::init(cfg.model, init), {}};

  struct Item {
    const geometry::PointCloud* cloud;
    bool is_source;
  };
  std::vector<Item> pool;
  for (const auto& c : source.clouds) pool.push_back({&c, true});
  for (const auto& c : target.clouds) pool.push_back({&c, false});
  const bool occlude = cfg.synthetic_to_real && cfg.occlusion_in_reconstruction;

  auto params = concat(res.encoder.params(), res.decoder.params());
  ad::AdamW opt({cfg.lr, cfg.weight_decay});
  const long per_epoch = static_cast<long>((pool.size() + cfg.batch_size - 1) / cfg.batch_size);
  const long total = per_epoch * cfg.recon_epochs;
  long it = 0;
  const Rng data = root.split(kReconData);
  for (int epoch = 0; epoch < cfg.recon_epochs; ++epoch) {
    Rng erng = data.split(static_cast<std::uint64_t>(epoch));
    std::vector<int> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    erng.shuffle(std::span<int>(order));
    double loss_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      std::vector<geometry::PointCloud> batch;
      for (size_t p = start; p < end; ++p) {
        const Item& item = pool[static_cast<size_t>(order[p])];
        batch.push_back(maybe_occlude(*item.cloud, occlude && item.is_source, cfg,
                                      erng.split(1000 + static_cast<std::uint64_t>(p))));
      }
      opt.set_lr(ad::cosine_lr(it, total, cfg.lr));
      const ad::Value loss = reconstruction_loss(res.encoder, res.decoder, batch, cfg);
      check_finite(loss.item(), "reconstruction", epoch, it);
      ad::backward(loss);
      opt.step(params);
      ad::zero_grads(params);
      loss_sum += loss.item() * static_cast<double>(batch.size());
      ++it;
    }
    EpochLog log{epoch, loss_sum / static_cast<double>(pool.size())};
    res.history.push_back(log);
    if (progress) progress("reconstruction", log);
  }
  return res;
}

ClassifierResult train_source_classifier(const model::EncoderParams& rec_encoder, const SourceSet& source,
                                         const WarmupConfig& cfg, const Progress& progress) {
  const HoldOut split = stratified_holdout(source.labels, cfg.val_fraction, cfg.seed);
  if (split.val.empty()) throw std::invalid_argument("train_source_classifier: source validation split is empty");
  if (split.train.empty()) throw std::invalid_argument("train_source_classifier: source training split is empty");
  const SourceSet train = source.subset(split.train);
  const SourceSet val = source.subset(split.val);

  const Rng root(cfg.seed);
  Rng init = root.split(kClsInit);
  model::EncoderParams enc = model::EncoderParams::init(cfg.model, init);
  model::HeadParams head = model::HeadParams::init(cfg.model, init);
  if (cfg.transfer) model::transfer_encoder(rec_encoder, enc);

  auto params = concat(enc.params(), head.params());
  ad::AdamW opt({cfg.lr, cfg.weight_decay});
  const bool occlude = cfg.synthetic_to_real && cfg.occlusion_in_classifier;
  const long per_epoch = static_cast<long>((train.size() + cfg.batch_size - 1) / cfg.batch_size);
  const long total = per_epoch * cfg.cls_epochs;
  long it = 0;

  ClassifierResult res{enc.clone(), head.clone(), -1.0, -1, {}};
  const Rng data = root.split(kClsData);
  const int n = static_cast<int>(train.clouds.front().size());
  for (int epoch = 0; epoch < cfg.cls_epochs; ++epoch) {
    Rng erng = data.split(static_cast<std::uint64_t>(epoch));
    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    erng.shuffle(std::span<int>(order));
    double loss_sum = 0.0;
    size_t correct = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      std::vector<geometry::PointCloud> batch;
      std::vector<int> labels;
      for (size_t p = start; p < end; ++p) {
        const auto row = static_cast<size_t>(order[p]);
        batch.push_back(maybe_occlude(train.clouds[row], occlude, cfg, erng.split(1000 + static_cast<std::uint64_t>(p))));
        labels.push_back(train.labels[row]);
      }
      opt.set_lr(ad::cosine_lr(it, total, cfg.lr));
      const ad::Value z = model::encode(enc, ad::Value::constant(model::stack_clouds(batch)), n);
      const ad::Value logits = model::head_logits(head, z);
      const ad::Value loss = cross_entropy(logits, labels, {}, static_cast<double>(batch.size()));
      check_finite(loss.item(), "source classifier", epoch, it);
      ad::backward(loss);
      opt.step(params);
      ad::zero_grads(params);
      loss_sum += loss.item() * static_cast<double>(batch.size());
      for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index arg = 0;
        logits.data().row(i).maxCoeff(&arg);
        correct += static_cast<int>(arg) == labels[static_cast<size_t>(i)];
      }
      ++it;
    }
    EpochLog log{epoch, loss_sum / static_cast<double>(train.size()),
                 static_cast<double>(correct) / static_cast<double>(train.size()),
                 accuracy_of(predict(enc, head, val.clouds), val.labels)};
    if (log.val_accuracy > res.best_val_accuracy) {
      res.best_val_accuracy = log.val_accuracy;
      res.best_epoch = epoch;
      res.encoder = enc.clone();
      res.head = head.clone();
    }
    res.history.push_back(log);
    if (progress) progress("source_classifier", log);
  }
  return res;
}

PseudoLabelState emit_initial_pseudolabels(const model::EncoderParams& encoder, const model::HeadParams& head,
                                           const TargetSet& target) {
  PseudoLabelState pls;
  pls.classes = static_cast<int>(head.classes());
  if (target.size() == 0) return pls;
  const Matrix probs = model::classify(head, model::encode_all(encoder, target.clouds));
  for (size_t i = 0; i < target.size(); ++i) {
    const auto p = model::lambda_argmax(probs.row(static_cast<Eigen::Index>(i)));
    pls.entries.push_back({target.ids[i], p.label, p.confidence, SplitTag::unassigned, Provenance::classifier});
  }
  return pls;
}

}  // namespace refrec::warmup
