#include "refrec/selftrain.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_map>

#include "refrec/warmup.hpp"

namespace refrec::selftrain {

int PrototypeTable::defined_count() const {
  return static_cast<int>(std::count_if(support.begin(), support.end(), [](int s) { return s > 0; }));
}

PrototypeTable compute_prototypes(const Matrix& features, std::span<const int> labels, int classes) {
  if (static_cast<Eigen::Index>(labels.size()) != features.rows())
    throw std::invalid_argument("compute_prototypes: label count does not match feature rows");
  if (labels.empty()) throw std::invalid_argument("compute_prototypes: no samples");
  PrototypeTable t{Matrix::Zero(classes, features.cols()), std::vector<int>(static_cast<size_t>(classes), 0)};
  for (size_t i = 0; i < labels.size(); ++i) {
    const int c = labels[i];
    if (c < 0 || c >= classes) throw std::invalid_argument("compute_prototypes: label out of range");
    t.eta.row(c) += features.row(static_cast<Eigen::Index>(i));
    ++t.support[static_cast<size_t>(c)];
  }
  for (int c = 0; c < classes; ++c)
    if (t.defined(c)) t.eta.row(c) /= static_cast<double>(t.support[static_cast<size_t>(c)]);
  return t;
}

PrototypeTable compute_prototypes(const PseudoLabelState& pls, const metric::EmbeddingTable& emb) {
  const auto ids = pls.ids_with(SplitTag::easy_refined);
  if (ids.empty()) throw std::invalid_argument("compute_prototypes: refined easy split is empty");
  std::vector<int> labels;
  for (auto id : ids) labels.push_back(pls.at(id).label);
  return compute_prototypes(emb.subset(ids).vectors, labels, pls.classes);
}

double plausibility_from_distances(std::span<const double> distances, std::span<const bool> defined, int k_hat) {
  if (distances.size() != defined.size()) throw std::invalid_argument("plausibility: size mismatch");
  double dmin = std::numeric_limits<double>::infinity();
  int count = 0;
  for (size_t c = 0; c < distances.size(); ++c) {
    if (!defined[c]) continue;
    dmin = std::min(dmin, distances[c]);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("plausibility: no defined prototype");
  if (k_hat < 0 || static_cast<size_t>(k_hat) >= distances.size() || !defined[static_cast<size_t>(k_hat)])
    return 1.0 / count;
  double denom = 0.0;
  for (size_t c = 0; c < distances.size(); ++c)
    if (defined[c]) denom += std::exp(dmin - distances[c]);
  return std::exp(dmin - distances[static_cast<size_t>(k_hat)]) / denom;
}

double plausibility_weight(const Eigen::Ref<const RowVector>& feature, int k_hat, const PrototypeTable& protos) {
  const auto k = static_cast<size_t>(protos.eta.rows());
  std::vector<double> d(k);
  std::unique_ptr<bool[]> def(new bool[k]);
  for (size_t c = 0; c < k; ++c) {
    def[c] = protos.support[c] > 0;
    d[c] = def[c] ? (feature - protos.eta.row(static_cast<Eigen::Index>(c))).norm() : 0.0;
  }
  return plausibility_from_distances(d, std::span<const bool>(def.get(), k), k_hat);
}

double alpha(long it, long total) {
  if (total <= 0) throw std::invalid_argument("alpha: total must be positive");
  return std::clamp(static_cast<double>(it) / static_cast<double>(total), 0.0, 1.0);
}

void ema_update(std::span<ad::Value> teacher, std::span<const ad::Value> student, double m) {
  if (teacher.size() != student.size()) throw std::invalid_argument("ema_update: parameter count mismatch");
  if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument("ema_update: decay must lie in [0, 1]");
  for (size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i].rows() != student[i].rows() || teacher[i].cols() != student[i].cols())
      throw std::invalid_argument("ema_update: shape mismatch at tensor " + std::to_string(i));
    teacher[i].mutable_data() = m * teacher[i].data() + (1.0 - m) * student[i].data();
  }
}

Heads Heads::clone() const {
  Heads h{encoder.clone(), source.clone(), {}, shared};
  h.target = shared ? h.source : target.clone();
  return h;
}

std::vector<ad::Value> Heads::params() const {
  auto p = encoder.params();
  for (const auto& v : source.params()) p.push_back(v);
  if (!shared)
    for (const auto& v : target.params()) p.push_back(v);
  return p;
}

std::vector<int> online_pseudolabels(const Heads& teacher, const Matrix& teacher_features) {
  const Matrix sum = model::classify(teacher.source, teacher_features) + model::classify(teacher.target, teacher_features);
  std::vector<int> out(static_cast<size_t>(sum.rows()));
  for (Eigen::Index i = 0; i < sum.rows(); ++i) out[static_cast<size_t>(i)] = model::lambda_argmax(sum.row(i)).label;
  return out;
}

nlohmann::json EpochLog::to_json() const {
  return {{"epoch", epoch},         {"loss_source", loss_source}, {"loss_target", loss_target},
          {"alpha", alpha},         {"mean_z", mean_z},           {"agreement", agreement},
          {"val_accuracy", val_accuracy}, {"target_accuracy", target_accuracy}};
}

ad::Value target_loss(const ad::Value& logits, std::span<const int> refined, std::span<const int> online,
                      std::span<const double> z, double a) {
  const auto b = static_cast<double>(refined.size());
  std::vector<double> w_refined(z.size()), w_online(z.size());
  for (size_t i = 0; i < z.size(); ++i) {
    w_refined[i] = (1.0 - a) * z[i];
    w_online[i] = a * z[i];
  }
  if (a == 0.0) return warmup::cross_entropy(logits, refined, w_refined, b);
  if (a == 1.0) return warmup::cross_entropy(logits, online, w_online, b);
  return warmup::cross_entropy(logits, refined, w_refined, b) + warmup::cross_entropy(logits, online, w_online, b);
}

std::vector<int> predict(const Heads& m, std::span<const geometry::PointCloud> clouds) {
  return warmup::predict(m.encoder, m.target, clouds);
}

SelfTrainResult selftrain_loop(const SourceSet& source, const TargetSet& target, const PseudoLabelState& pls,
                               const model::EncoderParams& rec_encoder, const SelfTrainConfig& cfg,
                               const Progress& progress, const Evaluator& evaluate) {
  if (cfg.batch_size < 2) throw std::invalid_argument("selftrain: batch size must be at least 2");
  const auto easy = pls.ids_with(SplitTag::easy_refined);
  if (easy.empty()) throw std::invalid_argument("selftrain: refined easy split is empty (run refine first)");
  std::vector<std::int64_t> pool;
  for (const auto& e : pls.entries)
    if (e.split == SplitTag::easy_refined || e.split == SplitTag::hard_refined) pool.push_back(e.id);

  std::unordered_map<std::int64_t, size_t> row_of;
  for (size_t i = 0; i < target.ids.size(); ++i) row_of.emplace(target.ids[i], i);
  for (auto id : pool)
    if (!row_of.count(id)) throw std::invalid_argument("selftrain: pseudo-label id " + std::to_string(id) + " not in target set");

  const HoldOut split = stratified_holdout(source.labels, cfg.val_fraction, cfg.seed);
  if (split.train.empty() || split.val.empty()) throw std::invalid_argument("selftrain: source hold-out is empty");
  const SourceSet train = source.subset(split.train);
  const SourceSet val = source.subset(split.val);

  const Rng root(cfg.seed);
  Rng init = root.split(kInitStream);
  Heads student{model::EncoderParams::init(cfg.model, init), model::HeadParams::init(cfg.model, init),
                model::HeadParams::init(cfg.model, init), cfg.single_head};
  if (cfg.single_head) student.target = student.source;
  if (cfg.transfer) model::transfer_encoder(rec_encoder, student.encoder);
  Heads teacher = student.clone();

  const metric::EmbeddingTable rec_emb(model::encode_all(rec_encoder, target.clouds), target.ids);
  PrototypeTable protos = compute_prototypes(pls, rec_emb);

  auto params = student.params();
  auto teacher_params = teacher.params();
  ad::AdamW opt({cfg.lr, cfg.weight_decay});
  const auto b = static_cast<size_t>(cfg.batch_size);
  const long per_epoch = static_cast<long>((pool.size() + b - 1) / b);
  const long total = per_epoch * cfg.epochs;
  const size_t n_source = cfg.dual_head ? b / 2 : b;
  const int n = cfg.model.points;

  SelfTrainResult res{student.clone(), -1.0, -1, {}, {}};
  const Rng data = root.split(kDataStream);
  long it = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.teacher_prototypes && cfg.online_refine) {
      const metric::EmbeddingTable t_emb(model::encode_all(teacher.encoder, target.clouds), target.ids);
      protos = compute_prototypes(pls, t_emb);
    }
    EpochLog elog{epoch, 0, 0, 0, 0, 0, 0, -1.0};
    for (long step = 0; step < per_epoch; ++step, ++it) {
      Rng r = data.split(static_cast<std::uint64_t>(it));
      std::vector<geometry::PointCloud> sbatch, tbatch;
      std::vector<int> slabels, refined;
      std::vector<size_t> src_rows;
      for (size_t i = 0; i < n_source; ++i) src_rows.push_back(static_cast<size_t>(r.below(train.size())));
      std::vector<std::int64_t> easy_draw;
      for (size_t i = n_source; i < b; ++i) easy_draw.push_back(easy[static_cast<size_t>(r.below(easy.size()))]);
      std::vector<std::int64_t> target_draw;
      for (size_t i = 0; i < b; ++i) target_draw.push_back(pool[static_cast<size_t>(r.below(pool.size()))]);

      for (size_t p = 0; p < src_rows.size(); ++p) {
        const auto& c = train.clouds[src_rows[p]];
        if (cfg.source_occlusion) {
          Rng ar = r.split(1000 + p);
          const double f = ar.uniform(cfg.occlusion_min, cfg.occlusion_max);
          sbatch.push_back(geometry::occlusion_augment(c, f, ar));
        } else {
          sbatch.push_back(c);
        }
        slabels.push_back(train.labels[src_rows[p]]);
      }
      for (auto id : easy_draw) {
        sbatch.push_back(target.clouds[row_of.at(id)]);
        slabels.push_back(pls.at(id).label);
      }
      for (auto id : target_draw) {
        tbatch.push_back(target.clouds[row_of.at(id)]);
        refined.push_back(pls.at(id).label);
      }

      IterLog log{it, 0, 0, cfg.online_refine ? alpha(it, total) : 0.0, 1.0, 1.0};
      std::vector<int> online = refined;
      std::vector<double> z(b, 1.0);
      if (cfg.online_refine) {
        const Matrix tf = model::encode_all(teacher.encoder, tbatch);
        online = online_pseudolabels(teacher, tf);
        double zsum = 0.0;
        size_t agree = 0;
        for (size_t i = 0; i < b; ++i) {
          z[i] = plausibility_weight(tf.row(static_cast<Eigen::Index>(i)), online[i], protos);
          zsum += z[i];
          agree += online[i] == refined[i];
        }
        log.mean_z = zsum / static_cast<double>(b);
        log.agreement = static_cast<double>(agree) / static_cast<double>(b);
      }

      opt.set_lr(ad::cosine_lr(it, total, cfg.lr));
      const ad::Value zs = model::encode(student.encoder, ad::Value::constant(model::stack_clouds(sbatch)), n);
      const ad::Value ls = warmup::cross_entropy(model::head_logits(student.source, zs), slabels, {},
                                                 static_cast<double>(sbatch.size()));
      const ad::Value zt = model::encode(student.encoder, ad::Value::constant(model::stack_clouds(tbatch)), n);
      const ad::Value lt = target_loss(model::head_logits(student.target, zt), refined, online, z, log.alpha);
      log.loss_source = ls.item();
      log.loss_target = lt.item();
      if (!std::isfinite(log.loss_source) || !std::isfinite(log.loss_target))
        throw std::runtime_error("selftrain: loss became non-finite at iteration " + std::to_string(it));
      ad::backward(ls + lt);
      opt.step(params);
      ad::zero_grads(params);
      ema_update(teacher_params, params, cfg.ema ? cfg.ema_decay : 0.0);

      elog.loss_source += log.loss_source;
      elog.loss_target += log.loss_target;
      elog.mean_z += log.mean_z;
      elog.agreement += log.agreement;
      elog.alpha = log.alpha;
      res.iterations.push_back(log);
    }
    const auto pe = static_cast<double>(per_epoch);
    elog.loss_source /= pe;
    elog.loss_target /= pe;
    elog.mean_z /= pe;
    elog.agreement /= pe;
    const auto pred = warmup::predict(student.encoder, student.source, val.clouds);
    size_t ok = 0;
    for (size_t i = 0; i < pred.size(); ++i) ok += pred[i] == val.labels[i];
    elog.val_accuracy = static_cast<double>(ok) / static_cast<double>(pred.size());
    if (evaluate) elog.target_accuracy = evaluate(student);
    if (elog.val_accuracy > res.best_val_accuracy) {
      res.best_val_accuracy = elog.val_accuracy;
      res.best_epoch = epoch;
      res.model = student.clone();
    }
    res.epochs.push_back(elog);
    if (progress) progress(elog);
  }
  return res;
}

}  // namespace refrec::selftrain
