#include "refrec/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "refrec/kernels.hpp"
#include "refrec/rng.hpp"

namespace refrec::harness {

namespace fs = std::filesystem;

namespace {

// Data streams below the run seed (training stages use 1..6).
constexpr std::uint64_t kSourceData = 100, kTargetData = 101, kTestData = 102, kBaseline = 103, kUntrained = 104;

void put_corruption(json& j, const std::string& prefix, const geometry::Corruption& c) {
  j[prefix + "_occlusion_min"] = c.occlusion_min;
  j[prefix + "_occlusion_max"] = c.occlusion_max;
  j[prefix + "_jitter"] = c.jitter_sigma;
  j[prefix + "_density_bias"] = c.density_bias;
}

geometry::Corruption get_corruption(const json& j, const std::string& prefix) {
  return {j.at(prefix + "_occlusion_min").get<double>(), j.at(prefix + "_occlusion_max").get<double>(),
          j.at(prefix + "_jitter").get<double>(), j.at(prefix + "_density_bias").get<double>()};
}

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return !(a.is_number_integer() && b.is_number_float());
  return a.type() == b.type();
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<std::string> stage_keys(Stage s) {
  std::vector<std::string> keys = {"classes",
                                   "points",
                                   "source_per_class",
                                   "target_per_class",
                                   "test_per_class",
                                   "source_occlusion_min",
                                   "source_occlusion_max",
                                   "source_jitter",
                                   "source_density_bias",
                                   "target_occlusion_min",
                                   "target_occlusion_max",
                                   "target_jitter",
                                   "target_density_bias"};
  if (s == Stage::data) return keys;
  for (const char* k : {"encoder_widths", "decoder_widths", "head_hidden", "recon_epochs", "cls_epochs", "batch_size",
                        "lr", "weight_decay", "chamfer_weight", "emd_weight", "emd_solver", "auction_epsilon",
                        "aug_occlusion_min", "aug_occlusion_max", "val_fraction", "synthetic_to_real", "no_transfer"})
    keys.emplace_back(k);
  if (s == Stage::warmup) return keys;
  for (const char* k : {"g", "k", "refine_metric", "no_offline_refine"}) keys.emplace_back(k);
  if (s == Stage::refine) return keys;
  for (const char* k : {"selftrain_epochs", "ema_decay", "teacher_prototypes", "no_dual_head", "no_ema",
                        "no_online_refine", "single_head"})
    keys.emplace_back(k);
  return keys;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json history_json(const std::vector<warmup::EpochLog>& h) {
  json out = json::array();
  for (const auto& e : h) {
    json row = {{"epoch", e.epoch}, {"loss", e.loss}};
    if (e.accuracy >= 0) row["accuracy"] = e.accuracy;
    if (e.val_accuracy >= 0) row["val_accuracy"] = e.val_accuracy;
    out.push_back(row);
  }
  return out;
}

void write_jsonl(const fs::path& path, const json& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : rows) f << r.dump() << '\n';
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  return json::parse(f);
}

void require(const fs::path& path, const char* stage) {
  if (!fs::exists(path))
    throw std::runtime_error("missing artifact " + path.string() + ": run stage " + stage + " first");
}

void check_hash(const std::string& found, const ExperimentConfig& cfg, Stage s, const fs::path& where) {
  if (found != stage_hash(cfg, s))
    throw std::runtime_error("artifact " + where.string() + " was produced by a different configuration: run stage " +
                             stage_name(s) + " first");
}

json meta(const ExperimentConfig& cfg, Stage s, std::uint64_t seed) {
  return {{"stage", stage_name(s)}, {"config_hash", stage_hash(cfg, s)}, {"seed", seed}};
}

void check_meta(const json& m, const ExperimentConfig& cfg, Stage s, std::uint64_t seed, const fs::path& where) {
  check_hash(m.value("config_hash", ""), cfg, s, where);
  if (m.value("seed", std::uint64_t{0}) != seed)
    throw std::runtime_error("artifact " + where.string() + " belongs to another seed: run stage " +
                             std::string(stage_name(s)) + " first");
}

std::vector<geometry::LabeledSample> with_labels(const TargetSet& t, std::span<const int> labels) {
  std::vector<geometry::LabeledSample> out;
  for (size_t i = 0; i < t.size(); ++i) out.push_back({t.clouds[i], labels[i], geometry::Domain::target});
  return out;
}

void write_warmup(const fs::path& dir, const ExperimentConfig& cfg, std::uint64_t seed, const WarmupOutput& w) {
  fs::create_directories(dir);
  const json m = meta(cfg, Stage::warmup, seed);
  model::Checkpoint rec{m, {}};
  model::append_tensors(rec, "rec_encoder", w.rec_encoder);
  model::append_tensors(rec, "decoder", w.decoder);
  model::save_checkpoint(dir / "rec.rrck", rec);
  model::Checkpoint cls{m, {}};
  cls.metadata["best_val_accuracy"] = w.best_val_accuracy;
  model::append_tensors(cls, "encoder", w.cls_encoder);
  model::append_tensors(cls, "head", w.head);
  model::save_checkpoint(dir / "cls.rrck", cls);
  write_plbl(dir / "initial.plbl", w.initial, stage_hash(cfg, Stage::warmup));
  json rows = json::array();
  for (auto r : history_json(w.recon_history)) rows.push_back((r["stage"] = "reconstruction", r));
  for (auto r : history_json(w.cls_history)) rows.push_back((r["stage"] = "source_classifier", r));
  write_jsonl(dir / "history.jsonl", rows);
}

WarmupOutput read_warmup(const fs::path& dir, const ExperimentConfig& cfg, std::uint64_t seed) {
  require(dir / "rec.rrck", "warmup");
  require(dir / "cls.rrck", "warmup");
  require(dir / "initial.plbl", "warmup");
  const auto rec = model::load_checkpoint(dir / "rec.rrck");
  check_meta(rec.metadata, cfg, Stage::warmup, seed, dir / "rec.rrck");
  const auto cls = model::load_checkpoint(dir / "cls.rrck");
  check_meta(cls.metadata, cfg, Stage::warmup, seed, dir / "cls.rrck");
  std::string hash;
  WarmupOutput w{model::encoder_from(rec, "rec_encoder"), model::decoder_from(rec, "decoder"),
                 model::encoder_from(cls, "encoder"), model::head_from(cls, "head"),
                 read_plbl(dir / "initial.plbl", &hash), {}, {}, cls.metadata.value("best_val_accuracy", 0.0)};
  check_hash(hash, cfg, Stage::warmup, dir / "initial.plbl");
  return w;
}

void write_selftrain(const fs::path& dir, const ExperimentConfig& cfg, std::uint64_t seed,
                     const selftrain::SelfTrainResult& r) {
  fs::create_directories(dir);
  model::Checkpoint ck{meta(cfg, Stage::selftrain, seed), {}};
  ck.metadata["shared_head"] = r.model.shared;
  ck.metadata["best_epoch"] = r.best_epoch;
  ck.metadata["best_val_accuracy"] = r.best_val_accuracy;
  model::append_tensors(ck, "encoder", r.model.encoder);
  model::append_tensors(ck, "head_s", r.model.source);
  if (!r.model.shared) model::append_tensors(ck, "head_t", r.model.target);
  model::save_checkpoint(dir / "model.rrck", ck);
  json epochs = json::array();
  for (const auto& e : r.epochs) epochs.push_back(e.to_json());
  write_jsonl(dir / "epochs.jsonl", epochs);
  json its = json::array();
  for (const auto& l : r.iterations)
    its.push_back({{"it", l.it},
                   {"loss_source", l.loss_source},
                   {"loss_target", l.loss_target},
                   {"alpha", l.alpha},
                   {"mean_z", l.mean_z},
                   {"agreement", l.agreement}});
  write_jsonl(dir / "iterations.jsonl", its);
}

selftrain::Heads read_selftrain(const fs::path& dir, const ExperimentConfig& cfg, std::uint64_t seed) {
  require(dir / "model.rrck", "selftrain");
  const auto ck = model::load_checkpoint(dir / "model.rrck");
  check_meta(ck.metadata, cfg, Stage::selftrain, seed, dir / "model.rrck");
  selftrain::Heads h{model::encoder_from(ck, "encoder"), model::head_from(ck, "head_s"), {},
                     ck.metadata.value("shared_head", false)};
  h.target = h.shared ? h.source : model::head_from(ck, "head_t");
  return h;
}

json selftrain_metrics(const selftrain::SelfTrainResult& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs) epochs.push_back(e.to_json());
  return {{"best_val_accuracy", r.best_val_accuracy}, {"best_epoch", r.best_epoch}, {"epochs", epochs}};
}

// Fraction of target samples whose nearest other sample in descriptor space
// shares its true label.
double descriptor_purity(const Matrix& desc, const TargetTruth& truth) {
  const auto labels = truth.labels();
  Matrix d;
  kernels::pairwise_l2(desc, desc, d);
  long ok = 0;
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    Eigen::Index best = -1;
    for (Eigen::Index j = 0; j < d.cols(); ++j)
      if (j != i && (best < 0 || d(i, j) < d(i, best))) best = j;
    ok += best >= 0 && labels[static_cast<size_t>(best)] == labels[static_cast<size_t>(i)];
  }
  return d.rows() == 0 ? 0.0 : static_cast<double>(ok) / static_cast<double>(d.rows());
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

json ExperimentConfig::to_json() const {
  json j = {{"classes", classes},
            {"points", points},
            {"source_per_class", source_per_class},
            {"target_per_class", target_per_class},
            {"test_per_class", test_per_class},
            {"encoder_widths", encoder_widths},
            {"decoder_widths", decoder_widths},
            {"head_hidden", head_hidden},
            {"recon_epochs", recon_epochs},
            {"cls_epochs", cls_epochs},
            {"selftrain_epochs", selftrain_epochs},
            {"batch_size", batch_size},
            {"lr", lr},
            {"weight_decay", weight_decay},
            {"chamfer_weight", chamfer_weight},
            {"emd_weight", emd_weight},
            {"emd_solver", emd_solver},
            {"auction_epsilon", auction_epsilon},
            {"aug_occlusion_min", aug_occlusion_min},
            {"aug_occlusion_max", aug_occlusion_max},
            {"val_fraction", val_fraction},
            {"g", g},
            {"k", k},
            {"refine_metric", refine_metric},
            {"ema_decay", ema_decay},
            {"teacher_prototypes", teacher_prototypes},
            {"synthetic_to_real", synthetic_to_real},
            {"no_transfer", no_transfer},
            {"no_dual_head", no_dual_head},
            {"no_ema", no_ema},
            {"no_online_refine", no_online_refine},
            {"no_offline_refine", no_offline_refine},
            {"single_head", single_head},
            {"seeds", seeds},
            {"out", out}};
  put_corruption(j, "source", source_corruption);
  put_corruption(j, "target", target_corruption);
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& in) {
  if (!in.is_object()) throw std::invalid_argument("config: expected a JSON object");
  json j = ExperimentConfig{}.to_json();
  for (const auto& [key, value] : in.items()) {
    if (!j.contains(key)) throw std::invalid_argument("config: unknown key '" + key + "'");
    if (!same_kind(j[key], value)) throw std::invalid_argument("config: key '" + key + "' has the wrong type");
    j[key] = value;
  }
  ExperimentConfig c;
  c.classes = j["classes"].get<std::vector<std::string>>();
  c.points = j["points"];
  c.source_per_class = j["source_per_class"];
  c.target_per_class = j["target_per_class"];
  c.test_per_class = j["test_per_class"];
  c.source_corruption = get_corruption(j, "source");
  c.target_corruption = get_corruption(j, "target");
  c.encoder_widths = j["encoder_widths"].get<std::vector<int>>();
  c.decoder_widths = j["decoder_widths"].get<std::vector<int>>();
  c.head_hidden = j["head_hidden"];
  c.recon_epochs = j["recon_epochs"];
  c.cls_epochs = j["cls_epochs"];
  c.selftrain_epochs = j["selftrain_epochs"];
  c.batch_size = j["batch_size"];
  c.lr = j["lr"];
  c.weight_decay = j["weight_decay"];
  c.chamfer_weight = j["chamfer_weight"];
  c.emd_weight = j["emd_weight"];
  c.emd_solver = j["emd_solver"];
  c.auction_epsilon = j["auction_epsilon"];
  c.aug_occlusion_min = j["aug_occlusion_min"];
  c.aug_occlusion_max = j["aug_occlusion_max"];
  c.val_fraction = j["val_fraction"];
  c.g = j["g"];
  c.k = j["k"];
  c.refine_metric = j["refine_metric"];
  c.ema_decay = j["ema_decay"];
  c.teacher_prototypes = j["teacher_prototypes"];
  c.synthetic_to_real = j["synthetic_to_real"];
  c.no_transfer = j["no_transfer"];
  c.no_dual_head = j["no_dual_head"];
  c.no_ema = j["no_ema"];
  c.no_online_refine = j["no_online_refine"];
  c.no_offline_refine = j["no_offline_refine"];
  c.single_head = j["single_head"];
  c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
  c.out = j["out"];
  if (c.classes.size() < 2) throw std::invalid_argument("config: need at least two classes");
  if (c.encoder_widths.empty()) throw std::invalid_argument("config: encoder_widths is empty");
  if (c.decoder_widths.size() != 2) throw std::invalid_argument("config: decoder_widths needs two entries");
  if (c.emd_solver != "exact" && c.emd_solver != "auction")
    throw std::invalid_argument("config: emd_solver must be 'exact' or 'auction'");
  if (c.refine_metric != "euclidean" && c.refine_metric != "cosine")
    throw std::invalid_argument("config: refine_metric must be 'euclidean' or 'cosine'");
  return c;
}

void ExperimentConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw std::invalid_argument("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json j = to_json();
  if (!j.contains(key)) throw std::invalid_argument("config: unknown key '" + key + "'");
  j[key] = value;
  *this = from_json(j);
}

model::ModelConfig ExperimentConfig::model_config() const {
  model::ModelConfig m;
  m.encoder_widths = encoder_widths;
  m.decoder_widths = decoder_widths;
  m.head_hidden = head_hidden;
  m.classes = static_cast<int>(classes.size());
  m.points = points;
  return m;
}

warmup::WarmupConfig ExperimentConfig::warmup_config(std::uint64_t seed) const {
  warmup::WarmupConfig w;
  w.model = model_config();
  w.recon_epochs = recon_epochs;
  w.cls_epochs = cls_epochs;
  w.batch_size = batch_size;
  w.lr = lr;
  w.weight_decay = weight_decay;
  w.chamfer_weight = chamfer_weight;
  w.emd_weight = emd_weight;
  w.emd.solver = emd_solver == "auction" ? metric::EmdSolver::auction : metric::EmdSolver::exact;
  w.emd.auction_epsilon = auction_epsilon;
  w.synthetic_to_real = synthetic_to_real;
  w.occlusion_min = aug_occlusion_min;
  w.occlusion_max = aug_occlusion_max;
  w.val_fraction = val_fraction;
  w.transfer = !no_transfer;
  w.seed = seed;
  return w;
}

refine::RefineOptions ExperimentConfig::refine_options() const {
  return {g, k, refine_metric == "cosine" ? refine::Metric::cosine : refine::Metric::euclidean};
}

selftrain::SelfTrainConfig ExperimentConfig::selftrain_config(std::uint64_t seed) const {
  selftrain::SelfTrainConfig s;
  s.model = model_config();
  s.epochs = selftrain_epochs;
  s.batch_size = batch_size;
  s.lr = lr;
  s.weight_decay = weight_decay;
  s.ema_decay = ema_decay;
  s.val_fraction = val_fraction;
  s.source_occlusion = synthetic_to_real;
  s.occlusion_min = aug_occlusion_min;
  s.occlusion_max = aug_occlusion_max;
  s.teacher_prototypes = teacher_prototypes;
  s.transfer = !no_transfer;
  s.dual_head = !no_dual_head;
  s.ema = !no_ema;
  s.online_refine = !no_online_refine;
  s.single_head = single_head;
  s.seed = seed;
  return s;
}

ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  if (name == "desk") {
    // Tuned to fit the 10 minute single-core budget; lr 1e-4 does not move in 20 epochs.
    c.classes = {"cube", "cone", "torus", "plane"};
    c.target_corruption.density_bias = 0.5;
    c.recon_epochs = 20;
    c.lr = 1e-3;
    return c;
  }
  if (name == "paper") {
    c.classes = {"sphere", "cube", "cylinder", "cone", "torus", "plane"};
    c.points = 1024;
    c.encoder_widths = {64, 64, 64, 128, 1024};
    c.decoder_widths = {1024, 1024};
    c.head_hidden = 256;
    c.recon_epochs = 1000;
    c.cls_epochs = 25;
    c.selftrain_epochs = 25;
    c.batch_size = 32;
    return c;
  }
  throw std::invalid_argument("unknown preset '" + name + "' (expected desk or paper)");
}

ExperimentConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("config file " + path.string() + " does not exist");
  return ExperimentConfig::from_json(read_json(path));
}

void save_config(const fs::path& path, const ExperimentConfig& cfg) { write_json(path, cfg.to_json()); }

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::data: return "gen-data";
    case Stage::warmup: return "warmup";
    case Stage::refine: return "refine";
    case Stage::selftrain: return "selftrain";
  }
  return "?";
}

std::string stage_hash(const ExperimentConfig& cfg, Stage s) {
  const json all = cfg.to_json();
  json subset = json::object();
  for (const auto& k : stage_keys(s)) subset[k] = all.at(k);
  const std::string text = subset.dump();
  return hex64(fnv1a64(text));
}

// ---------------------------------------------------------------------------
// Metrics

json Accuracy::to_json() const {
  return {{"overall", overall}, {"per_class", per_class}, {"confusion", confusion}};
}

Accuracy accuracy(std::span<const int> preds, std::span<const int> truths, int classes) {
  if (preds.empty()) throw std::invalid_argument("accuracy: empty input");
  if (preds.size() != truths.size()) throw std::invalid_argument("accuracy: prediction and truth lengths differ");
  Accuracy a;
  a.confusion.assign(static_cast<size_t>(classes), std::vector<long>(static_cast<size_t>(classes), 0));
  long correct = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || preds[i] >= classes || truths[i] < 0 || truths[i] >= classes)
      throw std::invalid_argument("accuracy: label out of range");
    ++a.confusion[static_cast<size_t>(truths[i])][static_cast<size_t>(preds[i])];
    correct += preds[i] == truths[i];
  }
  a.overall = static_cast<double>(correct) / static_cast<double>(preds.size());
  for (int c = 0; c < classes; ++c) {
    const auto& row = a.confusion[static_cast<size_t>(c)];
    long total = 0;
    for (long v : row) total += v;
    a.per_class.push_back(total == 0 ? 0.0 : static_cast<double>(row[static_cast<size_t>(c)]) / static_cast<double>(total));
  }
  return a;
}

double LabelQuality::of(const std::string& split) const {
  for (const auto& [name, v] : by_split)
    if (name == split) return v.first;
  throw std::out_of_range("LabelQuality: no split '" + split + "'");
}

json LabelQuality::to_json() const {
  json j = {{"overall", overall}, {"count", count}};
  for (const auto& [name, v] : by_split) j[name] = {{"accuracy", v.first}, {"count", v.second}};
  return j;
}

LabelQuality pseudo_label_quality(const PseudoLabelState& pls, const TargetTruth& truth) {
  if (pls.entries.empty()) throw std::invalid_argument("pseudo_label_quality: no pseudo-labels");
  LabelQuality q;
  std::map<SplitTag, std::pair<long, long>> tally;  // correct, total
  long correct = 0;
  for (const auto& e : pls.entries) {
    const bool ok = e.label == truth.label_of(e.id);
    correct += ok;
    auto& t = tally[e.split];
    t.first += ok;
    ++t.second;
  }
  q.count = static_cast<long>(pls.entries.size());
  q.overall = static_cast<double>(correct) / static_cast<double>(q.count);
  for (const auto& [tag, t] : tally) {
    if (tag == SplitTag::unassigned) continue;
    q.by_split.push_back({split_name(tag), {static_cast<double>(t.first) / static_cast<double>(t.second), t.second}});
  }
  return q;
}

// ---------------------------------------------------------------------------
// Stages

DataBundle generate_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  const Rng root(seed);
  auto spec = [&](std::uint64_t stream, int per_class, const geometry::Corruption& c, geometry::Domain d) {
    Rng r = root.split(stream);
    return geometry::DomainSpec{cfg.classes, c, per_class, cfg.points, r.next_u64(), d};
  };
  const auto src = geometry::generate_domain(spec(kSourceData, cfg.source_per_class, cfg.source_corruption,
                                                  geometry::Domain::source));
  const auto tgt = geometry::generate_domain(spec(kTargetData, cfg.target_per_class, cfg.target_corruption,
                                                  geometry::Domain::target));
  const auto test = geometry::generate_domain(spec(kTestData, cfg.test_per_class, cfg.target_corruption,
                                                   geometry::Domain::target));
  DataBundle b;
  b.source = make_source(src);
  std::tie(b.target, b.truth) = make_target(tgt);
  std::tie(b.test, b.test_truth) = make_target(test);
  return b;
}

WarmupOutput run_warmup(const ExperimentConfig& cfg, std::uint64_t seed, const DataBundle& data,
                        const warmup::Progress& progress) {
  const auto wc = cfg.warmup_config(seed);
  auto rec = warmup::pretrain_reconstruction(data.source, data.target, wc, progress);
  auto cls = warmup::train_source_classifier(rec.encoder, data.source, wc, progress);
  auto initial = warmup::emit_initial_pseudolabels(cls.encoder, cls.head, data.target);
  return {std::move(rec.encoder), std::move(rec.decoder), std::move(cls.encoder), std::move(cls.head),
          std::move(initial), std::move(rec.history), std::move(cls.history), cls.best_val_accuracy};
}

RefineOutput run_refine(const ExperimentConfig& cfg, const WarmupOutput& w, const TargetSet& target) {
  RefineOutput out;
  if (cfg.no_offline_refine) {
    out.refined = refine::split_only(w.initial, cfg.g, &out.report);
  } else {
    const metric::EmbeddingTable emb(model::encode_all(w.rec_encoder, target.clouds), target.ids);
    out.refined = refine::refine_pipeline(w.initial, emb, cfg.refine_options(), &out.report);
  }
  return out;
}

selftrain::SelfTrainResult run_selftrain(const ExperimentConfig& cfg, std::uint64_t seed, const DataBundle& data,
                                         const WarmupOutput& w, const PseudoLabelState& refined,
                                         const selftrain::Progress& progress, const selftrain::Evaluator& evaluate) {
  return selftrain::selftrain_loop(data.source, data.target, refined, w.rec_encoder, cfg.selftrain_config(seed),
                                   progress, evaluate);
}

Accuracy no_adaptation_baseline(const ExperimentConfig& cfg, std::uint64_t seed, const DataBundle& data) {
  auto wc = cfg.warmup_config(Rng(seed).split(kBaseline).next_u64());
  wc.transfer = false;
  wc.synthetic_to_real = false;
  Rng unused(0);
  const auto placeholder = model::EncoderParams::init(wc.model, unused);
  const auto cls = warmup::train_source_classifier(placeholder, data.source, wc);
  const auto pred = warmup::predict(cls.encoder, cls.head, data.test.clouds);
  return accuracy(pred, data.test_truth.labels(), static_cast<int>(cfg.classes.size()));
}

json RunReport::to_json() const {
  return {{"seed", seed}, {"config_hash", config_hash}, {"metrics", metrics}, {"wall_clock", wall_clock}};
}

RunReport run_pipeline(const ExperimentConfig& cfg, std::uint64_t seed, const std::optional<fs::path>& dir,
                       bool verbose, WarmupCache* cache) {
  RunReport rep;
  rep.seed = seed;
  rep.config_hash = stage_hash(cfg, Stage::selftrain);
  const int k = static_cast<int>(cfg.classes.size());
  auto log = [&](const std::string& msg) {
    if (verbose) std::cerr << "[seed " << seed << "] " << msg << '\n';
  };

  const std::string key = std::to_string(seed) + ":" + stage_hash(cfg, Stage::warmup);
  std::shared_ptr<const WarmupCache::Entry> entry;
  if (cache) {
    const auto it = cache->entries.find(key);
    if (it != cache->entries.end()) entry = it->second;
  }
  if (entry) {
    log("reusing cached data and warm-up");
    rep.wall_clock["data"] = 0.0;
    rep.wall_clock["warmup"] = 0.0;
  } else {
    auto fresh = std::make_shared<WarmupCache::Entry>();
    auto t0 = std::chrono::steady_clock::now();
    fresh->data = generate_data(cfg, seed);
    rep.wall_clock["data"] = seconds_since(t0);
    t0 = std::chrono::steady_clock::now();
    fresh->warmup = run_warmup(cfg, seed, fresh->data, [&](const std::string& stage, const warmup::EpochLog& e) {
      log(stage + " epoch " + std::to_string(e.epoch) + " loss " + fmt(e.loss) +
          (e.val_accuracy >= 0 ? " val " + fmt(e.val_accuracy) : ""));
    });
    rep.wall_clock["warmup"] = seconds_since(t0);
    t0 = std::chrono::steady_clock::now();
    fresh->no_adaptation = no_adaptation_baseline(cfg, seed, fresh->data);
    rep.wall_clock["no_adaptation"] = seconds_since(t0);
    entry = fresh;
    if (cache) cache->entries[key] = entry;
  }
  const DataBundle& data = entry->data;
  const WarmupOutput& w = entry->warmup;
  if (dir) {
    stage_data(cfg, seed, *dir);
    write_warmup(*dir / "warmup", cfg, seed, w);
  }

  auto t0 = std::chrono::steady_clock::now();
  const RefineOutput r = run_refine(cfg, w, data.target);
  rep.wall_clock["refine"] = seconds_since(t0);
  if (dir) {
    fs::create_directories(*dir / "refine");
    write_plbl(*dir / "refine" / "refined.plbl", r.refined, stage_hash(cfg, Stage::refine));
    write_json(*dir / "refine" / "report.json", r.report.to_json());
  }

  t0 = std::chrono::steady_clock::now();
  // Eval-only target accuracy per epoch; never feeds back into training.
  const auto test_accuracy = [&](const selftrain::Heads& m) {
    return accuracy(selftrain::predict(m, data.test.clouds), data.test_truth.labels(), k).overall;
  };
  const auto s = run_selftrain(
      cfg, seed, data, w, r.refined,
      [&](const selftrain::EpochLog& e) {
        log("selftrain epoch " + std::to_string(e.epoch) + " ls " + fmt(e.loss_source) + " lt " + fmt(e.loss_target) +
            " z " + fmt(e.mean_z) + " agree " + fmt(e.agreement) + " val " + fmt(e.val_accuracy) + " target " +
            fmt(e.target_accuracy));
      },
      test_accuracy);
  rep.wall_clock["selftrain"] = seconds_since(t0);
  if (dir) write_selftrain(*dir / "selftrain", cfg, seed, s);

  // Evaluation: the only place target truth is read.
  t0 = std::chrono::steady_clock::now();
  PseudoLabelState after_split = w.initial;
  refine::split_easy_hard(after_split, cfg.g);
  const double purity = descriptor_purity(model::encode_all(w.rec_encoder, data.target.clouds), data.truth);
  const auto final_test = accuracy(selftrain::predict(s.model, data.test.clouds), data.test_truth.labels(), k);
  const auto final_train = accuracy(selftrain::predict(s.model, data.target.clouds), data.truth.labels(), k);
  const auto warm_test = accuracy(warmup::predict(w.cls_encoder, w.head, data.test.clouds), data.test_truth.labels(), k);
  const Accuracy& baseline = entry->no_adaptation;
  rep.wall_clock["eval"] = seconds_since(t0);

  rep.metrics = {
      {"warmup",
       {{"recon_loss_first", w.recon_history.empty() ? 0.0 : w.recon_history.front().loss},
        {"recon_loss_last", w.recon_history.empty() ? 0.0 : w.recon_history.back().loss},
        {"recon_history", history_json(w.recon_history)},
        {"cls_history", history_json(w.cls_history)},
        {"cls_best_val_accuracy", w.best_val_accuracy},
        {"descriptor_nn_purity", purity},
        {"target_test_accuracy", warm_test.overall}}},
      {"pseudo_labels",
       {{"initial", pseudo_label_quality(w.initial, data.truth).to_json()},
        {"after_split", pseudo_label_quality(after_split, data.truth).to_json()},
        {"refined", pseudo_label_quality(r.refined, data.truth).to_json()}}},
      {"refine", r.report.to_json()},
      {"selftrain", selftrain_metrics(s)},
      {"final", {{"target_test", final_test.to_json()}, {"target_train_accuracy", final_train.overall}}},
      {"no_adaptation", baseline.to_json()}};
  log("descriptor purity " + fmt(purity) + ", initial pseudo-labels " + fmt(rep.metrics["pseudo_labels"]["initial"]["overall"].get<double>()) +
      ", refined " + fmt(rep.metrics["pseudo_labels"]["refined"]["overall"].get<double>()));
  log("final target accuracy " + fmt(final_test.overall) + " (no adaptation " + fmt(baseline.overall) + ")");
  if (dir) write_json(*dir / "report.json", rep.to_json());
  return rep;
}

// ---------------------------------------------------------------------------
// Artifact stages

void stage_data(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  const DataBundle b = generate_data(cfg, seed);
  geometry::PointSetFile f;
  f.manifest = {{"classes", cfg.classes}, {"seed", seed}, {"config_hash", stage_hash(cfg, Stage::data)},
                {"source_corruption", geometry::to_json(cfg.source_corruption)},
                {"target_corruption", geometry::to_json(cfg.target_corruption)}};
  f.splits.push_back({"source_train", geometry::Domain::source, {}});
  for (size_t i = 0; i < b.source.size(); ++i)
    f.splits.back().samples.push_back({b.source.clouds[i], b.source.labels[i], geometry::Domain::source});
  f.splits.push_back({"target_train", geometry::Domain::target, with_labels(b.target, b.truth.labels())});
  f.splits.push_back({"target_test", geometry::Domain::target, with_labels(b.test, b.test_truth.labels())});
  geometry::write_pcset(dir / "data", f);
}

DataBundle load_data(const ExperimentConfig& cfg, const fs::path& dir) {
  require(dir / "data" / "manifest.json", "gen-data");
  const auto f = geometry::read_pcset(dir / "data");
  check_hash(f.manifest.value("config_hash", ""), cfg, Stage::data, dir / "data");
  auto split = [&](const std::string& name) -> const std::vector<geometry::LabeledSample>& {
    for (const auto& s : f.splits)
      if (s.name == name) return s.samples;
    throw std::runtime_error("dataset in " + (dir / "data").string() + " lacks split '" + name + "': run stage gen-data first");
  };
  DataBundle b;
  b.source = make_source(split("source_train"));
  std::tie(b.target, b.truth) = make_target(split("target_train"));
  std::tie(b.test, b.test_truth) = make_target(split("target_test"));
  return b;
}

void stage_warmup(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir, bool verbose) {
  const DataBundle data = load_data(cfg, dir);
  const auto w = run_warmup(cfg, seed, data, [&](const std::string& stage, const warmup::EpochLog& e) {
    if (verbose) std::cerr << stage << " epoch " << e.epoch << " loss " << e.loss << '\n';
  });
  write_warmup(dir / "warmup", cfg, seed, w);
}

void stage_refine(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  const DataBundle data = load_data(cfg, dir);
  const WarmupOutput w = read_warmup(dir / "warmup", cfg, seed);
  const RefineOutput r = run_refine(cfg, w, data.target);
  fs::create_directories(dir / "refine");
  write_plbl(dir / "refine" / "refined.plbl", r.refined, stage_hash(cfg, Stage::refine));
  write_json(dir / "refine" / "report.json", r.report.to_json());
}

void stage_selftrain(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir, bool verbose) {
  const DataBundle data = load_data(cfg, dir);
  const WarmupOutput w = read_warmup(dir / "warmup", cfg, seed);
  require(dir / "refine" / "refined.plbl", "refine");
  std::string hash;
  const auto refined = read_plbl(dir / "refine" / "refined.plbl", &hash);
  check_hash(hash, cfg, Stage::refine, dir / "refine" / "refined.plbl");
  const int k = static_cast<int>(cfg.classes.size());
  const auto s = run_selftrain(
      cfg, seed, data, w, refined,
      [&](const selftrain::EpochLog& e) {
        if (verbose) std::cerr << "selftrain " << e.to_json().dump() << '\n';
      },
      [&](const selftrain::Heads& m) {
        return accuracy(selftrain::predict(m, data.test.clouds), data.test_truth.labels(), k).overall;
      });
  write_selftrain(dir / "selftrain", cfg, seed, s);
}

Accuracy stage_eval(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir, bool untrained) {
  const DataBundle data = load_data(cfg, dir);
  selftrain::Heads m;
  if (untrained) {
    Rng r = Rng(seed).split(kUntrained);
    const auto mc = cfg.model_config();
    m.encoder = model::EncoderParams::init(mc, r);
    m.source = model::HeadParams::init(mc, r);
    m.target = m.source;
    m.shared = true;
  } else {
    m = read_selftrain(dir / "selftrain", cfg, seed);
  }
  return accuracy(selftrain::predict(m, data.test.clouds), data.test_truth.labels(),
                  static_cast<int>(cfg.classes.size()));
}

const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes = {"offline_refine", "online_refine", "ema", "dual_head",
                                                "transfer", "single_head", "synthetic_to_real"};
  return axes;
}

ExperimentConfig with_axis(const ExperimentConfig& cfg, const std::string& axis, bool enabled) {
  ExperimentConfig c = cfg;
  if (axis == "offline_refine") c.no_offline_refine = !enabled;
  else if (axis == "online_refine") c.no_online_refine = !enabled;
  else if (axis == "ema") c.no_ema = !enabled;
  else if (axis == "dual_head") c.no_dual_head = !enabled;
  else if (axis == "transfer") c.no_transfer = !enabled;
  else if (axis == "single_head") c.single_head = enabled;
  else if (axis == "synthetic_to_real") c.synthetic_to_real = enabled;
  else throw std::invalid_argument("unknown ablation axis '" + axis + "'");
  return c;
}

json ablate(const ExperimentConfig& cfg, const std::string& axis, bool verbose, WarmupCache* cache) {
  WarmupCache local;
  if (!cache) cache = &local;
  const fs::path root = fs::path(cfg.out) / ("ablate_" + axis);
  fs::create_directories(root);
  json rows = json::array();
  double sum_on = 0.0, sum_off = 0.0;
  std::ofstream csv(root / "ablation.csv");
  csv << csv_row({"seed", axis + "_on", axis + "_off"}) << "\r\n";
  for (auto seed : cfg.seeds) {
    double acc[2];
    for (int on = 1; on >= 0; --on) {
      const auto c = with_axis(cfg, axis, on == 1);
      const fs::path d = root / (on ? "on" : "off") / ("seed_" + std::to_string(seed));
      fs::create_directories(d);
      acc[on] = run_pipeline(c, seed, d, verbose, cache).metrics["final"]["target_test"]["overall"].get<double>();
    }
    sum_on += acc[1];
    sum_off += acc[0];
    rows.push_back({{"seed", seed}, {"on", acc[1]}, {"off", acc[0]}});
    csv << csv_row({std::to_string(seed), fmt(acc[1]), fmt(acc[0])}) << "\r\n";
  }
  const auto n = static_cast<double>(cfg.seeds.size());
  json out = {{"axis", axis}, {"seeds", rows}, {"mean_on", sum_on / n}, {"mean_off", sum_off / n}};
  csv << csv_row({"mean", fmt(sum_on / n), fmt(sum_off / n)}) << "\r\n";
  write_json(root / "ablation.json", out);
  return out;
}

// ---------------------------------------------------------------------------
// Reports

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string csv_row(const std::vector<std::string>& fields) {
  std::string out;
  for (size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += csv_escape(fields[i]);
  }
  return out;
}

std::string svg_line_plot(const std::string& title, const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  const double w = 640, h = 400, left = 60, right = 160, top = 40, bottom = 40;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  size_t len = 0;
  for (const auto& [name, ys] : series) {
    len = std::max(len, ys.size());
    for (double y : ys) {
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
  }
  if (!(hi >= lo)) lo = 0.0, hi = 1.0;
  if (hi == lo) hi = lo + 1.0;
  auto esc = [](const std::string& s) {
    std::string o;
    for (char c : s) {
      if (c == '<') o += "&lt;";
      else if (c == '>') o += "&gt;";
      else if (c == '&') o += "&amp;";
      else o += c;
    }
    return o;
  };
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\">" << esc(title) << "</text>\n";
  const double pw = w - left - right, ph = h - top - bottom;
  s << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  s << "<text x=\"" << left - 5 << "\" y=\"" << top + 5 << "\" text-anchor=\"end\" font-size=\"11\">" << fmt(hi) << "</text>\n";
  s << "<text x=\"" << left - 5 << "\" y=\"" << top + ph << "\" text-anchor=\"end\" font-size=\"11\">" << fmt(lo) << "</text>\n";
  for (size_t i = 0; i < series.size(); ++i) {
    const auto& [name, ys] = series[i];
    const char* col = colors[i % 6];
    s << "<polyline fill=\"none\" stroke=\"" << col << "\" points=\"";
    for (size_t j = 0; j < ys.size(); ++j) {
      const double x = left + (len > 1 ? pw * static_cast<double>(j) / static_cast<double>(len - 1) : pw / 2);
      const double y = top + ph * (1.0 - (ys[j] - lo) / (hi - lo));
      s << x << ',' << y << ' ';
    }
    s << "\"/>\n";
    s << "<text x=\"" << w - right + 10 << "\" y=\"" << top + 15 + 18.0 * static_cast<double>(i)
      << "\" font-size=\"12\" fill=\"" << col << "\">" << esc(name) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

json aggregate_reports(const fs::path& out) {
  std::vector<json> reports;
  if (fs::exists(out))
    for (const auto& entry : fs::directory_iterator(out)) {
      const auto name = entry.path().filename().string();
      if (entry.is_directory() && name.rfind("seed_", 0) == 0 && fs::exists(entry.path() / "report.json"))
        reports.push_back(read_json(entry.path() / "report.json"));
    }
  if (reports.empty()) throw std::runtime_error("no seed_*/report.json under " + out.string() + ": run stage pipeline first");
  std::sort(reports.begin(), reports.end(), [](const json& a, const json& b) { return a["seed"] < b["seed"]; });

  const std::vector<std::string> cols = {"seed", "no_adaptation", "warmup", "final", "pl_initial", "pl_easy", "pl_refined"};
  std::ofstream csv(out / "summary.csv");
  csv << csv_row(cols) << "\r\n";
  std::vector<double> mean(cols.size() - 1, 0.0);
  json rows = json::array();
  std::vector<std::pair<std::string, std::vector<double>>> val_series, loss_series;
  for (const auto& r : reports) {
    const auto& m = r["metrics"];
    const auto& pl = m["pseudo_labels"];
    const std::vector<double> v = {m["no_adaptation"]["overall"].get<double>(),
                                   m["warmup"]["target_test_accuracy"].get<double>(),
                                   m["final"]["target_test"]["overall"].get<double>(),
                                   pl["initial"]["overall"].get<double>(),
                                   pl["after_split"].contains("E") ? pl["after_split"]["E"]["accuracy"].get<double>() : 0.0,
                                   pl["refined"]["overall"].get<double>()};
    std::vector<std::string> fields = {std::to_string(r["seed"].get<std::uint64_t>())};
    json row = {{"seed", r["seed"]}};
    for (size_t i = 0; i < v.size(); ++i) {
      fields.push_back(fmt(v[i]));
      row[cols[i + 1]] = v[i];
      mean[i] += v[i] / static_cast<double>(reports.size());
    }
    csv << csv_row(fields) << "\r\n";
    rows.push_back(row);
    std::vector<double> val, loss;
    for (const auto& e : m["selftrain"]["epochs"]) {
      val.push_back(e["val_accuracy"].get<double>());
      loss.push_back(e["loss_source"].get<double>() + e["loss_target"].get<double>());
    }
    const std::string label = "seed " + std::to_string(r["seed"].get<std::uint64_t>());
    val_series.emplace_back(label, val);
    loss_series.emplace_back(label, loss);
  }
  std::vector<std::string> fields = {"mean"};
  json means = json::object();
  for (size_t i = 0; i < mean.size(); ++i) {
    fields.push_back(fmt(mean[i]));
    means[cols[i + 1]] = mean[i];
  }
  csv << csv_row(fields) << "\r\n";
  std::ofstream(out / "selftrain_val_accuracy.svg") << svg_line_plot("self-training source-val accuracy", val_series);
  std::ofstream(out / "selftrain_loss.svg") << svg_line_plot("self-training loss (L_s + L_t)", loss_series);
  json summary = {{"runs", rows}, {"mean", means}};
  write_json(out / "summary.json", summary);
  return summary;
}

}  // namespace refrec::harness
