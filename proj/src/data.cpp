#include "refrec/data.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <stdexcept>

namespace refrec {

namespace {
std::atomic<long> g_truth_reads{0};
}

SourceSet SourceSet::subset(std::span<const int> rows) const {
  SourceSet out;
  for (int r : rows) {
    out.clouds.push_back(clouds.at(static_cast<size_t>(r)));
    out.labels.push_back(labels.at(static_cast<size_t>(r)));
  }
  return out;
}

TargetTruth::TargetTruth(std::vector<std::int64_t> ids, std::vector<int> labels)
    : ids_(std::move(ids)), labels_(std::move(labels)) {
  if (ids_.size() != labels_.size()) throw std::invalid_argument("TargetTruth: ids and labels differ in length");
}

std::span<const int> TargetTruth::labels() const {
  ++g_truth_reads;
  return labels_;
}

int TargetTruth::label_of(std::int64_t id) const {
  ++g_truth_reads;
  const auto it = std::find(ids_.begin(), ids_.end(), id);
  if (it == ids_.end()) throw std::out_of_range("TargetTruth: unknown id " + std::to_string(id));
  return labels_[static_cast<size_t>(it - ids_.begin())];
}

long TargetTruth::access_count() { return g_truth_reads.load(); }

SourceSet make_source(std::span<const geometry::LabeledSample> samples) {
  SourceSet s;
  for (const auto& x : samples) {
    s.clouds.push_back(x.cloud);
    s.labels.push_back(x.label);
  }
  return s;
}

std::pair<TargetSet, TargetTruth> make_target(std::span<const geometry::LabeledSample> samples) {
  TargetSet t;
  std::vector<std::int64_t> ids;
  std::vector<int> labels;
  for (size_t i = 0; i < samples.size(); ++i) {
    t.clouds.push_back(samples[i].cloud);
    t.ids.push_back(static_cast<std::int64_t>(i));
    ids.push_back(static_cast<std::int64_t>(i));
    labels.push_back(samples[i].label);
  }
  return {std::move(t), TargetTruth(std::move(ids), std::move(labels))};
}

HoldOut stratified_holdout(std::span<const int> labels, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("holdout fraction must lie in (0, 1)");
  std::map<int, std::vector<int>> by_class;
  for (size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(static_cast<int>(i));
  HoldOut h;
  const Rng root(seed);
  for (auto& [cls, rows] : by_class) {
    Rng rng = root.split(static_cast<std::uint64_t>(cls));
    rng.shuffle(std::span<int>(rows));
    auto n_val = static_cast<size_t>(std::lround(fraction * static_cast<double>(rows.size())));
    if (n_val == 0 && rows.size() >= 2) n_val = 1;
    h.val.insert(h.val.end(), rows.begin(), rows.begin() + static_cast<long>(n_val));
    h.train.insert(h.train.end(), rows.begin() + static_cast<long>(n_val), rows.end());
  }
  std::sort(h.train.begin(), h.train.end());
  std::sort(h.val.begin(), h.val.end());
  return h;
}

}  // namespace refrec
