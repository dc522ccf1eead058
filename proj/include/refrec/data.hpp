#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "refrec/geometry.hpp"

namespace refrec {

struct SourceSet {
  std::vector<geometry::PointCloud> clouds;
  std::vector<int> labels;

  size_t size() const { return clouds.size(); }
  SourceSet subset(std::span<const int> rows) const;
};

/// Unlabelled target samples. Training code only ever sees this type.
struct TargetSet {
  std::vector<geometry::PointCloud> clouds;
  std::vector<std::int64_t> ids;

  size_t size() const { return clouds.size(); }
};

/// Target ground truth, held apart from TargetSet so that it can only reach
/// evaluation code. Every read is counted; tests use the counter to check that
/// training stages never look at it.
class TargetTruth {
 public:
  TargetTruth() = default;
  TargetTruth(std::vector<std::int64_t> ids, std::vector<int> labels);

  std::span<const int> labels() const;
  int label_of(std::int64_t id) const;
  std::span<const std::int64_t> ids() const { return ids_; }

  static long access_count();

 private:
  std::vector<std::int64_t> ids_;
  std::vector<int> labels_;
};

/// Splits labelled samples into source / (target, truth) views. Target ids are
/// the positions in `samples`.
SourceSet make_source(std::span<const geometry::LabeledSample> samples);
std::pair<TargetSet, TargetTruth> make_target(std::span<const geometry::LabeledSample> samples);

/// Stratified, seeded hold-out: per class, round(fraction * n_c) samples
/// (at least one when n_c >= 2) go to validation.
struct HoldOut {
  std::vector<int> train;
  std::vector<int> val;
};
HoldOut stratified_holdout(std::span<const int> labels, double fraction, std::uint64_t seed);

}  // namespace refrec
