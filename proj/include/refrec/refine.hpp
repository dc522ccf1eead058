#pragma once

// Offline pseudo-label refinement in the frozen reconstruction-descriptor space.
//
// Three steps, all decided on fixed inputs:
//   1. split_easy_hard: per predicted class, the ceil(g * n_c) most confident
//      samples form the easy split E, the rest the hard split H.
//   2. reciprocal matches: h in H moves to E (with e's label) when h is e's
//      nearest neighbour in H and e is h's nearest neighbour in E. All nearest
//      neighbours are computed on the original E and H (one pass).
//   3. knn vote: every remaining h takes the strict-majority label of its K
//      nearest members of E_refined, or the label of the closest one.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "refrec/metricspace.hpp"
#include "refrec/pseudolabel.hpp"

namespace refrec::refine {

struct SplitSets {
  std::vector<std::int64_t> easy;
  std::vector<std::int64_t> hard;
  std::vector<std::int64_t> easy_refined;
  std::vector<std::int64_t> hard_refined;
};

enum class Metric { euclidean, cosine };

struct RefineOptions {
  double g = 0.10;
  int k = 3;
  Metric metric = Metric::euclidean;
};

struct ReciprocalMatch {
  std::int64_t hard_id;
  std::int64_t easy_id;
};

struct Vote {
  std::int64_t id;
  int label;
  bool consensus;  // strict majority among the K neighbours
};

struct RefineReport {
  int moved_by_reciprocal = 0;
  int voted = 0;
  int vote_consensus = 0;
  int effective_k = 0;
  std::vector<int> easy_per_class, hard_per_class, easy_refined_per_class, hard_refined_per_class;
  std::vector<std::string> warnings;

  double consensus_rate() const { return voted == 0 ? 1.0 : static_cast<double>(vote_consensus) / voted; }
  nlohmann::json to_json() const;
};

/// Marks every entry E or H and returns the two id lists (entry order).
SplitSets split_easy_hard(PseudoLabelState& pls, double g, std::vector<std::string>* warnings = nullptr);

/// Number of easy samples for a class of size n at fraction g: max(1, ceil(g n)).
int easy_count(int n, double g);

/// Mutual nearest-neighbour pairs between E and H under Euclidean distance on
/// `emb` (ties broken by ascending id). Result sorted by hard id.
std::vector<ReciprocalMatch> reciprocal_matches(const std::vector<std::int64_t>& easy,
                                                const std::vector<std::int64_t>& hard,
                                                const metric::EmbeddingTable& emb);

/// Applies reciprocal matches to `pls` (label, split, provenance) and returns
/// (E_refined, H_remaining).
std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> reciprocal_expand(
    PseudoLabelState& pls, const std::vector<std::int64_t>& easy, const std::vector<std::int64_t>& hard,
    const metric::EmbeddingTable& emb, int* moved = nullptr);

/// K-NN vote for every id in `hard` against `easy_refined` (labels from pls).
/// If |easy_refined| < k, k falls back to |easy_refined| and a warning is added.
std::vector<Vote> knn_vote(const std::vector<std::int64_t>& hard, const std::vector<std::int64_t>& easy_refined,
                           const PseudoLabelState& pls, const metric::EmbeddingTable& emb, int k,
                           std::vector<std::string>* warnings = nullptr, int* effective_k = nullptr);

/// Full refinement. `emb` must hold the reconstruction-encoder descriptors of
/// every target sample.
PseudoLabelState refine_pipeline(const PseudoLabelState& initial, const metric::EmbeddingTable& emb,
                                 const RefineOptions& opts, RefineReport* report = nullptr);

/// Split only: E becomes E_refined and H becomes H_refined with the initial
/// labels. Used when offline refinement is switched off.
PseudoLabelState split_only(const PseudoLabelState& initial, double g, RefineReport* report = nullptr);

/// Rows scaled to unit length (zero rows unchanged); cosine ordering then
/// equals Euclidean ordering.
metric::EmbeddingTable unit_rows(const metric::EmbeddingTable& emb);

}  // namespace refrec::refine
