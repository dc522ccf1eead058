#include "refrec/refine.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <unordered_map>

namespace refrec::refine {

using json = nlohmann::json;

namespace {

std::vector<int> count_per_class(const PseudoLabelState& pls, const std::vector<std::int64_t>& ids) {
  std::vector<int> out(static_cast<size_t>(pls.classes), 0);
  for (auto id : ids) ++out[static_cast<size_t>(pls.at(id).label)];
  return out;
}

std::unordered_map<std::int64_t, size_t> index_entries(const PseudoLabelState& pls) {
  std::unordered_map<std::int64_t, size_t> idx;
  for (size_t i = 0; i < pls.entries.size(); ++i) idx.emplace(pls.entries[i].id, i);
  return idx;
}

}  // namespace

json RefineReport::to_json() const {
  return {{"moved_by_reciprocal", moved_by_reciprocal},
          {"voted", voted},
          {"vote_consensus", vote_consensus},
          {"vote_consensus_rate", consensus_rate()},
          {"effective_k", effective_k},
          {"easy_per_class", easy_per_class},
          {"hard_per_class", hard_per_class},
          {"easy_refined_per_class", easy_refined_per_class},
          {"hard_refined_per_class", hard_refined_per_class},
          {"warnings", warnings}};
}

int easy_count(int n, double g) {
  if (n <= 0) return 0;
  // The epsilon keeps exact products such as 0.1 * 30 from rounding up.
  const int c = static_cast<int>(std::ceil(g * static_cast<double>(n) - 1e-9));
  return std::clamp(c, 1, n);
}

SplitSets split_easy_hard(PseudoLabelState& pls, double g, std::vector<std::string>* warnings) {
  if (!(g > 0.0 && g < 1.0)) throw std::invalid_argument("split_easy_hard: g must lie in (0, 1)");
  std::map<int, std::vector<size_t>> by_class;
  for (size_t i = 0; i < pls.entries.size(); ++i) by_class[pls.entries[i].label].push_back(i);
  for (int c = 0; c < pls.classes; ++c) {
    if (by_class.find(c) == by_class.end() && warnings)
      warnings->push_back("class " + std::to_string(c) + " has no pseudo-labelled samples; it gets no easy members");
  }
  for (auto& e : pls.entries) e.split = SplitTag::hard;
  for (auto& [cls, rows] : by_class) {
    std::sort(rows.begin(), rows.end(), [&](size_t a, size_t b) {
      const auto& ea = pls.entries[a];
      const auto& eb = pls.entries[b];
      return ea.confidence > eb.confidence || (ea.confidence == eb.confidence && ea.id < eb.id);
    });
    const int take = easy_count(static_cast<int>(rows.size()), g);
    for (int i = 0; i < take; ++i) pls.entries[rows[static_cast<size_t>(i)]].split = SplitTag::easy;
  }
  SplitSets s;
  s.easy = pls.ids_with(SplitTag::easy);
  s.hard = pls.ids_with(SplitTag::hard);
  return s;
}

std::vector<ReciprocalMatch> reciprocal_matches(const std::vector<std::int64_t>& easy,
                                                const std::vector<std::int64_t>& hard,
                                                const metric::EmbeddingTable& emb) {
  if (easy.empty() || hard.empty()) return {};
  const auto e_tab = emb.subset(easy);
  const auto h_tab = emb.subset(hard);
  const Matrix d = metric::pairwise_l2(e_tab, h_tab);
  const auto ne = static_cast<Eigen::Index>(easy.size());
  const auto nh = static_cast<Eigen::Index>(hard.size());

  std::vector<Eigen::Index> nn_of_easy(easy.size()), nn_of_hard(hard.size());
  for (Eigen::Index i = 0; i < ne; ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < nh; ++j)
      if (d(i, j) < d(i, best) || (d(i, j) == d(i, best) && hard[j] < hard[best])) best = j;
    nn_of_easy[static_cast<size_t>(i)] = best;
  }
  for (Eigen::Index j = 0; j < nh; ++j) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < ne; ++i)
      if (d(i, j) < d(best, j) || (d(i, j) == d(best, j) && easy[i] < easy[best])) best = i;
    nn_of_hard[static_cast<size_t>(j)] = best;
  }
  std::vector<ReciprocalMatch> out;
  for (Eigen::Index i = 0; i < ne; ++i) {
    const Eigen::Index j = nn_of_easy[static_cast<size_t>(i)];
    if (nn_of_hard[static_cast<size_t>(j)] == i) out.push_back({hard[static_cast<size_t>(j)], easy[static_cast<size_t>(i)]});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.hard_id < b.hard_id; });
  return out;
}

std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> reciprocal_expand(
    PseudoLabelState& pls, const std::vector<std::int64_t>& easy, const std::vector<std::int64_t>& hard,
    const metric::EmbeddingTable& emb, int* moved) {
  const auto matches = reciprocal_matches(easy, hard, emb);
  const auto idx = index_entries(pls);
  // Labels are read before any write so the pass does not cascade.
  std::vector<std::pair<size_t, int>> updates;
  for (const auto& m : matches) updates.emplace_back(idx.at(m.hard_id), pls.entries[idx.at(m.easy_id)].label);
  for (auto id : easy) pls.entries[idx.at(id)].split = SplitTag::easy_refined;
  for (const auto& [row, label] : updates) {
    auto& e = pls.entries[row];
    e.label = label;
    e.split = SplitTag::easy_refined;
    e.provenance = Provenance::reciprocal;
  }
  if (moved) *moved = static_cast<int>(matches.size());

  std::vector<std::int64_t> easy_refined, remaining;
  for (const auto& e : pls.entries) {
    if (e.split == SplitTag::easy_refined) easy_refined.push_back(e.id);
  }
  for (auto id : hard)
    if (pls.entries[idx.at(id)].split != SplitTag::easy_refined) remaining.push_back(id);
  return {easy_refined, remaining};
}

std::vector<Vote> knn_vote(const std::vector<std::int64_t>& hard, const std::vector<std::int64_t>& easy_refined,
                           const PseudoLabelState& pls, const metric::EmbeddingTable& emb, int k,
                           std::vector<std::string>* warnings, int* effective_k) {
  if (k <= 0) throw std::invalid_argument("knn_vote: K must be positive");
  if (easy_refined.empty()) {
    if (hard.empty()) return {};
    throw std::invalid_argument("knn_vote: refined easy split is empty");
  }
  if (static_cast<size_t>(k) > easy_refined.size()) {
    if (warnings)
      warnings->push_back("knn_vote: only " + std::to_string(easy_refined.size()) + " refined easy samples, K reduced from " +
                          std::to_string(k));
    k = static_cast<int>(easy_refined.size());
  }
  if (effective_k) *effective_k = k;
  const auto table = emb.subset(easy_refined);
  std::unordered_map<std::int64_t, int> label_of;
  for (auto id : easy_refined) label_of.emplace(id, pls.at(id).label);

  std::vector<Vote> votes;
  votes.reserve(hard.size());
  std::vector<int> counts(static_cast<size_t>(std::max(pls.classes, 1)), 0);
  for (auto id : hard) {
    const auto nbrs = metric::nearest(emb.vectors.row(emb.row_of(id)), table, k);
    std::fill(counts.begin(), counts.end(), 0);
    for (const auto& n : nbrs) ++counts[static_cast<size_t>(label_of.at(n.id))];
    const auto top = std::max_element(counts.begin(), counts.end());
    if (2 * *top > k) votes.push_back({id, static_cast<int>(top - counts.begin()), true});
    else votes.push_back({id, label_of.at(nbrs.front().id), false});
  }
  return votes;
}

metric::EmbeddingTable unit_rows(const metric::EmbeddingTable& emb) {
  Matrix v = emb.vectors;
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const double n = v.row(i).norm();
    if (n > 0.0) v.row(i) /= n;
  }
  return metric::EmbeddingTable(std::move(v), emb.ids);
}

PseudoLabelState refine_pipeline(const PseudoLabelState& initial, const metric::EmbeddingTable& emb,
                                 const RefineOptions& opts, RefineReport* report) {
  RefineReport local;
  RefineReport& rep = report ? *report : local;
  const metric::EmbeddingTable space = opts.metric == Metric::cosine ? unit_rows(emb) : emb;

  PseudoLabelState pls = initial;
  for (auto& e : pls.entries) e.provenance = Provenance::classifier;
  const SplitSets split = split_easy_hard(pls, opts.g, &rep.warnings);
  rep.easy_per_class = count_per_class(pls, split.easy);
  rep.hard_per_class = count_per_class(pls, split.hard);

  auto [easy_refined, remaining] = reciprocal_expand(pls, split.easy, split.hard, space, &rep.moved_by_reciprocal);
  const auto votes = knn_vote(remaining, easy_refined, pls, space, opts.k, &rep.warnings, &rep.effective_k);
  const auto idx = index_entries(pls);
  for (const auto& v : votes) {
    auto& e = pls.entries[idx.at(v.id)];
    e.label = v.label;
    e.split = SplitTag::hard_refined;
    e.provenance = Provenance::knn_vote;
    ++rep.voted;
    rep.vote_consensus += v.consensus;
  }
  rep.easy_refined_per_class = count_per_class(pls, pls.ids_with(SplitTag::easy_refined));
  rep.hard_refined_per_class = count_per_class(pls, pls.ids_with(SplitTag::hard_refined));
  return pls;
}

PseudoLabelState split_only(const PseudoLabelState& initial, double g, RefineReport* report) {
  RefineReport local;
  RefineReport& rep = report ? *report : local;
  PseudoLabelState pls = initial;
  for (auto& e : pls.entries) e.provenance = Provenance::classifier;
  const SplitSets split = split_easy_hard(pls, g, &rep.warnings);
  rep.easy_per_class = count_per_class(pls, split.easy);
  rep.hard_per_class = count_per_class(pls, split.hard);
  for (auto& e : pls.entries) e.split = e.split == SplitTag::easy ? SplitTag::easy_refined : SplitTag::hard_refined;
  rep.easy_refined_per_class = rep.easy_per_class;
  rep.hard_refined_per_class = rep.hard_per_class;
  return pls;
}

}  // namespace refrec::refine
